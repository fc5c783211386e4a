"""Token-level objective evaluation: ratio terms, KL terms, and the three
surrogate objectives.

The per-token term is ``P[i][t] * adv - beta * D[i][t]`` where ``adv`` is
the outcome advantage (GRPO), the step advantage (PRM form), or the outcome
advantage with the whole term scaled by 1/|owning set| (the set-size
corrected form). Reported values are token means of these terms and are
objectives to *maximize*; ``ObjectiveReport.loss`` is the negation for
trainers that minimize.

All accumulation uses ``math.fsum`` (exact compensated summation), which
keeps the cross-check identities tight at 1e-12 even for large groups.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

from .core import Group
from .rewards import StepAdvantages
from .tree import ProcessTree, TokenAssignment

GRPO = "grpo"
PRM = "prm"
LAMBDA = "lambda"

DEFAULT_BETA = 0.04


class ConfigurationError(ValueError):
    """An objective was evaluated without the log-probabilities it needs."""


@dataclass(frozen=True)
class ObjectiveConfig:
    """Evaluation knobs shared by all objectives.

    ``assume_unit_ratio`` fixes every ratio term to 1.0, matching the
    single-update-per-batch regime where the rollout policy equals the
    current one; with it off, ``logp_new`` and ``logp_old`` must be present
    on every trajectory. ``beta`` scales the KL term; ``beta=0`` disables it
    and drops the ``logp_ref`` requirement.
    """

    beta: float = DEFAULT_BETA
    assume_unit_ratio: bool = True

    def __post_init__(self) -> None:
        if not math.isfinite(self.beta) or self.beta < 0.0:
            raise ValueError("beta must be finite and >= 0")


@dataclass(frozen=True)
class ObjectiveReport:
    """Scalar objective value plus its per-token term breakdown.

    ``advantage_total`` and ``kl_total`` are the summed contributions of
    the ratio-times-advantage part and the subtracted KL part (weighted the
    same way as the terms themselves).
    """

    objective: str
    value: float
    per_token_terms: tuple[tuple[float, ...], ...]
    advantage_total: float
    kl_total: float
    total_tokens: int

    @property
    def loss(self) -> float:
        """Negated value, for minimizing trainers."""
        return -self.value


def ratio_terms(group: Group, config: ObjectiveConfig) -> list[list[float]]:
    """Importance ratios P[i][t], or all ones under assume_unit_ratio."""
    if config.assume_unit_ratio:
        return [[1.0] * len(t) for t in group.trajectories]
    rows = []
    for i, traj in enumerate(group.trajectories):
        if traj.logp_new is None or traj.logp_old is None:
            raise ConfigurationError(
                f"trajectory {i}: ratio terms need logp_new and logp_old "
                "(or assume_unit_ratio=True)"
            )
        rows.append(
            [math.exp(n - o) for n, o in zip(traj.logp_new, traj.logp_old)]
        )
    return rows


def kl_terms(group: Group, config: ObjectiveConfig) -> list[list[float]]:
    """KL estimator D[i][t] = x - ln x - 1 with x the ref/current ratio.

    Always >= 0, and exactly 0 where the policies agree. Returns zeros when
    beta is 0 so reference log-probabilities are only required when the KL
    term actually contributes.
    """
    if config.beta == 0.0:
        return [[0.0] * len(t) for t in group.trajectories]
    rows = []
    for i, traj in enumerate(group.trajectories):
        if traj.logp_new is None or traj.logp_ref is None:
            raise ConfigurationError(
                f"trajectory {i}: KL terms with beta > 0 need logp_new and logp_ref"
            )
        row = []
        for new, ref in zip(traj.logp_new, traj.logp_ref):
            delta = ref - new
            row.append(math.exp(delta) - delta - 1.0)
        rows.append(row)
    return rows


def lambda_weights(
    tree: ProcessTree, assignment: TokenAssignment
) -> list[list[float]]:
    """Per-token weights 1/|owning process set|, each in (0, 1]."""
    return [[1.0 / node.size for node in row] for row in assignment.owners]


def _report(
    objective: str,
    group: Group,
    term_rows: Sequence[Sequence[float]],
    pa_rows: Sequence[Sequence[float]],
    kl_rows: Sequence[Sequence[float]],
) -> ObjectiveReport:
    total_tokens = group.total_tokens
    flat = [term for row in term_rows for term in row]
    value = math.fsum(flat) / total_tokens if total_tokens else 0.0
    return ObjectiveReport(
        objective=objective,
        value=value,
        per_token_terms=tuple(tuple(row) for row in term_rows),
        advantage_total=math.fsum(x for row in pa_rows for x in row),
        kl_total=math.fsum(x for row in kl_rows for x in row),
        total_tokens=total_tokens,
    )


def objective_grpo(
    group: Group,
    advantages: Sequence[float],
    config: ObjectiveConfig,
) -> ObjectiveReport:
    """Token-mean of P * a_i - beta * D with outcome advantages a_i."""
    p = ratio_terms(group, config)
    d = kl_terms(group, config)
    beta = config.beta
    pa_rows = []
    kl_rows = []
    term_rows = []
    for i, traj in enumerate(group.trajectories):
        a = advantages[i]
        pa = [p[i][t] * a for t in range(len(traj))]
        kl = [beta * d[i][t] for t in range(len(traj))]
        pa_rows.append(pa)
        kl_rows.append(kl)
        term_rows.append([pa[t] - beta * d[i][t] for t in range(len(traj))])
    return _report(GRPO, group, term_rows, pa_rows, kl_rows)


def objective_prm(
    group: Group,
    advantages: StepAdvantages,
    config: ObjectiveConfig,
) -> ObjectiveReport:
    """Token-mean of P * A[i][t] - beta * D with step advantages A[i][t].

    Equals ``objective_grpo`` on the same group: replacing each outcome
    advantage by the owning set's mean advantage redistributes the same
    total within every shared span.
    """
    p = ratio_terms(group, config)
    d = kl_terms(group, config)
    beta = config.beta
    pa_rows = []
    kl_rows = []
    term_rows = []
    for i, traj in enumerate(group.trajectories):
        row_a = advantages.token_advantage[i]
        pa = [p[i][t] * row_a[t] for t in range(len(traj))]
        kl = [beta * d[i][t] for t in range(len(traj))]
        pa_rows.append(pa)
        kl_rows.append(kl)
        term_rows.append([pa[t] - beta * d[i][t] for t in range(len(traj))])
    return _report(PRM, group, term_rows, pa_rows, kl_rows)


def objective_lambda(
    group: Group,
    tree: ProcessTree,
    assignment: TokenAssignment,
    advantages: Sequence[float],
    config: ObjectiveConfig,
) -> ObjectiveReport:
    """GRPO with every token's term divided by its owning set size.

    The division applies to the whole per-token term, so each per-token
    value here is exactly the corresponding GRPO term divided by
    |owning set|: process sets contribute equally at every position instead
    of in proportion to their size.
    """
    p = ratio_terms(group, config)
    d = kl_terms(group, config)
    beta = config.beta
    pa_rows = []
    kl_rows = []
    term_rows = []
    for i, traj in enumerate(group.trajectories):
        a = advantages[i]
        owners = assignment.owners[i]
        pa = []
        kl = []
        terms = []
        for t in range(len(traj)):
            size = owners[t].size
            base = p[i][t] * a
            penalty = beta * d[i][t]
            pa.append(base / size)
            kl.append(penalty / size)
            terms.append((base - penalty) / size)
        pa_rows.append(pa)
        kl_rows.append(kl)
        term_rows.append(terms)
    return _report(LAMBDA, group, term_rows, pa_rows, kl_rows)
