"""Process-set trees, step-level rewards, and objective cross-checks for
group-relative policy optimization."""

from .core import (
    DEFAULT_EPSILON,
    Group,
    POPULATION,
    RewardStats,
    SAMPLE,
    Trajectory,
    group_from_sequences,
    outcome_advantages,
    reward_stats,
)
from .metrics import GroupMetrics, MetricsSummary, aggregate_metrics, group_metrics
from .objectives import (
    DEFAULT_BETA,
    ConfigurationError,
    GRPO,
    LAMBDA,
    ObjectiveConfig,
    ObjectiveReport,
    PRM,
    kl_terms,
    lambda_weights,
    objective_grpo,
    objective_lambda,
    objective_prm,
    ratio_terms,
)
from .rewards import StepAdvantages, cache_step_rewards, step_advantages, step_reward
from .sim import (
    SimConfig,
    ToyEnv,
    ToyPolicy,
    analytic_gradient,
    exploitation_scenario,
    finite_diff_check,
    node_gradient,
    one_step_comparison,
    rollout_group,
    run_experiment,
)
from .tree import (
    ProcessNode,
    ProcessTree,
    TokenAssignment,
    assign_tokens,
    build_process_tree,
    export_tree,
    is_trivial,
    partition_at,
)
from .verify import (
    DEFAULT_TOL,
    GenParams,
    IDENTITY_TOL,
    VerificationReport,
    generate_random_group,
    run_verification,
    verify_proof_identities,
    verify_equivalence,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError",
    "DEFAULT_BETA",
    "DEFAULT_EPSILON",
    "DEFAULT_TOL",
    "GenParams",
    "Group",
    "GroupMetrics",
    "GRPO",
    "IDENTITY_TOL",
    "LAMBDA",
    "MetricsSummary",
    "ObjectiveConfig",
    "ObjectiveReport",
    "POPULATION",
    "PRM",
    "ProcessNode",
    "ProcessTree",
    "RewardStats",
    "SAMPLE",
    "SimConfig",
    "StepAdvantages",
    "TokenAssignment",
    "ToyEnv",
    "ToyPolicy",
    "Trajectory",
    "VerificationReport",
    "aggregate_metrics",
    "analytic_gradient",
    "assign_tokens",
    "build_process_tree",
    "cache_step_rewards",
    "exploitation_scenario",
    "export_tree",
    "finite_diff_check",
    "generate_random_group",
    "group_from_sequences",
    "group_metrics",
    "is_trivial",
    "kl_terms",
    "lambda_weights",
    "node_gradient",
    "objective_grpo",
    "objective_lambda",
    "objective_prm",
    "one_step_comparison",
    "outcome_advantages",
    "partition_at",
    "ratio_terms",
    "reward_stats",
    "rollout_group",
    "run_experiment",
    "run_verification",
    "step_advantages",
    "step_reward",
    "verify_proof_identities",
    "verify_equivalence",
]
