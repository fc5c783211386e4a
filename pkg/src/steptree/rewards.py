"""Monte-Carlo step rewards and step-level advantages.

The step reward of a process set is the mean outcome reward of its members,
i.e. the Monte-Carlo estimate from the sampled completions of that step.
Each token inherits the step reward of its owning node, and the step
advantage normalizes it with the whole-group mean/std (not per-sibling
statistics).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .core import Group, RewardStats, normalized_advantage
from .tree import ProcessNode, ProcessTree, TokenAssignment


def step_reward(node: ProcessNode, group: Group) -> float:
    """Mean outcome reward of the node's members, cached on the node."""
    if node.step_reward_cache is None:
        total = math.fsum(group.trajectories[i].reward for i in node.sorted_members())
        node.step_reward_cache = total / node.size
    return node.step_reward_cache


def cache_step_rewards(tree: ProcessTree, group: Group) -> None:
    """Fill the step-reward cache of every node in one pass."""
    for node in tree.nodes:
        step_reward(node, group)


@dataclass(eq=False)
class StepAdvantages:
    """Per-token step rewards R[i][t] and step advantages A[i][t]."""

    token_reward: tuple[tuple[float, ...], ...]
    token_advantage: tuple[tuple[float, ...], ...]

    def reward(self, i: int, t: int) -> float:
        return self.token_reward[i][t]

    def advantage(self, i: int, t: int) -> float:
        return self.token_advantage[i][t]


def step_advantages(
    tree: ProcessTree,
    assignment: TokenAssignment,
    group: Group,
    stats: RewardStats,
) -> StepAdvantages:
    """Token-level reward/advantage maps covering the whole group.

    Tokens owned by singleton nodes recover the outcome reward and the
    outcome advantage exactly; shared spans receive the owning set's
    Monte-Carlo mean instead.
    """
    reward_rows = []
    advantage_rows = []
    node_adv: dict[int, float] = {}
    for i, row in enumerate(assignment.owners):
        rewards = []
        advantages = []
        for node in row:
            r = step_reward(node, group)
            a = node_adv.get(node.node_id)
            if a is None:
                a = normalized_advantage(r, stats)
                node_adv[node.node_id] = a
            rewards.append(r)
            advantages.append(a)
        reward_rows.append(tuple(rewards))
        advantage_rows.append(tuple(advantages))
    return StepAdvantages(
        token_reward=tuple(reward_rows),
        token_advantage=tuple(advantage_rows),
    )
