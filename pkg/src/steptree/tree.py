"""Prefix-sharing process trees over trajectory groups.

Every subset of a group whose members start with the same tokens defines a
process set; the maximal such sets form a tree under set inclusion. Each
node owns the token span [span_start, span_end) that its members share
beyond the parent's span, so the spans along any root-to-leaf path tile the
trajectory exactly. Duplicate trajectories and exact prefixes of longer
trajectories produce leaves with empty spans.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterator, Optional

from .core import Group

DOT = "dot"
JSON = "json"
EXPORT_FORMATS = (DOT, JSON)

_LABEL_TOKEN_LIMIT = 8


@dataclass(eq=False)
class ProcessNode:
    """A process set and the token span its members share."""

    node_id: int
    members: frozenset[int]
    span_start: int
    span_end: int
    children: tuple["ProcessNode", ...] = ()
    step_reward_cache: Optional[float] = None

    @property
    def size(self) -> int:
        return len(self.members)

    @property
    def span_len(self) -> int:
        return self.span_end - self.span_start

    @property
    def is_leaf(self) -> bool:
        return not self.children

    def sorted_members(self) -> list[int]:
        return sorted(self.members)


@dataclass(eq=False)
class ProcessTree:
    """Tree of all maximal process sets of one group.

    ``nodes`` lists every node in construction order (depth-first), so
    ``nodes[i].node_id == i`` and exports are deterministic. ``leaves`` maps
    each trajectory index to its terminal singleton node.
    """

    root: ProcessNode
    nodes: tuple[ProcessNode, ...]
    leaves: dict[int, ProcessNode]
    max_len: int

    @property
    def k(self) -> int:
        return self.root.size


@dataclass(eq=False)
class TokenAssignment:
    """Unique owning node for every token of every trajectory."""

    owners: tuple[tuple[ProcessNode, ...], ...]

    def owner(self, i: int, t: int) -> ProcessNode:
        return self.owners[i][t]

    def items(self) -> Iterator[tuple[int, int, ProcessNode]]:
        for i, row in enumerate(self.owners):
            for t, node in enumerate(row):
                yield i, t, node


def build_process_tree(group: Group) -> ProcessTree:
    """Build the process tree by recursive radix grouping.

    Runs in time linear in the total token count: each recursion level
    extends the shared span as far as all members agree, then splits the
    members by the first disagreeing token. Members whose sequence ends at
    the split position are grouped separately; when every member ends there
    (all duplicates of one sequence), they split directly into terminal
    singletons.
    """
    seqs = [t.tokens for t in group.trajectories]
    nodes: list[ProcessNode] = []
    leaves: dict[int, ProcessNode] = {}

    def extend(members: list[int], start: int) -> int:
        stop = min(len(seqs[i]) for i in members)
        lead = seqs[members[0]]
        rest = members[1:]
        t = start
        while t < stop:
            v = lead[t]
            if any(seqs[i][t] != v for i in rest):
                break
            t += 1
        return t

    def build(members: list[int], start: int) -> ProcessNode:
        node = ProcessNode(
            node_id=len(nodes),
            members=frozenset(members),
            span_start=start,
            span_end=start,
        )
        nodes.append(node)
        end = extend(members, start)
        node.span_end = end
        if len(members) == 1:
            leaves[members[0]] = node
            return node
        ended = [i for i in members if len(seqs[i]) == end]
        if len(ended) == len(members):
            node.children = tuple(build([i], end) for i in members)
            return node
        branches: dict[int, list[int]] = {}
        for i in members:
            if len(seqs[i]) > end:
                branches.setdefault(seqs[i][end], []).append(i)
        children = []
        if ended:
            children.append(build(ended, end))
        for token in sorted(branches):
            children.append(build(branches[token], end))
        node.children = tuple(children)
        return node

    root = build(sorted(range(group.k)), 0)
    return ProcessTree(
        root=root,
        nodes=tuple(nodes),
        leaves=leaves,
        max_len=group.max_len,
    )


def assign_tokens(tree: ProcessTree) -> TokenAssignment:
    """Map every (trajectory, position) to its unique owning node.

    The spans along each root-to-leaf path are contiguous and disjoint, so
    filling positions node by node yields a total assignment.
    """
    # leaf.span_end equals the trajectory length, so each row is sized to
    # its trajectory
    rows = {i: [None] * leaf.span_end for i, leaf in tree.leaves.items()}
    for node in tree.nodes:
        if node.span_len == 0:
            continue
        span = range(node.span_start, node.span_end)
        for i in node.members:
            row = rows[i]
            for t in span:
                row[t] = node
    for i, row in rows.items():
        if None in row:
            raise RuntimeError(f"trajectory {i} has tokens outside every span")
    return TokenAssignment(
        owners=tuple(tuple(rows[i]) for i in sorted(rows))
    )


def partition_at(tree: ProcessTree, t: int) -> list[ProcessNode]:
    """All nodes whose span contains position t, in node-id order.

    Their member sets are pairwise disjoint and cover exactly the
    trajectories longer than t.
    """
    if not 0 <= t < tree.max_len:
        raise IndexError(f"position {t} outside [0, {tree.max_len})")
    return [n for n in tree.nodes if n.span_start <= t < n.span_end]


def is_trivial(tree: ProcessTree) -> bool:
    """True when the node set is just the root plus singletons."""
    return all(n.size == 1 for n in tree.nodes if n is not tree.root)


def export_tree(tree: ProcessTree, group: Group, format: str = DOT) -> str:
    """Render the tree as a Graphviz DOT document or nested JSON."""
    if format == DOT:
        return _export_dot(tree, group)
    if format == JSON:
        return _export_json(tree, group)
    raise ValueError(f"format must be one of {EXPORT_FORMATS}, got {format!r}")


def _span_tokens(node: ProcessNode, group: Group) -> list[int]:
    lead = min(node.members)
    return list(group.trajectories[lead].tokens[node.span_start : node.span_end])


def _token_label(tokens: list[int]) -> str:
    if len(tokens) > _LABEL_TOKEN_LIMIT:
        shown = " ".join(str(t) for t in tokens[:_LABEL_TOKEN_LIMIT])
        return shown + " ..."
    return " ".join(str(t) for t in tokens)


def _export_dot(tree: ProcessTree, group: Group) -> str:
    lines = [
        "digraph process_tree {",
        '  node [shape=box, style=filled, fillcolor="#ffffff"];',
    ]
    for node in tree.nodes:
        members = ",".join(f"g{i}" for i in node.sorted_members())
        label = f"{{{members}}}\\n[{node.span_start},{node.span_end})"
        token_text = _token_label(_span_tokens(node, group))
        if token_text:
            label += f"\\n{token_text}"
        if node.step_reward_cache is not None:
            label += f"\\nR={node.step_reward_cache:.4f}"
        attrs = [f'label="{label}"']
        if node is tree.root:
            attrs.append('fillcolor="#f8cecc"')
        elif node.is_leaf:
            attrs.append('fillcolor="#fff2cc"')
        lines.append(f"  n{node.node_id} [{', '.join(attrs)}];")
    for node in tree.nodes:
        for child in node.children:
            lines.append(f"  n{node.node_id} -> n{child.node_id};")
    lines.append("}")
    return "\n".join(lines) + "\n"


def _node_dict(node: ProcessNode, group: Group) -> dict:
    return {
        "id": node.node_id,
        "members": node.sorted_members(),
        "span_start": node.span_start,
        "span_end": node.span_end,
        "tokens": _span_tokens(node, group),
        "step_reward": node.step_reward_cache,
        "children": [_node_dict(c, group) for c in node.children],
    }


def _export_json(tree: ProcessTree, group: Group) -> str:
    doc = {
        "query_id": group.query_id,
        "k": group.k,
        "node_count": len(tree.nodes),
        "root": _node_dict(tree.root, group),
    }
    return json.dumps(doc, indent=2, sort_keys=False) + "\n"
