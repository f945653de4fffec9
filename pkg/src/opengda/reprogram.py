"""Target-graph edits: additive feature delta and budgeted XOR edge flips."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .graph import CsrAdjacency
from .tensor import ShapeError, Tape, ValueNode


_DENSE_LIMIT = 3000


class BudgetError(ValueError):
    """More flips requested than the budget allows."""


@dataclass
class CandidatePool:
    """Deletion candidates (current edges) and addition candidates (sampled non-edges).

    Both arrays hold canonical ``u < v`` rows.
    """

    existing: np.ndarray
    sampled_nonedges: np.ndarray

    @property
    def m(self) -> int:
        return len(self.sampled_nonedges)

    def pairs(self) -> tuple[np.ndarray, np.ndarray]:
        """All candidate pairs and their sign (+1 add, -1 delete)."""
        pairs = np.concatenate([self.existing, self.sampled_nonedges]).reshape(-1, 2)
        sign = np.concatenate([-np.ones(len(self.existing)), np.ones(len(self.sampled_nonedges))])
        return pairs.astype(np.int64), sign

    def without(self, used: set) -> "CandidatePool":
        """Pool minus the given ``(u, v)`` pairs (``u < v``)."""
        if not used:
            return self
        used_arr = np.array(sorted(used), dtype=np.int64).reshape(-1, 2)

        def keep(arr):
            if len(arr) == 0:
                return arr
            hit = (arr[:, None, 0] == used_arr[None, :, 0]) & (arr[:, None, 1] == used_arr[None, :, 1])
            return arr[~hit.any(axis=1)]

        return CandidatePool(keep(self.existing), keep(self.sampled_nonedges))


@dataclass
class EdgeEditSet:
    budget: int
    flips: list[tuple[int, int]] = field(default_factory=list)
    scores: dict[tuple[int, int], float] = field(default_factory=dict)

    @property
    def remaining(self) -> int:
        return self.budget - len(self.flips)

    def used(self) -> set:
        return set(self.flips)


def apply_feature_delta(tape: Tape, features: ValueNode, delta: ValueNode) -> ValueNode:
    if features.shape != delta.shape:
        raise ShapeError(f"feature delta {delta.shape} does not match features {features.shape}")
    return tape.add(features, delta)


def build_candidate_pool(adj: CsrAdjacency, m: int, rng) -> CandidatePool:
    """Current edges plus ``m`` distinct non-edges drawn uniformly (fewer if the graph is dense)."""
    existing = adj.edges()
    n = adj.n
    taken = set((existing[:, 0] * n + existing[:, 1]).tolist())
    available = n * (n - 1) // 2 - len(taken)
    m = min(m, available)
    chosen: list[int] = []
    seen: set[int] = set()
    while len(chosen) < m:
        u = rng.integers(0, n, size=2 * (m - len(chosen)) + 8)
        v = rng.integers(0, n, size=len(u))
        for a, b in zip(u, v):
            if a == b:
                continue
            a, b = (a, b) if a < b else (b, a)
            key = int(a) * n + int(b)
            if key in taken or key in seen:
                continue
            seen.add(key)
            chosen.append(key)
            if len(chosen) == m:
                break
    keys = np.array(chosen, dtype=np.int64)
    return CandidatePool(existing, np.stack([keys // n, keys % n], axis=1) if m else np.zeros((0, 2), np.int64))


def adjacency_gradient(tape: Tape, adj: CsrAdjacency, pairs: np.ndarray) -> np.ndarray:
    """``dL/da_uv`` for symmetric 0/1 entries relaxed to reals, one value per pair.

    The normalized operator depends on ``a_uv`` both through its own entry and
    through the degrees of ``u`` and ``v``; both paths are included. Uses every
    ``spmm`` node on ``tape`` that propagated over ``adj``.
    """
    props = [n for n in tape.nodes if n.op == "spmm" and n.ctx["adj"] is adj]
    if not props:
        return np.zeros(len(pairs))
    rows, cols = adj.row_ids(), adj.col_idx
    d = adj.degrees()
    u, v = pairs[:, 0], pairs[:, 1]
    g_support = np.zeros(len(cols))
    g_uv = np.zeros(len(pairs))
    for node in props:
        g, x = node.grad, tape.nodes[node.parents[0]].value
        if adj.n <= _DENSE_LIMIT:
            full = g @ x.T
            g_support += full[rows, cols]
            g_uv += full[u, v] + full[v, u]
        else:
            g_support += np.einsum("ij,ij->i", g[rows], x[cols])
            g_uv += np.einsum("ij,ij->i", g[u], x[v]) + np.einsum("ij,ij->i", g[v], x[u])
    weighted = g_support * adj.norm_val
    per_node = np.bincount(rows, weighted, adj.n) + np.bincount(cols, weighted, adj.n)
    d_deg = -0.5 * per_node / d
    return g_uv / np.sqrt(d[u] * d[v]) + d_deg[u] + d_deg[v]


def score_edge_flips(pool: CandidatePool, tape: Tape, adj: CsrAdjacency) -> tuple[np.ndarray, np.ndarray]:
    """Predicted loss decrease of each candidate flip; positive means helpful.

    Returns ``(pairs, scores)``. ``tape`` must already have run ``backward``.
    """
    pairs, sign = pool.pairs()
    if len(pairs) == 0:
        raise ValueError("candidate pool is empty")
    return pairs, -sign * adjacency_gradient(tape, adj, pairs)


def select_flips(pairs: np.ndarray, scores: np.ndarray, k: int) -> list[tuple[int, int, float]]:
    """Top ``k`` positive-score pairs, highest score first (ties by pool order)."""
    if k <= 0:
        return []
    order = np.argsort(-scores, kind="stable")[:k]
    return [(int(pairs[i, 0]), int(pairs[i, 1]), float(scores[i])) for i in order if scores[i] > 0]


def rebuild_normalization(adj: CsrAdjacency) -> CsrAdjacency:
    return adj.normalized()


def commit_flips(adj: CsrAdjacency, flips, budget: int | None = None) -> CsrAdjacency:
    """XOR the given unordered pairs into the adjacency and renormalize."""
    flips = [(int(a), int(b)) for a, b in flips]
    if budget is not None and len(flips) > budget:
        raise BudgetError(f"{len(flips)} flips exceed budget {budget}")
    n = adj.n
    e = adj.edges()
    keys = set((e[:, 0] * n + e[:, 1]).tolist())
    for a, b in flips:
        if a == b:
            raise ValueError(f"self-loop flip ({a}, {b})")
        if not (0 <= a < n and 0 <= b < n):
            raise ValueError(f"flip ({a}, {b}) out of range for n={n}")
        a, b = min(a, b), max(a, b)
        keys ^= {a * n + b}
    arr = np.array(sorted(keys), dtype=np.int64)
    return CsrAdjacency.from_edges(n, np.stack([arr // n, arr % n], axis=1) if len(arr) else np.zeros((0, 2)))


# edit log: "epoch u v add|del score" per committed flip


def append_edit_log(path, epoch: int, flips, adj_before: CsrAdjacency) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        for u, v, score in flips:
            kind = "del" if adj_before.has_edge(u, v) else "add"
            fh.write(f"{epoch} {u} {v} {kind} {score!r}\n")


def read_edit_log(path) -> list[tuple[int, int, int, str, float]]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 5 or parts[3] not in ("add", "del"):
                raise ValueError(f"{path}:{lineno}: malformed edit line {line!r}")
            out.append((int(parts[0]), int(parts[1]), int(parts[2]), parts[3], float(parts[4])))
    return out


def replay_edit_log(adj: CsrAdjacency, path) -> CsrAdjacency:
    """Re-apply logged flips epoch by epoch, checking each recorded add/del kind."""
    entries = read_edit_log(path)
    for epoch in sorted({e[0] for e in entries}):
        batch = [e for e in entries if e[0] == epoch]
        for _, u, v, kind, _ in batch:
            if adj.has_edge(u, v) != (kind == "del"):
                raise ValueError(f"edit log entry ({epoch} {u} {v} {kind}) inconsistent with adjacency")
        adj = commit_flips(adj, [(u, v) for _, u, v, _, _ in batch])
    return adj
