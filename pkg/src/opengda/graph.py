"""Graph storage, normalization, file formats, open-set relabeling and splits."""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .rng import stream
from .tensor import StateError

log = logging.getLogger(__name__)


class GraphFormatError(ValueError):
    """Malformed graph file."""


@dataclass(frozen=True, eq=False)
class CsrAdjacency:
    """Undirected adjacency in CSR form, self-loops included.

    ``norm_val[e]`` holds ``1/sqrt(d_u d_v)`` for the entry ``e = (u, v)``, with
    degrees counted including the self-loop. It is ``None`` until
    :meth:`normalized` is called.
    """

    n: int
    row_ptr: np.ndarray
    col_idx: np.ndarray
    norm_val: np.ndarray | None = None
    _op: list = field(default_factory=list, repr=False, compare=False)

    @classmethod
    def from_edges(cls, n: int, edges) -> "CsrAdjacency":
        """Symmetrize, deduplicate, add self-loops and normalize."""
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        if edges.size and (edges.min() < 0 or edges.max() >= n):
            raise GraphFormatError(f"node id out of range for n={n}")
        loops = np.arange(n, dtype=np.int64)
        u = np.concatenate([edges[:, 0], edges[:, 1], loops])
        v = np.concatenate([edges[:, 1], edges[:, 0], loops])
        key = np.unique(u * n + v)
        rows, cols = key // n, key % n
        row_ptr = np.zeros(n + 1, dtype=np.int64)
        np.add.at(row_ptr, rows + 1, 1)
        return cls(n, np.cumsum(row_ptr), cols.astype(np.int64)).normalized()

    def degrees(self) -> np.ndarray:
        """Degrees including the self-loop."""
        return np.diff(self.row_ptr).astype(np.float64)

    def row_ids(self) -> np.ndarray:
        return np.repeat(np.arange(self.n), np.diff(self.row_ptr))

    def normalized(self) -> "CsrAdjacency":
        d = self.degrees()
        rows = self.row_ids()
        vals = 1.0 / np.sqrt(d[rows] * d[self.col_idx])
        return CsrAdjacency(self.n, self.row_ptr, self.col_idx, vals)

    def operator(self) -> sp.csr_matrix:
        """Normalized adjacency as a scipy CSR matrix (cached)."""
        if self.norm_val is None:
            raise StateError("adjacency has no normalization coefficients")
        if not self._op:
            self._op.append(
                sp.csr_matrix((self.norm_val, self.col_idx, self.row_ptr), shape=(self.n, self.n))
            )
        return self._op[0]

    def edges(self) -> np.ndarray:
        """Canonical ``u < v`` pairs, self-loops excluded, sorted."""
        rows = self.row_ids()
        keep = rows < self.col_idx
        return np.stack([rows[keep], self.col_idx[keep]], axis=1)

    @property
    def edge_count(self) -> int:
        return len(self.edges())

    def has_edge(self, u: int, v: int) -> bool:
        lo, hi = self.row_ptr[u], self.row_ptr[u + 1]
        i = np.searchsorted(self.col_idx[lo:hi], v)
        return bool(i < hi - lo and self.col_idx[lo + i] == v)

    def to_dense(self) -> np.ndarray:
        """Unnormalized 0/1 matrix with self-loops."""
        a = np.zeros((self.n, self.n))
        a[self.row_ids(), self.col_idx] = 1.0
        return a

    def same_structure(self, other: "CsrAdjacency") -> bool:
        return (
            self.n == other.n
            and np.array_equal(self.row_ptr, other.row_ptr)
            and np.array_equal(self.col_idx, other.col_idx)
        )


@dataclass(frozen=True, eq=False)
class LabeledGraph:
    adjacency: CsrAdjacency
    features: np.ndarray
    labels: np.ndarray  # -1 marks unlabeled
    class_count: int

    def __post_init__(self):
        if self.features.ndim != 2 or self.features.shape[1] == 0:
            raise ValueError("features must be an n x f matrix with f > 0")
        if self.features.shape[0] != self.adjacency.n or len(self.labels) != self.adjacency.n:
            raise ValueError("adjacency, features and labels disagree on node count")
        if not np.isfinite(self.features).all():
            raise ValueError("features contain non-finite values")
        present = self.labels[self.labels >= 0]
        if present.size and present.max() >= self.class_count:
            raise ValueError(f"label {present.max()} outside [0, {self.class_count})")

    @property
    def n(self) -> int:
        return self.adjacency.n

    def with_graph(self, adjacency=None, features=None) -> "LabeledGraph":
        return LabeledGraph(
            adjacency if adjacency is not None else self.adjacency,
            features if features is not None else self.features,
            self.labels,
            self.class_count,
        )


@dataclass(frozen=True, eq=False)
class DomainPair:
    source: LabeledGraph
    target: LabeledGraph  # labels are for evaluation only
    known_count: int

    @property
    def unknown_id(self) -> int:
        return self.known_count


@dataclass(frozen=True)
class SplitIndices:
    train: np.ndarray
    valid: np.ndarray
    sanity: np.ndarray


# file formats


def load_edge_list(path, n: int | None = None) -> CsrAdjacency:
    """Read ``u v`` lines (0-indexed, ``#`` comments).

    Without ``n`` the node count comes from a ``# n=<count>`` header comment,
    else from the largest id seen.
    """
    pairs = []
    with open(path, encoding="utf-8") as fh:
        lines = fh.readlines()
    if n is None:
        for line in lines:
            m = re.match(r"\s*#\s*n\s*=\s*(\d+)", line)
            if m:
                n = int(m.group(1))
                break
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise GraphFormatError(f"{path}:{lineno}: expected 'u v', got {line!r}")
        try:
            u, v = int(parts[0]), int(parts[1])
        except ValueError:
            raise GraphFormatError(f"{path}:{lineno}: non-integer node id in {line!r}") from None
        if n is not None and not (0 <= u < n and 0 <= v < n):
            raise GraphFormatError(f"{path}:{lineno}: node id out of range for n={n}")
        if u != v:
            pairs.append((u, v))
    if n is None:
        n = max((max(p) for p in pairs), default=-1) + 1
    return CsrAdjacency.from_edges(n, pairs)


def write_edge_list(path, adj: CsrAdjacency) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# n={adj.n}\n")
        for u, v in adj.edges():
            fh.write(f"{u} {v}\n")


def load_features(path) -> np.ndarray:
    """Dense ``n f`` header format, or sparse ``node feat value`` triples.

    The sparse form is recognized by a header line with three fields
    ``n f nnz``.
    """
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) == 2:
            n, f = int(header[0]), int(header[1])
            x = np.loadtxt(fh, dtype=np.float64, ndmin=2)
            if x.shape != (n, f):
                raise GraphFormatError(f"{path}: expected {n}x{f} values, got {x.shape}")
            return x
        if len(header) == 3:
            n, f = int(header[0]), int(header[1])
            x = np.zeros((n, f))
            for lineno, line in enumerate(fh, 2):
                parts = line.split()
                if not parts:
                    continue
                if len(parts) != 3:
                    raise GraphFormatError(f"{path}:{lineno}: expected 'node feat value'")
                x[int(parts[0]), int(parts[1])] = float(parts[2])
            return x
    raise GraphFormatError(f"{path}: bad header {header!r}")


def write_features(path, x: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{x.shape[0]} {x.shape[1]}\n")
        np.savetxt(fh, x, fmt="%.17g")


def load_labels(path) -> np.ndarray:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(int(line))
            except ValueError:
                raise GraphFormatError(f"{path}:{lineno}: bad label {line!r}") from None
    return np.array(out, dtype=np.int64)


def write_labels(path, labels) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.writelines(f"{int(y)}\n" for y in labels)


def load_graph(directory, row_normalize: bool = False) -> LabeledGraph:
    """Read ``edges.txt``, ``features.txt``, ``labels.txt`` from one domain directory."""
    directory = Path(directory)
    x = load_features(directory / "features.txt")
    if row_normalize:
        norms = np.linalg.norm(x, axis=1, keepdims=True)
        x = x / np.where(norms > 0, norms, 1.0)
    y = load_labels(directory / "labels.txt")
    adj = load_edge_list(directory / "edges.txt", x.shape[0])
    return LabeledGraph(adj, x, y, int(y.max()) + 1 if y.size and y.max() >= 0 else 1)


def write_graph(directory, graph: LabeledGraph) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_edge_list(directory / "edges.txt", graph.adjacency)
    write_features(directory / "features.txt", graph.features)
    write_labels(directory / "labels.txt", graph.labels)


def load_pair(directory, known_classes=None, known_count=None, row_normalize=False) -> DomainPair:
    """Load ``source/`` and ``target/`` and apply open-set relabeling.

    Known classes default to the ``known_count`` lowest ids, where
    ``known_count`` falls back to ``meta.json`` in the dataset directory.
    """
    directory = Path(directory)
    meta = {}
    if (directory / "meta.json").exists():
        meta = json.loads((directory / "meta.json").read_text())
    src = load_graph(directory / "source", row_normalize)
    tgt = load_graph(directory / "target", row_normalize)
    class_count = int(meta.get("class_count", max(src.class_count, tgt.class_count)))
    if known_classes is None:
        k = known_count if known_count is not None else meta.get("known_count")
        if k is None:
            raise ValueError("known class count not given and absent from meta.json")
        known_classes = list(range(int(k)))
    src = LabeledGraph(src.adjacency, src.features, src.labels, class_count)
    tgt = LabeledGraph(tgt.adjacency, tgt.features, tgt.labels, class_count)
    return make_pair(src, tgt, known_classes)


def make_pair(source: LabeledGraph, target: LabeledGraph, known_classes) -> DomainPair:
    """Relabel both domains; source nodes of unknown classes become unlabeled."""
    src = relabel_openset(source, known_classes)
    k = len(set(known_classes))
    src_labels = np.where(src.labels == k, -1, src.labels)
    src = LabeledGraph(src.adjacency, src.features, src_labels, k)
    return DomainPair(src, relabel_openset(target, known_classes), k)


def relabel_openset(graph: LabeledGraph, known_classes) -> LabeledGraph:
    """Map known classes to ``0..k-1`` in ascending order and every other class to ``k``."""
    known = sorted(set(int(c) for c in known_classes))
    if not known:
        raise ValueError("known class set is empty")
    k = len(known)
    lut = np.full(max(graph.class_count, max(known) + 1), k, dtype=np.int64)
    lut[known] = np.arange(k)
    labels = np.where(graph.labels >= 0, lut[np.maximum(graph.labels, 0)], -1)
    return LabeledGraph(graph.adjacency, graph.features, labels, k + 1)


def split_source(graph: LabeledGraph, known_count: int, seed: int) -> SplitIndices:
    """Stratified 70/10/20 split of labeled known-class source nodes.

    Per class of size ``c``: ``floor(0.1 c)`` validation, ``floor(0.2 c)``
    sanity, the remainder train.
    """
    rng = stream(seed, "split")
    train, valid, sanity = [], [], []
    for cls in range(known_count):
        idx = np.flatnonzero(graph.labels == cls)
        if len(idx) == 0:
            continue
        if len(idx) < 3:
            log.warning("class %d has %d labeled nodes; all go to train", cls, len(idx))
            train.append(idx)
            continue
        idx = rng.permutation(idx)
        nv, ns = int(math.floor(0.1 * len(idx))), int(math.floor(0.2 * len(idx)))
        valid.append(idx[:nv])
        sanity.append(idx[nv : nv + ns])
        train.append(idx[nv + ns :])

    def cat(parts):
        return np.sort(np.concatenate(parts)) if parts else np.zeros(0, dtype=np.int64)

    return SplitIndices(cat(train), cat(valid), cat(sanity))
