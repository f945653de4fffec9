"""Open-set evaluation: accuracies, H-score, MMD diagnostic, embedding export."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial.distance import cdist, pdist

from . import model as gm
from .separation import compute_entropy


@dataclass
class EvalReport:
    acc: float
    acc_tk: float
    acc_tu: float
    h_score: float
    per_class: list[float]
    mmd_before: float | None = None
    mmd_after: float | None = None
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def h_score(acc_tk: float, acc_tu: float) -> float:
    if acc_tk + acc_tu == 0:
        return 0.0
    if acc_tk == acc_tu:
        # exact on the diagonal; the product form rounds
        return float(acc_tk)
    return 2.0 * acc_tk * acc_tu / (acc_tk + acc_tu)


def evaluate_predictions(pred, labels, known_count: int) -> EvalReport:
    """Scores predictions against open-set labels in ``[0, known_count]``.

    A target-unknown node counts as correct only when predicted ``known_count``.
    """
    pred = np.asarray(pred)
    labels = np.asarray(labels)
    if labels.size == 0 or (labels < 0).any():
        raise ValueError("evaluation needs a label for every target node")
    correct = pred == labels
    known = labels < known_count
    acc_tk = float(correct[known].mean()) if known.any() else 0.0
    acc_tu = float(correct[~known].mean()) if (~known).any() else 0.0
    per_class = [float(correct[labels == c].mean()) if (labels == c).any() else float("nan")
                 for c in range(known_count + 1)]
    return EvalReport(float(correct.mean()), acc_tk, acc_tu, h_score(acc_tk, acc_tu), per_class)


def predict(model: gm.GraphModel, adj, features, threshold: float | None = None) -> np.ndarray:
    """Argmax over known classes plus the unknown head.

    With ``threshold`` the unknown head is ignored: nodes whose normalized
    known-class entropy exceeds it are labeled unknown.
    """
    k = model.known_count
    if threshold is None:
        return gm.logits(model, adj, features).argmax(axis=1)
    known_logits = gm.logits(model, adj, features, with_unknown=False)
    pred = known_logits.argmax(axis=1)
    pred[compute_entropy(known_logits).normalized > threshold] = k
    return pred


def evaluate(model: gm.GraphModel, target, labels=None, threshold: float | None = None) -> EvalReport:
    """Evaluate on a target :class:`~opengda.graph.LabeledGraph` (its labels unless given)."""
    labels = target.labels if labels is None else np.asarray(labels)
    if labels is None or len(labels) != target.n:
        raise ValueError("missing target labels")
    pred = predict(model, target.adjacency, target.features, threshold)
    return evaluate_predictions(pred, labels, model.known_count)


def _rbf(d2: np.ndarray, bandwidth: float) -> np.ndarray:
    return np.exp(-d2 / (2.0 * bandwidth**2))


def mmd2_unbiased(x: np.ndarray, y: np.ndarray, bandwidth: float | None = None) -> float:
    """Unbiased squared MMD with an RBF kernel.

    Bandwidth defaults to the median pairwise distance of the pooled sample.
    Equal-size samples use the paired U-statistic (exactly 0 for ``x == y``);
    otherwise the two-sample form with all cross pairs.
    """
    x, y = np.atleast_2d(x), np.atleast_2d(y)
    m, n = len(x), len(y)
    if m < 2 or n < 2:
        raise ValueError("each group needs at least two points")
    if bandwidth is None:
        dist = pdist(np.vstack([x, y]))
        bandwidth = float(np.median(dist)) if dist.size else 1.0
        if bandwidth <= 0:
            bandwidth = 1.0
    kxx = _rbf(cdist(x, x, "sqeuclidean"), bandwidth)
    kyy = _rbf(cdist(y, y, "sqeuclidean"), bandwidth)
    kxy = _rbf(cdist(x, y, "sqeuclidean"), bandwidth)
    if m == n:
        h = kxx + kyy - kxy - kxy.T
        return float((h.sum() - np.trace(h)) / (m * (m - 1)))
    sxx = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    syy = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    return float(sxx + syy - 2.0 * kxy.mean())


def group_mmd(embeddings: np.ndarray, unknown_mask: np.ndarray, max_points: int = 1000, seed: int = 0) -> float | None:
    """MMD between known and unknown rows; ``None`` when a group has fewer than two rows."""
    unknown_mask = np.asarray(unknown_mask, dtype=bool)
    a, b = embeddings[~unknown_mask], embeddings[unknown_mask]
    if len(a) < 2 or len(b) < 2:
        return None
    rng = np.random.default_rng(seed)
    if len(a) > max_points:
        a = a[np.sort(rng.choice(len(a), max_points, replace=False))]
    if len(b) > max_points:
        b = b[np.sort(rng.choice(len(b), max_points, replace=False))]
    return mmd2_unbiased(a, b)


def mmd_diagnostic(before: np.ndarray, after: np.ndarray, unknown_mask) -> tuple[float | None, float | None]:
    return group_mmd(before, unknown_mask), group_mmd(after, unknown_mask)


def export_embeddings(path, embeddings: np.ndarray, labels, predictions) -> None:
    """One row per node: ``node_id true_label predicted_label z_0 ... z_{d-1}``."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# node_id true_label predicted_label " + " ".join(f"z{i}" for i in range(embeddings.shape[1])) + "\n")
        for i, (row, y, p) in enumerate(zip(embeddings, labels, predictions)):
            fh.write(f"{i} {int(y)} {int(p)} " + " ".join(repr(float(v)) for v in row) + "\n")


def load_embeddings(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Inverse of :func:`export_embeddings`; returns ``(labels, predictions, embeddings)``."""
    data = np.loadtxt(path, dtype=np.float64, comments="#", ndmin=2)
    return data[:, 1].astype(np.int64), data[:, 2].astype(np.int64), data[:, 3:]
