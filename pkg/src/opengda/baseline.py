"""Plain source-supervised GCN with hand-written backpropagation.

Shares nothing with the tape engine; used as an independent reference for
the ``no_adapt`` variant, which should collapse onto it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model as gm
from .graph import DomainPair, split_source
from .metrics import EvalReport, evaluate_predictions
from .optim import AdamW


@dataclass
class BaselineResult:
    report: EvalReport
    best_epoch: int
    acc_val: list[float]
    weights: list[np.ndarray]
    heads: tuple[np.ndarray, np.ndarray]


def _forward(op, x, weights, slope):
    """Returns logits inputs ``z`` and per-layer caches ``(input, pre-activation)``."""
    caches = []
    h = x
    for i, w in enumerate(weights):
        pre = np.asarray(op @ (h @ w))
        caches.append((h, pre))
        if i < len(weights) - 1:
            h = np.where(pre > 0, pre, slope * pre) if slope else np.where(pre > 0, pre, 0.0)
        else:
            h = pre
    return h, caches


def _logits(z, phi, w_unk):
    return np.hstack([z @ phi, z @ w_unk])


def _predict(op, x, weights, phi, w_unk, slope):
    z, _ = _forward(op, x, weights, slope)
    return _logits(z, phi, w_unk).argmax(axis=1)


def _grads(op, x, weights, phi, w_unk, slope, train_idx, labels):
    z, caches = _forward(op, x, weights, slope)
    zt = z[train_idx]
    logits = _logits(zt, phi, w_unk)
    shifted = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(shifted)
    p /= p.sum(axis=1, keepdims=True)
    p[np.arange(len(labels)), labels] -= 1.0
    d_logits = p / len(labels)
    k = phi.shape[1]
    g_phi = zt.T @ d_logits[:, :k]
    g_unk = zt.T @ d_logits[:, k:]
    dz = np.zeros_like(z)
    np.add.at(dz, train_idx, d_logits[:, :k] @ phi.T + d_logits[:, k:] @ w_unk.T)
    g_w = [None] * len(weights)
    upstream = dz
    for i in range(len(weights) - 1, -1, -1):
        h_in, pre = caches[i]
        if i < len(weights) - 1:
            upstream = np.where(pre > 0, upstream, slope * upstream)
        # symmetric propagation operator
        d_hw = np.asarray(op @ upstream)
        g_w[i] = h_in.T @ d_hw
        upstream = d_hw @ weights[i].T
    return g_w, g_phi, g_unk


def run_plain_gcn(pair: DomainPair, *, hidden=(128, 128), learning_rate: float = 0.001,
                  weight_decay: float = 0.001, epochs: int = 200, seed: int = 0,
                  select_start: float = 0.25, slope: float = 0.0, disc_hidden: int = 64) -> BaselineResult:
    """Train on labeled source nodes and score the target without adaptation.

    Weights come from the same seeded initializer as the adapted model;
    the best epoch by source validation accuracy is evaluated.
    """
    src, tgt = pair.source, pair.target
    k = pair.known_count
    split = split_source(src, k, seed)
    init = gm.init_params([src.features.shape[1], *hidden], k, seed, disc_hidden, slope)
    weights = [w.copy() for w in init.weights]
    phi, w_unk = init.known_head.copy(), init.unknown_head.copy()
    op_s, op_t = src.adjacency.operator(), tgt.adjacency.operator()
    labels = src.labels[split.train]
    valid = split.valid if len(split.valid) else split.train
    opt = AdamW(learning_rate, weight_decay)
    names = [f"W{i}" for i in range(len(weights))] + ["phi", "w_unk"]

    select_from = int(select_start * epochs)
    best = None
    history = []
    for epoch in range(epochs):
        g_w, g_phi, g_unk = _grads(op_s, src.features, weights, phi, w_unk, slope, split.train, labels)
        new = opt.step(dict(zip(names, [*weights, phi, w_unk])), dict(zip(names, [*g_w, g_phi, g_unk])))
        weights = [new[f"W{i}"] for i in range(len(weights))]
        phi, w_unk = new["phi"], new["w_unk"]
        pred_s = _predict(op_s, src.features, weights, phi, w_unk, slope)
        acc_val = float((pred_s[valid] == src.labels[valid]).mean())
        history.append(acc_val)
        if epoch >= select_from and (best is None or acc_val > best[0]):
            best = (acc_val, epoch, [w.copy() for w in weights], phi.copy(), w_unk.copy())

    _, best_epoch, weights, phi, w_unk = best
    pred_t = _predict(op_t, tgt.features, weights, phi, w_unk, slope)
    report = evaluate_predictions(pred_t, tgt.labels, k)
    if len(split.sanity):
        pred_s = _predict(op_s, src.features, weights, phi, w_unk, slope)
        report.extra["acc_sanity"] = float((pred_s[split.sanity] == src.labels[split.sanity]).mean())
    report.extra["best_epoch"] = best_epoch
    return BaselineResult(report, best_epoch, history, weights, (phi, w_unk))
