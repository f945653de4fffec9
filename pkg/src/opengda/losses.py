"""Adversarial, classification and entropy losses built on a tape."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, StateError, Tape, ValueNode


@dataclass(frozen=True)
class LossBreakdown:
    adv: float
    cls: float
    ent: float
    total: float

    def as_dict(self) -> dict:
        return {"adv": self.adv, "cls": self.cls, "ent": self.ent, "total": self.total}


def soft_cross_entropy(tape: Tape, logits: ValueNode, targets: np.ndarray) -> ValueNode:
    """Mean over rows of ``-sum_k y_k log softmax(logits)_k``."""
    if targets.shape != logits.shape:
        raise ShapeError(f"targets {targets.shape} vs logits {logits.shape}")
    ls = tape.log_softmax_rows(logits)
    return tape.scalar_mul(tape.sum_all(tape.mul(ls, tape.const(targets))), -1.0 / logits.shape[0])


def domain_targets(n_source: int, p_tk: np.ndarray, p_tu: np.ndarray) -> np.ndarray:
    y = np.zeros((n_source + len(p_tk), 3))
    y[:n_source, 0] = 1.0
    y[n_source:, 1] = p_tk
    y[n_source:, 2] = p_tu
    return y


def adv_loss(tape: Tape, disc_logits: ValueNode, n_source: int, posteriors) -> ValueNode:
    """Three-way domain cross-entropy; source rows target ``[1,0,0]``, target rows ``[0,p_tk,p_tu]``."""
    if posteriors is None:
        raise StateError("adversarial loss needs target posteriors")
    p_tk, p_tu = posteriors
    if disc_logits.shape != (n_source + len(p_tk), 3):
        raise ShapeError(f"discriminator logits {disc_logits.shape} for {n_source}+{len(p_tk)} rows")
    return soft_cross_entropy(tape, disc_logits, domain_targets(n_source, p_tk, p_tu))


def _without_label(labels: np.ndarray, width: int) -> np.ndarray:
    cols = np.arange(width)[None, :].repeat(len(labels), axis=0)
    keep = cols != labels[:, None]
    return cols[keep].reshape(len(labels), width - 1)


def cls_loss(tape: Tape, logits: ValueNode, labels, lam: float, known_count: int | None = None) -> ValueNode:
    """Cross-entropy on the true label plus ``lam`` times cross-entropy toward the unknown
    class after the true-label logit is dropped from the softmax.

    ``logits`` has ``k + 1`` columns with the unknown class last, unless
    ``known_count`` says otherwise (a head without the unknown column passes
    ``known_count=width`` and ``lam=0``). With ``lam == 0`` the second term is
    not built at all.
    """
    labels = np.asarray(labels, dtype=np.int64)
    width = logits.shape[1]
    known_count = width - 1 if known_count is None else known_count
    if len(labels) == 0:
        raise ValueError("no labeled source rows")
    if labels.min() < 0 or labels.max() >= known_count:
        raise ValueError(f"source labels must lie in [0, {known_count}); got max {labels.max()}")
    if lam != 0 and known_count != width - 1:
        raise ValueError("the unknown-class term needs an unknown logit column")
    ls = tape.log_softmax_rows(logits)
    term1 = tape.scalar_mul(tape.sum_all(tape.gather_cols(ls, labels[:, None])), -1.0 / len(labels))
    if lam == 0:
        return term1
    rest = tape.gather_cols(logits, _without_label(labels, width))
    ls_rest = tape.log_softmax_rows(rest)
    unk = tape.gather_cols(ls_rest, np.full((len(labels), 1), width - 2))
    term2 = tape.scalar_mul(tape.sum_all(unk), -1.0 / len(labels))
    return tape.add(term1, tape.scalar_mul(term2, lam))


def mean_entropy(tape: Tape, logits: ValueNode) -> ValueNode:
    ls = tape.log_softmax_rows(logits)
    plogp = tape.mul(tape.exp(ls), ls)
    return tape.scalar_mul(tape.sum_all(plogp), -1.0 / logits.shape[0])


def ent_loss(tape: Tape, target_logits: ValueNode, disc_logits_target: ValueNode, posteriors,
             mode: str = "binary") -> ValueNode:
    """Mean prediction entropy plus a domain-prediction term toward ``p(tu|e)``.

    ``mode="binary"``: cross-entropy of softmax over the discriminator's
    (target-known, target-unknown) logits against ``[1 - p_tu, p_tu]``.
    ``mode="three_way"``: three-way cross-entropy against ``[0, p_tk, p_tu]``.
    """
    if posteriors is None:
        raise StateError("entropy loss needs target posteriors")
    p_tk, p_tu = posteriors
    n = target_logits.shape[0]
    if disc_logits_target.shape != (n, 3) or len(p_tu) != n:
        raise ShapeError(f"discriminator logits {disc_logits_target.shape} / posteriors for {n} rows")
    term1 = mean_entropy(tape, target_logits)
    if mode == "binary":
        pair = tape.gather_cols(disc_logits_target, np.tile([1, 2], (n, 1)))
        term2 = soft_cross_entropy(tape, pair, np.stack([1.0 - p_tu, p_tu], axis=1))
    elif mode == "three_way":
        term2 = soft_cross_entropy(tape, disc_logits_target, domain_targets(0, p_tk, p_tu))
    else:
        raise ValueError(f"unknown entropy-loss mode {mode!r}")
    return tape.add(term1, term2)
