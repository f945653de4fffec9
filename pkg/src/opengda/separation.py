"""Entropy-based known/unknown separation with a two-component Beta mixture."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import betaln

log = logging.getLogger(__name__)

EPS = 1e-4
_MIN_VAR = 1e-6


@dataclass(frozen=True)
class EntropyProfile:
    raw: np.ndarray
    normalized: np.ndarray


@dataclass
class BetaMixture:
    alpha_tk: float
    beta_tk: float
    alpha_tu: float
    beta_tu: float
    mix_tk: float
    mix_tu: float
    degenerate: bool = False
    log_likelihood: float = float("nan")
    history: list[float] = field(default_factory=list)

    def means(self) -> tuple[float, float]:
        return (
            self.alpha_tk / (self.alpha_tk + self.beta_tk),
            self.alpha_tu / (self.alpha_tu + self.beta_tu),
        )

    def as_dict(self) -> dict:
        return {
            "alpha_tk": self.alpha_tk,
            "beta_tk": self.beta_tk,
            "alpha_tu": self.alpha_tu,
            "beta_tu": self.beta_tu,
            "mix_tk": self.mix_tk,
            "mix_tu": self.mix_tu,
            "degenerate": self.degenerate,
        }


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def compute_entropy(known_logits: np.ndarray) -> EntropyProfile:
    """Entropy of the softmax over known-class logits, raw and scaled into (0, 1)."""
    known_logits = np.atleast_2d(np.asarray(known_logits, dtype=np.float64))
    k = known_logits.shape[1]
    if k < 2:
        raise ValueError("entropy separation needs at least two known classes")
    p = softmax_rows(known_logits)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    raw = -terms.sum(axis=1)
    return EntropyProfile(raw, np.clip(raw / math.log(k), EPS, 1 - EPS))


def beta_logpdf(x, a: float, b: float) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return (a - 1) * np.log(x) + (b - 1) * np.log1p(-x) - betaln(a, b)


def _moments_to_shape(m: float, v: float) -> tuple[float, float]:
    m = min(max(m, EPS), 1 - EPS)
    v = min(max(v, _MIN_VAR), m * (1 - m) * 0.999)
    c = m * (1 - m) / v - 1
    return m * c, (1 - m) * c


def _weighted_moments(x, w) -> tuple[float, float]:
    total = w.sum()
    if total <= 0:
        return float(x.mean()), float(x.var())
    m = float((w * x).sum() / total)
    return m, float((w * (x - m) ** 2).sum() / total)


def _log_joint(x, mix: BetaMixture) -> tuple[np.ndarray, np.ndarray]:
    with np.errstate(divide="ignore"):
        lk = math.log(mix.mix_tk) if mix.mix_tk > 0 else -np.inf
        lu = math.log(mix.mix_tu) if mix.mix_tu > 0 else -np.inf
    return lk + beta_logpdf(x, mix.alpha_tk, mix.beta_tk), lu + beta_logpdf(x, mix.alpha_tu, mix.beta_tu)


def mixture_log_likelihood(x, mix: BetaMixture) -> float:
    a, b = _log_joint(np.clip(x, EPS, 1 - EPS), mix)
    return float(np.logaddexp(a, b).sum())


def _ordered(mix: BetaMixture) -> BetaMixture:
    m_tk, m_tu = mix.means()
    if m_tk <= m_tu:
        return mix
    return BetaMixture(mix.alpha_tu, mix.beta_tu, mix.alpha_tk, mix.beta_tk, mix.mix_tu, mix.mix_tk,
                       mix.degenerate, mix.log_likelihood, mix.history)


def fit_beta_mixture_em(profile, iters: int = 20) -> BetaMixture:
    """Fit the mixture to normalized entropies by EM with a moment-matching M-step.

    ``profile`` is an :class:`EntropyProfile` or an array of values in (0, 1).
    Initialization splits the sorted samples at the median. When all values
    coincide the result is flagged ``degenerate``.
    """
    x = profile.normalized if isinstance(profile, EntropyProfile) else np.asarray(profile, dtype=np.float64)
    x = np.clip(x.ravel(), EPS, 1 - EPS)
    if x.size < 10:
        raise ValueError(f"need at least 10 samples, got {x.size}")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    if x.var() < 1e-12:
        return BetaMixture(1.0, 1.0, 1.0, 1.0, 0.5, 0.5, degenerate=True)

    order = np.argsort(x, kind="stable")
    half = x.size // 2
    low, high = x[order[:half]], x[order[half:]]
    mix = BetaMixture(*_moments_to_shape(low.mean(), low.var()), *_moments_to_shape(high.mean(), high.var()),
                      half / x.size, 1 - half / x.size)
    history = []
    prev = -np.inf
    drops = 0
    for _ in range(iters):
        a, b = _log_joint(x, mix)
        r = np.exp(a - np.logaddexp(a, b))
        mix_tk = float(r.mean())
        mix = BetaMixture(
            *_moments_to_shape(*_weighted_moments(x, r)),
            *_moments_to_shape(*_weighted_moments(x, 1 - r)),
            mix_tk,
            1.0 - mix_tk,
        )
        ll = mixture_log_likelihood(x, mix)
        if ll < prev - 1e-8:
            drops += 1
        history.append(ll)
        prev = ll
    if drops:
        log.warning("beta mixture log-likelihood decreased in %d of %d EM iterations", drops, iters)
    mix = _ordered(mix)
    mix.log_likelihood = history[-1]
    mix.history = history
    return mix


def posterior_known(mix: BetaMixture, e) -> tuple[np.ndarray, np.ndarray]:
    """Posterior of the low-entropy (target-known) component, and its complement."""
    e = np.clip(np.asarray(e, dtype=np.float64), EPS, 1 - EPS)
    if mix.degenerate:
        p_tk = np.full(e.shape, 0.5)
    else:
        a, b = _log_joint(e, mix)
        p_tk = np.exp(a - np.logaddexp(a, b))
    return p_tk, 1.0 - p_tk
