"""Shifted source/target stochastic-block-model pairs for desk-scale experiments."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields

import numpy as np

from .graph import CsrAdjacency, DomainPair, LabeledGraph, make_pair
from .rng import stream


@dataclass(frozen=True)
class GeneratorSpec:
    """Parameters of a synthetic domain pair.

    The source graph holds the ``known_count`` lowest classes only; the target
    holds all ``class_count`` classes. Target block probabilities are offset by
    ``intra_delta`` / ``inter_delta``; target class means are rotated by
    ``rotation`` radians in consecutive coordinate planes and translated by
    ``mean_shift`` along a random unit direction.
    """

    n_source: int = 400
    n_target: int = 400
    class_count: int = 5
    known_count: int = 3
    feature_dim: int = 32
    p_intra: float = 0.05
    p_inter: float = 0.005
    mean_scale: float = 1.0
    feature_noise: float = 1.0
    intra_delta: float = 0.0
    inter_delta: float = 0.0
    rotation: float = 0.0
    mean_shift: float = 0.0
    class_means: list | None = None

    def validate(self) -> None:
        problems = []
        if not 1 <= self.known_count < self.class_count:
            problems.append(f"known_count={self.known_count} must be in [1, class_count={self.class_count})")
        for name in ("n_source", "n_target", "feature_dim"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be positive")
        for name, p in self.block_probs().items():
            if not 0.0 <= p <= 1.0:
                problems.append(f"{name}={p} outside [0, 1]")
        if self.feature_noise < 0:
            problems.append("feature_noise must be >= 0")
        if self.class_means is not None:
            m = np.asarray(self.class_means, dtype=float)
            if m.shape != (self.class_count, self.feature_dim):
                problems.append(f"class_means must be {self.class_count}x{self.feature_dim}")
        if problems:
            raise ValueError("invalid generator spec: " + "; ".join(problems))

    def block_probs(self) -> dict[str, float]:
        return {
            "p_intra": self.p_intra,
            "p_inter": self.p_inter,
            "target p_intra": self.p_intra + self.intra_delta,
            "target p_inter": self.p_inter + self.inter_delta,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GeneratorSpec":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValueError(f"invalid generator spec: unknown fields {unknown}")
        return cls(**data)

    @classmethod
    def from_json(cls, path) -> "GeneratorSpec":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return asdict(self)


def _balanced_labels(n: int, classes: int) -> np.ndarray:
    return np.arange(n) % classes


def sample_sbm(labels: np.ndarray, p_intra: float, p_inter: float, rng) -> CsrAdjacency:
    n = len(labels)
    probs = np.where(labels[:, None] == labels[None, :], p_intra, p_inter)
    draw = rng.random((n, n)) < probs
    u, v = np.nonzero(np.triu(draw, k=1))
    return CsrAdjacency.from_edges(n, np.stack([u, v], axis=1))


def _rotate_planes(means: np.ndarray, angle: float) -> np.ndarray:
    out = means.copy()
    c, s = np.cos(angle), np.sin(angle)
    for i in range(0, means.shape[1] - 1, 2):
        a, b = means[:, i], means[:, i + 1]
        out[:, i], out[:, i + 1] = c * a - s * b, s * a + c * b
    return out


def generate_raw(spec: GeneratorSpec, seed: int) -> tuple[LabeledGraph, LabeledGraph]:
    """Source and target graphs with original class ids (no open-set relabeling)."""
    spec.validate()
    if spec.class_means is not None:
        means = np.asarray(spec.class_means, dtype=np.float64)
    else:
        means = stream(seed, "gen.means").normal(0.0, spec.mean_scale, (spec.class_count, spec.feature_dim))
    direction = stream(seed, "gen.shift").normal(size=spec.feature_dim)
    direction /= np.linalg.norm(direction)
    target_means = _rotate_planes(means, spec.rotation) + spec.mean_shift * direction

    def domain(name, n, classes, mu, p_in, p_out):
        labels = _balanced_labels(n, classes)
        adj = sample_sbm(labels, p_in, p_out, stream(seed, f"gen.{name}.edges"))
        noise = stream(seed, f"gen.{name}.features").normal(0.0, 1.0, (n, spec.feature_dim))
        x = mu[labels] + spec.feature_noise * noise
        return LabeledGraph(adj, x, labels, spec.class_count)

    # distinct sub-streams per domain; zero shift still means equal distributions
    src = domain("source", spec.n_source, spec.known_count, means, spec.p_intra, spec.p_inter)
    tgt = domain(
        "target",
        spec.n_target,
        spec.class_count,
        target_means,
        spec.p_intra + spec.intra_delta,
        spec.p_inter + spec.inter_delta,
    )
    return src, tgt


def generate_synthetic_pair(spec: GeneratorSpec, seed: int) -> DomainPair:
    src, tgt = generate_raw(spec, seed)
    return make_pair(src, tgt, range(spec.known_count))
