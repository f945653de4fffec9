"""Gradient-magnitude weight masks for the extractor layers."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import GraphModel
from .tensor import ShapeError, StateError, ValueNode


@dataclass
class MaskSet:
    masks: list[np.ndarray]
    sparsity: float
    last_scores: list[np.ndarray]

    def zero_fraction(self) -> list[float]:
        return [float((m == 0).mean()) for m in self.masks]


def score_importance(mask_nodes: list[ValueNode]) -> list[np.ndarray]:
    """``|dL/dM|`` per layer, read from mask nodes after ``Tape.backward``."""
    scores = []
    for node in mask_nodes:
        if not node.requires_grad:
            raise StateError(f"mask node {node.id} was not tracked for gradients")
        scores.append(np.abs(node.grad))
    return scores


def build_masks(scores: list[np.ndarray], rho: float) -> MaskSet:
    """Zero the ``floor(rho * k)`` lowest scores of each layer.

    Ties go to the lowest flat index first, so the zero set at a smaller
    ``rho`` is always contained in the zero set at a larger one.
    """
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho={rho} outside [0, 1]")
    masks = []
    for s in scores:
        flat = np.asarray(s, dtype=np.float64).ravel()
        n_zero = math.floor(rho * flat.size)
        order = np.argsort(flat, kind="stable")
        m = np.ones(flat.size)
        m[order[:n_zero]] = 0.0
        masks.append(m.reshape(np.shape(s)))
    return MaskSet(masks, rho, [np.asarray(s) for s in scores])


def apply_masks(model: GraphModel, mask_set: MaskSet) -> GraphModel:
    if len(mask_set.masks) != len(model.weights):
        raise ShapeError(f"{len(mask_set.masks)} masks for {len(model.weights)} layers")
    for i, (w, m) in enumerate(zip(model.weights, mask_set.masks)):
        if w.shape != m.shape:
            raise ShapeError(f"layer {i}: mask {m.shape} vs weight {w.shape}")
    model.masks = [m.copy() for m in mask_set.masks]
    return model
