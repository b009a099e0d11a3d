"""EMA teacher updates and a linear toy mask model with analytic gradients.

The toy model scores pixel ``(r, c)`` for query ``i`` as
``s[i, r, c] = E[i] . phi[:, r, c]`` where ``phi`` is a fixed per-pixel
feature map, and predicts a constant class distribution per query from
``class_params``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .match_loss import (
    LossReport,
    LossWeights,
    bilinear_sample,
    bilinear_weights,
    concat_terms,
    class_loss,
    point_mask_loss,
    _segment_loss_grad,
)
from .panoptic import MaskPrediction, softmax


def ema_update(teacher: np.ndarray, student: np.ndarray, alpha: float) -> np.ndarray:
    teacher = np.asarray(teacher, dtype=np.float64)
    student = np.asarray(student, dtype=np.float64)
    if teacher.shape != student.shape:
        raise ValueError(f"length mismatch: {teacher.shape} vs {student.shape}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    return alpha * teacher + (1.0 - alpha) * student


@dataclass
class ToyModel:
    mask_embeddings: np.ndarray  # (N, d)
    class_params: np.ndarray  # (N, C+1)
    features: np.ndarray | None = None  # (d, H, W)

    def __post_init__(self) -> None:
        self.mask_embeddings = np.asarray(self.mask_embeddings, dtype=np.float64)
        self.class_params = np.asarray(self.class_params, dtype=np.float64)
        if self.mask_embeddings.shape[0] != self.class_params.shape[0]:
            raise ValueError("mask_embeddings and class_params disagree on N")

    @classmethod
    def init(cls, n_queries: int, embed_dim: int, n_classes: int, rng: np.random.Generator,
             scale: float = 0.1) -> "ToyModel":
        return cls(
            rng.normal(scale=scale, size=(n_queries, embed_dim)),
            rng.normal(scale=scale, size=(n_queries, n_classes + 1)),
        )

    def params(self) -> np.ndarray:
        return np.concatenate([self.mask_embeddings.ravel(), self.class_params.ravel()])

    def with_params(self, flat: np.ndarray) -> "ToyModel":
        n_e = self.mask_embeddings.size
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != n_e + self.class_params.size:
            raise ValueError("parameter vector has the wrong length")
        return replace(
            self,
            mask_embeddings=flat[:n_e].reshape(self.mask_embeddings.shape).copy(),
            class_params=flat[n_e:].reshape(self.class_params.shape).copy(),
        )


def toy_forward(model: ToyModel, features: np.ndarray | None = None) -> MaskPrediction:
    phi = model.features if features is None else features
    if phi is None:
        raise ValueError("no feature map given")
    s = np.tensordot(model.mask_embeddings, phi, axes=(1, 0))
    return MaskPrediction(model.class_params.copy(), s)


# one training example: feature map plus the matched targets of a loss evaluation
Example = tuple[np.ndarray, LossReport]


def toy_loss(model: ToyModel, batch: Sequence[Example], weights: LossWeights) -> float:
    """Loss of ``model`` on frozen targets (matching, points and weights held fixed)."""
    total = 0.0
    for features, report in batch:
        for i, c in enumerate(report.target_classes):
            total += class_loss(model.class_params[i], int(c), weights)
        for term in report.terms:
            if term.n_points == 0:
                continue
            s_grid = np.tensordot(model.mask_embeddings[term.mask_index], features, axes=(0, 0))
            bce, dice = point_mask_loss(bilinear_sample(s_grid, term.points), term.targets)
            total += term.weight * (weights.w_bce * bce + weights.w_dice * dice)
    return float(total)


def toy_gradients(
    model: ToyModel, batch: Sequence[Example], weights: LossWeights
) -> tuple[np.ndarray, np.ndarray]:
    """Analytic gradients of :func:`toy_loss` w.r.t. mask embeddings and class params."""
    g_cls = np.zeros_like(model.class_params)
    n_cls = model.class_params.shape[1]
    probs = softmax(model.class_params, axis=1)
    g_embed = np.zeros_like(model.mask_embeddings)
    for features, report in batch:
        d, H, W = features.shape
        flat = features.reshape(d, H * W)
        for i, c in enumerate(report.target_classes):
            w = weights.w_noobj if c == n_cls else weights.w_cls
            onehot = np.zeros(n_cls)
            onehot[c - 1] = 1.0
            g_cls[i] += w * (probs[i] - onehot)
        terms = [t for t in report.terms if t.n_points and t.weight != 0.0]
        if not terms:
            continue
        rows = np.array([t.mask_index for t in terms])
        points, targets, seg = concat_terms(terms)
        idx, wts = bilinear_weights(points, H, W)
        s_rows = model.mask_embeddings[rows] @ flat
        s_pts = (s_rows[seg, idx] * wts).sum(axis=0)
        g_s = _segment_loss_grad(s_pts, targets, seg, len(terms), weights.w_bce, weights.w_dice)
        g_s *= np.array([t.weight for t in terms])[seg]
        # dL/ds on the pixel grid: each point spreads its gradient over its four corners
        g_grid = np.bincount((seg * (H * W) + idx).ravel(), (wts * g_s).ravel(), minlength=len(terms) * H * W)
        np.add.at(g_embed, rows, g_grid.reshape(len(terms), H * W) @ flat.T)
    if not (np.isfinite(g_embed).all() and np.isfinite(g_cls).all()):
        raise FloatingPointError("non-finite gradient")
    return g_embed, g_cls


def toy_grad_step(
    model: ToyModel, batch: Sequence[Example], lr: float, weights: LossWeights
) -> ToyModel:
    g_embed, g_cls = toy_gradients(model, batch, weights)
    return replace(
        model,
        mask_embeddings=model.mask_embeddings - lr * g_embed,
        class_params=model.class_params - lr * g_cls,
    )

