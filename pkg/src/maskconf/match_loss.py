"""Bipartite matching, point sampling and the mask-classification loss.

Points are continuous ``(row, col)`` coordinates in ``[0, H) x [0, W)``;
grid node ``(r, c)`` sits at integer coordinates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import rng as rngmod
from .panoptic import MaskPrediction, PseudoLabel, sigmoid

EMPTY = -1
PROB_EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    w_cls: float = 2.0
    w_bce: float = 5.0
    w_dice: float = 5.0
    w_noobj: float = 0.1

    def __post_init__(self) -> None:
        if min(self.w_cls, self.w_bce, self.w_dice, self.w_noobj) <= 0:
            raise ValueError("loss weights must be positive")


@dataclass(frozen=True)
class LossConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    n_points: int = 12544
    beta: float = 0.75

    def __post_init__(self) -> None:
        if self.n_points < 1:
            raise ValueError("n_points must be >= 1")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must lie in [0, 1]")


@dataclass
class MatchResult:
    assignment: np.ndarray  # (N,) label index or EMPTY
    cost: np.ndarray  # (N, K)

    @property
    def total_cost(self) -> float:
        rows = np.flatnonzero(self.assignment != EMPTY)
        return float(self.cost[rows, self.assignment[rows]].sum())


@dataclass
class MaskTerm:
    mask_index: int
    label_index: int
    weight: float
    bce: float
    dice: float
    points: np.ndarray
    targets: np.ndarray

    @property
    def n_points(self) -> int:
        return int(self.points.shape[0])


@dataclass
class LossReport:
    total: float
    cls_term: float
    loc_term: float
    assignment: np.ndarray
    target_classes: np.ndarray
    terms: list[MaskTerm]

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "cls_term": self.cls_term,
            "loc_term": self.loc_term,
            "assignment": [int(a) for a in self.assignment],
            "per_mask": [
                {
                    "mask_index": t.mask_index,
                    "label_index": t.label_index,
                    "lambda": t.weight,
                    "bce": t.bce,
                    "dice": t.dice,
                    "n_points": t.n_points,
                }
                for t in self.terms
            ],
        }


def _check_points(points: np.ndarray, H: int, W: int) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if points.size:
        lo = points.min(axis=0)
        hi = points.max(axis=0)
        if lo[0] < 0 or lo[1] < 0 or hi[0] >= H or hi[1] >= W or np.isnan(points).any():
            raise ValueError(f"points must lie in [0, {H}) x [0, {W})")
    return points


def bilinear_corners(points: np.ndarray, H: int, W: int):
    """Flat corner indices and weights for bilinear lookup, borders clamped.

    Returns four ``(flat_index, weight)`` pairs into a row-major ``H x W``
    grid; the weights sum to one.
    """
    return _corners(_check_points(points, H, W), H, W)


def _corners(points: np.ndarray, H: int, W: int):
    r, c = points[:, 0], points[:, 1]
    r0 = r.astype(np.intp)  # floor, coordinates are non-negative
    c0 = c.astype(np.intp)
    fr, fc = r - r0, c - c0
    gr, gc = 1.0 - fr, 1.0 - fc
    i00 = r0 * W + c0
    i01 = i00 + (c0 < W - 1)
    dr = np.where(r0 < H - 1, W, 0)
    return ((i00, gr * gc), (i01, gr * fc), (i00 + dr, fr * gc), (i01 + dr, fr * fc))


def bilinear_weights(points: np.ndarray, H: int, W: int) -> tuple[np.ndarray, np.ndarray]:
    """Corner indices and weights as two ``(4, K)`` arrays, for scattering back onto a grid."""
    corners = bilinear_corners(points, H, W)
    return np.stack([c[0] for c in corners]), np.stack([c[1] for c in corners])


def _interp_finite(flat: np.ndarray, corners) -> np.ndarray:
    (i0, w0), (i1, w1), (i2, w2), (i3, w3) = corners
    return flat[..., i0] * w0 + flat[..., i1] * w1 + flat[..., i2] * w2 + flat[..., i3] * w3


def _interp(flat: np.ndarray, corners) -> np.ndarray:
    with np.errstate(invalid="ignore"):
        out = None
        for idx, w in corners:
            term = flat[..., idx] * w
            out = term if out is None else out + term
        bad = np.isnan(out)
        if bad.any():
            # 0 * inf: redo with zero-weight corners dropped
            masked = sum(np.where(w > 0, flat[..., idx] * w, 0.0) for idx, w in corners)
            out = np.where(bad, masked, out)
    return out


def bilinear_sample(grid: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Sample ``grid[..., H, W]`` at continuous points, giving ``(..., K)``.

    Corners with zero weight are skipped, so a point sitting exactly on a
    finite node is never contaminated by a neighbouring ``-inf``.
    """
    grid = np.asarray(grid, dtype=np.float64)
    H, W = grid.shape[-2:]
    flat = grid.reshape(grid.shape[:-2] + (H * W,))
    return _interp(flat, bilinear_corners(points, H, W))


def _split_counts(n_points: int, beta: float) -> tuple[int, int]:
    # small epsilon keeps e.g. 0.29 * 100 from flooring to 28
    n_top = int(math.floor(beta * n_points + 1e-9))
    return n_top, n_points - n_top


def uniform_points(H: int, W: int, n: int, rng: np.random.Generator) -> np.ndarray:
    pts = rng.random((n, 2)) * np.array([H, W], dtype=np.float64)
    pts[:, 0] = np.minimum(pts[:, 0], np.nextafter(H, 0))
    pts[:, 1] = np.minimum(pts[:, 1], np.nextafter(W, 0))
    return pts


def sample_points(
    affinity: np.ndarray, n_points: int, beta: float, rng: np.random.Generator
) -> np.ndarray:
    """Importance-sample up to ``n_points`` locations from an affinity map.

    Draws ``3 * n_points`` uniform candidates, keeps the ``floor(beta * n)``
    finite candidates with the highest affinity (earlier draws win ties),
    then adds ``n - floor(beta * n)`` candidates chosen uniformly without
    replacement from the remaining finite ones. Candidates with ``-inf``
    affinity are never returned, so the result may be shorter than
    ``n_points``.
    """
    if n_points < 1:
        raise ValueError("n_points must be >= 1")
    if not 0.0 <= beta <= 1.0:
        raise ValueError("beta must lie in [0, 1]")
    H, W = affinity.shape
    cand = uniform_points(H, W, 3 * n_points, rng)
    vals = _interp(np.asarray(affinity, dtype=np.float64).reshape(-1), _corners(cand, H, W))
    order = _finite_order(vals[None])[0]
    return cand[_select(order, n_points, beta, rng)]


def _finite_order(vals: np.ndarray) -> list[np.ndarray]:
    """Per row: indices of finite values, highest first, earlier index on ties."""
    finite = np.isfinite(vals)
    order = np.argsort(-np.where(finite, vals, -np.inf), axis=-1, kind="stable")
    counts = finite.sum(axis=-1)
    return [order[r, : counts[r]] for r in range(vals.shape[0])]


def _select(order: np.ndarray, n_points: int, beta: float, rng: np.random.Generator) -> np.ndarray:
    n_top, n_rand = _split_counts(n_points, beta)
    top = order[:n_top]
    rest = np.sort(order[n_top:])
    n_rand = min(n_rand, rest.size)
    picked = rest[rng.choice(rest.size, size=n_rand, replace=False)] if n_rand else rest[:0]
    return np.concatenate([top, picked])


def _segment_loss(logits: np.ndarray, targets: np.ndarray, seg: np.ndarray, n_seg: int):
    """Per-segment BCE and dice for concatenated point sets; ``seg`` gives each point's segment."""
    p_raw = sigmoid(logits)
    p = np.clip(p_raw, PROB_EPS, 1 - PROB_EPS)
    t = targets.astype(np.float64)
    n = np.bincount(seg, minlength=n_seg)
    bce_sum = np.bincount(seg, -(t * np.log(p) + (1 - t) * np.log(1 - p)), minlength=n_seg)
    bce = np.divide(bce_sum, n, out=np.zeros(n_seg), where=n > 0)
    a = 2.0 * np.bincount(seg, p_raw * t, minlength=n_seg) + 1.0
    b = np.bincount(seg, p_raw, minlength=n_seg) + np.bincount(seg, t, minlength=n_seg) + 1.0
    return bce, 1.0 - a / b


def _segment_loss_grad(
    logits: np.ndarray, targets: np.ndarray, seg: np.ndarray, n_seg: int, w_bce: float, w_dice: float
) -> np.ndarray:
    """Per-point gradient of :func:`_segment_loss`, weighted as in :func:`point_mask_loss_grad`."""
    p = sigmoid(logits)
    t = targets.astype(np.float64)
    n = np.bincount(seg, minlength=n_seg)[seg]
    live = (p > PROB_EPS) & (p < 1 - PROB_EPS)
    g_bce = np.where(live, (p - t) / n, 0.0)
    a = (2.0 * np.bincount(seg, p * t, minlength=n_seg) + 1.0)[seg]
    b = (np.bincount(seg, p, minlength=n_seg) + np.bincount(seg, t, minlength=n_seg) + 1.0)[seg]
    g_dice = -(2.0 * t * b - a) / (b * b) * p * (1 - p)
    return w_bce * g_bce + w_dice * g_dice


def _row_interp(flat: np.ndarray, rows: np.ndarray, corners) -> np.ndarray:
    """Like :func:`_interp` but point ``k`` reads grid row ``rows[k]``."""
    with np.errstate(invalid="ignore"):
        out = sum(flat[rows, idx] * w for idx, w in corners)
        bad = np.isnan(out)
        if bad.any():
            masked = sum(np.where(w > 0, flat[rows, idx] * w, 0.0) for idx, w in corners)
            out = np.where(bad, masked, out)
    return out


def point_mask_loss(logits: np.ndarray, targets: np.ndarray) -> tuple[float, float]:
    """BCE (mean over points) and soft dice for logits/targets at sampled points."""
    if logits.size == 0:
        return 0.0, 0.0
    p_raw = sigmoid(logits)
    p = np.clip(p_raw, PROB_EPS, 1 - PROB_EPS)
    t = targets.astype(np.float64)
    bce = float(np.mean(-(t * np.log(p) + (1 - t) * np.log(1 - p))))
    dice = 1.0 - (2.0 * np.sum(p_raw * t) + 1.0) / (np.sum(p_raw) + np.sum(t) + 1.0)
    return bce, float(dice)


def point_mask_loss_grad(
    logits: np.ndarray, targets: np.ndarray, w_bce: float, w_dice: float
) -> np.ndarray:
    """Gradient of ``w_bce * bce + w_dice * dice`` with respect to each logit."""
    if logits.size == 0:
        return np.zeros(0)
    p = sigmoid(logits)
    t = targets.astype(np.float64)
    n = logits.size
    # clamped probabilities have zero BCE gradient
    live = (p > PROB_EPS) & (p < 1 - PROB_EPS)
    g_bce = np.where(live, (p - t) / n, 0.0)
    a = 2.0 * np.sum(p * t) + 1.0
    b = np.sum(p) + np.sum(t) + 1.0
    g_dice = -(2.0 * t * b - a) / (b * b) * p * (1 - p)
    return w_bce * g_bce + w_dice * g_dice


def label_targets(label_mask: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Hard targets at points: bilinear value of the binary mask, >= 0.5 counts as foreground."""
    return bilinear_sample(np.asarray(label_mask, dtype=np.float64), points) >= 0.5


def mask_loss_at_points(
    student_s: np.ndarray, label_mask: np.ndarray, points: np.ndarray
) -> tuple[float, float]:
    """``(bce, dice)`` of one student mask against one label mask at ``points``."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if points.shape[0] == 0:
        return 0.0, 0.0
    return point_mask_loss(bilinear_sample(student_s, points), label_targets(label_mask, points))


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def class_loss(class_logits: np.ndarray, target_class: int, weights: LossWeights) -> float:
    """Weighted cross-entropy; ``target_class`` is 1-based, ``C + 1`` is no-object."""
    class_logits = np.asarray(class_logits, dtype=np.float64)
    n_cls = class_logits.shape[-1]
    if not 1 <= target_class <= n_cls:
        raise ValueError(f"target_class must lie in [1, {n_cls}]")
    w = weights.w_noobj if target_class == n_cls else weights.w_cls
    return float(-w * _log_softmax(class_logits)[target_class - 1])


def matching_cost(
    pred: MaskPrediction, labels: PseudoLabel, weights: LossWeights, points: np.ndarray
) -> np.ndarray:
    """Cost matrix ``(N, K)``: class loss plus weighted BCE and dice at shared points."""
    logp = _log_softmax(pred.class_logits)
    cls = -weights.w_cls * logp[:, labels.classes - 1]
    H, W = pred.hw
    corners = bilinear_corners(points, H, W)
    s = _interp_finite(pred.mask_logits.reshape(pred.num_masks, H * W), corners)  # (N, P)
    t = (_interp_finite(labels.masks.reshape(len(labels), H * W).astype(np.float64), corners) >= 0.5).astype(np.float64)
    p_raw = sigmoid(s)
    p = np.clip(p_raw, PROB_EPS, 1 - PROB_EPS)
    bce = -(np.log(p) @ t.T + np.log(1 - p) @ (1 - t).T) / points.shape[0]
    dice = 1.0 - (2.0 * p_raw @ t.T + 1.0) / (p_raw.sum(1)[:, None] + t.sum(1)[None, :] + 1.0)
    return cls + weights.w_bce * bce + weights.w_dice * dice


def match_masks(
    pred: MaskPrediction,
    labels: PseudoLabel,
    weights: LossWeights,
    rng: np.random.Generator,
    n_points: int = 12544,
) -> MatchResult:
    """Minimum-cost injection of labels into predictions; unmatched predictions are EMPTY."""
    n, k = pred.num_masks, len(labels)
    if k > n:
        raise ValueError(f"{k} labels but only {n} predictions")
    assignment = np.full(n, EMPTY, dtype=np.int64)
    if k == 0:
        return MatchResult(assignment, np.zeros((n, 0)))
    H, W = pred.hw
    points = uniform_points(H, W, min(n_points, H * W), rng)
    cost = matching_cost(pred, labels, weights, points)
    rows, cols = linear_sum_assignment(cost)
    assignment[rows] = cols
    return MatchResult(assignment, cost)


def class_term(class_logits: np.ndarray, target_classes: np.ndarray, weights: LossWeights) -> float:
    """Sum of :func:`class_loss` over all predictions, vectorised."""
    n_cls = class_logits.shape[1]
    logp = _log_softmax(np.asarray(class_logits, dtype=np.float64))
    w = np.where(target_classes == n_cls, weights.w_noobj, weights.w_cls)
    return float(-(w * logp[np.arange(len(target_classes)), target_classes - 1]).sum())


def _target_classes(match: MatchResult, labels: PseudoLabel, n_cls: int) -> np.ndarray:
    out = np.full(match.assignment.shape, n_cls, dtype=np.int64)
    hit = match.assignment != EMPTY
    out[hit] = labels.classes[match.assignment[hit]]
    return out


def target_loss(
    student: MaskPrediction,
    labels: PseudoLabel,
    lambdas: np.ndarray,
    affinities: np.ndarray,
    cfg: LossConfig,
    seed: int,
) -> LossReport:
    """Student loss against hard labels with per-label weights on the mask term.

    ``lambdas[j]`` scales the mask loss of whichever prediction is matched to
    label ``j``; ``affinities`` is ``(N, H, W)``, one sampling map per
    student mask. Matching draws from ``stream(seed, "match")`` and mask
    ``i`` samples its points from ``stream(seed, "points", i)``.
    """
    lambdas = np.asarray(lambdas, dtype=np.float64)
    if lambdas.shape != (len(labels),):
        raise ValueError("need one lambda per label")
    if affinities.shape != student.mask_logits.shape:
        raise ValueError("need one affinity map per student mask")
    w = cfg.weights
    match = match_masks(student, labels, w, rngmod.stream(seed, "match"), cfg.n_points)
    classes = _target_classes(match, labels, student.num_classes + 1)
    cls_term = class_term(student.class_logits, classes, w)

    H, W = student.hw
    rows = np.flatnonzero(match.assignment != EMPTY)
    cols = match.assignment[rows]
    n_cand = 3 * cfg.n_points
    gens = [rngmod.stream(seed, "points", int(i)) for i in rows]
    cand = np.stack([uniform_points(H, W, n_cand, g) for g in gens]) if gens else np.zeros((0, n_cand, 2))
    cand = cand.reshape(-1, 2)
    corners = _corners(cand, H, W)
    aff_flat = np.asarray(affinities, dtype=np.float64).reshape(student.num_masks, H * W)
    vals = _row_interp(aff_flat, np.repeat(rows, n_cand), corners).reshape(rows.size, n_cand)
    picks = [r * n_cand + _select(o, cfg.n_points, cfg.beta, g)
             for r, (o, g) in enumerate(zip(_finite_order(vals), gens))]
    sel = np.concatenate(picks) if picks else np.zeros(0, dtype=np.intp)
    seg = np.repeat(np.arange(rows.size), [p.size for p in picks])
    sub = [(idx[sel], wt[sel]) for idx, wt in corners]
    logit_flat = student.mask_logits.reshape(student.num_masks, H * W)
    label_flat = labels.masks.reshape(len(labels), H * W)
    logits = sum(logit_flat[rows[seg], idx] * wt for idx, wt in sub)
    tgt = sum(label_flat[cols[seg], idx] * wt for idx, wt in sub) >= 0.5
    bce, dice = _segment_loss(logits, tgt, seg, rows.size)
    lam = lambdas[cols]
    loc_term = float(np.sum(lam * (w.w_bce * bce + w.w_dice * dice)))
    bounds = np.concatenate([[0], np.cumsum([p.size for p in picks])]).astype(int)
    pts = cand[sel]
    terms = [
        MaskTerm(int(rows[r]), int(cols[r]), float(lam[r]), float(bce[r]), float(dice[r]),
                 pts[bounds[r]:bounds[r + 1]], tgt[bounds[r]:bounds[r + 1]])
        for r in range(rows.size)
    ]
    return LossReport(
        total=float(cls_term + loc_term),
        cls_term=float(cls_term),
        loc_term=float(loc_term),
        assignment=match.assignment,
        target_classes=classes,
        terms=terms,
    )


def concat_terms(terms: list[MaskTerm]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack the point sets of several terms: ``(points, targets, segment)`` with one segment per term."""
    if not terms:
        return np.zeros((0, 2)), np.zeros(0, dtype=bool), np.zeros(0, dtype=np.intp)
    seg = np.repeat(np.arange(len(terms)), [t.n_points for t in terms])
    return (
        np.concatenate([t.points for t in terms]),
        np.concatenate([t.targets for t in terms]),
        seg,
    )


def baseline_consistency_loss(
    student: MaskPrediction, labels: PseudoLabel, cfg: LossConfig, seed: int
) -> float:
    """Unweighted loss against hard labels with purely random point subsets.

    Uses the same random streams as :func:`target_loss`, so with all weights
    at one, ``beta = 0`` and a finite affinity the two agree.
    """
    w = cfg.weights
    match = match_masks(student, labels, w, rngmod.stream(seed, "match"), cfg.n_points)
    classes = _target_classes(match, labels, student.num_classes + 1)
    total = sum(class_loss(student.class_logits[i], int(c), w) for i, c in enumerate(classes))
    H, W = student.hw
    for i in np.flatnonzero(match.assignment != EMPTY):
        gen = rngmod.stream(seed, "points", int(i))
        cand = uniform_points(H, W, 3 * cfg.n_points, gen)
        pts = cand[gen.choice(cand.shape[0], size=cfg.n_points, replace=False)]
        bce, dice = mask_loss_at_points(student.mask_logits[i], labels.masks[match.assignment[i]], pts)
        total += w.w_bce * bce + w.w_dice * dice
    return float(total)


__all__ = [
    "EMPTY",
    "LossConfig",
    "LossReport",
    "LossWeights",
    "MaskTerm",
    "MatchResult",
    "baseline_consistency_loss",
    "bilinear_corners",
    "bilinear_weights",
    "concat_terms",
    "bilinear_sample",
    "class_loss",
    "label_targets",
    "mask_loss_at_points",
    "match_masks",
    "matching_cost",
    "point_mask_loss",
    "point_mask_loss_grad",
    "sample_points",
    "target_loss",
    "uniform_points",
]
