"""Teacher confidence: per-pixel map, per-mask loss weights and point affinity."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Mapping

import numpy as np

from .panoptic import PanopticSegmentation, sigmoid

AffinityMode = Literal["all_masks", "per_mask"]


@dataclass(frozen=True)
class Thresholds:
    tau1: float = 0.99
    tau2: float = 0.8
    tau_ils: float = 0.968

    def __post_init__(self) -> None:
        for name in ("tau1", "tau2", "tau_ils"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")


@dataclass
class ConfidenceBundle:
    rho: np.ndarray
    phi: np.ndarray
    lambdas: np.ndarray


def teacher_phi(rho: np.ndarray) -> np.ndarray:
    """Per-pixel maximum of ``rho`` over the mask axis.

    Unclaimed pixels and pixels claimed only by masks with a weak class
    score therefore get low confidence.
    """
    rho = np.asarray(rho)
    if rho.ndim != 3:
        raise ValueError("rho must be (N, H, W)")
    if rho.shape[0] == 0:
        raise ValueError("rho has no masks")
    return rho.max(axis=0)


def mask_lambda(
    rho: np.ndarray,
    pan: PanopticSegmentation,
    tau1: float = 0.99,
    class_tau1: Mapping[int, float] | None = None,
) -> np.ndarray:
    """Fraction of each segment's pixels whose own-mask ``rho`` exceeds ``tau1``.

    One value per entry of ``pan.segments``, in table order. ``class_tau1``
    overrides the threshold for specific class ids (e.g. a looser value for
    stuff classes).
    """
    out = np.empty(len(pan.segments), dtype=np.float64)
    for k, seg in enumerate(pan.segments):
        tau = tau1 if class_tau1 is None else class_tau1.get(seg.class_id, tau1)
        fg = pan.id_map == seg.segment_id
        area = int(fg.sum())
        if area == 0:
            raise ValueError(f"segment {seg.segment_id} has no pixels")
        out[k] = np.count_nonzero(rho[seg.mask_index][fg] > tau) / area
    return out


def mask_lambda_onehot(rho: np.ndarray, tau1: float = 0.99) -> np.ndarray:
    """Per-query weights computed through argmax -> one-hot -> thresholded count.

    Returns one value per query (``nan`` for queries that own no pixel). Used
    to cross-check :func:`mask_lambda` when no query is suppressed by fusion.
    """
    n = rho.shape[0]
    owner = rho.argmax(axis=0)
    onehot = owner[None] == np.arange(n)[:, None, None]
    confident = rho > tau1
    num = (onehot & confident).reshape(n, -1).sum(axis=1)
    den = onehot.reshape(n, -1).sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(den > 0, num / np.maximum(den, 1), np.nan)


def image_lambda(phi: np.ndarray, tau_ils: float = 0.968) -> float:
    """Image-wide weight: share of pixels whose teacher confidence exceeds ``tau_ils``."""
    phi = np.asarray(phi)
    return float(np.count_nonzero(phi > tau_ils) / phi.size)


def per_mask_confidence(teacher_s: np.ndarray) -> np.ndarray:
    """Alternative teacher confidence that looks only at one mask: ``sigmoid(|s|)``."""
    return sigmoid(np.abs(teacher_s))


def sampling_affinity(
    student_s: np.ndarray,
    teacher_conf: np.ndarray,
    tau2: float = 0.8,
    mode: AffinityMode = "all_masks",
) -> np.ndarray:
    """Point-sampling affinity for one student mask (or a stack of them).

    ``-inf`` where the teacher confidence is below ``tau2``, else ``-|s|``,
    so confident-teacher pixels near the student's decision boundary are
    preferred. ``mode`` only documents where ``teacher_conf`` came from:
    the all-masks map (shape ``(H, W)``, broadcast over masks) or per-mask
    values from :func:`per_mask_confidence` (same shape as ``student_s``).
    """
    student_s = np.asarray(student_s, dtype=np.float64)
    teacher_conf = np.asarray(teacher_conf, dtype=np.float64)
    if not np.isfinite(student_s).all():
        raise ValueError("student logits must be finite")
    if mode == "all_masks":
        if teacher_conf.shape != student_s.shape[-2:]:
            raise ValueError("all_masks confidence must be (H, W)")
    elif mode == "per_mask":
        if teacher_conf.shape != student_s.shape:
            raise ValueError("per_mask confidence must match the student logits")
    else:
        raise ValueError(f"unknown mode {mode!r}")
    aff = -np.abs(student_s)
    return np.where(teacher_conf < tau2, -np.inf, aff)
