"""Panoptic inference for mask-classification models.

Class ids are 1-based: real classes are ``1..C`` and ``C + 1`` is the
no-object class, so column ``k`` of ``class_logits`` holds class ``k + 1``.
Segment id 0 in an id map means void.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .tensor_store import Segment


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(np.asarray(x, dtype=np.float64))


@dataclass
class MaskPrediction:
    """Per-query class logits ``(N, C+1)`` and mask logits ``(N, H, W)``."""

    class_logits: np.ndarray
    mask_logits: np.ndarray

    def __post_init__(self) -> None:
        self.class_logits = np.asarray(self.class_logits, dtype=np.float64)
        self.mask_logits = np.asarray(self.mask_logits, dtype=np.float64)
        if self.class_logits.ndim != 2 or self.class_logits.shape[1] < 2:
            raise ValueError("class_logits must have shape (N, C+1) with C >= 1")
        if self.mask_logits.ndim != 3:
            raise ValueError("mask_logits must have shape (N, H, W)")
        if self.class_logits.shape[0] != self.mask_logits.shape[0]:
            raise ValueError("class_logits and mask_logits disagree on N")
        if self.class_logits.shape[0] < 1:
            raise ValueError("need at least one mask")
        if not (np.isfinite(self.class_logits).all() and np.isfinite(self.mask_logits).all()):
            raise ValueError("logits must be finite")

    @property
    def num_masks(self) -> int:
        return self.class_logits.shape[0]

    @property
    def num_classes(self) -> int:
        return self.class_logits.shape[1] - 1

    @property
    def hw(self) -> tuple[int, int]:
        return self.mask_logits.shape[1], self.mask_logits.shape[2]


@dataclass
class PanopticSegmentation:
    id_map: np.ndarray
    segments: list[Segment] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.id_map = np.asarray(self.id_map, dtype=np.uint32)
        if self.id_map.ndim != 2:
            raise ValueError("id_map must be 2-D")

    def validate(self) -> None:
        ids = [s.segment_id for s in self.segments]
        if len(set(ids)) != len(ids) or any(i < 1 for i in ids):
            raise ValueError("segment ids must be unique and >= 1")
        present = np.unique(self.id_map)
        present = set(present[present > 0].tolist())
        if present != set(ids):
            raise ValueError("id_map and segment table disagree")
        counts = np.bincount(self.id_map.ravel(), minlength=max(ids, default=0) + 1)
        for s in self.segments:
            if s.area != counts[s.segment_id] or s.area < 1:
                raise ValueError(f"segment {s.segment_id} area mismatch")

    def class_of(self) -> dict[int, int]:
        return {s.segment_id: s.class_id for s in self.segments}


@dataclass
class PseudoLabel:
    """Hard labels: disjoint boolean masks ``(K, H, W)`` with class ids ``(K,)``."""

    masks: np.ndarray
    classes: np.ndarray

    def __post_init__(self) -> None:
        self.masks = np.asarray(self.masks, dtype=bool)
        self.classes = np.asarray(self.classes, dtype=np.int64)
        if self.masks.ndim != 3 or self.masks.shape[0] != self.classes.shape[0]:
            raise ValueError("masks must be (K, H, W) with one class per mask")

    def __len__(self) -> int:
        return self.classes.shape[0]


@dataclass(frozen=True)
class FusionConfig:
    class_threshold: float = 0.8
    overlap_threshold: float = 0.8
    min_area: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.class_threshold <= 1.0:
            raise ValueError("class_threshold must lie in [0, 1]")
        if not 0.0 <= self.overlap_threshold <= 1.0:
            raise ValueError("overlap_threshold must lie in [0, 1]")
        if self.min_area < 0:
            raise ValueError("min_area must be >= 0")


def pixel_confidence(pred: MaskPrediction) -> np.ndarray:
    """Pixel-level confidence ``rho``: max real-class probability times mask sigmoid."""
    probs = softmax(pred.class_logits, axis=1)
    score = probs[:, :-1].max(axis=1)
    return score[:, None, None] * sigmoid(pred.mask_logits)


def fuse_panoptic(
    pred: MaskPrediction, cfg: FusionConfig | None = None, rho: np.ndarray | None = None
) -> PanopticSegmentation:
    """Fuse per-query masks into a panoptic map by per-pixel argmax of ``rho``.

    Queries are kept when their top class is real and its probability reaches
    ``class_threshold``. Each pixel goes to the kept query with the largest
    ``rho`` (lowest index on ties). A query's claimed region is dropped to
    void if it covers less than ``overlap_threshold`` of the query's own
    ``sigmoid > 0.5`` area, or if it is smaller than ``min_area``. Dropped
    pixels are not reassigned. Surviving segments are numbered 1, 2, ... in
    query order. ``rho`` may pass in a precomputed :func:`pixel_confidence`.
    """
    cfg = cfg or FusionConfig()
    H, W = pred.hw
    probs = softmax(pred.class_logits, axis=1)
    labels = probs.argmax(axis=1)
    scores = probs[:, :-1].max(axis=1)
    keep = (labels != pred.num_classes) & (scores >= cfg.class_threshold)
    id_map = np.zeros((H, W), dtype=np.uint32)
    kept = np.flatnonzero(keep)
    if kept.size == 0:
        return PanopticSegmentation(id_map, [])

    if rho is None:
        rho = scores[kept, None, None] * sigmoid(pred.mask_logits[kept])
    else:
        rho = rho[kept]
    owner = rho.argmax(axis=0)  # first maximum wins ties
    fg_area = (pred.mask_logits[kept] > 0).reshape(kept.size, -1).sum(axis=1)
    claimed = np.bincount(owner.ravel(), minlength=kept.size)

    segments = []
    next_id = 1
    for j, q in enumerate(kept):
        area = int(claimed[j])
        if area == 0:
            continue
        if area < cfg.overlap_threshold * fg_area[j]:
            continue
        if area < cfg.min_area:
            continue
        id_map[owner == j] = next_id
        segments.append(
            Segment(segment_id=next_id, class_id=int(labels[q]) + 1, mask_index=int(q), area=area)
        )
        next_id += 1
    return PanopticSegmentation(id_map, segments)


def to_pseudolabel(pan: PanopticSegmentation) -> PseudoLabel:
    H, W = pan.id_map.shape
    if not pan.segments:
        return PseudoLabel(np.zeros((0, H, W), dtype=bool), np.zeros(0, dtype=np.int64))
    ids = np.array([s.segment_id for s in pan.segments], dtype=np.uint32)
    masks = pan.id_map[None, :, :] == ids[:, None, None]
    return PseudoLabel(masks, np.array([s.class_id for s in pan.segments]))


def merge_by_class(pan: PanopticSegmentation, classes=None) -> PanopticSegmentation:
    """Merge all segments of the same class into one (stuff-style labelling).

    Only classes in ``classes`` are merged (all when ``None``). The merged
    segment keeps the id position and ``mask_index`` of its first member.
    """
    groups: dict[int, list[Segment]] = {}
    order = []
    for seg in pan.segments:
        key = seg.class_id if classes is None or seg.class_id in classes else -seg.segment_id
        if key not in groups:
            groups[key] = []
            order.append(key)
        groups[key].append(seg)
    lut = np.zeros(int(pan.id_map.max(initial=0)) + 1, dtype=pan.id_map.dtype)
    for new_id, key in enumerate(order, start=1):
        lut[[m.segment_id for m in groups[key]]] = new_id
    id_map = lut[pan.id_map]
    areas = np.bincount(id_map.ravel().astype(np.int64), minlength=len(order) + 1)
    segments = []
    for new_id, key in enumerate(order, start=1):
        first = groups[key][0]
        segments.append(Segment(new_id, first.class_id, first.mask_index, int(areas[new_id])))
    return PanopticSegmentation(id_map, segments)
