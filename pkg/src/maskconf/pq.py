"""Panoptic quality (PQ = SQ * RQ) accumulation.

Matching follows the usual rule: a predicted and a ground-truth segment of
the same class match when their IoU exceeds 0.5. Ground-truth void (id 0)
is left out of the union, and an unmatched prediction lying more than half
on void is not a false positive. Crowd regions are not modelled.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .panoptic import PanopticSegmentation


@dataclass
class PqStats:
    tp: dict[int, int] = field(default_factory=dict)
    fp: dict[int, int] = field(default_factory=dict)
    fn: dict[int, int] = field(default_factory=dict)
    iou_sum: dict[int, float] = field(default_factory=dict)

    def _bump(self, table: dict, cls: int, amount=1) -> None:
        table[cls] = table.get(cls, 0) + amount

    def classes(self) -> list[int]:
        return sorted(set(self.tp) | set(self.fp) | set(self.fn) | set(self.iou_sum))

    def merge(self, other: "PqStats") -> "PqStats":
        out = PqStats(dict(self.tp), dict(self.fp), dict(self.fn), dict(self.iou_sum))
        for name in ("tp", "fp", "fn", "iou_sum"):
            for cls, v in getattr(other, name).items():
                out._bump(getattr(out, name), cls, v)
        return out

    def to_dict(self) -> dict:
        return {
            str(c): {
                "tp": self.tp.get(c, 0),
                "fp": self.fp.get(c, 0),
                "fn": self.fn.get(c, 0),
                "iou_sum": self.iou_sum.get(c, 0.0),
            }
            for c in self.classes()
        }


def pq_accumulate(
    pred: PanopticSegmentation, gt: PanopticSegmentation, stats: PqStats | None = None
) -> PqStats:
    if pred.id_map.shape != gt.id_map.shape:
        raise ValueError(f"size mismatch: {pred.id_map.shape} vs {gt.id_map.shape}")
    stats = stats if stats is not None else PqStats()
    # joint histogram of (gt id, pred id) pairs, void included as id 0
    g_ids = gt.id_map.ravel().astype(np.int64)
    p_ids = pred.id_map.ravel().astype(np.int64)
    stride = int(p_ids.max(initial=0)) + 1
    hist = np.bincount(g_ids * stride + p_ids)
    keys = np.flatnonzero(hist)
    inter = {(int(k // stride), int(k % stride)): int(hist[k]) for k in keys}
    # areas from the maps themselves, not from segment metadata
    gt_count = np.bincount(g_ids)
    pred_count = np.bincount(p_ids)
    gt_area = {s.segment_id: int(gt_count[s.segment_id]) if s.segment_id < gt_count.size else 0 for s in gt.segments}
    pred_area = {s.segment_id: int(pred_count[s.segment_id]) if s.segment_id < pred_count.size else 0
                 for s in pred.segments}
    gt_cls = gt.class_of()
    pred_cls = pred.class_of()

    matched_gt: set[int] = set()
    matched_pred: set[int] = set()
    for (g, p), n in inter.items():
        if g == 0 or p == 0 or gt_cls[g] != pred_cls[p]:
            continue
        union = pred_area[p] + gt_area[g] - n - inter.get((0, p), 0)
        iou = n / union
        if iou > 0.5:
            matched_gt.add(g)
            matched_pred.add(p)
            stats._bump(stats.tp, gt_cls[g])
            stats._bump(stats.iou_sum, gt_cls[g], iou)

    for s in gt.segments:
        if s.segment_id not in matched_gt:
            stats._bump(stats.fn, s.class_id)
    for s in pred.segments:
        if s.segment_id in matched_pred:
            continue
        area = pred_area[s.segment_id]
        if area and inter.get((0, s.segment_id), 0) / area > 0.5:
            continue
        stats._bump(stats.fp, s.class_id)
    return stats


def pq_finalize(stats: PqStats, class_subset: Iterable[int] | None = None) -> dict:
    """Per-class PQ/SQ/RQ and their mean over classes that occur at all."""
    subset = list(class_subset) if class_subset is not None else stats.classes()
    if not subset:
        raise ValueError("class subset is empty")
    per_class = {}
    for c in subset:
        tp, fp, fn = stats.tp.get(c, 0), stats.fp.get(c, 0), stats.fn.get(c, 0)
        iou = stats.iou_sum.get(c, 0.0)
        denom = tp + 0.5 * fp + 0.5 * fn
        if denom == 0:
            continue
        per_class[c] = {
            "pq": iou / denom,
            "sq": iou / tp if tp else 0.0,
            "rq": tp / denom,
        }
    if per_class:
        mean = {k: float(np.mean([v[k] for v in per_class.values()])) for k in ("pq", "sq", "rq")}
    else:
        mean = {"pq": 0.0, "sq": 0.0, "rq": 0.0}
    return {"per_class": per_class, "mean": mean, "n_classes": len(per_class)}
