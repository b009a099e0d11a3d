"""Segment-level copy-paste mixing of two panoptic scenes."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .panoptic import PanopticSegmentation
from .tensor_store import Segment

# mask_index given to segments pasted from the source scene
PASTED = -1


@dataclass
class LabeledImage:
    image: np.ndarray  # (Ch, H, W)
    panoptic: PanopticSegmentation

    def __post_init__(self) -> None:
        self.image = np.asarray(self.image)
        if self.image.ndim != 3 or self.image.shape[1:] != self.panoptic.id_map.shape:
            raise ValueError("image must be (Ch, H, W) matching the panoptic map")


def segmix(
    source: LabeledImage,
    target: LabeledImage,
    rng: np.random.Generator,
    return_footprint: bool = False,
):
    """Paste ``ceil(K / 2)`` randomly chosen source segments onto ``target``.

    Pasted pixels take the source image values and the source labels; the
    target keeps everything else. Target segments that lose all their pixels
    are dropped. Output segments are renumbered from 1: surviving target
    segments first (keeping their ``mask_index``), then the pasted ones with
    ``mask_index = PASTED``.
    """
    if source.image.shape != target.image.shape:
        raise ValueError(f"size mismatch: {source.image.shape} vs {target.image.shape}")
    src_segs = source.panoptic.segments
    k = math.ceil(len(src_segs) / 2)
    chosen = sorted(rng.choice(len(src_segs), size=k, replace=False).tolist()) if k else []
    src_ids = source.panoptic.id_map
    picked = np.zeros(int(src_ids.max(initial=0)) + 1, dtype=bool)
    picked[[src_segs[c].segment_id for c in chosen]] = True
    footprint = picked[src_ids]

    image = np.where(footprint[None], source.image, target.image)
    id_map = np.zeros_like(target.panoptic.id_map)
    segments = []
    next_id = 1
    for seg in target.panoptic.segments:
        region = (target.panoptic.id_map == seg.segment_id) & ~footprint
        area = int(region.sum())
        if area == 0:
            continue
        id_map[region] = next_id
        segments.append(Segment(next_id, seg.class_id, seg.mask_index, area))
        next_id += 1
    for c in chosen:
        seg = src_segs[c]
        region = src_ids == seg.segment_id
        id_map[region] = next_id
        segments.append(Segment(next_id, seg.class_id, PASTED, int(region.sum())))
        next_id += 1
    out = LabeledImage(image.astype(target.image.dtype), PanopticSegmentation(id_map, segments))
    if return_footprint:
        return out, footprint
    return out
