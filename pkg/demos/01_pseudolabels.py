"""
From teacher logits to weighted pseudo-labels
=============================================

A teacher emits N masks with class scores. Fusion gives every pixel to the
mask with the highest pixel confidence (class score times mask sigmoid),
then the mask-wide scale of each segment is the share of its pixels that
are confident. Run with ``python demos/01_pseudolabels.py``.
"""

import numpy as np

from maskconf.confidence import mask_lambda, sampling_affinity, teacher_phi
from maskconf.panoptic import MaskPrediction, fuse_panoptic, pixel_confidence

gen = np.random.default_rng(7)
H, W = 12, 24

# three blobs plus one weak query that should not survive the class threshold
rr, cc = np.mgrid[0:H, 0:W]
centres = [(3, 4), (8, 12), (4, 19), (6, 6)]
mask_logits = np.stack([12.0 - 2.5 * np.hypot(rr - r, cc - c) for r, c in centres])
mask_logits += gen.normal(scale=0.5, size=mask_logits.shape)
class_logits = np.array([
    [9.0, 0.0, 0.0, 0.0],
    [0.0, 9.0, 0.0, 0.0],
    [0.0, 0.0, 2.5, 0.0],  # class score ~0.84: kept, but never very confident
    [0.5, 0.0, 0.0, 1.0],  # argmax is no-object: dropped
])
pred = MaskPrediction(class_logits, mask_logits)

rho = pixel_confidence(pred)
pan = fuse_panoptic(pred)
print("segment map (0 = void):")
for row in pan.id_map:
    print("  " + "".join(str(v) if v else "." for v in row))

lam = mask_lambda(rho, pan, tau1=0.99)
for seg, l in zip(pan.segments, lam):
    print(f"segment {seg.segment_id}: class {seg.class_id}, query {seg.mask_index}, "
          f"area {seg.area:3d}, lambda {l:.2f}")

# points are only drawn where the teacher is at least tau2 confident
phi = teacher_phi(rho)
aff = sampling_affinity(pred.mask_logits, phi, tau2=0.8)
print(f"\nteacher confidence >= 0.8 on {np.mean(phi >= 0.8):.0%} of the pixels")
print("sampleable pixels for query 0 (# = finite affinity):")
for row in np.isfinite(aff[0]):
    print("  " + "".join("#" if v else "." for v in row))
