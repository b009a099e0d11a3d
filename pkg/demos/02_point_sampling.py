"""
Where do the loss points go?
============================

Loss points are drawn from an oversized uniform pool: the most uncertain
75% of the budget comes from the top of the pool, the rest at random.
With confidence filtering, locations the teacher is unsure about get an
affinity of -inf and never enter the pool.
"""

import numpy as np

from maskconf import rng as rngmod
from maskconf.confidence import sampling_affinity
from maskconf.match_loss import sample_points

H = W = 32
gen = rngmod.stream(0, "demo")
logits = gen.normal(scale=2.0, size=(1, H, W))

# the teacher is unsure about the left third of the image
conf = np.full((H, W), 0.95)
conf[:, : W // 3] = 0.5

plain = sample_points(-np.abs(logits[0]), 300, 0.75, rngmod.stream(0, "points"))
filtered = sample_points(sampling_affinity(logits, conf, 0.8)[0], 300, 0.75, rngmod.stream(0, "points"))


def share_left(points):
    return np.mean(points[:, 1] < W // 3 - 1)


print(f"uncertainty sampling:         {len(plain)} points, {share_left(plain):.0%} in the unsure band")
print(f"confidence-filtered sampling: {len(filtered)} points, {share_left(filtered):.0%} in the unsure band")

# the importance part concentrates near the decision boundary s = 0
vals = np.abs(logits[0][filtered[:, 0].astype(int), filtered[:, 1].astype(int)])
print(f"median |s| at the first 225 points: {np.median(vals[:225]):.2f}, "
      f"at the 75 random ones: {np.median(vals[225:]):.2f}")
