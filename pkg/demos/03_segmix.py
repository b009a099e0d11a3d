"""
Mixing source segments into a target scene
==========================================

Half of the source segments (rounded up) are pasted onto a target scene;
labels follow the pixels. The footprint tells which pixels are ground
truth from the source and which carry the teacher's pseudo-label.
"""

import numpy as np

from maskconf import rng as rngmod
from maskconf.segmix import PASTED, segmix
from maskconf.simulator import World, WorldConfig

world = World(WorldConfig(H=16, W=32, n_segments=3), embed_dim=8, seed=3)
src = world.scene(rngmod.stream(3, "src"), "source")
tgt = world.scene(rngmod.stream(3, "tgt"), "target")
mixed, footprint = segmix(src, tgt, rngmod.stream(3, "mix"), return_footprint=True)


def show(title, id_map):
    print(title)
    for row in id_map:
        print("  " + "".join(str(v) if v else "." for v in row))


show("source", src.panoptic.id_map)
show("target", tgt.panoptic.id_map)
show("mixed", mixed.panoptic.id_map)
for seg in mixed.panoptic.segments:
    origin = "pasted" if seg.mask_index == PASTED else "target"
    print(f"segment {seg.segment_id}: class {seg.class_id}, {origin}, area {seg.area}")
print(f"{footprint.mean():.0%} of the pixels come from the source")
assert np.array_equal(mixed.image[:, footprint], src.image[:, footprint])
