import numpy as np
import pytest

from maskconf.panoptic import MaskPrediction


def random_prediction(rng, n=3, c=2, h=8, w=8, cls_scale=4.0, mask_scale=3.0):
    return MaskPrediction(
        rng.normal(scale=cls_scale, size=(n, c + 1)),
        rng.normal(scale=mask_scale, size=(n, h, w)),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
