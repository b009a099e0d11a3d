"""Confidence-aware panoptic self-training toolkit."""

from .confidence import (
    Thresholds,
    image_lambda,
    mask_lambda,
    mask_lambda_onehot,
    per_mask_confidence,
    sampling_affinity,
    teacher_phi,
)
from .match_loss import (
    EMPTY,
    LossConfig,
    LossReport,
    LossWeights,
    baseline_consistency_loss,
    bilinear_sample,
    class_loss,
    mask_loss_at_points,
    match_masks,
    sample_points,
    target_loss,
)
from .mean_teacher import ToyModel, ema_update, toy_forward, toy_grad_step, toy_gradients, toy_loss
from .panoptic import (
    FusionConfig,
    MaskPrediction,
    PanopticSegmentation,
    PseudoLabel,
    fuse_panoptic,
    pixel_confidence,
    to_pseudolabel,
)
from .pq import PqStats, pq_accumulate, pq_finalize
from .segmix import LabeledImage, segmix
from .simulator import SimConfig, SimReport, WorldConfig, run_arms, simulate
from .tensor_store import Segment, TensorFormatError, read_segments, read_tensor, write_segments, write_tensor

__version__ = "0.1.0"
