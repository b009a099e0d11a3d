"""Desk-scale mean-teacher self-training on a synthetic two-domain world.

Scenes are a background (class 1) with axis-aligned rectangles of the other
classes painted on top. The linear toy head has no cue that could tell two
instances of one class apart, so every class is labelled stuff-style: one
segment per class and image, also after mixing. Each class has a mean colour; pixels add
Gaussian noise. Target-domain colours are rotated and shifted, so a model
trained on the source misreads part of the target. Pixel features are
random Fourier features of the colour plus a constant channel, which the
:class:`~maskconf.mean_teacher.ToyModel` combines linearly.
"""

from __future__ import annotations

import csv
import dataclasses
import io
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import rng as rngmod
from .confidence import Thresholds, mask_lambda, sampling_affinity, teacher_phi
from .match_loss import LossConfig, LossWeights, target_loss
from .mean_teacher import ToyModel, ema_update, toy_forward, toy_grad_step
from .panoptic import (
    FusionConfig,
    PanopticSegmentation,
    fuse_panoptic,
    merge_by_class,
    pixel_confidence,
    to_pseudolabel,
)
from .pq import PqStats, pq_accumulate, pq_finalize
from .segmix import PASTED, LabeledImage, segmix
from .tensor_store import Segment


@dataclass(frozen=True)
class WorldConfig:
    H: int = 64
    W: int = 64
    C: int = 3
    n_segments: int = 2
    domain_shift_magnitude: float = 0.6
    channels: int = 3
    color_spread: float = 1.0
    noise: float = 0.35
    feature_scale: float = 1.5

    def __post_init__(self) -> None:
        if self.C < 2:
            raise ValueError("need a stuff class and at least one thing class")
        if self.n_segments < 0:
            raise ValueError("n_segments must be >= 0")


@dataclass(frozen=True)
class SimConfig:
    iterations: int = 2000
    freeze_iters: int = 400
    alpha: float = 0.999
    lr: float = 1.0
    thresholds: Thresholds = field(default_factory=Thresholds)
    weights: LossWeights = field(default_factory=LossWeights)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    enable_mls: bool = True
    enable_cbpf: bool = True
    world: WorldConfig = field(default_factory=WorldConfig)
    n_queries: int = 16
    embed_dim: int = 32
    n_points: int = 256
    beta: float = 0.75
    eval_images: int = 24
    n_checkpoints: int = 5
    seed: int = 0

    def __post_init__(self) -> None:
        if self.freeze_iters > self.iterations:
            raise ValueError("freeze_iters must not exceed iterations")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if self.n_queries < self.world.n_segments + 1:
            raise ValueError("need at least one query per segment")

    @classmethod
    def from_dict(cls, raw: dict) -> "SimConfig":
        nested = {"thresholds": Thresholds, "weights": LossWeights, "fusion": FusionConfig, "world": WorldConfig}
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for k, v in raw.items():
            kwargs[k] = nested[k](**v) if k in nested else v
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return asdict(self)


class World:
    def __init__(self, cfg: WorldConfig, embed_dim: int, seed: int):
        self.cfg = cfg
        gen = rngmod.stream(seed, "world")
        ch = cfg.channels
        # class colours on a random orthonormal frame (cycled if C > channels)
        frame, _ = np.linalg.qr(gen.normal(size=(ch, ch)))
        self.colors = cfg.color_spread * frame[np.arange(cfg.C) % ch] * (1 + np.arange(cfg.C) // ch)[:, None]
        self.omega = gen.normal(scale=cfg.feature_scale, size=(embed_dim - 1, ch))
        self.phase = gen.uniform(0.0, 2 * np.pi, size=embed_dim - 1)
        self._omega32 = self.omega.astype(np.float32)
        self._phase32 = self.phase.astype(np.float32)[:, None]
        axis = gen.normal(size=ch)
        axis /= np.linalg.norm(axis)
        bias_dir = gen.normal(size=ch)
        bias_dir /= np.linalg.norm(bias_dir)
        m = cfg.domain_shift_magnitude
        self.rotation = _rotation(axis, 0.6 * m)
        self.bias = 0.5 * m * bias_dir

    def scene(self, gen: np.random.Generator, domain: str) -> LabeledImage:
        cfg = self.cfg
        H, W = cfg.H, cfg.W
        sem = np.ones((H, W), dtype=np.int64)
        things = np.arange(2, cfg.C + 1)
        if cfg.n_segments <= things.size:
            classes = gen.choice(things, size=cfg.n_segments, replace=False)
        else:
            classes = gen.choice(things, size=cfg.n_segments, replace=True)
        for cls in classes:
            h = int(gen.integers(H // 6, H // 2 + 1))
            w = int(gen.integers(W // 6, W // 2 + 1))
            r = int(gen.integers(0, H - h + 1))
            c = int(gen.integers(0, W - w + 1))
            sem[r : r + h, c : c + w] = cls
        image = self.colors[sem - 1].transpose(2, 0, 1)
        image = image + cfg.noise * gen.standard_normal(size=image.shape, dtype=np.float32)
        if domain == "target":
            image = np.tensordot(self.rotation, image, axes=(1, 0)) + self.bias[:, None, None]
        elif domain != "source":
            raise ValueError(f"unknown domain {domain!r}")

        id_map = np.zeros((H, W), dtype=np.uint32)
        segments = []
        for cls in range(1, cfg.C + 1):
            region = sem == cls
            if region.any():
                seg_id = len(segments) + 1
                id_map[region] = seg_id
                segments.append(Segment(seg_id, cls, cls - 1, int(region.sum())))
        return LabeledImage(image, PanopticSegmentation(id_map, segments))

    def features(self, image: np.ndarray) -> np.ndarray:
        d = self.omega.shape[0] + 1
        ch, H, W = image.shape
        # float32 cosine is an order of magnitude faster and precise enough for features
        proj = self._omega32 @ image.reshape(ch, -1).astype(np.float32) + self._phase32
        out = np.empty((d, H * W))
        out[:-1] = np.cos(proj)
        out[:-1] *= np.sqrt(2.0 / d)
        out[-1] = 1.0
        return out.reshape(d, H, W)


def _rotation(axis: np.ndarray, angle: float) -> np.ndarray:
    if axis.size != 3:
        # only the 3-channel case gets a proper axis rotation; otherwise a plane rotation
        rot = np.eye(axis.size)
        c, s = np.cos(angle), np.sin(angle)
        rot[:2, :2] = [[c, -s], [s, c]]
        return rot
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)


@dataclass
class SimReport:
    config: dict
    source_only_pq: float
    checkpoints: list[dict]
    final_pq: float
    final_teacher_pq: float
    pretrained_params: np.ndarray
    teacher_params: np.ndarray
    student_params: np.ndarray

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "source_only_pq": self.source_only_pq,
            "final_pq": self.final_pq,
            "final_teacher_pq": self.final_teacher_pq,
            "checkpoints": self.checkpoints,
        }

    def curves_csv(self) -> str:
        buf = io.StringIO()
        cols = list(self.checkpoints[0]) if self.checkpoints else []
        writer = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        writer.writeheader()
        for row in self.checkpoints:
            writer.writerow(row)
        return buf.getvalue()


def evaluate_pq(model: ToyModel, world: World, scenes, fusion: FusionConfig, feats=None) -> float:
    stats = PqStats()
    feats = feats if feats is not None else [world.features(s.image) for s in scenes]
    for scene, f in zip(scenes, feats):
        pred = fuse_panoptic(toy_forward(model, f), fusion)
        pq_accumulate(pred, scene.panoptic, stats)
    return pq_finalize(stats, range(1, world.cfg.C + 1))["mean"]["pq"]


def _loss_cfg(cfg: SimConfig) -> LossConfig:
    return LossConfig(weights=cfg.weights, n_points=cfg.n_points, beta=cfg.beta)


def _uncertainty(s: np.ndarray) -> np.ndarray:
    return -np.abs(s)


def _pretrain_key(cfg: SimConfig) -> tuple:
    return (cfg.seed, cfg.world, cfg.n_queries, cfg.embed_dim, cfg.freeze_iters, cfg.lr,
            cfg.weights, cfg.n_points, cfg.beta)


_PRETRAIN_CACHE: dict[tuple, ToyModel] = {}


def pretrain(cfg: SimConfig, world: World) -> ToyModel:
    """Supervised training on source scenes only.

    Runs that share a seed, world and model settings share the result, so
    comparing ablation arms pays for pretraining once.
    """
    key = _pretrain_key(cfg)
    if key not in _PRETRAIN_CACHE:
        if len(_PRETRAIN_CACHE) >= 8:
            _PRETRAIN_CACHE.pop(next(iter(_PRETRAIN_CACHE)))
        _PRETRAIN_CACHE[key] = _pretrain(cfg, world)
    return _PRETRAIN_CACHE[key]


def _pretrain(cfg: SimConfig, world: World) -> ToyModel:
    model = ToyModel.init(cfg.n_queries, cfg.embed_dim, cfg.world.C, rngmod.stream(cfg.seed, "init"))
    loss_cfg = _loss_cfg(cfg)
    for it in range(cfg.freeze_iters):
        scene = world.scene(rngmod.stream(cfg.seed, "pretrain", it), "source")
        feats = world.features(scene.image)
        pred = toy_forward(model, feats)
        labels = to_pseudolabel(scene.panoptic)
        report = target_loss(
            pred, labels, np.ones(len(labels)), _uncertainty(pred.mask_logits), loss_cfg,
            rngmod.child_seed(cfg.seed, "pretrain-loss", it),
        )
        model = toy_grad_step(model, [(feats, report)], cfg.lr, cfg.weights)
    return model


def simulate(cfg: SimConfig) -> SimReport:
    """Pretrain on the source, then run mean-teacher adaptation to the target.

    The first ``freeze_iters`` of the ``iterations`` budget train the model
    on labelled source scenes alone; teacher and student both start from
    that result. Adaptation fills the remaining steps.

    Each adaptation step pseudo-labels a fresh target scene with the teacher,
    pastes half of a source scene's segments onto it, and takes one gradient
    step on the source loss plus the mixed-scene loss. With MLS the mixed
    loss scales each teacher segment by its confident-pixel fraction; with
    CBPF points are only sampled where the teacher confidence reaches tau2
    (pasted source pixels count as confident). After each step the teacher
    tracks the student by EMA.
    """
    world = World(cfg.world, cfg.embed_dim, cfg.seed)
    loss_cfg = _loss_cfg(cfg)
    th = cfg.thresholds
    eval_scenes = [world.scene(rngmod.stream(cfg.seed, "eval", k), "target") for k in range(cfg.eval_images)]

    eval_feats = [world.features(s.image) for s in eval_scenes]
    pretrained = pretrain(cfg, world)
    source_only = evaluate_pq(pretrained, world, eval_scenes, cfg.fusion, eval_feats)
    student = pretrained
    teacher = pretrained
    n_adapt = cfg.iterations - cfg.freeze_iters
    marks = set(np.linspace(0, n_adapt, cfg.n_checkpoints + 1).astype(int)[1:].tolist())
    checkpoints = []
    lam_window: list[float] = []

    for it in range(n_adapt):
        src = world.scene(rngmod.stream(cfg.seed, "source", it), "source")
        tgt = world.scene(rngmod.stream(cfg.seed, "target", it), "target")
        tgt_feats = world.features(tgt.image)
        t_pred = toy_forward(teacher, tgt_feats)
        rho = pixel_confidence(t_pred)
        pan = fuse_panoptic(t_pred, cfg.fusion, rho)
        phi = teacher_phi(rho)
        lam_t = mask_lambda(rho, pan, th.tau1)
        lam_window.extend(lam_t.tolist())

        mixed, footprint = segmix(
            src, LabeledImage(tgt.image, pan), rngmod.stream(cfg.seed, "segmix", it), return_footprint=True
        )
        merged = merge_by_class(mixed.panoptic)
        mixed_labels = to_pseudolabel(merged)
        if cfg.enable_mls:
            # pasted pixels are ground truth: full confidence; PASTED (-1) indexes the ones row
            rho_mix = np.concatenate([np.where(footprint, 1.0, rho), np.ones((1,) + rho.shape[1:])])
            lam = mask_lambda(rho_mix, merged, th.tau1)
        else:
            lam = np.ones(len(mixed_labels))

        src_feats = world.features(src.image)
        # features are per-pixel, so the mixed scene's features are a paste as well
        mix_feats = np.where(footprint[None], src_feats, tgt_feats)
        s_src = toy_forward(student, src_feats)
        s_mix = toy_forward(student, mix_feats)
        if cfg.enable_cbpf:
            conf = np.where(footprint, 1.0, phi)
            aff = sampling_affinity(s_mix.mask_logits, conf, th.tau2, "all_masks")
        else:
            aff = _uncertainty(s_mix.mask_logits)

        src_labels = to_pseudolabel(src.panoptic)
        rep_src = target_loss(s_src, src_labels, np.ones(len(src_labels)), _uncertainty(s_src.mask_logits),
                              loss_cfg, rngmod.child_seed(cfg.seed, "loss-src", it))
        rep_mix = target_loss(s_mix, mixed_labels, lam, aff, loss_cfg,
                              rngmod.child_seed(cfg.seed, "loss-mix", it))
        student = toy_grad_step(student, [(src_feats, rep_src), (mix_feats, rep_mix)], cfg.lr, cfg.weights)
        teacher = teacher.with_params(ema_update(teacher.params(), student.params(), cfg.alpha))

        if it + 1 in marks:
            checkpoints.append(
                {
                    "iteration": cfg.freeze_iters + it + 1,
                    "student_pq": evaluate_pq(student, world, eval_scenes, cfg.fusion, eval_feats),
                    "teacher_pq": evaluate_pq(teacher, world, eval_scenes, cfg.fusion, eval_feats),
                    "lambda_mean": float(np.mean(lam_window)) if lam_window else float("nan"),
                    "lambda_std": float(np.std(lam_window)) if lam_window else float("nan"),
                    "loss_mix": rep_mix.total,
                }
            )
            lam_window = []

    return SimReport(
        config=cfg.to_dict(),
        source_only_pq=source_only,
        checkpoints=checkpoints,
        final_pq=checkpoints[-1]["student_pq"] if checkpoints else source_only,
        final_teacher_pq=checkpoints[-1]["teacher_pq"] if checkpoints else source_only,
        pretrained_params=pretrained.params(),
        teacher_params=teacher.params(),
        student_params=student.params(),
    )


def _run_seed(task: tuple[dict[str, SimConfig], int]) -> dict[str, SimReport]:
    arms, seed = task
    return {name: simulate(dataclasses.replace(cfg, seed=seed)) for name, cfg in arms.items()}


def run_arms(arms: dict[str, SimConfig], seeds, jobs: int = 1) -> dict[str, list[SimReport]]:
    """Simulate every arm for every seed; the ``seed`` field of each arm is overridden.

    One task per seed, so the arms of a seed share their pretraining. With
    ``jobs > 1`` seeds run in separate processes; results do not depend on
    ``jobs``.
    """
    tasks = [(arms, int(s)) for s in seeds]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(tasks))) as pool:
            per_seed = list(pool.map(_run_seed, tasks))
    else:
        per_seed = [_run_seed(t) for t in tasks]
    return {name: [r[name] for r in per_seed] for name in arms}
