"""Command-line front end. Every subcommand reads files, calls the library and writes files.

Exit codes: 0 success, 1 invalid arguments or inputs, 2 unreadable or unwritable files.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__
from .confidence import (
    Thresholds,
    image_lambda,
    mask_lambda,
    per_mask_confidence,
    sampling_affinity,
    teacher_phi,
)
from .match_loss import LossConfig, LossWeights, sample_points, target_loss
from .panoptic import (
    FusionConfig,
    MaskPrediction,
    PanopticSegmentation,
    fuse_panoptic,
    pixel_confidence,
    to_pseudolabel,
)
from .pq import PqStats, pq_accumulate, pq_finalize
from . import rng as rngmod
from .segmix import LabeledImage, segmix
from .simulator import SimConfig, simulate
from .tensor_store import TensorFormatError, read_segments, read_tensor, write_segments, write_tensor

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad flags; here 2 is reserved for I/O trouble
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


# shared I/O helpers


def _write_json(path: str | Path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _read_json(path: str | Path):
    text = Path(path).read_text()
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: not valid JSON ({exc})") from exc


def _read_prediction(pred_path, classes_path) -> MaskPrediction:
    return MaskPrediction(read_tensor(classes_path), read_tensor(pred_path))


def _read_panoptic(map_path, segments_path) -> PanopticSegmentation:
    pan = PanopticSegmentation(read_tensor(map_path), read_segments(segments_path))
    pan.validate()
    return pan


def _write_panoptic(pan: PanopticSegmentation, map_path, segments_path) -> None:
    write_tensor(map_path, pan.id_map.astype(np.uint32))
    write_segments(segments_path, pan.segments)


def _fusion(args) -> FusionConfig:
    return FusionConfig(args.class_thresh, args.overlap_thresh, args.min_area)


def _map_jobs(fn: Callable, items: list, jobs: int) -> list:
    if jobs < 1:
        raise UsageError("--jobs must be >= 1")
    if jobs == 1 or len(items) < 2:
        return [fn(*it) for it in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, *zip(*items)))


# pseudolabel


def _pseudolabel_one(pred_path, cls_path, map_path, seg_path, fusion: FusionConfig) -> int:
    pan = fuse_panoptic(_read_prediction(pred_path, cls_path), fusion)
    _write_panoptic(pan, map_path, seg_path)
    return len(pan.segments)


def cmd_pseudolabel(args) -> int:
    fusion = _fusion(args)
    if args.pred_dir:
        if not args.out_dir:
            raise UsageError("--pred-dir needs --out-dir")
        out_dir = Path(args.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        items = []
        for pred in sorted(Path(args.pred_dir).glob("*.pred.mct")):
            stem = pred.name[: -len(".pred.mct")]
            items.append((pred, pred.with_name(f"{stem}.cls.mct"),
                          out_dir / f"{stem}.map.mct", out_dir / f"{stem}.segments.jsonl", fusion))
        if not items:
            raise UsageError(f"no *.pred.mct files in {args.pred_dir}")
        _map_jobs(_pseudolabel_one, items, args.jobs)
        return EXIT_OK
    for flag in ("pred", "classes", "out", "segments"):
        if getattr(args, flag) is None:
            raise UsageError(f"--{flag} is required without --pred-dir")
    _pseudolabel_one(args.pred, args.classes, args.out, args.segments, fusion)
    return EXIT_OK


# confidence


def cmd_confidence(args) -> int:
    th = Thresholds(tau1=args.tau1, tau2=args.tau2, tau_ils=args.tau_ils)
    pred = _read_prediction(args.pred, args.classes)
    rho = pixel_confidence(pred)
    if (args.map is None) != (args.segments is None):
        raise UsageError("--map and --segments go together")
    pan = _read_panoptic(args.map, args.segments) if args.map else fuse_panoptic(pred, _fusion(args))
    phi = teacher_phi(rho)
    lam = mask_lambda(rho, pan, th.tau1)
    write_tensor(args.out_phi, phi.astype(np.float32))
    _write_json(args.out_lambda, {
        "segment_ids": [s.segment_id for s in pan.segments],
        "lambda": [float(v) for v in lam],
        "image_lambda": image_lambda(phi, th.tau_ils),
        "tau1": th.tau1,
        "tau2": th.tau2,
    })
    return EXIT_OK


# sample-points


def cmd_sample_points(args) -> int:
    aff = read_tensor(args.affinity).astype(np.float64)
    if aff.ndim == 3:
        if args.mask_index is None:
            raise UsageError("a stack of affinity maps needs --mask-index")
        aff = aff[args.mask_index]
    elif aff.ndim != 2:
        raise UsageError("affinity must be H x W or N x H x W")
    pts = sample_points(aff, args.np, args.beta, rngmod.stream(args.seed, "sample-points"))
    write_tensor(args.out, pts.astype(np.float32).reshape(-1, 2))
    return EXIT_OK


# loss


def cmd_loss(args) -> int:
    th = Thresholds(tau1=args.tau1, tau2=args.tau2)
    student = _read_prediction(args.student, args.student_classes)
    if args.teacher_pred:
        if args.teacher_labels:
            raise UsageError("give either --teacher-pred or --teacher-labels, not both")
        if not args.teacher_classes:
            raise UsageError("--teacher-pred needs --teacher-classes")
        teacher = _read_prediction(args.teacher_pred, args.teacher_classes)
        rho = pixel_confidence(teacher)
        pan = fuse_panoptic(teacher, _fusion(args), rho)
        phi = teacher_phi(rho)
        if args.confidence_mode == "per_mask":
            phi = per_mask_confidence(teacher.mask_logits)
        lam = mask_lambda(rho, pan, th.tau1)
    elif args.teacher_labels:
        if args.confidence_mode != "all_masks":
            raise UsageError("--confidence-mode per_mask needs --teacher-pred")
        if not args.segments:
            raise UsageError("--teacher-labels needs --segments")
        pan = _read_panoptic(args.teacher_labels, args.segments)
        phi = read_tensor(args.phi).astype(np.float64) if args.phi else None
        if args.lambda_json:
            doc = _read_json(args.lambda_json)
            if doc.get("segment_ids") != [s.segment_id for s in pan.segments]:
                raise UsageError("lambda file does not list the same segments as --segments")
            lam = np.asarray(doc["lambda"], dtype=np.float64)
        else:
            lam = np.ones(len(pan.segments))
    else:
        raise UsageError("need --teacher-pred or --teacher-labels")
    if args.no_mls:
        lam = np.ones(len(pan.segments))
    if phi is None or args.no_cbpf:
        aff = sampling_affinity(student.mask_logits, np.ones(student.hw), 0.0, "all_masks")
    else:
        aff = sampling_affinity(student.mask_logits, phi, th.tau2, args.confidence_mode)
    cfg = LossConfig(weights=LossWeights(), n_points=args.np, beta=args.beta)
    report = target_loss(student, to_pseudolabel(pan), lam, aff, cfg, args.seed)
    out = report.to_dict()
    out.update({"seed": args.seed, "n_points": args.np, "beta": args.beta, "tau1": th.tau1, "tau2": th.tau2})
    if args.json_report:
        _write_json(args.json_report, out)
    else:
        sys.stdout.write(json.dumps(out, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


# segmix


def _read_labeled(prefix: str) -> LabeledImage:
    image = read_tensor(f"{prefix}.image.mct")
    return LabeledImage(image, _read_panoptic(f"{prefix}.map.mct", f"{prefix}.segments.jsonl"))


def cmd_segmix(args) -> int:
    source, target = _read_labeled(args.source), _read_labeled(args.target)
    mixed = segmix(source, target, rngmod.stream(args.seed, "segmix"))
    write_tensor(f"{args.out}.image.mct", mixed.image.astype(np.float32))
    _write_panoptic(mixed.panoptic, f"{args.out}.map.mct", f"{args.out}.segments.jsonl")
    return EXIT_OK


# evaluate


def _taxonomy(path) -> dict[int, str]:
    doc = _read_json(path)
    if isinstance(doc, dict) and "classes" in doc:
        doc = doc["classes"]
    if isinstance(doc, dict):
        return {int(k): str(v) for k, v in doc.items()}
    if isinstance(doc, list):
        out = {}
        for entry in doc:
            if isinstance(entry, dict):
                out[int(entry["id"])] = str(entry.get("name", entry["id"]))
            else:
                out[int(entry)] = str(entry)
        return out
    raise UsageError("taxonomy must be a list of ids, a list of {id, name} or an id -> name map")


def _evaluate_one(pred_prefix: Path, gt_prefix: Path) -> PqStats:
    pred = _read_panoptic(f"{pred_prefix}.map.mct", f"{pred_prefix}.segments.jsonl")
    gt = _read_panoptic(f"{gt_prefix}.map.mct", f"{gt_prefix}.segments.jsonl")
    return pq_accumulate(pred, gt)


def cmd_evaluate(args) -> int:
    names = _taxonomy(args.classes)
    pred_dir, gt_dir = Path(args.pred_dir), Path(args.gt_dir)
    stems = sorted(p.name[: -len(".map.mct")] for p in gt_dir.glob("*.map.mct"))
    if not stems:
        raise UsageError(f"no *.map.mct files in {gt_dir}")
    missing = [s for s in stems if not (pred_dir / f"{s}.map.mct").exists()]
    if missing:
        raise FileNotFoundError(f"no prediction for {missing[0]} in {pred_dir}")
    parts = _map_jobs(_evaluate_one, [(pred_dir / s, gt_dir / s) for s in stems], args.jobs)
    stats = PqStats()
    for part in parts:
        stats = stats.merge(part)
    res = pq_finalize(stats, sorted(names))
    _write_json(args.out, {
        "n_images": len(stems),
        "mean": res["mean"],
        "n_classes": res["n_classes"],
        "per_class": {
            str(c): {"name": names[c], **v} for c, v in sorted(res["per_class"].items())
        },
        "stats": stats.to_dict(),
    })
    return EXIT_OK


# simulate


def cmd_simulate(args) -> int:
    raw = _read_json(args.config) if args.config else {}
    if not isinstance(raw, dict):
        raise UsageError("config must be a JSON object")
    raw = dict(raw)
    arms = raw.pop("arms", None) or {"main": {}}
    raw.pop("seed", None)  # the command line seed wins
    reports, rows = {}, []
    for name, overrides in arms.items():
        cfg = SimConfig.from_dict({**raw, **overrides, "seed": args.seed})
        rep = simulate(cfg)
        reports[name] = rep.to_dict()
        rows.extend({"arm": name, **row} for row in rep.checkpoints)
    _write_json(args.out, {"seed": args.seed, "arms": reports})
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else ["arm"], lineterminator="\n")
            writer.writeheader()
            writer.writerows(rows)
    return EXIT_OK


# parser


def _add_fusion_flags(p: argparse.ArgumentParser) -> None:
    d = FusionConfig()
    p.add_argument("--class-thresh", type=float, default=d.class_threshold)
    p.add_argument("--overlap-thresh", type=float, default=d.overlap_threshold)
    p.add_argument("--min-area", type=int, default=d.min_area)


def build_parser() -> argparse.ArgumentParser:
    th = Thresholds()
    parser = _Parser(prog="maskconf", description="Confidence-aware panoptic self-training tools.")
    parser.add_argument("--version", action="version", version=f"maskconf {__version__} (numpy {np.__version__})")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pseudolabel", help="fuse mask predictions into a panoptic map")
    p.add_argument("--pred", help="mask logits N x H x W (.mct)")
    p.add_argument("--classes", help="class logits N x (C+1) (.mct)")
    p.add_argument("--out", help="output id map (.mct)")
    p.add_argument("--segments", help="output segment table (.jsonl)")
    p.add_argument("--pred-dir", help="batch mode: directory of <stem>.pred.mct / <stem>.cls.mct")
    p.add_argument("--out-dir")
    p.add_argument("--jobs", type=int, default=1)
    _add_fusion_flags(p)
    p.set_defaults(func=cmd_pseudolabel)

    p = sub.add_parser("confidence", help="teacher confidence map and per-segment lambda")
    p.add_argument("--pred", required=True)
    p.add_argument("--classes", required=True)
    p.add_argument("--map", help="panoptic id map; fused from the prediction when omitted")
    p.add_argument("--segments")
    p.add_argument("--out-phi", required=True)
    p.add_argument("--out-lambda", required=True)
    p.add_argument("--tau1", type=float, default=th.tau1)
    p.add_argument("--tau2", type=float, default=th.tau2)
    p.add_argument("--tau-ils", type=float, default=th.tau_ils)
    _add_fusion_flags(p)
    p.set_defaults(func=cmd_confidence)

    p = sub.add_parser("sample-points", help="draw loss points from an affinity map")
    p.add_argument("--affinity", required=True)
    p.add_argument("--mask-index", type=int)
    p.add_argument("--np", type=int, default=LossConfig().n_points)
    p.add_argument("--beta", type=float, default=LossConfig().beta)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample_points)

    p = sub.add_parser("loss", help="student loss against teacher pseudo-labels")
    p.add_argument("--student", required=True)
    p.add_argument("--student-classes", required=True)
    p.add_argument("--teacher-pred")
    p.add_argument("--teacher-classes")
    p.add_argument("--teacher-labels", help="teacher id map (.mct)")
    p.add_argument("--segments")
    p.add_argument("--phi", help="teacher confidence map (.mct)")
    p.add_argument("--lambda", dest="lambda_json", help="lambda JSON written by `confidence`")
    p.add_argument("--tau1", type=float, default=th.tau1)
    p.add_argument("--tau2", type=float, default=th.tau2)
    p.add_argument("--np", type=int, default=LossConfig().n_points)
    p.add_argument("--beta", type=float, default=LossConfig().beta)
    p.add_argument("--confidence-mode", choices=["all_masks", "per_mask"], default="all_masks",
                   help="teacher confidence for point filtering: max over masks, "
                        "or the teacher mask in the same query slot")
    p.add_argument("--no-mls", action="store_true", help="weight every segment by 1")
    p.add_argument("--no-cbpf", action="store_true", help="do not filter points by teacher confidence")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--json-report")
    _add_fusion_flags(p)
    p.set_defaults(func=cmd_loss)

    p = sub.add_parser("segmix", help="paste half of a source scene onto a target scene")
    p.add_argument("--source", required=True, help="prefix of <p>.image.mct, <p>.map.mct, <p>.segments.jsonl")
    p.add_argument("--target", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_segmix)

    p = sub.add_parser("evaluate", help="PQ / SQ / RQ of predicted maps against ground truth")
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--gt-dir", required=True)
    p.add_argument("--classes", required=True, help="taxonomy JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("simulate", help="run the synthetic self-training simulation")
    p.add_argument("--config", help="JSON with SimConfig fields and optional per-arm overrides under 'arms'")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--csv")
    p.set_defaults(func=cmd_simulate)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (OSError, TensorFormatError) as exc:
        print(f"maskconf {args.command}: {exc}", file=sys.stderr)
        return EXIT_IO
    except (UsageError, ValueError, KeyError, TypeError) as exc:
        print(f"maskconf {args.command}: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
