"""mrb: one executable exposing every pipeline as a subcommand over files.

Exit codes: 0 success, 1 usage error, 2 data or check error. All report
commands accept --format {csv,json} and write to --out (stdout otherwise).
Outputs are a pure function of inputs, flags, and the seed; --threads (or the
MRB_THREADS environment variable) only changes the worker count, never the
bytes produced.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import anchors as anchors_mod
from . import fusion
from .dataset import (
    DatasetManifest,
    DetectionRecord,
    SynthParams,
    Table,
    dataset_stats,
    load_annotations,
    load_detections,
    synth_scene,
    table_to_csv,
    write_report,
    write_synth_scene,
)
from .density import (
    DensityMap,
    KernelSpec,
    PointSet,
    downsample_sum_preserving,
    integrate_count,
    read_density,
    render_density,
    write_density,
)
from .errors import DataFormatError
from .geometry import Annotation, BBox, Detection, FaceLabel
from .metrics import (
    EvalConfig,
    average_precision,
    mae,
    mean_ap,
    pearson,
    ratio_correlation,
    ratio_pairs,
)
from .ratio import (
    RatioReport,
    aggregate_by_video,
    annotation_ratio,
    density_ratio,
    detection_ratio,
    nms,
)

_SUBSETS = ("total", "masked", "unmasked")


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # usage problems must exit 1, not argparse's default 2
    def error(self, message):
        raise _UsageError(f"{self.prog}: {message}")


def _threads(args) -> int:
    if args.threads is not None:
        return max(1, args.threads)
    env = os.environ.get("MRB_THREADS", "").strip()
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ValueError(f"MRB_THREADS must be an integer, got {env!r}")
    return 1


def _parallel_map(fn: Callable, items: Sequence, threads: int) -> list:
    """Ordered map, optionally over a thread pool; results match input order."""
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


def _emit(tables: Table | Mapping[str, Table], out: str | None, fmt: str) -> None:
    if isinstance(tables, Table):
        tables = {"report": tables}
    if out is not None:
        write_report(tables, out, fmt)
        return
    if fmt == "json":
        payload = {
            name: {"columns": list(t.columns), "rows": [list(r) for r in t.rows]}
            for name, t in tables.items()
        }
        sys.stdout.write(json.dumps(payload, indent=2, allow_nan=False) + "\n")
    else:
        for name, t in tables.items():
            if len(tables) > 1:
                sys.stdout.write(f"# {name}\n")
            sys.stdout.write(table_to_csv(t))


# ---------------------------------------------------------------------------
# shared evaluation plumbing


def _dets_by_image(
    manifest: DatasetManifest,
    records: Sequence[DetectionRecord],
    nms_iou: float | None,
    threads: int,
) -> dict[str, tuple[Detection, ...]]:
    known = {rec.image_id for rec in manifest.images}
    for rec in records:
        if rec.image_id not in known:
            raise DataFormatError(
                f"detections reference unknown image_id {rec.image_id!r}"
            )
    if nms_iou is not None:
        suppressed = _parallel_map(
            lambda rec: tuple(nms(list(rec.detections), nms_iou)), records, threads
        )
        by_image = {rec.image_id: d for rec, d in zip(records, suppressed)}
    else:
        by_image = {rec.image_id: rec.detections for rec in records}
    # images without a detection record count as zero detections
    return {rec.image_id: by_image.get(rec.image_id, ()) for rec in manifest.images}


def _detection_reports(
    manifest: DatasetManifest,
    dets_by_image: Mapping[str, Sequence[Detection]],
    conf_thr: float,
) -> dict[str, RatioReport]:
    return {
        rec.image_id: detection_ratio(dets_by_image[rec.image_id], conf_thr)
        for rec in manifest.images
    }


def _density_reports(
    manifest: DatasetManifest, density_dir: str, threads: int
) -> dict[str, RatioReport]:
    root = Path(density_dir)

    def one(rec) -> RatioReport:
        total = integrate_count(_read_subset(root, rec.image_id, "total"))
        unmasked = integrate_count(_read_subset(root, rec.image_id, "unmasked"))
        return density_ratio(total, unmasked)

    reports = _parallel_map(one, manifest.images, threads)
    return {rec.image_id: rep for rec, rep in zip(manifest.images, reports)}


def _read_subset(root: Path, image_id: str, subset: str) -> DensityMap:
    path = root / f"{image_id}.{subset}.nfmd"
    if not path.exists():
        raise DataFormatError(f"missing density prediction {path}")
    return read_density(path)


def _gt_reports(manifest: DatasetManifest) -> dict[str, RatioReport]:
    return {rec.image_id: annotation_ratio(rec.annotations) for rec in manifest.images}


def _swap_convention(
    reports: Mapping[str, RatioReport], convention: str
) -> dict[str, RatioReport]:
    if convention == "masked":
        return dict(reports)
    return {
        k: RatioReport(r.unmasked_count, r.masked_count) for k, r in reports.items()
    }


def _estimated_reports(args, manifest: DatasetManifest, threads: int):
    """Per-image estimates from whichever input the command was given."""
    if getattr(args, "detections", None):
        records = load_detections(args.detections)
        dets = _dets_by_image(manifest, records, getattr(args, "nms_iou", None), threads)
        return _detection_reports(manifest, dets, args.conf_thr)
    return _density_reports(manifest, args.density_dir, threads)


# ---------------------------------------------------------------------------
# subcommands


def _cmd_synth(args) -> int:
    params = SynthParams(
        seed=args.seed,
        n_images=args.images,
        faces_min=args.faces_min,
        faces_max=args.faces_max,
        image_width=args.width,
        image_height=args.height,
        masked_probability=args.masked_prob,
        unknown_probability=args.unknown_prob,
        n_videos=args.videos,
        face_size_min=args.face_size_min,
        face_size_max=args.face_size_max,
        jitter_sigma=args.jitter_sigma,
        drop_rate=args.drop_rate,
        flip_rate=args.flip_rate,
        false_positive_rate=args.fp_rate,
        density_noise=args.density_noise,
        density_downscale=args.density_downscale,
        kernel=KernelSpec(beta=args.beta, k=args.k),
    )
    scene = synth_scene(params, include_density=not args.no_density)
    write_synth_scene(scene, args.out)
    return 0


def _cmd_stats(args) -> int:
    train = load_annotations(args.train, "Training")
    test = load_annotations(args.test, "Testing")
    _emit(dataset_stats(train, test), args.out, args.format)
    return 0


def _cmd_gen_density(args) -> int:
    subsets = [s.strip() for s in args.subsets.split(",") if s.strip()]
    for s in subsets:
        if s not in _SUBSETS:
            raise ValueError(f"unknown density subset {s!r}, expected one of {_SUBSETS}")
    manifest = load_annotations(args.annotations)
    spec = KernelSpec(
        beta=args.beta,
        k=args.k,
        sigma_default=args.sigma_default,
        truncation_radius=args.truncation,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def render_one(rec) -> list[tuple[str, DensityMap]]:
        results = []
        for subset in subsets:
            if subset == "total":
                annos = [a for a in rec.annotations if a.label is not FaceLabel.UNKNOWN]
            else:
                annos = [a for a in rec.annotations if a.label.value == subset]
            pts = PointSet(tuple(a.box.center for a in annos), rec.width, rec.height)
            dmap = downsample_sum_preserving(render_density(pts, spec), args.downscale)
            results.append((f"{rec.image_id}.{subset}.nfmd", dmap))
        return results

    for results in _parallel_map(render_one, manifest.images, _threads(args)):
        for name, dmap in results:
            write_density(dmap, out / name)
    return 0


def _cmd_eval_det(args) -> int:
    manifest = load_annotations(args.annotations)
    records = load_detections(args.detections)
    threads = _threads(args)
    dets = _dets_by_image(manifest, records, args.nms_iou, threads)
    gts = manifest.annotations_by_id()
    cfg = EvalConfig(iou_thr=args.iou_thr)

    cells = [
        (label, bucket)
        for label in (FaceLabel.MASKED, FaceLabel.UNMASKED)
        for bucket in cfg.buckets
    ]
    aps = _parallel_map(
        lambda cell: average_precision(dets, gts, cell[0], cell[1], cfg), cells, threads
    )
    rows = [
        (label.value, bucket.value, ap) for (label, bucket), ap in zip(cells, aps)
    ]
    rows.append(("mAP", "", mean_ap(aps)))
    _emit(Table(("class", "bucket", "ap"), rows), args.out, args.format)
    return 0


def _count_rows(
    est: Mapping[str, RatioReport], gt: Mapping[str, RatioReport], order: Sequence[str]
) -> list[tuple]:
    def counts(reports: Mapping[str, RatioReport], quantity: str) -> list[float]:
        if quantity == "total":
            return [reports[i].total for i in order]
        return [getattr(reports[i], f"{quantity}_count") for i in order]

    rows = []
    for quantity in ("masked", "unmasked", "total"):
        e, g = counts(est, quantity), counts(gt, quantity)
        gamma = pearson(e, g) if len(order) >= 2 else None
        rows.append((quantity, len(order), mae(e, g), gamma))
    return rows


def _cmd_eval_count(args) -> int:
    manifest = load_annotations(args.annotations)
    est = _density_reports(manifest, args.density_dir, _threads(args))
    gt = _gt_reports(manifest)
    order = [rec.image_id for rec in manifest.images]
    _emit(
        Table(("quantity", "n_images", "mae", "gamma"), _count_rows(est, gt, order)),
        args.out,
        args.format,
    )
    return 0


def _cmd_eval_ratio(args) -> int:
    manifest = load_annotations(args.annotations)
    threads = _threads(args)
    est = _estimated_reports(args, manifest, threads)
    gt = _gt_reports(manifest)
    order = [rec.image_id for rec in manifest.images]
    cfg = EvalConfig(min_faces_per_image=args.min_faces)

    est_conv = _swap_convention(est, args.convention)
    gt_conv = _swap_convention(gt, args.convention)
    rows = _count_rows(est, gt, order)
    pairs = ratio_pairs(est_conv, gt_conv, cfg)
    gamma = (
        pearson([p[2] for p in pairs], [p[1] for p in pairs]) if len(pairs) >= 2 else None
    )
    ratio_mae = (
        mae([p[2] for p in pairs], [p[1] for p in pairs]) if pairs else None
    )
    rows.append(("ratio", len(pairs), ratio_mae, gamma))

    if args.by_condition:
        by_id = {rec.image_id: rec.meta.condition for rec in manifest.images}
        for condition in ("DT", "NT"):
            ids = [i for i in order if by_id[i].value == condition]
            sub_est = {i: est_conv[i] for i in ids}
            sub_gt = {i: gt_conv[i] for i in ids}
            sub_pairs = ratio_pairs(sub_est, sub_gt, cfg)
            sub_gamma = ratio_correlation(sub_est, sub_gt, cfg)
            rows.append((f"ratio_{condition}", len(sub_pairs), None, sub_gamma))

    if args.scatter:
        write_report(
            Table(("image_id", "gt_ratio", "est_ratio"), pairs), args.scatter, "csv"
        )
    _emit(Table(("quantity", "n_images", "mae", "gamma"), rows), args.out, args.format)
    return 0


def _cmd_report_video(args) -> int:
    manifest = load_annotations(args.annotations)
    est = _estimated_reports(args, manifest, _threads(args))
    gt = _gt_reports(manifest)
    est = _swap_convention(est, args.convention)
    gt = _swap_convention(gt, args.convention)
    metas = {rec.image_id: rec.meta for rec in manifest.images}
    gt_agg = aggregate_by_video((metas[i], gt[i]) for i in metas)
    est_agg = aggregate_by_video((metas[i], est[i]) for i in metas)
    rows = [
        (g.video_id, g.n_images, g.mean_ratio, e.mean_ratio)
        for g, e in zip(gt_agg, est_agg)
    ]
    _emit(Table(("video_id", "n_images", "gt_ratio", "est_ratio"), rows), args.out, args.format)
    return 0


def _cmd_gradcheck(args) -> int:
    worst = fusion.run_gradient_check(
        seed=args.seed,
        trials=args.trials,
        max_size=args.max_size,
        max_channels=args.max_channels,
        step=args.step,
        epsilon=args.epsilon,
    )
    passed = bool(worst <= args.tolerance)
    _emit(
        Table(
            ("trials", "max_rel_err", "tolerance", "passed"),
            [(args.trials, worst, args.tolerance, passed)],
        ),
        args.out,
        args.format,
    )
    return 0 if passed else 2


def _cmd_loss_eval(args) -> int:
    with open(args.fixture, "r", encoding="utf-8") as f:
        try:
            fixture = json.load(f)
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"{args.fixture}: invalid JSON: {exc}") from exc

    def get(obj, key, default=None):
        if default is None and key not in obj:
            raise DataFormatError(f"{args.fixture}: missing field {key!r}")
        return obj.get(key, default)

    image = get(fixture, "image")
    spec = get(fixture, "anchors")
    levels = [int(v) for v in get(spec, "levels")]
    scales = spec.get("scales")
    if isinstance(scales, dict):
        scales = {int(k): tuple(float(x) for x in v) for k, v in scales.items()}
    ratios = tuple(float(r) for r in spec.get("ratios", anchors_mod.DEFAULT_RATIOS))
    anchor_set = anchors_mod.generate_anchors(
        int(get(image, "width")), int(get(image, "height")), levels, scales, ratios
    )

    labels = {lab.value: lab for lab in FaceLabel}
    gts = []
    for i, g in enumerate(get(fixture, "ground_truth")):
        box = g.get("box")
        if not (isinstance(box, list) and len(box) == 4):
            raise DataFormatError(f"{args.fixture}: ground_truth[{i}]: bad box {box!r}")
        try:
            gts.append(Annotation(BBox(*(float(v) for v in box)), labels[g["label"]]))
        except (KeyError, ValueError) as exc:
            raise DataFormatError(f"{args.fixture}: ground_truth[{i}]: {exc}") from exc

    matching = fixture.get("matching", {})
    match = anchors_mod.match_anchors(
        anchor_set,
        gts,
        pos_iou=float(matching.get("pos_iou", 0.5)),
        neg_iou=float(matching.get("neg_iou", 0.3)),
    )

    preds = get(fixture, "predictions")
    p_obj = np.asarray(get(preds, "objectness"), dtype=np.float64)
    p_cls = np.asarray(get(preds, "class"), dtype=np.float64)
    t = np.asarray(get(preds, "box"), dtype=np.float64)
    loss_cfg = fixture.get("loss", {})
    config = anchors_mod.LossConfig(
        alpha=float(loss_cfg.get("alpha", 0.25)),
        gamma=float(loss_cfg.get("gamma", 2.0)),
        normalize_by_positives=bool(loss_cfg.get("normalize", False)),
    )
    try:
        breakdown = anchors_mod.multitask_loss(p_obj, p_cls, t, match, config)
    except ValueError as exc:
        raise DataFormatError(f"{args.fixture}: {exc}") from exc

    _emit(
        Table(
            (
                "n_anchors",
                "n_positive",
                "n_negative",
                "n_ignore",
                "objectness",
                "classification",
                "box",
                "total",
            ),
            [
                (
                    len(match),
                    match.n_positive,
                    int(np.count_nonzero(match.negative_mask)),
                    int(np.count_nonzero(match.ignore_mask)),
                    breakdown.objectness,
                    breakdown.classification,
                    breakdown.box,
                    breakdown.total,
                )
            ],
        ),
        args.out,
        args.format,
    )
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> _Parser:
    parser = _Parser(
        prog="mrb",
        description="Mask-wearing ratio estimation pipelines: synthetic scenes, "
        "density maps, detection and ratio evaluation.",
    )
    common = _Parser(add_help=False)
    common.add_argument(
        "--threads",
        type=int,
        default=None,
        help="worker threads (default: MRB_THREADS env var, else 1); "
        "outputs are identical for any value",
    )
    report = _Parser(add_help=False)
    report.add_argument("--out", default=None, help="output path (default: stdout)")
    report.add_argument(
        "--format", choices=("csv", "json"), default="csv", help="report format"
    )

    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, func, help_, parents=(common,), formatter=argparse.ArgumentDefaultsHelpFormatter):
        p = sub.add_parser(
            name, help=help_, parents=list(parents), formatter_class=formatter
        )
        p.set_defaults(func=func)
        return p

    p = add("synth", _cmd_synth, "generate a seeded synthetic scene set")
    p.add_argument("--seed", type=int, required=True, help="RNG seed; fully determines output")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--images", type=int, default=200)
    p.add_argument("--faces-min", type=int, default=5)
    p.add_argument("--faces-max", type=int, default=80)
    p.add_argument("--width", type=int, default=256)
    p.add_argument("--height", type=int, default=256)
    p.add_argument("--masked-prob", type=float, default=0.5)
    p.add_argument("--unknown-prob", type=float, default=0.0)
    p.add_argument("--videos", type=int, default=4)
    p.add_argument("--face-size-min", type=float, default=12.0)
    p.add_argument("--face-size-max", type=float, default=56.0)
    p.add_argument("--jitter-sigma", type=float, default=0.0, help="box jitter std (px)")
    p.add_argument("--drop-rate", type=float, default=0.0)
    p.add_argument("--flip-rate", type=float, default=0.0)
    p.add_argument("--fp-rate", type=float, default=0.0, help="false positives per image")
    p.add_argument("--density-noise", type=float, default=0.0)
    p.add_argument("--density-downscale", type=int, default=8)
    p.add_argument("--beta", type=float, default=0.3, help="adaptive kernel sigma factor")
    p.add_argument("--k", type=int, default=3, help="kernel nearest-neighbor count")
    p.add_argument("--no-density", action="store_true", help="skip density predictions")

    p = add("stats", _cmd_stats, "dataset statistics tables", parents=(common, report))
    p.add_argument("--train", required=True, help="training annotations JSONL")
    p.add_argument("--test", required=True, help="testing annotations JSONL")

    p = add("gen-density", _cmd_gen_density, "render ground-truth density maps")
    p.add_argument("--annotations", required=True)
    p.add_argument("--out", required=True, help="output directory for NFMD files")
    p.add_argument("--subsets", default="total,unmasked", help="comma list of total/masked/unmasked")
    p.add_argument("--beta", type=float, default=0.3, help="adaptive kernel sigma factor")
    p.add_argument("--k", type=int, default=3, help="kernel nearest-neighbor count")
    p.add_argument("--sigma-default", type=float, default=4.0, help="sigma for a lone face")
    p.add_argument("--truncation", type=float, default=3.0, help="kernel cutoff in sigmas")
    p.add_argument("--downscale", type=int, default=8, help="output resolution divisor")

    p = add("eval-det", _cmd_eval_det, "detection AP per class and size bucket", parents=(common, report))
    p.add_argument("--annotations", required=True)
    p.add_argument("--detections", required=True)
    p.add_argument("--iou-thr", type=float, default=0.4, help="match IoU threshold")
    p.add_argument("--nms-iou", type=float, default=None, help="apply NMS at this IoU first")

    p = add("eval-count", _cmd_eval_count, "counting MAE and correlation from density files", parents=(common, report))
    p.add_argument("--annotations", required=True)
    p.add_argument("--density-dir", required=True, help="directory of <image_id>.<subset>.nfmd")

    p = add("eval-ratio", _cmd_eval_ratio, "per-image counts and mask-wearing ratio quality", parents=(common, report))
    p.add_argument("--annotations", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--detections", help="detections JSONL (detection path)")
    src.add_argument("--density-dir", help="NFMD directory (density path)")
    p.add_argument("--conf-thr", type=float, default=0.5, help="detection confidence threshold")
    p.add_argument("--min-faces", type=int, default=5, help="skip images with fewer gt faces")
    p.add_argument("--nms-iou", type=float, default=None, help="apply NMS at this IoU first")
    p.add_argument("--convention", choices=("masked", "unmasked"), default="masked",
                   help="which count forms the ratio numerator")
    p.add_argument("--by-condition", action="store_true", help="add per-condition ratio rows")
    p.add_argument("--scatter", default=None, help="also write scatter pairs CSV here")

    p = add("report-video", _cmd_report_video, "per-video mean ratio table", parents=(common, report))
    p.add_argument("--annotations", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--detections", help="detections JSONL (detection path)")
    src.add_argument("--density-dir", help="NFMD directory (density path)")
    p.add_argument("--conf-thr", type=float, default=0.5, help="detection confidence threshold")
    p.add_argument("--convention", choices=("masked", "unmasked"), default="masked",
                   help="which count forms the ratio numerator")

    p = add("gradcheck", _cmd_gradcheck, "verify fusion weight gradients against finite differences", parents=(common, report))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--max-size", type=int, default=8, help="max bottom-level grid size")
    p.add_argument("--max-channels", type=int, default=4)
    p.add_argument("--step", type=float, default=1e-5, help="finite-difference step")
    p.add_argument("--tolerance", type=float, default=1e-5, help="max allowed relative error")
    p.add_argument("--epsilon", type=float, default=1e-4, help="fusion normalization epsilon")

    p = add("loss-eval", _cmd_loss_eval, "evaluate the multi-task detector loss on a fixture", parents=(common, report))
    p.add_argument("--fixture", required=True, help="JSON fixture with anchors, gts, predictions")

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1
    try:
        return args.func(args)
    except (DataFormatError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
