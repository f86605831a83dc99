"""Dataset files, statistics, frame selection, synthetic scenes, and reports.

File formats owned here (one JSON object per line, UTF-8):

Annotations JSONL::

    {"image_id": "...", "video_id": "...", "condition": "DT"|"NT",
     "period": "before"|"during", "width": W, "height": H,
     "faces": [{"box": [l, t, r, b], "label": "masked"|"unmasked"|"unknown"}]}

Detections JSONL::

    {"image_id": "...", "video_id": "...", "condition": "DT"|"NT",
     "detections": [{"box": [l, t, r, b], "label": "masked"|"unmasked",
                     "conf": c}]}

Boxes are clamped to the image bounds on load; boxes that are degenerate after
clamping are rejected with their line number. Faces smaller than the 10 x 10 px
annotation protocol minimum load fine but emit a SmallFaceWarning.

All randomness in the synthetic generator flows through numpy's seeded PCG64
generator, so equal parameters and seed reproduce outputs byte for byte.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .density import DensityMap, KernelSpec, PointSet, downsample_sum_preserving, render_density
from .errors import DataFormatError
from .geometry import Annotation, BBox, Detection, FaceLabel
from .ratio import Condition, CovidPeriod, ImageMeta, annotation_ratio


class SmallFaceWarning(UserWarning):
    """An annotation is smaller than the 10 x 10 px protocol minimum."""


@dataclass(frozen=True)
class ImageRecord:
    """One annotated frame."""

    image_id: str
    meta: ImageMeta
    width: int
    height: int
    annotations: tuple[Annotation, ...]


@dataclass(frozen=True)
class DatasetManifest:
    """An ordered collection of annotated frames with unique image ids."""

    images: tuple[ImageRecord, ...]
    split: str | None = None

    def __post_init__(self) -> None:
        seen = set()
        for rec in self.images:
            if rec.image_id in seen:
                raise ValueError(f"duplicate image_id {rec.image_id!r}")
            seen.add(rec.image_id)

    def __len__(self) -> int:
        return len(self.images)

    def annotations_by_id(self) -> dict[str, tuple[Annotation, ...]]:
        return {rec.image_id: rec.annotations for rec in self.images}


@dataclass(frozen=True)
class DetectionRecord:
    """One frame's detector output."""

    image_id: str
    meta: ImageMeta
    detections: tuple[Detection, ...]


_LABELS = {lab.value: lab for lab in FaceLabel}
_CONDITIONS = {c.value: c for c in Condition}
_PERIODS = {p.value: p for p in CovidPeriod}


def _parse_box(raw, where: str, width: int | None, height: int | None) -> BBox:
    if not (isinstance(raw, list) and len(raw) == 4) or not all(
        isinstance(v, (int, float)) and not isinstance(v, bool) for v in raw
    ):
        raise DataFormatError(f"{where}: box must be a list of 4 numbers, got {raw!r}")
    l, t, r, b = (float(v) for v in raw)
    if width is not None and height is not None:
        l, r = min(max(l, 0.0), width), min(max(r, 0.0), width)
        t, b = min(max(t, 0.0), height), min(max(b, 0.0), height)
    try:
        return BBox(l, t, r, b)
    except ValueError as exc:
        raise DataFormatError(f"{where}: {exc}") from exc


def _require(obj: dict, key: str, where: str):
    if key not in obj:
        raise DataFormatError(f"{where}: missing required field {key!r}")
    return obj[key]


def _parse_lines(path) -> Iterable[tuple[int, dict]]:
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataFormatError(
                    f"{path}:{lineno}:{exc.colno}: invalid JSON: {exc.msg}"
                ) from exc
            if not isinstance(obj, dict):
                raise DataFormatError(f"{path}:{lineno}: expected a JSON object")
            yield lineno, obj


def load_annotations(path, split: str | None = None) -> DatasetManifest:
    """Load an annotations JSONL file into a manifest.

    Malformed lines, invalid boxes, and duplicate image ids raise
    DataFormatError naming the offending line; sub-protocol face sizes only
    warn.
    """
    records = []
    seen: set[str] = set()
    for lineno, obj in _parse_lines(path):
        where = f"{path}:{lineno}"
        image_id = _require(obj, "image_id", where)
        if not isinstance(image_id, str) or not image_id:
            raise DataFormatError(f"{where}: image_id must be a non-empty string")
        if image_id in seen:
            raise DataFormatError(f"{where}: duplicate image_id {image_id!r}")
        seen.add(image_id)
        width = _require(obj, "width", where)
        height = _require(obj, "height", where)
        if not all(isinstance(v, int) and v > 0 for v in (width, height)):
            raise DataFormatError(f"{where}: width/height must be positive integers")
        condition = _require(obj, "condition", where)
        if condition not in _CONDITIONS:
            raise DataFormatError(f"{where}: condition must be 'DT' or 'NT'")
        period = _require(obj, "period", where)
        if period not in _PERIODS:
            raise DataFormatError(f"{where}: period must be 'before' or 'during'")
        video_id = _require(obj, "video_id", where)
        if not isinstance(video_id, str) or not video_id:
            raise DataFormatError(f"{where}: video_id must be a non-empty string")
        faces = _require(obj, "faces", where)
        if not isinstance(faces, list):
            raise DataFormatError(f"{where}: faces must be a list")
        annotations = []
        for i, face in enumerate(faces):
            fwhere = f"{where}: face {i}"
            if not isinstance(face, dict):
                raise DataFormatError(f"{fwhere}: expected an object")
            box = _parse_box(_require(face, "box", fwhere), fwhere, width, height)
            label = _require(face, "label", fwhere)
            if label not in _LABELS:
                raise DataFormatError(
                    f"{fwhere}: label must be masked/unmasked/unknown, got {label!r}"
                )
            if box.width < 10.0 or box.height < 10.0:
                warnings.warn(
                    f"{fwhere} ({image_id}): face {box.width:g}x{box.height:g} px is "
                    "below the 10x10 annotation protocol minimum",
                    SmallFaceWarning,
                    stacklevel=2,
                )
            annotations.append(Annotation(box, _LABELS[label]))
        meta = ImageMeta(video_id, _CONDITIONS[condition], _PERIODS[period])
        records.append(ImageRecord(image_id, meta, width, height, tuple(annotations)))
    return DatasetManifest(tuple(records), split)


def save_annotations(manifest: DatasetManifest, path) -> None:
    """Write a manifest back to annotations JSONL (inverse of load_annotations)."""
    with open(path, "w", encoding="utf-8") as f:
        for rec in manifest.images:
            obj = {
                "image_id": rec.image_id,
                "video_id": rec.meta.video_id,
                "condition": rec.meta.condition.value,
                "period": (rec.meta.covid_period or CovidPeriod.DURING).value,
                "width": rec.width,
                "height": rec.height,
                "faces": [
                    {
                        "box": [a.box.left, a.box.top, a.box.right, a.box.bottom],
                        "label": a.label.value,
                    }
                    for a in rec.annotations
                ],
            }
            f.write(json.dumps(obj, separators=(",", ":")) + "\n")


def load_detections(path) -> list[DetectionRecord]:
    """Load a detections JSONL file; same error policy as load_annotations."""
    records = []
    seen: set[str] = set()
    for lineno, obj in _parse_lines(path):
        where = f"{path}:{lineno}"
        image_id = _require(obj, "image_id", where)
        if not isinstance(image_id, str) or not image_id:
            raise DataFormatError(f"{where}: image_id must be a non-empty string")
        if image_id in seen:
            raise DataFormatError(f"{where}: duplicate image_id {image_id!r}")
        seen.add(image_id)
        video_id = _require(obj, "video_id", where)
        if not isinstance(video_id, str) or not video_id:
            raise DataFormatError(f"{where}: video_id must be a non-empty string")
        condition = _require(obj, "condition", where)
        if condition not in _CONDITIONS:
            raise DataFormatError(f"{where}: condition must be 'DT' or 'NT'")
        dets_raw = _require(obj, "detections", where)
        if not isinstance(dets_raw, list):
            raise DataFormatError(f"{where}: detections must be a list")
        dets = []
        for i, det in enumerate(dets_raw):
            dwhere = f"{where}: detection {i}"
            if not isinstance(det, dict):
                raise DataFormatError(f"{dwhere}: expected an object")
            box = _parse_box(_require(det, "box", dwhere), dwhere, None, None)
            label = _require(det, "label", dwhere)
            if label not in (FaceLabel.MASKED.value, FaceLabel.UNMASKED.value):
                raise DataFormatError(
                    f"{dwhere}: label must be masked or unmasked, got {label!r}"
                )
            conf = _require(det, "conf", dwhere)
            if not isinstance(conf, (int, float)) or isinstance(conf, bool):
                raise DataFormatError(f"{dwhere}: conf must be a number")
            try:
                dets.append(Detection(box, _LABELS[label], float(conf)))
            except ValueError as exc:
                raise DataFormatError(f"{dwhere}: {exc}") from exc
        meta = ImageMeta(video_id, _CONDITIONS[condition])
        records.append(DetectionRecord(image_id, meta, tuple(dets)))
    return records


def write_detections(records: Sequence[DetectionRecord], path) -> None:
    """Write detection records as detections JSONL."""
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            obj = {
                "image_id": rec.image_id,
                "video_id": rec.meta.video_id,
                "condition": rec.meta.condition.value,
                "detections": [
                    {
                        "box": [d.box.left, d.box.top, d.box.right, d.box.bottom],
                        "label": d.label.value,
                        "conf": d.confidence,
                    }
                    for d in rec.detections
                ],
            }
            f.write(json.dumps(obj, separators=(",", ":")) + "\n")


# ---------------------------------------------------------------------------
# statistics


@dataclass(frozen=True)
class Table:
    """A small report table: column names plus rows of cells."""

    columns: tuple[str, ...]
    rows: tuple[tuple, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "columns", tuple(self.columns))
        object.__setattr__(self, "rows", tuple(tuple(r) for r in self.rows))
        for r in self.rows:
            if len(r) != len(self.columns):
                raise ValueError(
                    f"row of width {len(r)} does not match {len(self.columns)} columns"
                )


_SIZE_EDGES = (0.0, 8.0, 16.0, 32.0, 64.0, 128.0, 256.0)
_COUNT_EDGES = (0, 1, 2, 4, 8, 16, 32, 64, 128, 256)


def _bin_labels(edges: Sequence[float]) -> list[str]:
    labels = [f"[{edges[i]:g}-{edges[i + 1]:g})" for i in range(len(edges) - 1)]
    labels.append(f">={edges[-1]:g}")
    return labels


def _histogram(values: Sequence[float], edges: Sequence[float]) -> list[int]:
    arr = np.asarray(values, dtype=np.float64)
    hist, _ = np.histogram(arr, bins=list(edges) + [np.inf])
    return [int(v) for v in hist]


def _split_counts(m: DatasetManifest) -> dict[str, int]:
    counts = {"images": len(m), "masked": 0, "unmasked": 0, "unknown": 0}
    for rec in m.images:
        for a in rec.annotations:
            counts[a.label.value] += 1
    return counts


def dataset_stats(
    train: DatasetManifest,
    test: DatasetManifest,
    size_edges: Sequence[float] = _SIZE_EDGES,
    ratio_bins: int = 10,
) -> dict[str, Table]:
    """Summary tables over a train/test manifest pair.

    Returns label counts per split with totals, per-image label averages
    (1 decimal), and three histograms: face size (max box dimension, log-2
    bins by default), per-image mask-wearing ratio (bins of width
    1/ratio_bins), and annotated faces per image.
    """
    tc = _split_counts(train)
    sc = _split_counts(test)
    counts = Table(
        ("split", "images", "masked", "unmasked", "unknown"),
        (
            ("Training", tc["images"], tc["masked"], tc["unmasked"], tc["unknown"]),
            ("Testing", sc["images"], sc["masked"], sc["unmasked"], sc["unknown"]),
            (
                "Total",
                tc["images"] + sc["images"],
                tc["masked"] + sc["masked"],
                tc["unmasked"] + sc["unmasked"],
                tc["unknown"] + sc["unknown"],
            ),
        ),
    )

    def avg_row(split: str, c: dict[str, int]) -> tuple:
        n = c["images"]
        if n == 0:
            return (split, 0.0, 0.0, 0.0)
        return (
            split,
            round(c["masked"] / n, 1),
            round(c["unmasked"] / n, 1),
            round(c["unknown"] / n, 1),
        )

    averages = Table(
        ("split", "masked", "unmasked", "unknown"),
        (avg_row("Training", tc), avg_row("Testing", sc)),
    )

    def sizes(m: DatasetManifest) -> list[float]:
        return [max(a.box.width, a.box.height) for r in m.images for a in r.annotations]

    def ratios(m: DatasetManifest) -> list[float]:
        out = []
        for r in m.images:
            ratio = annotation_ratio(r.annotations).ratio
            if ratio is not None:
                out.append(ratio)
        return out

    def faces_per_image(m: DatasetManifest) -> list[float]:
        return [float(len(r.annotations)) for r in m.images]

    size_hist = Table(
        ("bin", "training", "testing"),
        tuple(
            zip(
                _bin_labels(size_edges),
                _histogram(sizes(train), size_edges),
                _histogram(sizes(test), size_edges),
            )
        ),
    )

    width = 1.0 / ratio_bins
    ratio_edges = [i * width for i in range(ratio_bins)]
    ratio_labels = [
        f"[{i * width:g}-{(i + 1) * width:g})" for i in range(ratio_bins - 1)
    ] + [f"[{(ratio_bins - 1) * width:g}-1]"]

    def ratio_hist(vals: list[float]) -> list[int]:
        hist, _ = np.histogram(
            np.asarray(vals, dtype=np.float64), bins=ratio_edges + [1.0 + 1e-12]
        )
        return [int(v) for v in hist]

    ratio_table = Table(
        ("bin", "training", "testing"),
        tuple(zip(ratio_labels, ratio_hist(ratios(train)), ratio_hist(ratios(test)))),
    )

    count_hist = Table(
        ("bin", "training", "testing"),
        tuple(
            zip(
                _bin_labels(_COUNT_EDGES),
                _histogram(faces_per_image(train), _COUNT_EDGES),
                _histogram(faces_per_image(test), _COUNT_EDGES),
            )
        ),
    )

    return {
        "counts": counts,
        "per_image_averages": averages,
        "face_size_histogram": size_hist,
        "mask_ratio_histogram": ratio_table,
        "faces_per_image_histogram": count_hist,
    }


def select_frames(
    counts: Iterable[tuple[str, int]], min_faces: int = 1
) -> list[str]:
    """Keep frame ids whose face count is at least min_faces, preserving order."""
    kept = []
    for frame_id, count in counts:
        if count < 0:
            raise ValueError(f"frame {frame_id!r} has negative face count {count}")
        if count >= min_faces:
            kept.append(frame_id)
    return kept


# ---------------------------------------------------------------------------
# synthetic scenes


@dataclass(frozen=True)
class SynthParams:
    """Parameters of the seeded synthetic scene generator.

    The simulated detector perturbs the ground truth: every known face is
    dropped with drop_rate, its label flipped with flip_rate, and its box
    jittered by per-coordinate Gaussian noise of jitter_sigma pixels; spurious
    detections arrive at false_positive_rate per image (Poisson). True
    detections draw confidence from a clamped normal tp_confidence
    (mean, std), false positives from fp_confidence. When every detector
    noise knob is zero the detector is perfect and reports confidence 1.0.
    Unknown-labeled faces are never detected: they are undecidable by
    definition.

    Simulated density predictions are the ground-truth maps (at
    density_downscale resolution) with per-cell relative noise of amplitude
    density_noise.
    """

    seed: int
    n_images: int = 200
    faces_min: int = 5
    faces_max: int = 80
    image_width: int = 256
    image_height: int = 256
    masked_probability: float = 0.5
    unknown_probability: float = 0.0
    n_videos: int = 4
    face_size_min: float = 12.0
    face_size_max: float = 56.0
    jitter_sigma: float = 0.0
    drop_rate: float = 0.0
    flip_rate: float = 0.0
    false_positive_rate: float = 0.0
    tp_confidence: tuple[float, float] = (0.9, 0.05)
    fp_confidence: tuple[float, float] = (0.3, 0.1)
    density_noise: float = 0.0
    density_downscale: int = 8
    kernel: KernelSpec = KernelSpec()

    def __post_init__(self) -> None:
        if self.n_images < 0:
            raise ValueError("n_images must be >= 0")
        if not (0 <= self.faces_min <= self.faces_max):
            raise ValueError(
                f"need 0 <= faces_min <= faces_max, got {self.faces_min}..{self.faces_max}"
            )
        if self.image_width < 8 or self.image_height < 8:
            raise ValueError("image dimensions must be at least 8 px")
        for name in ("masked_probability", "unknown_probability", "drop_rate", "flip_rate", "density_noise"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.jitter_sigma < 0 or self.false_positive_rate < 0:
            raise ValueError("noise rates must be non-negative")
        if not (0.0 < self.face_size_min <= self.face_size_max):
            raise ValueError("need 0 < face_size_min <= face_size_max")
        if self.n_videos < 1:
            raise ValueError("n_videos must be >= 1")
        if self.density_downscale < 1:
            raise ValueError("density_downscale must be >= 1")
        for mean, std in (self.tp_confidence, self.fp_confidence):
            if not (0.0 <= mean <= 1.0 and std >= 0.0):
                raise ValueError("confidence models need mean in [0, 1] and std >= 0")

    @property
    def is_noiseless(self) -> bool:
        return (
            self.jitter_sigma == 0.0
            and self.drop_rate == 0.0
            and self.flip_rate == 0.0
            and self.false_positive_rate == 0.0
        )


@dataclass(frozen=True)
class SynthScene:
    """Generated ground truth with simulated detections and density predictions."""

    manifest: DatasetManifest
    detections: tuple[DetectionRecord, ...]
    density: dict[str, dict[str, DensityMap]] | None  # image_id -> subset -> map


def _synth_box(rng: np.random.Generator, params: SynthParams) -> BBox:
    size = math.exp(
        rng.uniform(math.log(params.face_size_min), math.log(params.face_size_max))
    )
    aspect = math.exp(rng.uniform(math.log(0.75), math.log(4.0 / 3.0)))
    w = min(size * math.sqrt(aspect), 0.95 * params.image_width)
    h = min(size / math.sqrt(aspect), 0.95 * params.image_height)
    cx = rng.uniform(w / 2.0, params.image_width - w / 2.0)
    cy = rng.uniform(h / 2.0, params.image_height - h / 2.0)
    return BBox(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)


def _jitter_box(box: BBox, noise: np.ndarray, sigma: float, w: int, h: int) -> BBox:
    l = min(max(box.left + sigma * noise[0], 0.0), float(w))
    t = min(max(box.top + sigma * noise[1], 0.0), float(h))
    r = min(max(box.right + sigma * noise[2], 0.0), float(w))
    b = min(max(box.bottom + sigma * noise[3], 0.0), float(h))
    if r - l < 0.5:  # keep the box valid after heavy jitter
        c = min(max((l + r) / 2.0, 0.25), w - 0.25)
        l, r = c - 0.25, c + 0.25
    if b - t < 0.5:
        c = min(max((t + b) / 2.0, 0.25), h - 0.25)
        t, b = c - 0.25, c + 0.25
    return BBox(l, t, r, b)


def synth_scene(params: SynthParams, include_density: bool = True) -> SynthScene:
    """Generate a deterministic synthetic scene set from the seed.

    With all noise at zero the detections replicate the annotations at
    confidence 1.0 and the density predictions equal the ground-truth maps,
    which makes the generator an exact oracle for every evaluation pipeline.
    """
    rng = np.random.default_rng(params.seed)
    images = []
    det_records = []
    density: dict[str, dict[str, DensityMap]] | None = {} if include_density else None

    for i in range(params.n_images):
        video_idx = i % params.n_videos
        meta = ImageMeta(
            f"video{video_idx:02d}",
            Condition.DAYTIME if video_idx % 2 == 0 else Condition.NIGHTTIME,
            CovidPeriod.BEFORE if video_idx < params.n_videos // 2 else CovidPeriod.DURING,
        )
        image_id = f"img{i:05d}"
        n_faces = int(rng.integers(params.faces_min, params.faces_max + 1))
        annotations = []
        for _ in range(n_faces):
            box = _synth_box(rng, params)
            if rng.random() < params.unknown_probability:
                label = FaceLabel.UNKNOWN
            elif rng.random() < params.masked_probability:
                label = FaceLabel.MASKED
            else:
                label = FaceLabel.UNMASKED
            annotations.append(Annotation(box, label))
        images.append(
            ImageRecord(
                image_id, meta, params.image_width, params.image_height, tuple(annotations)
            )
        )

        dets = []
        for a in annotations:
            if a.label is FaceLabel.UNKNOWN:
                continue
            u_drop = rng.random()
            u_flip = rng.random()
            noise = rng.standard_normal(4)
            conf_draw = rng.normal(params.tp_confidence[0], params.tp_confidence[1])
            if u_drop < params.drop_rate:
                continue
            label = a.label
            if u_flip < params.flip_rate:
                label = (
                    FaceLabel.UNMASKED if label is FaceLabel.MASKED else FaceLabel.MASKED
                )
            box = _jitter_box(
                a.box, noise, params.jitter_sigma, params.image_width, params.image_height
            )
            conf = 1.0 if params.is_noiseless else min(max(conf_draw, 0.0), 1.0)
            dets.append(Detection(box, label, conf))
        if params.false_positive_rate > 0.0:
            for _ in range(int(rng.poisson(params.false_positive_rate))):
                box = _synth_box(rng, params)
                label = FaceLabel.MASKED if rng.random() < 0.5 else FaceLabel.UNMASKED
                conf = min(max(rng.normal(*params.fp_confidence), 0.0), 1.0)
                dets.append(Detection(box, label, conf))
        # detector output carries no covid period (the detections schema has none)
        det_meta = ImageMeta(meta.video_id, meta.condition)
        det_records.append(DetectionRecord(image_id, det_meta, tuple(dets)))

        if density is not None:
            subsets = {
                "total": [a for a in annotations if a.label is not FaceLabel.UNKNOWN],
                "unmasked": [a for a in annotations if a.label is FaceLabel.UNMASKED],
            }
            maps = {}
            for name, subset in subsets.items():
                pts = PointSet(
                    tuple(a.box.center for a in subset),
                    params.image_width,
                    params.image_height,
                )
                gt = downsample_sum_preserving(
                    render_density(pts, params.kernel), params.density_downscale
                )
                noise_field = rng.uniform(-1.0, 1.0, gt.values.shape)
                pred = gt.values * (1.0 + params.density_noise * noise_field)
                maps[name] = DensityMap(pred, gt.downscale)
            density[image_id] = maps

    return SynthScene(
        DatasetManifest(tuple(images)), tuple(det_records), density
    )


def write_synth_scene(scene: SynthScene, out_dir) -> None:
    """Write a scene as annotations.jsonl, detections.jsonl, and density/*.nfmd."""
    from .density import write_density

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_annotations(scene.manifest, out / "annotations.jsonl")
    write_detections(scene.detections, out / "detections.jsonl")
    if scene.density is not None:
        density_dir = out / "density"
        density_dir.mkdir(exist_ok=True)
        for image_id in sorted(scene.density):
            for name, dmap in sorted(scene.density[image_id].items()):
                write_density(dmap, density_dir / f"{image_id}.{name}.nfmd")


# ---------------------------------------------------------------------------
# report writing


def _format_cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _csv_escape(s: str) -> str:
    if any(ch in s for ch in (",", '"', "\n")):
        return '"' + s.replace('"', '""') + '"'
    return s


def table_to_csv(table: Table) -> str:
    """Render one table as CSV text (header plus rows, newline-terminated)."""
    lines = [",".join(_csv_escape(c) for c in table.columns)]
    for row in table.rows:
        lines.append(",".join(_csv_escape(_format_cell(v)) for v in row))
    return "\n".join(lines) + "\n"


def write_report(tables: Table | Mapping[str, Table], path, fmt: str = "csv") -> None:
    """Write report tables with bit-stable formatting.

    Floats are rendered with their shortest round-trip repr and undefined
    values as empty CSV cells / JSON nulls, so identical tables always produce
    identical bytes. JSON output is one file; CSV output is one file for a
    single table and a directory of <name>.csv files for several.
    """
    if isinstance(tables, Table):
        tables = {"report": tables}
    if fmt == "json":
        payload = {
            name: {"columns": list(t.columns), "rows": [list(r) for r in t.rows]}
            for name, t in tables.items()
        }
        Path(path).write_text(
            json.dumps(payload, indent=2, allow_nan=False) + "\n", encoding="utf-8"
        )
    elif fmt == "csv":
        if len(tables) == 1:
            (table,) = tables.values()
            Path(path).write_text(table_to_csv(table), encoding="utf-8")
        else:
            out = Path(path)
            out.mkdir(parents=True, exist_ok=True)
            for name, table in tables.items():
                (out / f"{name}.csv").write_text(table_to_csv(table), encoding="utf-8")
    else:
        raise ValueError(f"unknown report format {fmt!r}")
