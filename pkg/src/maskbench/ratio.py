"""Mask-wearing ratios from detections or density counts, plus aggregation."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence, TypeVar

from .geometry import Annotation, Detection, FaceLabel, iou


class Condition(Enum):
    """Capture condition of a frame."""

    DAYTIME = "DT"
    NIGHTTIME = "NT"


class CovidPeriod(Enum):
    BEFORE = "before"
    DURING = "during"


@dataclass(frozen=True, slots=True)
class ImageMeta:
    """Which video a frame came from and under which conditions."""

    video_id: str
    condition: Condition
    covid_period: CovidPeriod | None = None

    def __post_init__(self) -> None:
        if not self.video_id:
            raise ValueError("video_id must be non-empty")


@dataclass(frozen=True, slots=True)
class RatioReport:
    """Masked/unmasked counts for one image and the ratio they imply.

    The ratio is masked_count / total and is None (undefined) when the image
    has no counted faces; undefined ratios are never coerced to 0.
    """

    masked_count: float
    unmasked_count: float

    def __post_init__(self) -> None:
        for v in (self.masked_count, self.unmasked_count):
            if not (math.isfinite(v) and v >= 0.0):
                raise ValueError(f"counts must be finite and non-negative, got {v}")

    @property
    def total(self) -> float:
        return self.masked_count + self.unmasked_count

    @property
    def ratio(self) -> float | None:
        return self.masked_count / self.total if self.total > 0.0 else None

    @property
    def unmasked_ratio(self) -> float | None:
        return self.unmasked_count / self.total if self.total > 0.0 else None


def nms(dets: Sequence[Detection], iou_thr: float = 0.4) -> list[Detection]:
    """Greedy class-wise non-maximum suppression.

    Detections are visited in descending confidence (ties keep input order);
    one is kept iff its IoU with every kept detection of the same class is
    below iou_thr.
    """
    if not (0.0 < iou_thr <= 1.0):
        raise ValueError(f"iou_thr must be in (0, 1], got {iou_thr}")
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, i))
    kept: list[int] = []
    for i in order:
        if all(
            dets[i].label is not dets[j].label or iou(dets[i].box, dets[j].box) < iou_thr
            for j in kept
        ):
            kept.append(i)
    kept.sort()
    return [dets[i] for i in kept]


def detection_ratio(dets: Sequence[Detection], conf_thr: float = 0.5) -> RatioReport:
    """Count detections at or above the confidence threshold by label."""
    if not (0.0 <= conf_thr <= 1.0):
        raise ValueError(f"conf_thr must be in [0, 1], got {conf_thr}")
    masked = sum(
        1 for d in dets if d.confidence >= conf_thr and d.label is FaceLabel.MASKED
    )
    unmasked = sum(
        1 for d in dets if d.confidence >= conf_thr and d.label is FaceLabel.UNMASKED
    )
    return RatioReport(float(masked), float(unmasked))


def annotation_ratio(annotations: Sequence[Annotation]) -> RatioReport:
    """Ground-truth counts for one image; UNKNOWN faces are not counted."""
    masked = sum(1 for a in annotations if a.label is FaceLabel.MASKED)
    unmasked = sum(1 for a in annotations if a.label is FaceLabel.UNMASKED)
    return RatioReport(float(masked), float(unmasked))


def density_ratio(count_total: float, count_unmasked: float) -> RatioReport:
    """Ratio from two regressed counts: masked = total - unmasked.

    The unmasked count is clamped into [0, count_total] before subtracting, so
    noisy regressors cannot produce negative masked counts or ratios above 1.
    """
    if not (math.isfinite(count_total) and math.isfinite(count_unmasked)):
        raise ValueError("counts must be finite")
    if count_total < 0.0:
        raise ValueError(f"count_total must be >= 0, got {count_total}")
    unmasked = min(max(count_unmasked, 0.0), count_total)
    return RatioReport(count_total - unmasked, unmasked)


@dataclass(frozen=True, slots=True)
class VideoAggregate:
    """Per-video summary: image count and the mean of the defined image ratios."""

    video_id: str
    n_images: int
    n_defined: int
    mean_ratio: float | None


def aggregate_by_video(
    per_image: Iterable[tuple[ImageMeta, RatioReport]]
) -> list[VideoAggregate]:
    """Unweighted mean of defined per-image ratios per video, sorted by video id.

    A video whose images all have undefined ratios reports None. When every
    defined ratio is identical the mean returns that value exactly.
    """
    groups: dict[str, list[RatioReport]] = {}
    for meta, report in per_image:
        groups.setdefault(meta.video_id, []).append(report)
    out = []
    for video_id in sorted(groups):
        reports = groups[video_id]
        ratios = [r.ratio for r in reports if r.ratio is not None]
        if not ratios:
            mean = None
        elif min(ratios) == max(ratios):
            mean = ratios[0]
        else:
            mean = math.fsum(ratios) / len(ratios)
        out.append(VideoAggregate(video_id, len(reports), len(ratios), mean))
    return out


T = TypeVar("T")


def group_by_condition(
    per_image: Iterable[tuple[ImageMeta, T]]
) -> dict[Condition, list[tuple[ImageMeta, T]]]:
    """Partition items by capture condition, preserving input order."""
    groups: dict[Condition, list[tuple[ImageMeta, T]]] = {
        Condition.DAYTIME: [],
        Condition.NIGHTTIME: [],
    }
    for meta, item in per_image:
        groups[meta.condition].append((meta, item))
    return groups
