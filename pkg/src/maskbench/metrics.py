"""Detection AP/mAP with size buckets, counting MAE, and Pearson correlation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .geometry import (
    Annotation,
    Detection,
    FaceLabel,
    SizeBucket,
    boxes_to_array,
    iou_matrix,
    size_bucket,
)
from .ratio import RatioReport


@dataclass(frozen=True)
class EvalConfig:
    """Evaluation knobs: match IoU, the small-image ratio filter, bucket set."""

    iou_thr: float = 0.4
    min_faces_per_image: int = 5
    buckets: tuple[SizeBucket, ...] = (SizeBucket.L, SizeBucket.M, SizeBucket.S)

    def __post_init__(self) -> None:
        if not (0.0 < self.iou_thr <= 1.0):
            raise ValueError(f"iou_thr must be in (0, 1], got {self.iou_thr}")
        if self.min_faces_per_image < 0:
            raise ValueError("min_faces_per_image must be >= 0")


def average_precision(
    detections: Mapping[str, Sequence[Detection]],
    annotations: Mapping[str, Sequence[Annotation]],
    label: FaceLabel,
    bucket: SizeBucket | None = None,
    cfg: EvalConfig = EvalConfig(),
) -> float | None:
    """Average precision of one class, optionally restricted to one size bucket.

    All detections of the class are ranked by confidence (ties keep input
    order) and greedily matched to the unmatched in-scope ground truth of
    their image with the highest IoU >= cfg.iou_thr. In-scope ground truths
    are those of the class whose bucket matches (or any non-excluded bucket
    when bucket is None). UNKNOWN faces, same-class faces of other buckets,
    and excluded-size faces are ignore regions: a detection is discarded from
    both counts when an ignore region overlaps it at the threshold more
    strongly than any available in-scope ground truth (so an out-of-bucket
    face's detection is dropped rather than stealing a weaker in-scope
    match). AP is the area under the precision envelope over recall
    (all-point interpolation). Returns None when no ground truth is in scope.
    """
    if label is FaceLabel.UNKNOWN:
        raise ValueError("AP is defined for the masked/unmasked classes only")
    if bucket is SizeBucket.EXCLUDED:
        raise ValueError("the excluded bucket is never evaluated")

    scope_boxes: dict[str, np.ndarray] = {}
    ignore_boxes: dict[str, np.ndarray] = {}
    n_pos = 0
    for image_id, annos in annotations.items():
        scope, ignore = [], []
        for a in annos:
            if a.label is FaceLabel.UNKNOWN:
                ignore.append(a.box)
            elif a.label is label:
                b = size_bucket(a.box)
                in_scope = b is not SizeBucket.EXCLUDED if bucket is None else b is bucket
                (scope if in_scope else ignore).append(a.box)
        scope_boxes[image_id] = boxes_to_array(scope)
        ignore_boxes[image_id] = boxes_to_array(ignore)
        n_pos += len(scope)
    if n_pos == 0:
        return None

    # stable sort: equal confidences keep input order
    ranked = sorted(
        (
            (image_id, i, d)
            for image_id, dets in detections.items()
            for i, d in enumerate(dets)
            if d.label is label
        ),
        key=lambda item: -item[2].confidence,
    )

    matched: dict[str, np.ndarray] = {
        image_id: np.zeros(len(b), dtype=bool) for image_id, b in scope_boxes.items()
    }
    tp = np.zeros(len(ranked))
    fp = np.zeros(len(ranked))
    for rank, (image_id, _, det) in enumerate(ranked):
        box = boxes_to_array([det.box])
        best_scope, best_j = -1.0, -1
        gts = scope_boxes.get(image_id)
        if gts is not None and len(gts):
            ious = iou_matrix(box, gts)[0]
            ious[matched[image_id]] = -1.0
            best_j = int(ious.argmax())
            best_scope = float(ious[best_j])
        best_ignore = -1.0
        ign = ignore_boxes.get(image_id)
        if ign is not None and len(ign):
            best_ignore = float(iou_matrix(box, ign).max())
        if best_scope >= cfg.iou_thr and best_scope >= best_ignore:
            matched[image_id][best_j] = True
            tp[rank] = 1.0
        elif best_ignore >= cfg.iou_thr:
            pass  # matched an ignore region: counts nowhere
        else:
            fp[rank] = 1.0

    ctp = np.cumsum(tp)
    cfp = np.cumsum(fp)
    keep = (ctp + cfp) > 0  # drop ranks of discarded detections
    ctp, cfp = ctp[keep], cfp[keep]
    if ctp.shape[0] == 0:
        return 0.0
    recall = ctp / n_pos
    precision = ctp / (ctp + cfp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    deltas = np.diff(np.concatenate(([0.0], recall)))
    return float(np.sum(deltas * envelope))


def mean_ap(aps: Sequence[float | None]) -> float:
    """Unweighted mean over the defined AP cells; errors if every cell is undefined."""
    defined = [a for a in aps if a is not None]
    if not defined:
        raise ValueError("mean_ap needs at least one defined AP cell")
    return float(np.mean(defined))


def mae(c: Sequence[float], c_gt: Sequence[float]) -> float:
    """Mean absolute error between predicted and ground-truth values."""
    c = np.asarray(c, dtype=np.float64)
    c_gt = np.asarray(c_gt, dtype=np.float64)
    if c.shape != c_gt.shape or c.ndim != 1 or c.shape[0] == 0:
        raise ValueError(
            f"mae needs two equal-length non-empty series, got {c.shape} and {c_gt.shape}"
        )
    return float(np.mean(np.abs(c - c_gt)))


def pearson(c: Sequence[float], c_gt: Sequence[float]) -> float | None:
    """Pearson correlation coefficient; None when either series has zero variance."""
    c = np.asarray(c, dtype=np.float64)
    c_gt = np.asarray(c_gt, dtype=np.float64)
    if c.shape != c_gt.shape or c.ndim != 1 or c.shape[0] < 2:
        raise ValueError(
            f"pearson needs two equal-length series of >= 2 values, got "
            f"{c.shape} and {c_gt.shape}"
        )
    dc = c - c.mean()
    dg = c_gt - c_gt.mean()
    denom = np.sqrt(np.sum(dc * dc)) * np.sqrt(np.sum(dg * dg))
    if denom == 0.0:
        return None
    return float(np.sum(dc * dg) / denom)


def ratio_pairs(
    estimated: Mapping[str, RatioReport],
    ground_truth: Mapping[str, RatioReport],
    cfg: EvalConfig = EvalConfig(),
) -> list[tuple[str, float, float]]:
    """(image_id, gt_ratio, est_ratio) for every image surviving the filters.

    Images are dropped when their ground truth has fewer faces than
    cfg.min_faces_per_image or when either ratio is undefined (an image
    missing from the estimates counts as undefined). Sorted by image id.
    """
    pairs = []
    for image_id in sorted(ground_truth):
        gt = ground_truth[image_id]
        if gt.total < cfg.min_faces_per_image or gt.ratio is None:
            continue
        est = estimated.get(image_id)
        if est is None or est.ratio is None:
            continue
        pairs.append((image_id, gt.ratio, est.ratio))
    return pairs


def ratio_correlation(
    estimated: Mapping[str, RatioReport],
    ground_truth: Mapping[str, RatioReport],
    cfg: EvalConfig = EvalConfig(),
) -> float | None:
    """Pearson correlation of estimated vs ground-truth ratios after filtering.

    None when fewer than two images survive or when a series is constant.
    """
    pairs = ratio_pairs(estimated, ground_truth, cfg)
    if len(pairs) < 2:
        return None
    return pearson([p[2] for p in pairs], [p[1] for p in pairs])
