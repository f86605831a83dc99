"""Anchor grids, anchor-to-ground-truth matching, box coding, and the detector loss.

The training loss for one image sums, over anchors, an objectness binary
cross-entropy, plus (for positive anchors only) a focal masked/unmasked
classification term and a smooth-L1 box regression term. Only evaluation is
implemented; gradients of this loss are out of scope.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .geometry import Annotation, BBox, FaceLabel, boxes_to_array, iou_matrix

DEFAULT_LEVELS: tuple[int, ...] = (3, 4, 5, 6, 7)
DEFAULT_RATIOS: tuple[float, ...] = (0.5, 1.0, 2.0)  # width:height

# per-anchor probabilities are clamped to [PROB_EPS, 1 - PROB_EPS] to keep logs finite
PROB_EPS = 1e-7

# assignment codes in MatchResult.assignment (non-negative values are gt indices)
NEGATIVE = -1
IGNORE = -2


def default_scales(levels: Sequence[int] = DEFAULT_LEVELS) -> dict[int, tuple[float, ...]]:
    """One base size per level: 16 px at level 3 doubling up to 256 px at level 7."""
    return {level: (float(2 ** (level + 1)),) for level in levels}


@dataclass(frozen=True)
class AnchorSet:
    """Materialized anchors: (N, 4) ltrb boxes with the pyramid level of each."""

    boxes: np.ndarray
    levels: np.ndarray

    def __len__(self) -> int:
        return self.boxes.shape[0]


def generate_anchors(
    image_w: int,
    image_h: int,
    levels: Sequence[int] = DEFAULT_LEVELS,
    scales: Mapping[int, Sequence[float]] | Sequence[float] | None = None,
    ratios: Sequence[float] = DEFAULT_RATIOS,
) -> AnchorSet:
    """Tile anchors over every feature-map cell of the requested pyramid levels.

    Each level uses stride 2**level and a grid of ceil(image_dim / stride)
    cells; every cell gets one anchor per (scale, ratio) pair, centered on the
    cell. A ratio r (width:height) produces width = size * sqrt(r) and
    height = size / sqrt(r), preserving the anchor area.
    """
    if image_w <= 0 or image_h <= 0:
        raise ValueError("image dimensions must be positive")
    levels = list(levels)
    if not levels:
        raise ValueError("at least one pyramid level is required")
    if scales is None:
        scales = default_scales(levels)
    if not isinstance(scales, Mapping):
        scales = {level: tuple(scales) for level in levels}
    ratios = [float(r) for r in ratios]
    if not ratios or any(r <= 0 for r in ratios):
        raise ValueError(f"aspect ratios must be positive and non-empty, got {ratios}")

    all_boxes = []
    all_levels = []
    for level in levels:
        level_scales = [float(s) for s in scales[level]]
        if not level_scales or any(s <= 0 for s in level_scales):
            raise ValueError(f"scales for level {level} must be positive and non-empty")
        stride = float(2**level)
        grid_w = math.ceil(image_w / stride)
        grid_h = math.ceil(image_h / stride)
        cx = (np.arange(grid_w, dtype=np.float64) + 0.5) * stride
        cy = (np.arange(grid_h, dtype=np.float64) + 0.5) * stride
        shapes = np.array(
            [(s * math.sqrt(r), s / math.sqrt(r)) for s in level_scales for r in ratios],
            dtype=np.float64,
        )  # (A, 2) of (w, h)
        centers = np.stack(
            [np.repeat(cx[None, :], grid_h, axis=0), np.repeat(cy[:, None], grid_w, axis=1)],
            axis=-1,
        ).reshape(-1, 2)  # (grid_h*grid_w, 2), row-major over cells
        half = shapes / 2.0
        boxes = np.concatenate(
            [
                (centers[:, None, :] - half[None, :, :]).reshape(-1, 2),
                (centers[:, None, :] + half[None, :, :]).reshape(-1, 2),
            ],
            axis=1,
        )
        all_boxes.append(boxes)
        all_levels.append(np.full(boxes.shape[0], level, dtype=np.int64))
    return AnchorSet(np.concatenate(all_boxes), np.concatenate(all_levels))


@dataclass(frozen=True)
class MatchResult:
    """Per-anchor assignment and training targets.

    assignment: gt index for positives, NEGATIVE (-1) or IGNORE (-2) otherwise.
    objectness_target: 1.0 for positives, 0.0 for negatives (unused at ignores).
    class_target: 1.0 for masked-face positives, 0.0 otherwise (only meaningful
    at positives). box_target: encoded offsets, zeros at non-positives.
    """

    assignment: np.ndarray
    objectness_target: np.ndarray
    class_target: np.ndarray
    box_target: np.ndarray

    @property
    def positive_mask(self) -> np.ndarray:
        return self.assignment >= 0

    @property
    def negative_mask(self) -> np.ndarray:
        return self.assignment == NEGATIVE

    @property
    def ignore_mask(self) -> np.ndarray:
        return self.assignment == IGNORE

    @property
    def n_positive(self) -> int:
        return int(np.count_nonzero(self.positive_mask))

    def __len__(self) -> int:
        return self.assignment.shape[0]


def match_anchors(
    anchors: AnchorSet | np.ndarray,
    gts: Sequence[Annotation],
    pos_iou: float = 0.5,
    neg_iou: float = 0.3,
) -> MatchResult:
    """Assign each anchor to Positive / Negative / Ignore against the ground truth.

    An anchor is positive when its best IoU is >= pos_iou (assigned to the
    argmax gt, ties to the lowest gt index), negative when the best IoU is
    below neg_iou, and ignored in between. Anchors whose best-overlapping gt
    is UNKNOWN with IoU >= neg_iou are ignored: unknown faces are ignore
    regions, never training targets. Finally each known gt forces its
    highest-IoU anchor positive (IoU > 0 required, ties to the lowest anchor
    index); when that anchor was already claimed by an earlier gt the next
    best unclaimed anchor is taken, so no overlapped face is left without a
    positive anchor.
    """
    if pos_iou < neg_iou:
        raise ValueError(f"pos_iou ({pos_iou}) must be >= neg_iou ({neg_iou})")
    boxes = anchors.boxes if isinstance(anchors, AnchorSet) else np.asarray(anchors)
    n = boxes.shape[0]
    assignment = np.full(n, NEGATIVE, dtype=np.int64)
    box_target = np.zeros((n, 4), dtype=np.float64)
    class_target = np.zeros(n, dtype=np.float64)

    if gts:
        gt_boxes = boxes_to_array(a.box for a in gts)
        unknown = np.array([a.label is FaceLabel.UNKNOWN for a in gts])
        masked = np.array([a.label is FaceLabel.MASKED for a in gts])
        ious = iou_matrix(boxes, gt_boxes)

        best_gt = ious.argmax(axis=1)  # ties resolve to the lowest index
        best_iou = ious[np.arange(n), best_gt]
        best_is_unknown = unknown[best_gt]

        assignment[(best_iou >= neg_iou) & best_is_unknown] = IGNORE
        band = (best_iou >= neg_iou) & (best_iou < pos_iou) & ~best_is_unknown
        assignment[band] = IGNORE
        positive = (best_iou >= pos_iou) & ~best_is_unknown
        assignment[positive] = best_gt[positive]

        # forced matches: the best unclaimed anchor of every known, overlapped gt
        claimed: set[int] = set()
        for j in range(len(gts)):
            if unknown[j]:
                continue
            for a in np.argsort(-ious[:, j], kind="stable"):
                if ious[a, j] <= 0.0:
                    break
                if int(a) not in claimed:
                    claimed.add(int(a))
                    assignment[a] = j
                    break

        pos = assignment >= 0
        if np.any(pos):
            box_target[pos] = encode_boxes(boxes[pos], gt_boxes[assignment[pos]])
            class_target[pos] = masked[assignment[pos]].astype(np.float64)

    objectness_target = (assignment >= 0).astype(np.float64)
    return MatchResult(assignment, objectness_target, class_target, box_target)


def encode_boxes(anchors: np.ndarray, gts: np.ndarray) -> np.ndarray:
    """Encode gt boxes relative to anchors: center offsets over anchor size, log size ratios."""
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    ax = (anchors[:, 0] + anchors[:, 2]) / 2.0
    ay = (anchors[:, 1] + anchors[:, 3]) / 2.0
    gw = gts[:, 2] - gts[:, 0]
    gh = gts[:, 3] - gts[:, 1]
    gx = (gts[:, 0] + gts[:, 2]) / 2.0
    gy = (gts[:, 1] + gts[:, 3]) / 2.0
    return np.stack(
        [(gx - ax) / aw, (gy - ay) / ah, np.log(gw / aw), np.log(gh / ah)], axis=1
    )


def decode_boxes(anchors: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Invert encode_boxes back to absolute ltrb boxes."""
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    t = np.asarray(t, dtype=np.float64).reshape(-1, 4)
    if not np.all(np.isfinite(t)):
        raise ValueError("box offsets must be finite")
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    ax = (anchors[:, 0] + anchors[:, 2]) / 2.0
    ay = (anchors[:, 1] + anchors[:, 3]) / 2.0
    gx = t[:, 0] * aw + ax
    gy = t[:, 1] * ah + ay
    gw = np.exp(t[:, 2]) * aw
    gh = np.exp(t[:, 3]) * ah
    return np.stack(
        [gx - gw / 2.0, gy - gh / 2.0, gx + gw / 2.0, gy + gh / 2.0], axis=1
    )


def encode_box(anchor: BBox, gt: BBox) -> tuple[float, float, float, float]:
    """Scalar convenience wrapper around encode_boxes."""
    t = encode_boxes(boxes_to_array([anchor]), boxes_to_array([gt]))[0]
    return (float(t[0]), float(t[1]), float(t[2]), float(t[3]))


def decode_box(anchor: BBox, t: Sequence[float]) -> BBox:
    """Scalar convenience wrapper around decode_boxes."""
    box = decode_boxes(boxes_to_array([anchor]), np.asarray(t, dtype=np.float64))[0]
    return BBox(float(box[0]), float(box[1]), float(box[2]), float(box[3]))


def binary_cross_entropy(p, target):
    """Elementwise BCE with probabilities clamped away from 0 and 1."""
    p = np.clip(np.asarray(p, dtype=np.float64), PROB_EPS, 1.0 - PROB_EPS)
    target = np.asarray(target, dtype=np.float64)
    out = -(target * np.log(p) + (1.0 - target) * np.log(1.0 - p))
    return float(out) if out.ndim == 0 else out


def focal_loss(p, target, alpha: float = 0.25, gamma: float = 2.0):
    """Focal binary cross-entropy; reduces to alpha-weighted BCE at gamma = 0.

    For target 1: -alpha * (1-p)**gamma * log(p); for target 0:
    -(1-alpha) * p**gamma * log(1-p). Probabilities are clamped like BCE.
    """
    p = np.clip(np.asarray(p, dtype=np.float64), PROB_EPS, 1.0 - PROB_EPS)
    target = np.asarray(target, dtype=np.float64)
    pos = -alpha * (1.0 - p) ** gamma * np.log(p)
    neg = -(1.0 - alpha) * p**gamma * np.log(1.0 - p)
    out = np.where(target >= 0.5, pos, neg)
    return float(out) if out.ndim == 0 else out


def smooth_l1(x):
    """Elementwise smooth L1: 0.5*x^2 for |x| < 1, |x| - 0.5 otherwise."""
    x = np.abs(np.asarray(x, dtype=np.float64))
    out = np.where(x < 1.0, 0.5 * x * x, x - 0.5)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class LossConfig:
    """Weights and options of the multi-task loss."""

    alpha: float = 0.25
    gamma: float = 2.0
    # divide every component by the positive-anchor count instead of raw sums
    normalize_by_positives: bool = False


@dataclass(frozen=True)
class LossBreakdown:
    objectness: float
    classification: float
    box: float

    @property
    def total(self) -> float:
        return self.objectness + self.classification + self.box


def multitask_loss(
    objectness_probs: np.ndarray,
    class_probs: np.ndarray,
    box_offsets: np.ndarray,
    match: MatchResult,
    config: LossConfig = LossConfig(),
) -> LossBreakdown:
    """Evaluate the detector loss for one image's predictions against a match.

    Objectness BCE sums over positive and negative anchors; the focal
    classification term and the smooth-L1 box term (summed over the 4 offsets)
    gate on positive anchors only. Ignored anchors contribute nothing.
    """
    n = len(match)
    p_obj = np.asarray(objectness_probs, dtype=np.float64).reshape(-1)
    p_cls = np.asarray(class_probs, dtype=np.float64).reshape(-1)
    t = np.asarray(box_offsets, dtype=np.float64).reshape(-1, 4)
    if p_obj.shape[0] != n or p_cls.shape[0] != n or t.shape[0] != n:
        raise ValueError(
            f"predictions must cover all {n} anchors, got "
            f"{p_obj.shape[0]}/{p_cls.shape[0]}/{t.shape[0]}"
        )

    scored = ~match.ignore_mask
    objectness = float(
        np.sum(binary_cross_entropy(p_obj[scored], match.objectness_target[scored]))
    )
    pos = match.positive_mask
    classification = float(
        np.sum(
            focal_loss(p_cls[pos], match.class_target[pos], config.alpha, config.gamma)
        )
    )
    box = float(np.sum(smooth_l1(t[pos] - match.box_target[pos])))

    if config.normalize_by_positives:
        denom = max(1, match.n_positive)
        objectness /= denom
        classification /= denom
        box /= denom
    return LossBreakdown(objectness, classification, box)
