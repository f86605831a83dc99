import math

import numpy as np
import pytest

from maskbench.geometry import Annotation, BBox, Detection, FaceLabel
from maskbench.ratio import (
    Condition,
    CovidPeriod,
    ImageMeta,
    RatioReport,
    aggregate_by_video,
    annotation_ratio,
    density_ratio,
    detection_ratio,
    group_by_condition,
    nms,
)


def det(l, t, r, b, label=FaceLabel.MASKED, conf=0.9):
    return Detection(BBox(l, t, r, b), label, conf)


class TestRatioReport:
    def test_ratio_and_total(self):
        r = RatioReport(5.0, 15.0)
        assert r.total == 20.0
        assert r.ratio == 0.25
        assert r.unmasked_ratio == 0.75

    def test_undefined_when_empty(self):
        r = RatioReport(0.0, 0.0)
        assert r.ratio is None and r.unmasked_ratio is None

    def test_rejects_negative(self):
        with pytest.raises(ValueError):
            RatioReport(-1.0, 0.0)

    def test_complement(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            r = RatioReport(rng.uniform(0, 10), rng.uniform(0.1, 10))
            assert r.ratio + r.unmasked_ratio == pytest.approx(1.0, abs=1e-12)


class TestImageMeta:
    def test_requires_video_id(self):
        with pytest.raises(ValueError):
            ImageMeta("", Condition.DAYTIME)

    def test_period_optional(self):
        meta = ImageMeta("v1", Condition.NIGHTTIME)
        assert meta.covid_period is None


class TestNms:
    def test_single_detection_kept(self):
        d = det(0, 0, 10, 10)
        assert nms([d]) == [d]

    def test_suppresses_lower_confidence(self):
        hi = det(0, 0, 10, 10, conf=0.9)
        lo = det(0, 2, 10, 12, conf=0.6)  # IoU = 8/12 = 0.667
        assert nms([lo, hi], iou_thr=0.5) == [hi]

    def test_classwise_keeps_other_class(self):
        a = det(0, 0, 10, 10, FaceLabel.MASKED, 0.9)
        b = det(0, 0, 10, 10, FaceLabel.UNMASKED, 0.8)
        assert nms([a, b], iou_thr=0.5) == [a, b]

    def test_tie_prefers_earlier_input(self):
        a = det(0, 0, 10, 10, conf=0.7)
        b = det(0, 1, 10, 11, conf=0.7)
        assert nms([a, b], iou_thr=0.5) == [a]
        assert nms([b, a], iou_thr=0.5) == [b]

    def test_output_subset_and_separation(self):
        rng = np.random.default_rng(1)
        dets = []
        for _ in range(60):
            l, t = rng.uniform(0, 40, 2)
            dets.append(
                det(
                    l, t, l + rng.uniform(4, 20), t + rng.uniform(4, 20),
                    FaceLabel.MASKED if rng.random() < 0.5 else FaceLabel.UNMASKED,
                    float(rng.uniform(0, 1)),
                )
            )
        kept = nms(dets, iou_thr=0.4)
        assert all(k in dets for k in kept)
        from maskbench.geometry import iou

        for i, a in enumerate(kept):
            for b in kept[i + 1 :]:
                if a.label is b.label:
                    assert iou(a.box, b.box) < 0.4

    def test_monotone_in_threshold(self):
        rng = np.random.default_rng(2)
        dets = []
        for _ in range(40):
            l, t = rng.uniform(0, 30, 2)
            dets.append(det(l, t, l + 10, t + 10, conf=float(rng.uniform(0, 1))))
        last = 0
        for thr in (0.2, 0.4, 0.6, 0.8, 1.0):
            n = len(nms(dets, iou_thr=thr))
            assert n >= last
            last = n

    def test_bad_threshold(self):
        with pytest.raises(ValueError):
            nms([], iou_thr=0.0)
        with pytest.raises(ValueError):
            nms([], iou_thr=1.5)


class TestDetectionRatio:
    def test_basic_counts(self):
        dets = [det(0, 0, 10, 10, FaceLabel.MASKED, 0.9)] * 5
        dets += [det(0, 0, 10, 10, FaceLabel.UNMASKED, 0.8)] * 15
        r = detection_ratio(dets, 0.5)
        assert (r.masked_count, r.unmasked_count) == (5.0, 15.0)
        assert r.ratio == 0.25

    def test_all_below_threshold(self):
        dets = [det(0, 0, 10, 10, conf=0.4)] * 3
        r = detection_ratio(dets, 0.5)
        assert r.total == 0.0 and r.ratio is None

    def test_threshold_inclusive(self):
        r = detection_ratio([det(0, 0, 10, 10, conf=0.5)], 0.5)
        assert r.masked_count == 1.0

    def test_dense_scene_ratio(self):
        dets = [det(0, 0, 10, 10, FaceLabel.MASKED, 1.0)] * 70
        dets += [det(0, 0, 10, 10, FaceLabel.UNMASKED, 1.0)] * 5
        assert detection_ratio(dets).ratio == pytest.approx(70 / 75, abs=1e-12)

    def test_order_and_subthreshold_invariance(self):
        rng = np.random.default_rng(3)
        dets = [
            det(0, 0, 10, 10, FaceLabel.MASKED if rng.random() < 0.5 else FaceLabel.UNMASKED,
                float(rng.uniform(0, 1)))
            for _ in range(30)
        ]
        base = detection_ratio(dets)
        shuffled = list(dets)
        rng.shuffle(shuffled)
        extra = shuffled + [det(0, 0, 10, 10, conf=0.49)] * 7
        again = detection_ratio(extra)
        assert (base.masked_count, base.unmasked_count) == (
            again.masked_count,
            again.unmasked_count,
        )


class TestAnnotationRatio:
    def test_unknown_never_counts(self):
        annos = [
            Annotation(BBox(0, 0, 10, 10), FaceLabel.MASKED),
            Annotation(BBox(0, 0, 10, 10), FaceLabel.UNKNOWN),
            Annotation(BBox(0, 0, 10, 10), FaceLabel.UNMASKED),
        ]
        r = annotation_ratio(annos)
        assert r.total == 2.0 and r.ratio == 0.5


class TestDensityRatio:
    def test_basic(self):
        r = density_ratio(20.0, 15.0)
        assert r.masked_count == 5.0 and r.ratio == 0.25

    def test_clamps_excess_unmasked(self):
        r = density_ratio(10.0, 12.0)
        assert r.masked_count == 0.0 and r.ratio == 0.0

    def test_clamps_negative_unmasked(self):
        r = density_ratio(10.0, -2.0)
        assert r.unmasked_count == 0.0 and r.ratio == 1.0

    def test_zero_total_undefined(self):
        assert density_ratio(0.0, 0.0).ratio is None

    def test_rejects_bad_inputs(self):
        with pytest.raises(ValueError):
            density_ratio(-1.0, 0.0)
        with pytest.raises(ValueError):
            density_ratio(math.nan, 0.0)


def meta(video, cond=Condition.DAYTIME):
    return ImageMeta(video, cond, CovidPeriod.DURING)


class TestAggregateByVideo:
    def test_mean(self):
        rows = [(meta("v1"), RatioReport(2, 8)), (meta("v1"), RatioReport(4, 6))]
        (agg,) = aggregate_by_video(rows)
        assert agg.video_id == "v1"
        assert agg.n_images == 2
        assert agg.mean_ratio == pytest.approx(0.3, abs=1e-15)

    def test_all_undefined_video(self):
        rows = [(meta("v1"), RatioReport(0, 0)), (meta("v1"), RatioReport(0, 0))]
        (agg,) = aggregate_by_video(rows)
        assert agg.mean_ratio is None and agg.n_defined == 0

    def test_grouping_and_sorting(self):
        rows = [
            (meta("vb"), RatioReport(1, 1)),
            (meta("va"), RatioReport(1, 3)),
            (meta("vb"), RatioReport(3, 1)),
        ]
        aggs = aggregate_by_video(rows)
        assert [a.video_id for a in aggs] == ["va", "vb"]
        assert aggs[0].mean_ratio == 0.25
        assert aggs[1].mean_ratio == 0.625

    def test_identical_ratios_exact(self):
        # 0.1 is not exactly representable; the mean must still return it bit-for-bit
        rows = [(meta("v"), RatioReport(1, 9))] * 3
        (agg,) = aggregate_by_video(rows)
        assert agg.mean_ratio == RatioReport(1, 9).ratio

    def test_undefined_excluded_not_zeroed(self):
        rows = [(meta("v"), RatioReport(1, 1)), (meta("v"), RatioReport(0, 0))]
        (agg,) = aggregate_by_video(rows)
        assert agg.mean_ratio == 0.5  # the undefined image does not drag it to 0.25
        assert agg.n_images == 2 and agg.n_defined == 1


class TestGroupByCondition:
    def test_partition_sizes(self):
        rows = [
            (ImageMeta("v", Condition.DAYTIME), 1),
            (ImageMeta("v", Condition.NIGHTTIME), 2),
            (ImageMeta("v", Condition.DAYTIME), 3),
        ]
        groups = group_by_condition(rows)
        assert len(groups[Condition.DAYTIME]) + len(groups[Condition.NIGHTTIME]) == 3

    def test_all_daytime(self):
        rows = [(ImageMeta("v", Condition.DAYTIME), i) for i in range(4)]
        groups = group_by_condition(rows)
        assert groups[Condition.NIGHTTIME] == []

    def test_stable_order(self):
        rows = [(ImageMeta("v", Condition.DAYTIME), i) for i in range(5)]
        groups = group_by_condition(rows)
        assert [item for _, item in groups[Condition.DAYTIME]] == [0, 1, 2, 3, 4]
