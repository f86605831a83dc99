"""Acceptance suite: one test per criterion, each printing a pass/fail line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the per-criterion
lines as they complete.
"""

import json
import math
import time

import numpy as np
import pytest

from maskbench.anchors import focal_loss
from maskbench.cli import main
from maskbench.dataset import SynthParams, synth_scene
from maskbench.density import PointSet, downsample_sum_preserving, render_density
from maskbench.fusion import (
    FeatureLevel,
    FusionWeights,
    fusion_weight_gradients,
    level_shape,
    node_arity,
)
from maskbench.geometry import FaceLabel, SizeBucket
from maskbench.metrics import EvalConfig, average_precision, mae, mean_ap, pearson, ratio_correlation
from maskbench.ratio import annotation_ratio, detection_ratio

from oracles import brute_force_ap, fd_fusion_gradient
from test_metrics import _random_instance


def check(num: int, description: str, passed: bool, detail: str = "") -> None:
    status = "PASS" if passed else "FAIL"
    suffix = f" ({detail})" if detail else ""
    print(f"[criterion {num}] {status}: {description}{suffix}")
    assert passed, f"criterion {num} failed: {description}{suffix}"


def test_criterion_1_zero_noise_oracle_end_to_end(tmp_path):
    start = time.perf_counter()
    scene = tmp_path / "scene"
    assert main(["synth", "--seed", "2024", "--out", str(scene), "--images", "200",
                 "--faces-min", "5", "--faces-max", "80", "--no-density"]) == 0
    assert main(["eval-det", "--annotations", str(scene / "annotations.jsonl"),
                 "--detections", str(scene / "detections.jsonl"),
                 "--format", "json", "--out", str(tmp_path / "det.json")]) == 0
    assert main(["eval-ratio", "--annotations", str(scene / "annotations.jsonl"),
                 "--detections", str(scene / "detections.jsonl"),
                 "--format", "json", "--out", str(tmp_path / "ratio.json")]) == 0
    elapsed = time.perf_counter() - start

    det = json.loads((tmp_path / "det.json").read_text())["report"]
    map_value = {(r[0], r[1]): r[2] for r in det["rows"]}[("mAP", "")]
    ratio_rows = {r[0]: r for r in json.loads((tmp_path / "ratio.json").read_text())["report"]["rows"]}
    maes = [ratio_rows[q][2] for q in ("masked", "unmasked", "total")]
    gamma = ratio_rows["ratio"][3]

    check(
        1,
        "zero-noise synth through eval-det and eval-ratio is a perfect oracle",
        map_value == 1.0
        and all(m == 0.0 for m in maes)
        and abs(gamma - 1.0) <= 1e-9
        and elapsed < 60.0,
        f"mAP={map_value}, count MAEs={maes}, gamma={gamma:.12f}, {elapsed:.1f}s",
    )


@pytest.fixture(scope="module")
def published_fixtures(tmp_path_factory):
    """JSONL pair encoding the published per-split label counts."""
    root = tmp_path_factory.mktemp("published")

    def build(path, prefix, images, masked, unmasked, unknown):
        face = {
            "masked": '{"box":[0,0,12,12],"label":"masked"}',
            "unmasked": '{"box":[0,0,12,12],"label":"unmasked"}',
            "unknown": '{"box":[0,0,12,12],"label":"unknown"}',
        }
        counts = {"masked": masked, "unmasked": unmasked, "unknown": unknown}
        base = {k: divmod(v, images) for k, v in counts.items()}
        with open(path, "w") as f:
            for i in range(images):
                faces = []
                for kind in ("masked", "unmasked", "unknown"):
                    per, extra = base[kind]
                    n = per + (1 if i < extra else 0)
                    faces.extend([face[kind]] * n)
                f.write(
                    f'{{"image_id":"{prefix}{i}","video_id":"v1","condition":"DT",'
                    f'"period":"during","width":100,"height":100,'
                    f'"faces":[{",".join(faces)}]}}\n'
                )

    train = root / "train.jsonl"
    test = root / "test.jsonl"
    build(train, "tr", 12_058, 48_736, 317_527, 24_594)
    build(test, "te", 6_030, 23_971, 154_973, 11_307)
    return train, test


def test_criterion_2_published_count_arithmetic(published_fixtures, tmp_path):
    train_path, test_path = published_fixtures
    out = tmp_path / "stats.json"
    assert main(["stats", "--train", str(train_path), "--test", str(test_path),
                 "--format", "json", "--out", str(out)]) == 0
    tables = json.loads(out.read_text())
    counts = {r[0]: r for r in tables["counts"]["rows"]}
    averages = {r[0]: r for r in tables["per_image_averages"]["rows"]}

    totals_ok = counts["Total"] == ["Total", 18_088, 72_707, 472_500, 35_901]
    split_ok = (
        counts["Training"] == ["Training", 12_058, 48_736, 317_527, 24_594]
        and counts["Testing"] == ["Testing", 6_030, 23_971, 154_973, 11_307]
    )
    averages_ok = (
        averages["Training"] == ["Training", 4.0, 26.3, 2.0]
        and averages["Testing"] == ["Testing", 4.0, 25.7, 1.9]
    )
    check(
        2,
        "published per-split fixtures reproduce totals and per-image averages exactly",
        totals_ok and split_ok and averages_ok,
        f"total row {counts['Total']}, averages {averages['Training']} / {averages['Testing']}",
    )


def test_criterion_3_map_aggregation_rule():
    cells = [0.865, 0.693, 0.282, 0.912, 0.771, 0.317]
    value = mean_ap(cells) * 100
    check(
        3,
        "published per-cell AP values aggregate to within 0.5 points of 64.2",
        abs(value - 64.2) <= 0.5,
        f"mean = {value:.2f}",
    )


def test_criterion_4_density_mass_conservation():
    rng = np.random.default_rng(77)
    worst_mass = 0.0
    worst_down = 0.0
    for _ in range(1000):
        n = int(rng.integers(0, 501))
        points = np.column_stack(
            [rng.uniform(0, 256, n), rng.uniform(0, 256, n)]
        )
        dmap = render_density(PointSet([tuple(p) for p in points], 256, 256))
        worst_mass = max(worst_mass, abs(dmap.values.sum() - n))
        down = downsample_sum_preserving(dmap, 8)
        worst_down = max(worst_down, abs(down.values.sum() - dmap.values.sum()))
    check(
        4,
        "1000 random scenes conserve mass to 1e-3 and survive 8x downsampling to 1e-9",
        worst_mass <= 1e-3 and worst_down <= 1e-9,
        f"worst |integral-N| = {worst_mass:.2e}, worst downsample drift = {worst_down:.2e}",
    )


def test_criterion_5_ap_matches_brute_force():
    rng = np.random.default_rng(2718)
    cfg = EvalConfig()
    worst = 0.0
    compared = 0
    for _ in range(1000):
        gts, dets = _random_instance(rng)
        label = FaceLabel.MASKED if rng.random() < 0.5 else FaceLabel.UNMASKED
        bucket = (None, SizeBucket.S, SizeBucket.M, SizeBucket.L)[rng.integers(0, 4)]
        got = average_precision(dets, gts, label, bucket, cfg)
        want = brute_force_ap(dets, gts, label, bucket, cfg.iou_thr)
        if (got is None) != (want is None):
            check(5, "greedy AP equals the brute-force reference", False,
                  f"definedness mismatch: {got} vs {want}")
        if got is not None:
            worst = max(worst, abs(got - want))
            compared += 1
    check(
        5,
        "greedy AP equals the brute-force reference on 1000 random instances",
        worst <= 1e-9 and compared > 400,
        f"worst |diff| = {worst:.2e} over {compared} defined cells",
    )


def test_criterion_6_fusion_gradient_check():
    rng = np.random.default_rng(99)
    levels = (3, 4, 5)
    worst = 0.0
    for _ in range(100):
        image_w = int(rng.integers(8, 65))
        image_h = int(rng.integers(8, 65))
        channels = int(rng.integers(1, 5))
        m_in = {
            level: FeatureLevel(level, rng.standard_normal((channels, *level_shape(image_w, image_h, level))))
            for level in levels
        }
        weights = FusionWeights(
            {name: rng.uniform(0.2, 2.0, k) for name, k in node_arity(levels).items()},
            epsilon=1e-4,
        )
        upstream = {l: rng.standard_normal(m_in[l].values.shape) for l in levels}
        analytic = fusion_weight_gradients(m_in, weights, None, upstream)
        for name, grads in analytic.items():
            for j in range(grads.shape[0]):
                fd = fd_fusion_gradient(m_in, weights, None, upstream, name, j, step=1e-5)
                rel = abs(grads[j] - fd) / max(abs(grads[j]), abs(fd), 1e-3)
                worst = max(worst, rel)
    check(
        6,
        "analytic fusion-weight gradients match central differences on 100 pyramids",
        worst <= 1e-5,
        f"worst relative error = {worst:.2e}",
    )


def test_criterion_7_metric_hand_values():
    p = pearson([1.0, 2.0, 3.0, 4.0], [1.0, 3.0, 2.0, 4.0])
    m = mae([3.0, 5.0], [1.0, 6.0])
    f = focal_loss(0.5, 1.0, alpha=1.0, gamma=2.0)
    ok = (
        abs(p - 0.8) <= 1e-12
        and abs(m - 1.5) <= 1e-12
        and abs(f - 0.25 * math.log(2)) <= 1e-12
    )
    check(7, "pearson, mae, and focal-loss hand values agree to 1e-12", ok,
          f"pearson={p!r}, mae={m!r}, focal={f!r}")


def test_criterion_8_ratio_quality_degrades_with_label_noise():
    flip_rates = (0.0, 0.1, 0.2, 0.4)
    cfg = EvalConfig()
    means = []
    for flip in flip_rates:
        gammas = []
        for seed in range(10):
            scene = synth_scene(
                SynthParams(seed=seed, n_images=150, faces_min=5, faces_max=60,
                            flip_rate=flip),
                include_density=False,
            )
            gt = {rec.image_id: annotation_ratio(rec.annotations)
                  for rec in scene.manifest.images}
            est = {rec.image_id: detection_ratio(rec.detections, 0.5)
                   for rec in scene.detections}
            gamma = ratio_correlation(est, gt, cfg)
            assert gamma is not None
            gammas.append(gamma)
        means.append(sum(gammas) / len(gammas))
    non_increasing = all(a >= b - 1e-12 for a, b in zip(means, means[1:]))
    check(
        8,
        "mean ratio correlation over 10 seeds never rises as flip noise grows",
        non_increasing and means[0] == pytest.approx(1.0, abs=1e-9),
        "means = " + ", ".join(f"{m:.4f}" for m in means),
    )


def _run_suite(root, threads: str) -> None:
    scene = root / "scene"
    assert main(["synth", "--seed", "5", "--out", str(scene), "--images", "24",
                 "--faces-min", "4", "--faces-max", "12", "--width", "64",
                 "--height", "64", "--threads", threads]) == 0
    assert main(["gen-density", "--annotations", str(scene / "annotations.jsonl"),
                 "--out", str(root / "gtmaps"), "--threads", threads]) == 0
    assert main(["stats", "--train", str(scene / "annotations.jsonl"),
                 "--test", str(scene / "annotations.jsonl"),
                 "--threads", threads, "--format", "json",
                 "--out", str(root / "stats.json")]) == 0
    assert main(["eval-det", "--annotations", str(scene / "annotations.jsonl"),
                 "--detections", str(scene / "detections.jsonl"),
                 "--threads", threads, "--out", str(root / "det.csv")]) == 0
    assert main(["eval-count", "--annotations", str(scene / "annotations.jsonl"),
                 "--density-dir", str(scene / "density"),
                 "--threads", threads, "--out", str(root / "count.csv")]) == 0
    assert main(["eval-ratio", "--annotations", str(scene / "annotations.jsonl"),
                 "--detections", str(scene / "detections.jsonl"),
                 "--by-condition", "--scatter", str(root / "scatter.csv"),
                 "--threads", threads, "--out", str(root / "ratio.csv")]) == 0
    assert main(["report-video", "--annotations", str(scene / "annotations.jsonl"),
                 "--detections", str(scene / "detections.jsonl"),
                 "--threads", threads, "--out", str(root / "videos.csv")]) == 0
    assert main(["gradcheck", "--trials", "2", "--threads", threads,
                 "--out", str(root / "gradcheck.csv")]) == 0


def test_criterion_9_thread_count_never_changes_bytes(tmp_path):
    roots = []
    for threads in ("1", "4"):
        root = tmp_path / f"threads{threads}"
        root.mkdir()
        _run_suite(root, threads)
        roots.append(root)
    a, b = roots
    files_a = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    same_list = files_a == files_b and len(files_a) > 10
    mismatched = [
        str(rel) for rel in files_a
        if (a / rel).read_bytes() != (b / rel).read_bytes()
    ] if same_list else ["<file lists differ>"]
    check(
        9,
        "the full CLI suite at 1 and 4 threads produces byte-identical output trees",
        same_list and not mismatched,
        f"{len(files_a)} files compared",
    )
