import json

import numpy as np
import pytest
from PIL import Image

from phytnet import arch, data
from phytnet.crossval import cross_validate, summarize_folds
from phytnet.errors import FoldError, UsageError
from phytnet.gradcam import blend, cam_from_activations, grad_cam, jet, normalize_map, overlay, overlay_filename
from phytnet.metrics import confusion_matrix, macro_f1, metrics, predict_class, summarize
from phytnet.tensor import Tensor
from phytnet.train import TrainConfig

MINIMAL = arch.ModelConfig(stem_channels=16, stage_channels=[16], blocks_per_stage=[1], groups=4)


# -- predictions and metrics -------------------------------------------------------------


def test_predict_class_examples():
    assert predict_class(np.array([[0.1, 0.9, 0.2, 0.3, 5.0, 5.0, 5.0, 5.0]]), 4).tolist() == [1]
    assert predict_class(np.zeros((3, 6)), 4).tolist() == [0, 0, 0]
    with pytest.raises(ValueError):
        predict_class(np.zeros((1, 3)), 4)


def test_predict_class_matches_restricted_argmax(rng):
    for _ in range(50):
        nodes = int(rng.integers(4, 11))
        c = int(rng.integers(2, nodes + 1))
        z = rng.normal(size=(7, nodes))
        got = predict_class(z, c)
        assert got.max() < c
        for row, g in zip(z, got):
            best = 0
            for j in range(1, c):
                if row[j] > row[best]:
                    best = j
            assert g == best


def test_metrics_examples():
    diag = metrics(np.diag([3, 4, 5]))
    assert diag.precision == diag.recall == diag.f1 == [1.0] * 3
    assert diag.macro_f1 == diag.accuracy == 1.0
    off = metrics(np.array([[0, 2], [3, 0]]))
    assert off.f1 == [0.0, 0.0] and off.macro_f1 == 0.0
    two = metrics(np.array([[2, 1], [1, 2]]))
    for values in (two.precision, two.recall, two.f1):
        np.testing.assert_allclose(values, [2 / 3, 2 / 3], rtol=1e-15)
    assert abs(two.macro_f1 - 2 / 3) < 1e-15


def test_metrics_zero_denominators():
    # class 2 is never predicted nor present
    r = metrics(np.array([[1, 1, 0], [0, 2, 0], [0, 0, 0]]))
    assert r.precision[2] == r.recall[2] == r.f1[2] == 0.0


def test_confusion_matrix_orientation():
    cm = confusion_matrix([0, 0, 1, 2], [0, 1, 1, 1], 3)
    assert cm.tolist() == [[1, 1, 0], [0, 1, 0], [0, 1, 0]]


def test_accuracy_is_trace_over_total(rng):
    for _ in range(100):
        c = int(rng.integers(2, 8))
        cm = rng.integers(0, 20, (c, c))
        cm[0, 0] += 1
        assert metrics(cm).accuracy == np.trace(cm) / cm.sum()


def test_macro_f1_against_per_class_oracle(rng):
    y, p = rng.integers(0, 4, 200), rng.integers(0, 4, 200)
    f1s = []
    for c in range(4):
        tp = np.sum((y == c) & (p == c))
        prec, rec = tp / np.sum(p == c), tp / np.sum(y == c)
        f1s.append(2 * prec * rec / (prec + rec))
    assert abs(macro_f1(y, p, 4) - np.mean(f1s)) < 1e-12


def test_summarize_matches_percentiles(rng):
    v = rng.random(10)
    s = summarize(v)
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    assert (s["q1"], s["median"], s["q3"]) == (q1, med, q3)
    assert s["iqr"] == q3 - q1 and s["min"] == v.min() and s["max"] == v.max()


# -- Grad-CAM -------------------------------------------------------------------------------


def test_cam_single_channel_reduction(rng):
    a = rng.normal(size=(1, 5, 6))
    cam = normalize_map(cam_from_activations(a, np.ones_like(a)))
    relu = np.maximum(a[0], 0)
    np.testing.assert_allclose(cam, relu / relu.max(), rtol=1e-12)


def test_cam_relu_kill(rng):
    a = -rng.random((3, 4, 4))
    g = rng.random((3, 4, 4))
    cam = cam_from_activations(a, g)
    assert np.all(cam == 0)
    assert np.all(normalize_map(cam) == 0)


def test_cam_two_channel_composition(rng):
    for _ in range(20):
        a = rng.normal(size=(2, 7, 7))
        w = rng.normal(size=2)
        g = w[:, None, None] + rng.normal(size=(2, 7, 7)) * 0.1
        g -= g.mean(axis=(1, 2), keepdims=True) - w[:, None, None]  # spatial means are exactly w
        oracle = np.maximum(w[0] * a[0] + w[1] * a[1], 0)
        assert np.abs(cam_from_activations(a, g) - oracle).max() < 1e-6


def test_grad_cam_on_model_matches_head_weights(rng):
    # after global average pooling the target logit is linear in the features,
    # so alpha_k = W[target, k] / (h * w) exactly
    model = arch.build_model(arch.ModelConfig(groups=4, stage_channels=[16, 32], blocks_per_stage=[1, 1]), 3)
    x = rng.normal(size=(3, 200, 200)).astype(np.float32)
    _, feats = model.forward(Tensor(x[None]), "eval", None, return_features=True)
    a = feats.data[0].astype(np.float64)
    h, w = a.shape[1:]
    for target in range(4):
        alpha = model.head.weight.data[target].astype(np.float64) / (h * w)
        oracle = np.maximum(np.tensordot(alpha, a, axes=(0, 0)), 0)
        hm = grad_cam(model, x, target)
        assert np.abs(hm.raw - oracle).max() <= 1e-6 * max(1.0, oracle.max())
        assert hm.values.shape == (200, 200) and hm.source_shape == (h, w)
        assert hm.values.min() >= 0 and hm.values.max() in (0.0, 1.0)
        assert hm.target_class == target


def test_grad_cam_class_out_of_range(rng):
    model = arch.build_model(MINIMAL)
    x = rng.normal(size=(3, 200, 200)).astype(np.float32)
    for bad in (-1, 4):
        with pytest.raises(UsageError):
            grad_cam(model, x, bad)


def test_grad_cam_leaves_no_gradients(rng):
    model = arch.build_model(MINIMAL)
    grad_cam(model, rng.normal(size=(3, 200, 200)).astype(np.float32), 1)
    assert all(p.grad is None or not np.any(p.grad) for p in model.parameters().values())


# -- overlays --------------------------------------------------------------------------------


def test_overlay_zero_heatmap_is_the_image(rng, tmp_path):
    img = rng.integers(0, 256, (9, 11, 3)).astype(np.uint8)
    buf = overlay(np.zeros((9, 11)), img, tmp_path / "o.png")
    assert np.array_equal(buf, img)


def test_overlay_saturated_heatmap_blend(rng):
    img = rng.integers(0, 256, (5, 5, 3)).astype(np.uint8)
    buf = blend(np.ones((5, 5)), img)
    # jet(1) is dark red (0.5, 0, 0); alpha is 0.5
    expected = np.round(0.5 * img + 0.5 * np.array([127.5, 0.0, 0.0]))
    assert np.array_equal(buf, expected.astype(np.uint8))
    np.testing.assert_allclose(jet(np.array([1.0]))[0], [0.5, 0.0, 0.0])


def test_overlay_png_round_trip(rng, tmp_path):
    img = rng.random((3, 16, 20)).astype(np.float32)
    heat = rng.random((16, 20))
    buf = overlay(heat, img, tmp_path / "o.png")
    assert np.array_equal(np.asarray(Image.open(tmp_path / "o.png")), buf)


def test_overlay_shape_mismatch(tmp_path):
    with pytest.raises(UsageError):
        blend(np.zeros((3, 3)), np.zeros((4, 4, 3), np.uint8))


def test_overlay_filename():
    assert overlay_filename("ring/ring_0003.png", "ring", "blob") == "ring_ring_0003_ring_blob.png"


# -- cross-validation ------------------------------------------------------------------------


@pytest.fixture(scope="module")
def tiny_cv(tiny_root):
    m = data.load_dataset(tiny_root)
    plan = data.kfold_split(m, 4, 42)
    images = data.load_images(m, 200)
    cfg = TrainConfig(lr=1e-3, max_epochs=1, batch_size=8)
    return m, plan, images, cfg


def test_cv_report_structure_and_isolation(tiny_cv, tmp_path):
    m, plan, images, cfg = tiny_cv
    report = cross_validate(MINIMAL, m, plan, cfg, images=images, run_dir=tmp_path)
    assert report.k == 4 == len(report.folds)
    every = set()
    for i, f in enumerate(report.folds):
        assert not set(f.train_ids) & set(f.val_ids)
        assert set(f.val_ids) == set(plan.fold_ids(i))
        assert set(f.train_ids) | set(f.val_ids) == set(m.source_ids)
        assert f.gap == f.train.macro_f1 - f.val.macro_f1
        every |= set(f.val_ids)
    assert every == set(m.source_ids)
    rows = [json.loads(line) for line in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    assert [r["fold"] for r in rows] == [0, 1, 2, 3]
    assert (tmp_path / "fold_00" / "best.ckpt").exists()
    saved = data.FoldPlan.load(tmp_path / "folds.json")
    assert saved.assignment == plan.assignment and sorted(saved.norm_stats) == [0, 1, 2, 3]


def test_cv_same_plan_same_validation_sets(tiny_cv):
    m, plan, images, cfg = tiny_cv
    other = arch.ModelConfig(stem_channels=8, stage_channels=[16], blocks_per_stage=[1], groups=4, mid_kernel=5)
    a = cross_validate(MINIMAL, m, plan, cfg, images=images)
    b = cross_validate(other, m, plan, cfg, images=images)
    assert [f.val_ids for f in a.folds] == [f.val_ids for f in b.folds]


def test_cv_summaries_match_percentiles(tiny_cv):
    m, plan, images, cfg = tiny_cv
    report = cross_validate(MINIMAL, m, plan, cfg, images=images)
    vals = [f.val.macro_f1 for f in report.folds]
    q1, med, q3 = np.percentile(vals, [25, 50, 75])
    s = report.summaries["val_macro_f1"]
    assert (s["median"], s["iqr"]) == (med, q3 - q1)
    per_class = [f.val.f1[2] for f in report.folds]
    assert report.summaries[f"val_f1[{m.class_names[2]}]"]["median"] == np.median(per_class)
    assert summarize_folds([f.row() for f in report.folds], m.class_names) == report.summaries


def test_cv_fold_failure_carries_index(tiny_cv):
    m, plan, images, cfg = tiny_cv
    calls = []

    def flaky():
        calls.append(1)
        if len(calls) == 2:
            raise RuntimeError("boom")
        return arch.build_model(MINIMAL)

    with pytest.raises(FoldError) as info:
        cross_validate(flaky, m, plan, cfg, images=images)
    assert info.value.fold == 1 and "boom" in str(info.value)
