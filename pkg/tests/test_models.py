# tests/test_models.py
from __future__ import annotations

import numpy as np
import pytest

from hybrid.datagen import HepDataset
from hybrid.errors import ShapeError, ValidationError
from hybrid.models import (
    CYCLONE, DENSE, RELU, RIVER, BoxTarget, ClimateLossWeights, ClimatePreds, HepNet, Layer,
    CutBaseline, baseline_cut_classifier, build_climate_mini, build_hep_mini, climate_loss, fit_cut_baseline,
    infer_boxes, roc_tpr_at_fpr,
)
from hybrid.tensor_core import grad_check


def _dense_net(seed=0):
    return HepNet("dense", (5,), [Layer("fc", DENSE, dense_in=5, dense_out=3)], [-1], [("fc", [0])], seed)


def test_hep_mini_layout():
    net = build_hep_mini()
    assert net.trainable_layer_count == 6
    assert net.shard_names == ["conv1", "conv2", "conv3", "conv4", "conv5", "fc"]
    assert [a.shape for a in net.params()[0]] == [(16, 3, 3, 3), (16,)]
    assert [a.shape for a in net.params()[5]] == [(16, 2), (2,)]
    shapes = {layer.name: out for layer, _, out in net.layer_shapes(batch=2)}
    assert shapes["pool4"] == (2, 16, 2, 2)
    assert shapes["fc"] == (2, 2)
    with pytest.raises(ValidationError):
        build_hep_mini((3, 20, 20))


def test_init_is_seeded():
    a, b, c = build_hep_mini(seed=3), build_hep_mini(seed=3), build_hep_mini(seed=4)
    assert all(np.array_equal(x, y) for sa, sb in zip(a.params(), b.params()) for x, y in zip(sa, sb))
    assert not np.array_equal(a.params()[0][0], c.params()[0][0])
    assert all(np.all(s[1] == 0) for s in a.params())


def test_set_params_rejects_wrong_shapes():
    net = build_hep_mini(filters=4)
    params = net.copy_params()
    params[0][0] = np.zeros((1, 1))
    with pytest.raises(ValidationError):
        net.set_params(params)


def test_dense_grad_check():
    net = _dense_net()
    x = np.random.default_rng(0).normal(size=(4, 5))
    assert grad_check(net, x, np.array([0, 1, 2, 1]), eps=1e-5) < 1e-6


def test_zero_parameter_network_grad_check_is_zero():
    net = HepNet("relu", (3,), [Layer("relu", RELU)], [-1], [], 0)
    assert grad_check(net, np.ones((2, 3)), np.array([0, 1])) == 0.0


def test_hep_mini_grad_check():
    net = build_hep_mini((3, 16, 16), filters=4, seed=1)
    x = np.random.default_rng(1).gamma(2.0, 1.0, size=(2, 3, 16, 16))
    assert grad_check(net, x, np.array([0, 1]), eps=1e-5, per_layer=40) < 1e-4


def test_climate_mini_layout_and_grad_check():
    net = build_climate_mini((2, 16, 16), grid=4, classes=2, filters=4, encoder_convs=2,
                             decoder_deconvs=2, seed=2)
    assert net.trainable_layer_count == 4
    assert net.shard_names == ["enc1", "enc2", "dec1", "dec2"]
    x = np.random.default_rng(2).normal(size=(2, 2, 16, 16))
    preds, recon, _ = net.forward(net.params(), x)
    assert preds.head.shape == (2, 7, 4, 4)
    assert recon.shape == x.shape
    targets = [[BoxTarget.from_box(0.1, 0.2, 0.2, 0.2, CYCLONE, 4)],
               [BoxTarget.from_box(0.5, 0.5, 0.3, 0.1, RIVER, 4)]]
    assert grad_check(net, x, targets, eps=1e-5, per_layer=40) < 1e-4


def test_fourteen_layer_climate_model():
    net = build_climate_mini(encoder_convs=7, decoder_deconvs=7)
    assert net.trainable_layer_count == 14


def test_box_target_cell_assignment():
    t = BoxTarget.from_box(0.1, 0.8, 0.1, 0.1, CYCLONE, 8)
    assert (t.cell_i, t.cell_j) == (6, 1)
    with pytest.raises(ValidationError):
        BoxTarget(0, 0, 1.0, 0, 1.2, 0.5, 0.1, 0.1)
    with pytest.raises(ValidationError):
        BoxTarget(0, 0, 1.0, 0, 0.5, 0.5, 0.0, 0.1)


def test_climate_loss_perfect_prediction_has_zero_detection_terms():
    grid, k = 4, 2
    t = BoxTarget.from_box(0.3, 0.3, 0.16, 0.25, CYCLONE, grid)
    head = np.zeros((1, 5 + k, grid, grid))
    head[0, 0] = -50.0
    head[0, 0, t.cell_i, t.cell_j] = 50.0
    head[0, 1, t.cell_i, t.cell_j] = 50.0
    head[0, 3:7, t.cell_i, t.cell_j] = [t.x * grid - t.cell_j, t.y * grid - t.cell_i, 0.4, 0.5]
    x = np.ones((1, 1, 8, 8))
    loss, grads = climate_loss(ClimatePreds(head), [[t]], x, x.copy(), ClimateLossWeights())
    assert loss == pytest.approx(0.0, abs=1e-12)
    assert np.abs(grads.head).max() < 1e-12


def test_climate_loss_rejects_two_targets_in_one_cell():
    t = BoxTarget.from_box(0.3, 0.3, 0.1, 0.1, CYCLONE, 4)
    head = np.zeros((1, 7, 4, 4))
    x = np.zeros((1, 1, 4, 4))
    with pytest.raises(ValidationError):
        climate_loss(ClimatePreds(head), [[t, t]], x, x, ClimateLossWeights())
    with pytest.raises(ValidationError):
        ClimateLossWeights(conf_obj=-1.0)


def test_infer_boxes_threshold_monotone():
    rng = np.random.default_rng(5)
    preds = ClimatePreds(rng.normal(0.0, 3.0, size=(3, 7, 8, 8)))
    low = {(b.sample, b.cell_i, b.cell_j) for b in infer_boxes(preds, 0.8)}
    high = {(b.sample, b.cell_i, b.cell_j) for b in infer_boxes(preds, 0.95)}
    assert high <= low
    assert len(low) > len(high) > 0
    for b in infer_boxes(preds, 0.8):
        assert 0.0 <= b.x <= 1.0 and 0.0 <= b.y <= 1.0 and b.w > 0 and b.h > 0
    with pytest.raises(ValidationError):
        infer_boxes(preds, 1.5)


def test_infer_boxes_decodes_offsets():
    head = np.full((1, 7, 4, 4), -20.0)
    head[0, 0, 2, 1] = 20.0
    head[0, 2, 2, 1] = 5.0
    head[0, 3:7, 2, 1] = [0.5, 0.25, 0.5, 0.3]
    (b,) = infer_boxes(ClimatePreds(head), 0.8)
    assert (b.cell_i, b.cell_j, b.class_id) == (2, 1, 1)
    assert b.x == pytest.approx(1.5 / 4) and b.y == pytest.approx(2.25 / 4)
    assert b.w == pytest.approx(0.25) and b.h == pytest.approx(0.09)


def test_roc_tpr_at_fpr():
    scores = np.array([0.9, 0.8, 0.7, 0.6, 0.5, 0.4])
    labels = np.array([1, 1, 0, 1, 0, 0])
    assert roc_tpr_at_fpr(scores, labels, 0.1) == pytest.approx(2 / 3)
    assert roc_tpr_at_fpr(scores, labels, 0.34) == pytest.approx(1.0)
    # tied scores are admitted together
    assert roc_tpr_at_fpr(np.array([1.0, 1.0, 0.0]), np.array([1, 0, 1]), 0.5) == 0.0
    with pytest.raises(ValidationError):
        roc_tpr_at_fpr(scores, np.ones(6), 0.1)


def _brute_force_tpr(scores, labels, target_fpr):
    pos, neg = labels.sum(), (1 - labels).sum()
    best = 0.0
    for thr in np.unique(scores):
        pick = scores >= thr
        if (pick & (labels == 0)).sum() / neg <= target_fpr:
            best = max(best, (pick & (labels == 1)).sum() / pos)
    return best


@pytest.mark.parametrize("seed", range(25))
def test_roc_tpr_at_fpr_matches_exhaustive_thresholds(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 201))
    labels = rng.integers(0, 2, size=n)
    labels[:2] = [0, 1]
    # coarse scores force ties
    scores = rng.integers(0, max(2, n // 4), size=n).astype(float) if seed % 2 else rng.normal(size=n)
    for target in (0.002, 0.05, 0.3, 0.9):
        assert roc_tpr_at_fpr(scores, labels, target) == pytest.approx(_brute_force_tpr(scores, labels, target))


def test_cut_baseline_separates_easy_signal():
    rng = np.random.default_rng(6)
    bkg = rng.normal(0.0, 1.0, size=(400, 3))
    sig = rng.normal(4.0, 0.5, size=(40, 3))
    features = np.vstack([bkg, sig])
    labels = np.r_[np.zeros(400, int), np.ones(40, int)]
    baseline = fit_cut_baseline(features, labels, target_fpr=0.01, grid=6)
    selected = baseline.passed(features) == 3
    assert selected[labels == 0].mean() <= 0.01
    assert selected[labels == 1].mean() > 0.9
    assert roc_tpr_at_fpr(baseline.scores(features), labels, 0.01) > 0.9


def test_cut_baseline_scores_keep_pass_count_as_integer_part():
    baseline = CutBaseline((0.0, 1.0), (1.0, 2.0))
    features = np.array([[5.0, 5.0], [5.0, 0.0], [-3.0, 0.0], [1e308, 1e308]])
    scores = baseline.scores(features)
    assert np.floor(scores).tolist() == [2, 1, 0, 2]
    assert scores[0] > 2.5 and scores[1] < 1.5
    with pytest.raises(ShapeError):
        baseline.scores(np.zeros((2, 3)))


def test_baseline_cut_classifier_is_perfect_when_signal_dominates():
    rng = np.random.default_rng(7)
    feats = np.vstack([rng.uniform(0.0, 1.0, size=(300, 3)), rng.uniform(2.0, 3.0, size=(30, 3))])
    labels = np.r_[np.zeros(300, int), np.ones(30, int)]
    ds = HepDataset(np.zeros((330, 1, 2, 2)), labels, feats, seed=7)
    scores = baseline_cut_classifier(ds, target_fpr=0.002)
    assert roc_tpr_at_fpr(scores, labels, 0.002) == 1.0
    with pytest.raises(ValidationError):
        fit_cut_baseline(feats, np.zeros(330, int))


def test_climate_loss_is_the_sum_of_its_weighted_terms():
    rng = np.random.default_rng(11)
    grid, k = 4, 2
    head = rng.normal(0.0, 2.0, size=(3, 5 + k, grid, grid))
    x = rng.normal(size=(3, 2, 8, 8))
    recon = rng.normal(size=x.shape)
    targets = [[BoxTarget.from_box(0.1, 0.2, 0.3, 0.2, CYCLONE, grid)],
               [],
               [BoxTarget.from_box(0.55, 0.6, 0.2, 0.35, RIVER, grid),
                BoxTarget.from_box(0.05, 0.9, 0.1, 0.05, CYCLONE, grid)]]
    weights = ClimateLossWeights(conf_obj=1.3, conf_noobj=0.4, klass=0.7, box=5.0, recon=2.0)
    joint, joint_grads = climate_loss(ClimatePreds(head), targets, x, recon, weights)
    names = ["conf_obj", "conf_noobj", "klass", "box", "recon"]
    parts = []
    for name in names:
        single = ClimateLossWeights(**{n: (getattr(weights, n) if n == name else 0.0) for n in names})
        parts.append(climate_loss(ClimatePreds(head), targets, x, recon, single))
    assert sum(p[0] for p in parts) == pytest.approx(joint, rel=1e-10)
    np.testing.assert_allclose(sum(p[1].head for p in parts), joint_grads.head, rtol=1e-10, atol=1e-14)
    np.testing.assert_allclose(sum(p[1].reconstruction for p in parts), joint_grads.reconstruction,
                               rtol=1e-10, atol=1e-14)


@pytest.mark.parametrize("seed", range(20))
def test_dense_grad_check_across_seeds(seed):
    net = _dense_net(seed)
    rng = np.random.default_rng(100 + seed)
    x = rng.normal(size=(4, 5))
    assert grad_check(net, x, rng.integers(0, 3, size=4), eps=1e-5) < 1e-6
