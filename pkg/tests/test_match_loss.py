import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maskconf import rng as rngmod
from maskconf.match_loss import (
    EMPTY,
    LossConfig,
    LossWeights,
    baseline_consistency_loss,
    bilinear_corners,
    bilinear_sample,
    class_loss,
    label_targets,
    mask_loss_at_points,
    match_masks,
    matching_cost,
    point_mask_loss,
    point_mask_loss_grad,
    sample_points,
    target_loss,
    uniform_points,
)
from maskconf.panoptic import MaskPrediction, PseudoLabel

from conftest import random_prediction
from oracles import bilinear_reference, mask_loss_reference, softmax_row


def random_labels(rng, k, h, w, n_cls=2):
    masks = rng.random((k, h, w)) > 0.5
    return PseudoLabel(masks, rng.integers(1, n_cls + 1, size=k))


# bilinear lookup


def test_bilinear_constant_map(rng):
    grid = np.full((5, 6), 2.5)
    pts = uniform_points(5, 6, 40, rng)
    np.testing.assert_allclose(bilinear_sample(grid, pts), 2.5)


def test_bilinear_grid_node_exact(rng):
    grid = rng.normal(size=(6, 7))
    assert bilinear_sample(grid, np.array([[3.0, 4.0]]))[0] == grid[3, 4]


def test_bilinear_midpoint():
    grid = np.array([[0.0, 1.0], [2.0, 3.0]])
    assert bilinear_sample(grid, np.array([[0.5, 0.5]]))[0] == pytest.approx(1.5)


def test_bilinear_matches_reference(rng):
    grid = rng.normal(size=(7, 9))
    pts = uniform_points(7, 9, 200, rng)
    expected = [bilinear_reference(grid, r, c) for r, c in pts]
    np.testing.assert_allclose(bilinear_sample(grid, pts), expected, rtol=1e-12, atol=1e-12)


def test_bilinear_batched_grid(rng):
    grid = rng.normal(size=(3, 5, 5))
    pts = uniform_points(5, 5, 10, rng)
    out = bilinear_sample(grid, pts)
    assert out.shape == (3, 10)
    for k in range(3):
        np.testing.assert_allclose(out[k], bilinear_sample(grid[k], pts))


def test_bilinear_node_next_to_minus_inf():
    grid = np.zeros((3, 3))
    grid[1, 2] = -np.inf
    assert bilinear_sample(grid, np.array([[1.0, 1.0]]))[0] == 0.0
    assert bilinear_sample(grid, np.array([[1.0, 1.5]]))[0] == -np.inf


def test_bilinear_border_clamped():
    grid = np.arange(12.0).reshape(3, 4)
    assert bilinear_sample(grid, np.array([[2.5, 3.5]]))[0] == grid[2, 3]


@pytest.mark.parametrize("pt", [(-0.1, 0.0), (0.0, 4.0), (3.0, 0.0), (np.nan, 1.0)])
def test_bilinear_out_of_range(pt):
    with pytest.raises(ValueError):
        bilinear_sample(np.zeros((3, 4)), np.array([pt]))


def test_corner_weights_sum_to_one(rng):
    pts = uniform_points(4, 9, 50, rng)
    total = sum(w for _, w in bilinear_corners(pts, 4, 9))
    np.testing.assert_allclose(total, 1.0)


# point sampling


def test_sample_counts_default_setting(rng):
    aff = rng.normal(size=(16, 16))
    gen = np.random.default_rng(5)
    pts = sample_points(aff, 16, 0.75, gen)
    assert pts.shape == (16, 2)
    # replay the candidate draw to check which 12 came from the top
    cand = uniform_points(16, 16, 48, np.random.default_rng(5))
    vals = bilinear_sample(aff, cand)
    top = cand[np.argsort(-vals, kind="stable")[:12]]
    np.testing.assert_array_equal(pts[:12], top)
    assert len({tuple(p) for p in pts}) == 16


def test_sample_all_minus_inf_is_empty(rng):
    pts = sample_points(np.full((8, 8), -np.inf), 10, 0.5, rng)
    assert pts.shape == (0, 2)


def test_sample_beta_zero_is_uniform_subset():
    aff = np.zeros((10, 10))
    pts = sample_points(aff, 20, 0.0, np.random.default_rng(3))
    gen = np.random.default_rng(3)
    cand = uniform_points(10, 10, 60, gen)
    expected = cand[gen.choice(60, size=20, replace=False)]
    np.testing.assert_array_equal(pts, expected)


def test_sample_beta_one_takes_top_only(rng):
    aff = rng.normal(size=(12, 12))
    pts = sample_points(aff, 30, 1.0, np.random.default_rng(9))
    cand = uniform_points(12, 12, 90, np.random.default_rng(9))
    vals = bilinear_sample(aff, cand)
    np.testing.assert_array_equal(pts, cand[np.argsort(-vals, kind="stable")[:30]])


def test_sample_short_pool_returns_all_finite():
    aff = np.full((20, 20), -np.inf)
    aff[:3, :3] = 0.0
    gen = np.random.default_rng(0)
    pts = sample_points(aff, 50, 0.5, gen)
    cand = uniform_points(20, 20, 150, np.random.default_rng(0))
    n_finite = int(np.isfinite(bilinear_sample(aff, cand)).sum())
    assert len(pts) == n_finite < 50


def test_sample_is_deterministic(rng):
    aff = rng.normal(size=(9, 9))
    a = sample_points(aff, 12, 0.5, np.random.default_rng(2))
    b = sample_points(aff, 12, 0.5, np.random.default_rng(2))
    np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("n, beta", [(0, 0.5), (4, -0.1), (4, 1.5)])
def test_sample_rejects_bad_args(n, beta, rng):
    with pytest.raises(ValueError):
        sample_points(np.zeros((4, 4)), n, beta, rng)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), frac=st.floats(0.0, 0.9), beta=st.floats(0.0, 1.0))
def test_cbpf_points_avoid_unconfident_cells(seed, frac, beta):
    gen = np.random.default_rng(seed)
    H, W = 12, 10
    aff = -np.abs(gen.normal(size=(H, W)))
    aff[gen.random((H, W)) < frac] = -np.inf
    pts = sample_points(aff, 25, beta, gen)
    assert len(pts) <= 25
    # every corner that carries weight must be a confident (finite) cell
    for idx, w in bilinear_corners(pts, H, W):
        assert np.all(np.isfinite(aff.ravel()[idx[w > 0]]))


# mask loss


def test_mask_loss_ln2():
    bce, _ = point_mask_loss(np.zeros(50), np.ones(50, dtype=bool))
    assert bce == pytest.approx(math.log(2))


def test_mask_loss_perfect_fit():
    t = np.array([True, False] * 20)
    bce, dice = point_mask_loss(np.where(t, 40.0, -40.0), t)
    assert bce <= 1e-6
    assert dice <= 1e-3


def test_mask_loss_matches_reference(rng):
    s = rng.normal(scale=3.0, size=100)
    t = rng.random(100) > 0.4
    bce, dice = point_mask_loss(s, t)
    ref_bce, ref_dice = mask_loss_reference(s, t.astype(float))
    assert bce == pytest.approx(ref_bce, abs=1e-6)
    assert dice == pytest.approx(ref_dice, abs=1e-6)


def test_mask_loss_empty_points():
    assert mask_loss_at_points(np.zeros((3, 3)), np.ones((3, 3), bool), np.zeros((0, 2))) == (0.0, 0.0)


def test_mask_loss_at_points_uses_bilinear(rng):
    s = rng.normal(size=(6, 6))
    lab = rng.random((6, 6)) > 0.5
    pts = uniform_points(6, 6, 30, rng)
    logits = [bilinear_reference(s, r, c) for r, c in pts]
    targets = [float(bilinear_reference(lab.astype(float), r, c) >= 0.5) for r, c in pts]
    got = mask_loss_at_points(s, lab, pts)
    np.testing.assert_allclose(got, mask_loss_reference(logits, targets), atol=1e-9)


def test_label_targets_threshold():
    lab = np.array([[True, False]])
    t = label_targets(lab, np.array([[0.0, 0.5], [0.0, 0.6], [0.0, 0.4]]))
    np.testing.assert_array_equal(t, [True, False, True])


def test_mask_loss_gradient_finite_differences(rng):
    h = 1e-3
    for _ in range(20):
        s = rng.normal(scale=2.0, size=40)
        t = rng.random(40) > 0.5
        g = point_mask_loss_grad(s, t, 5.0, 5.0)

        def f(x):
            b, d = point_mask_loss(x, t)
            return 5.0 * b + 5.0 * d

        fd = np.array([(f(s + h * e) - f(s - h * e)) / (2 * h) for e in np.eye(40)])
        assert np.linalg.norm(g - fd) <= 1e-4 * np.linalg.norm(fd)


def test_bce_gradient_at_zero():
    # d bce / d s at s=0, t=1 for a single point is p - t = -0.5
    g = point_mask_loss_grad(np.zeros(1), np.ones(1, bool), 1.0, 0.0)
    assert g[0] == pytest.approx(-0.5)


# class loss


def test_class_loss_uniform_real():
    assert class_loss(np.zeros(4), 2, LossWeights()) == pytest.approx(2.0 * math.log(4))


def test_class_loss_uniform_no_object():
    assert class_loss(np.zeros(4), 4, LossWeights()) == pytest.approx(0.1 * math.log(4))


def test_class_loss_saturated():
    assert class_loss(np.array([50.0, 0.0, 0.0]), 1, LossWeights()) < 1e-12


@pytest.mark.parametrize("target", [0, 5])
def test_class_loss_rejects_bad_target(target):
    with pytest.raises(ValueError):
        class_loss(np.zeros(4), target, LossWeights())


# matching


def cost_reference(pred, labels, weights, points):
    n, k = pred.num_masks, len(labels)
    cost = np.zeros((n, k))
    for i in range(n):
        probs = softmax_row(list(pred.class_logits[i]))
        for j in range(k):
            logits = [bilinear_reference(pred.mask_logits[i], r, c) for r, c in points]
            tgts = [float(bilinear_reference(labels.masks[j].astype(float), r, c) >= 0.5) for r, c in points]
            bce, dice = mask_loss_reference(logits, tgts)
            cls = -weights.w_cls * math.log(probs[labels.classes[j] - 1])
            cost[i, j] = cls + weights.w_bce * bce + weights.w_dice * dice
    return cost


def test_matching_cost_matches_reference(rng):
    pred = random_prediction(rng, n=4, c=2, h=6, w=7)
    labels = random_labels(rng, 3, 6, 7)
    pts = uniform_points(6, 7, 25, rng)
    np.testing.assert_allclose(
        matching_cost(pred, labels, LossWeights(), pts),
        cost_reference(pred, labels, LossWeights(), pts),
        rtol=1e-9,
    )


def test_match_single():
    pred = MaskPrediction(np.zeros((1, 3)), np.zeros((1, 4, 4)))
    labels = PseudoLabel(np.ones((1, 4, 4), bool), np.array([1]))
    res = match_masks(pred, labels, LossWeights(), np.random.default_rng(0))
    np.testing.assert_array_equal(res.assignment, [0])


def test_match_no_labels(rng):
    pred = random_prediction(rng, n=3)
    labels = PseudoLabel(np.zeros((0, 8, 8), bool), np.zeros(0, np.int64))
    res = match_masks(pred, labels, LossWeights(), rng)
    assert np.all(res.assignment == EMPTY)


def test_match_too_many_labels(rng):
    pred = random_prediction(rng, n=2)
    with pytest.raises(ValueError):
        match_masks(pred, random_labels(rng, 3, 8, 8), LossWeights(), rng)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 6), data=st.data())
def test_hungarian_is_brute_force_optimal(seed, n, data):
    k = data.draw(st.integers(0, n))
    gen = np.random.default_rng(seed)
    pred = random_prediction(gen, n=n, c=2, h=5, w=5)
    labels = random_labels(gen, k, 5, 5)
    res = match_masks(pred, labels, LossWeights(), gen, n_points=25)
    best = min(
        (sum(res.cost[i, j] for j, i in enumerate(rows)) for rows in itertools.permutations(range(n), k)),
        default=0.0,
    )
    assert res.total_cost == pytest.approx(best, abs=1e-9)
    hit = res.assignment[res.assignment != EMPTY]
    assert sorted(hit.tolist()) == list(range(k))


def test_matching_invariant_to_constant_shift(rng):
    from scipy.optimize import linear_sum_assignment

    cost = rng.normal(size=(6, 4))
    a = linear_sum_assignment(cost)
    b = linear_sum_assignment(cost + 17.5)
    np.testing.assert_array_equal(a[1], b[1])


def test_match_uses_min_of_np_and_pixels(rng):
    pred = random_prediction(rng, n=2, h=3, w=3)
    labels = random_labels(rng, 1, 3, 3)
    # asking for far more points than pixels must still work
    res = match_masks(pred, labels, LossWeights(), rng, n_points=1000)
    assert res.assignment.shape == (2,)


# target loss


def make_instance(rng, n=5, k=3, h=10, w=12, frac_inf=0.0):
    pred = random_prediction(rng, n=n, c=2, h=h, w=w)
    labels = random_labels(rng, k, h, w)
    aff = -np.abs(pred.mask_logits)
    aff[rng.random(aff.shape) < frac_inf] = -np.inf
    return pred, labels, aff


def test_target_loss_total_is_sum(rng):
    pred, labels, aff = make_instance(rng)
    rep = target_loss(pred, labels, rng.random(3), aff, LossConfig(n_points=30), seed=4)
    assert rep.total == pytest.approx(rep.cls_term + rep.loc_term, abs=1e-6)
    loc = sum(t.weight * (5.0 * t.bce + 5.0 * t.dice) for t in rep.terms)
    assert rep.loc_term == pytest.approx(loc, abs=1e-9)


def test_target_loss_recomposition(rng):
    for trial in range(10):
        pred, labels, aff = make_instance(rng, frac_inf=0.3)
        lam = rng.random(3)
        cfg = LossConfig(n_points=20, beta=float(rng.random()))
        rep = target_loss(pred, labels, lam, aff, cfg, seed=trial)

        w = cfg.weights
        match = match_masks(pred, labels, w, rngmod.stream(trial, "match"), cfg.n_points)
        total = 0.0
        for i in range(pred.num_masks):
            j = match.assignment[i]
            if j == EMPTY:
                total += class_loss(pred.class_logits[i], 3, w)
                continue
            total += class_loss(pred.class_logits[i], int(labels.classes[j]), w)
            pts = sample_points(aff[i], cfg.n_points, cfg.beta, rngmod.stream(trial, "points", i))
            bce, dice = mask_loss_at_points(pred.mask_logits[i], labels.masks[j], pts)
            total += lam[j] * (w.w_bce * bce + w.w_dice * dice)
        assert rep.total == pytest.approx(total, rel=1e-9, abs=1e-12)
        np.testing.assert_array_equal(rep.assignment, match.assignment)


def test_target_loss_zero_lambda(rng):
    pred, labels, aff = make_instance(rng)
    cfg = LossConfig(n_points=30)
    full = target_loss(pred, labels, np.ones(3), aff, cfg, seed=1)
    off = target_loss(pred, labels, np.zeros(3), aff, cfg, seed=1)
    assert off.loc_term == 0.0
    assert off.cls_term == full.cls_term


def test_target_loss_unmatched_get_no_object(rng):
    pred, labels, aff = make_instance(rng, n=5, k=2)
    labels = PseudoLabel(labels.masks[:2], labels.classes[:2])
    rep = target_loss(pred, labels, np.ones(2), aff, LossConfig(n_points=10), seed=0)
    assert len(rep.terms) == 2
    assert sum(rep.target_classes == 3) == 3


def test_target_loss_shape_checks(rng):
    pred, labels, aff = make_instance(rng)
    with pytest.raises(ValueError):
        target_loss(pred, labels, np.ones(2), aff, LossConfig(), seed=0)
    with pytest.raises(ValueError):
        target_loss(pred, labels, np.ones(3), aff[:2], LossConfig(), seed=0)


def test_target_loss_all_unconfident(rng):
    pred, labels, aff = make_instance(rng)
    rep = target_loss(pred, labels, np.ones(3), np.full_like(aff, -np.inf), LossConfig(n_points=10), seed=0)
    assert rep.loc_term == 0.0
    assert all(t.n_points == 0 for t in rep.terms)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), which=st.integers(0, 2), scale=st.floats(0.0, 1.0))
def test_scaling_lambda_down_never_raises_loc(seed, which, scale):
    gen = np.random.default_rng(seed)
    pred, labels, aff = make_instance(gen, frac_inf=0.2)
    lam = gen.random(3)
    cfg = LossConfig(n_points=15)
    before = target_loss(pred, labels, lam, aff, cfg, seed=seed).loc_term
    lam[which] *= scale
    after = target_loss(pred, labels, lam, aff, cfg, seed=seed).loc_term
    assert after <= before + 1e-12


def test_reduction_to_baseline(rng):
    for trial in range(10):
        pred, labels, aff = make_instance(rng)
        cfg = LossConfig(n_points=25, beta=0.0)
        ours = target_loss(pred, labels, np.ones(3), aff, cfg, seed=trial).total
        base = baseline_consistency_loss(pred, labels, cfg, seed=trial)
        assert abs(ours - base) <= 1e-6


def test_report_to_dict(rng):
    pred, labels, aff = make_instance(rng)
    d = target_loss(pred, labels, np.ones(3), aff, LossConfig(n_points=10), seed=0).to_dict()
    assert set(d) == {"total", "cls_term", "loc_term", "assignment", "per_mask"}
    assert {"lambda", "bce", "dice", "n_points"} <= set(d["per_mask"][0])


def test_loss_defaults():
    w = LossWeights()
    assert (w.w_cls, w.w_bce, w.w_dice, w.w_noobj) == (2.0, 5.0, 5.0, 0.1)
    cfg = LossConfig()
    assert cfg.n_points == 112 * 112
    assert cfg.beta == 0.75
