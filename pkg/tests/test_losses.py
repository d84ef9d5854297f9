"""Loss identities, enumeration oracles and finite-difference checks."""
import math

import numpy as np
import pytest

from distseg.errors import BadClassIndexError, ModeMismatchError, ShapeMismatchError
from distseg.losses import (
    LossConfig,
    TaskWeights,
    approx_scaled_nll_rows,
    exact_scaled_nll_rows,
    nll_pixelwise,
    nll_pixelwise_grad,
    nll_rows,
    total_loss,
    total_loss_grads,
    uncertainty_task_loss,
)


# --- nll_pixelwise ----------------------------------------------------------


def test_nll_uniform_two_classes_is_ln2():
    logits = np.zeros((1, 2, 4, 4))
    targets = np.zeros((1, 4, 4), dtype=np.int64)
    assert nll_pixelwise(logits, targets) == pytest.approx(math.log(2), abs=1e-12)


def test_nll_confident_correct_class_tends_to_zero():
    logits = np.zeros((1, 2, 2, 2))
    logits[:, 1] = 50.0
    targets = np.ones((1, 2, 2), dtype=np.int64)
    assert nll_pixelwise(logits, targets) < 1e-12


def test_nll_matches_per_pixel_enumeration():
    rng = np.random.default_rng(0)
    logits = rng.standard_normal((2, 5, 4, 4))
    targets = rng.integers(0, 5, size=(2, 4, 4))
    total = 0.0
    for n in range(2):
        for i in range(4):
            for j in range(4):
                z = logits[n, :, i, j]
                p = np.exp(z) / np.exp(z).sum()
                total += -math.log(p[targets[n, i, j]])
    expected = total / targets.size
    assert nll_pixelwise(logits, targets) == pytest.approx(expected, rel=1e-6)


def test_nll_rejects_bad_targets():
    logits = np.zeros((1, 3, 2, 2))
    with pytest.raises(BadClassIndexError):
        nll_pixelwise(logits, np.full((1, 2, 2), 3))
    with pytest.raises(ShapeMismatchError):
        nll_pixelwise(logits, np.zeros((1, 3, 3), dtype=np.int64))


def test_nll_grad_matches_finite_differences():
    rng = np.random.default_rng(1)
    logits = rng.standard_normal((1, 4, 3, 3))
    targets = rng.integers(0, 4, size=(1, 3, 3))
    grad = nll_pixelwise_grad(logits, targets)
    h = 1e-6
    flat = logits.reshape(-1)
    for idx in rng.choice(flat.size, size=12, replace=False):
        orig = flat[idx]
        flat[idx] = orig + h
        lp = nll_pixelwise(logits, targets)
        flat[idx] = orig - h
        lm = nll_pixelwise(logits, targets)
        flat[idx] = orig
        np.testing.assert_allclose(grad.reshape(-1)[idx], (lp - lm) / (2 * h), rtol=1e-4, atol=1e-9)


# --- uncertainty_task_loss ------------------------------------------------------


def test_uncertainty_loss_reduces_to_nll_at_zero():
    for nll in (0.1, 0.6931, 2.0):
        assert uncertainty_task_loss(nll, 0.0) == nll


def test_uncertainty_loss_stationary_point_is_log_nll():
    nll = 0.73
    s_star = math.log(nll)
    h = 1e-7
    d = (uncertainty_task_loss(nll, s_star + h) - uncertainty_task_loss(nll, s_star - h)) / (2 * h)
    assert abs(d) < 1e-7


def test_uncertainty_loss_plug_in_value():
    nll = 0.6931
    s = math.log(nll)
    # exp(-ln nll) * nll + ln nll = 1 + ln nll
    assert uncertainty_task_loss(nll, s) == pytest.approx(1 + math.log(0.6931), abs=1e-12)
    assert uncertainty_task_loss(nll, s) == pytest.approx(0.63346, abs=5e-5)


def test_uncertainty_loss_convex_with_minimum_at_log_nll():
    rng = np.random.default_rng(2)
    for nll in (0.1, 0.6931, 2.0):
        s_grid = np.linspace(math.log(nll) - 3, math.log(nll) + 3, 4001)
        values = np.array([uncertainty_task_loss(nll, s) for s in s_grid])
        assert s_grid[values.argmin()] == pytest.approx(math.log(nll), abs=2e-3)
        # strict convexity: positive second differences
        second = np.diff(values, 2)
        assert (second > 0).all()
    # random chords lie above the curve
    for _ in range(50):
        nll = rng.uniform(0.05, 3.0)
        a, b = sorted(rng.uniform(-3, 3, size=2))
        t = rng.uniform(0.01, 0.99)
        chord = t * uncertainty_task_loss(nll, a) + (1 - t) * uncertainty_task_loss(nll, b)
        assert uncertainty_task_loss(nll, t * a + (1 - t) * b) <= chord + 1e-12


# --- total_loss -------------------------------------------------------------------


def test_total_loss_equal_mode_sums():
    total, breakdown = total_loss(0.5, 0.7, TaskWeights(), LossConfig(mode="multitask_equal"))
    assert total == pytest.approx(1.2, abs=1e-12)
    assert breakdown["seg_nll"] == 0.5 and breakdown["dist_nll"] == 0.7


def test_total_loss_single_task_modes():
    w = TaskWeights(s_seg=0.4, s_dist=-0.3)
    assert total_loss(0.5, 0.7, w, LossConfig(mode="seg_only"))[0] == 0.5
    assert total_loss(0.5, 0.7, w, LossConfig(mode="dist_only"))[0] == 0.7


def test_total_loss_uncertainty_at_zero_equals_equal_mode():
    rng = np.random.default_rng(3)
    for _ in range(20):
        seg, dist = rng.uniform(0.01, 3.0, size=2)
        eq, _ = total_loss(seg, dist, TaskWeights(), LossConfig(mode="multitask_equal"))
        un, _ = total_loss(seg, dist, TaskWeights(0.0, 0.0), LossConfig(mode="multitask_uncertainty"))
        assert un == pytest.approx(eq, rel=1e-15)


def test_total_loss_monotone_in_each_nll():
    w = TaskWeights(s_seg=0.2, s_dist=-0.4)
    cfg = LossConfig(mode="multitask_uncertainty")
    base, _ = total_loss(0.5, 0.7, w, cfg)
    assert total_loss(0.6, 0.7, w, cfg)[0] > base
    assert total_loss(0.5, 0.8, w, cfg)[0] > base


def test_total_loss_grads_match_finite_differences():
    cfg = LossConfig(mode="multitask_uncertainty")
    seg, dist = 0.9, 0.35
    w = TaskWeights(s_seg=0.3, s_dist=-0.6)
    d_seg, d_dist, ds_seg, ds_dist = total_loss_grads(seg, dist, w, cfg)
    h = 1e-7

    def f(s_seg, s_dist):
        return total_loss(seg, dist, TaskWeights(s_seg, s_dist), cfg)[0]

    num_s_seg = (f(w.s_seg + h, w.s_dist) - f(w.s_seg - h, w.s_dist)) / (2 * h)
    num_s_dist = (f(w.s_seg, w.s_dist + h) - f(w.s_seg, w.s_dist - h)) / (2 * h)
    np.testing.assert_allclose(ds_seg, num_s_seg, rtol=1e-6)
    np.testing.assert_allclose(ds_dist, num_s_dist, rtol=1e-6)
    num_d_seg = (total_loss(seg + h, dist, w, cfg)[0] - total_loss(seg - h, dist, w, cfg)[0]) / (2 * h)
    np.testing.assert_allclose(d_seg, num_d_seg, rtol=1e-6)
    num_d_dist = (total_loss(seg, dist + h, w, cfg)[0] - total_loss(seg, dist - h, w, cfg)[0]) / (2 * h)
    np.testing.assert_allclose(d_dist, num_d_dist, rtol=1e-6)


def test_loss_config_rejects_unknown_mode():
    with pytest.raises(ModeMismatchError):
        LossConfig(mode="everything_at_once")


# --- scaled softmax forms ------------------------------------------------------------


def test_scaled_softmax_never_changes_argmax():
    rng = np.random.default_rng(4)
    logits = rng.standard_normal((500, 10)) * 5
    base = logits.argmax(axis=1)
    for sigma_sq in (0.25, 0.5, 1.0, 2.0, 4.0):
        scaled = (logits / sigma_sq).argmax(axis=1)
        np.testing.assert_array_equal(scaled, base)


def test_exact_vs_approx_scaled_nll_agree_at_unit_variance():
    rng = np.random.default_rng(5)
    logits = rng.standard_normal((100, 4))
    targets = rng.integers(0, 4, size=100)
    np.testing.assert_allclose(
        exact_scaled_nll_rows(logits, targets, 1.0),
        approx_scaled_nll_rows(logits, targets, 1.0),
        rtol=1e-12,
    )
    np.testing.assert_allclose(nll_rows(logits, targets), exact_scaled_nll_rows(logits, targets, 1.0))


def test_exact_and_approx_gap_is_bounded_for_moderate_variance():
    rng = np.random.default_rng(6)
    logits = rng.standard_normal((200, 2))
    targets = rng.integers(0, 2, size=200)
    for sigma_sq in (0.5, 2.0):
        gap = np.abs(
            exact_scaled_nll_rows(logits, targets, sigma_sq)
            - approx_scaled_nll_rows(logits, targets, sigma_sq)
        )
        assert np.isfinite(gap).all()
