"""Tests for the autodiff core: op gradients, tape semantics, optimizer, schedule."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from osscl import numcore as nc


def make_params(rng, *shapes):
    return [nc.Tensor(rng.standard_normal(s), requires_grad=True, dtype=np.float64)
            for s in shapes]


def test_tensor_casts_ints_to_float32():
    t = nc.Tensor([1, 2, 3])
    assert t.dtype == np.float32


def test_tensor_preserves_float64():
    t = nc.Tensor(np.zeros(3, dtype=np.float64))
    assert t.dtype == np.float64


def test_sum_gradient_is_ones():
    p = nc.Tensor(np.arange(6, dtype=np.float64).reshape(2, 3), requires_grad=True)
    with nc.Tape() as tape:
        loss = nc.total_sum(p)
        grads = nc.backprop(tape, loss)
    np.testing.assert_array_equal(grads[p], np.ones((2, 3)))


def test_backprop_accumulates_over_reuse():
    p = nc.Tensor(np.array([2.0, 3.0]), requires_grad=True, dtype=np.float64)
    with nc.Tape() as tape:
        y = nc.mul(p, p)
        loss = nc.total_sum(y)
        grads = nc.backprop(tape, loss)
    np.testing.assert_allclose(grads[p], 2.0 * p.data)


def test_backprop_twice_raises():
    p = nc.Tensor(np.ones(2), requires_grad=True, dtype=np.float64)
    with nc.Tape() as tape:
        loss = nc.total_sum(p)
        nc.backprop(tape, loss)
        with pytest.raises(nc.TapeConsumedError):
            nc.backprop(tape, loss)


def test_backprop_rejects_nonscalar_loss():
    p = nc.Tensor(np.ones(2), requires_grad=True, dtype=np.float64)
    with nc.Tape() as tape:
        y = nc.relu(p)
        with pytest.raises(nc.ShapeError):
            nc.backprop(tape, y)


def test_backprop_rejects_off_tape_loss():
    p = nc.Tensor(np.ones(2), requires_grad=True, dtype=np.float64)
    loss = nc.total_sum(p)  # no tape active
    with nc.Tape() as tape:
        nc.total_sum(p)
        with pytest.raises(ValueError):
            nc.backprop(tape, loss)


def test_ops_do_not_mutate_inputs():
    rng = np.random.default_rng(0)
    x = nc.Tensor(rng.standard_normal((4, 3)), requires_grad=True, dtype=np.float64)
    before = x.data.copy()
    with nc.Tape() as tape:
        y = nc.l2_normalize_rows(x)
        loss = nc.total_sum(nc.relu(y))
        nc.backprop(tape, loss)
    np.testing.assert_array_equal(x.data, before)


def test_no_tape_means_no_recording():
    p = nc.Tensor(np.ones(2), requires_grad=True, dtype=np.float64)
    y = nc.relu(p)
    assert y.requires_grad
    with nc.Tape() as tape:
        pass
    assert len(tape) == 0


@pytest.mark.parametrize("seed", range(4))
def test_affine_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    x, w, b = make_params(rng, (3, 4), (4, 5), (5,))

    def loss_fn():
        return nc.total_sum(nc.mul(nc.affine(x, w, b), nc.affine(x, w, b)))

    assert nc.check_gradients(loss_fn, [x, w, b]) < 1e-6


def test_affine_shape_error():
    x = nc.Tensor(np.ones((2, 3)))
    w = nc.Tensor(np.ones((4, 5)))
    b = nc.Tensor(np.ones(5))
    with pytest.raises(nc.ShapeError):
        nc.affine(x, w, b)


@pytest.mark.parametrize("seed", range(4))
def test_relu_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    # keep entries away from the kink at 0
    data = rng.standard_normal((5, 4))
    data[np.abs(data) < 0.1] += 0.2
    x = nc.Tensor(data, requires_grad=True, dtype=np.float64)

    def loss_fn():
        return nc.total_sum(nc.relu(x))

    assert nc.check_gradients(loss_fn, [x]) < 1e-6


def test_relu_subgradient_at_zero_is_zero():
    x = nc.Tensor(np.zeros((1, 2)), requires_grad=True, dtype=np.float64)
    with nc.Tape() as tape:
        loss = nc.total_sum(nc.relu(x))
        grads = nc.backprop(tape, loss)
    np.testing.assert_array_equal(grads[x], np.zeros((1, 2)))


@pytest.mark.parametrize("seed", range(4))
def test_l2_normalize_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    x = nc.Tensor(rng.standard_normal((4, 6)) + 0.5, requires_grad=True,
                  dtype=np.float64)
    direction = rng.standard_normal((4, 6))

    def loss_fn():
        return nc.total_sum(nc.mul(nc.l2_normalize_rows(x), nc.Tensor(direction)))

    assert nc.check_gradients(loss_fn, [x]) < 1e-6


def test_l2_normalize_unit_rows():
    rng = np.random.default_rng(1)
    x = nc.Tensor(rng.standard_normal((8, 5)))
    y = nc.l2_normalize_rows(x)
    np.testing.assert_allclose((y.data ** 2).sum(axis=1), 1.0, atol=1e-6)


def test_l2_normalize_degenerate_row():
    x = nc.Tensor(np.zeros((2, 3)))
    with pytest.raises(nc.DegenerateNormError):
        nc.l2_normalize_rows(x)


@given(st.integers(min_value=1, max_value=6), st.integers(min_value=0, max_value=2 ** 31 - 1))
@settings(max_examples=25, deadline=None)
def test_l2_normalize_idempotent(rows, seed):
    rng = np.random.default_rng(seed)
    x = nc.Tensor(rng.standard_normal((rows, 4)) + 0.1, dtype=np.float64)
    once = nc.l2_normalize_rows(x)
    twice = nc.l2_normalize_rows(once)
    np.testing.assert_allclose(twice.data, once.data, atol=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_pairwise_cosine_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    a = nc.Tensor(rng.standard_normal((3, 5)), requires_grad=True, dtype=np.float64)
    b = nc.Tensor(rng.standard_normal((4, 5)), requires_grad=True, dtype=np.float64)
    direction = rng.standard_normal((3, 4))

    def loss_fn():
        sim = nc.pairwise_cosine(nc.l2_normalize_rows(a), nc.l2_normalize_rows(b))
        return nc.total_sum(nc.mul(sim, nc.Tensor(direction)))

    assert nc.check_gradients(loss_fn, [a, b]) < 1e-6


def test_pairwise_cosine_same_tensor_accumulates():
    rng = np.random.default_rng(2)
    a = nc.Tensor(rng.standard_normal((3, 4)), requires_grad=True, dtype=np.float64)

    def loss_fn():
        z = nc.l2_normalize_rows(a)
        return nc.total_sum(nc.pairwise_cosine(z, z))

    assert nc.check_gradients(loss_fn, [a]) < 1e-6


def test_pairwise_cosine_rejects_non_unit_rows():
    a = nc.Tensor(2.0 * np.ones((2, 3)))
    with pytest.raises(nc.ShapeError):
        nc.pairwise_cosine(a, a)


def test_pairwise_cosine_range():
    rng = np.random.default_rng(3)
    a = nc.l2_normalize_rows(nc.Tensor(rng.standard_normal((6, 4))))
    sim = nc.pairwise_cosine(a, a)
    assert sim.data.max() <= 1.0 + 1e-6
    assert sim.data.min() >= -1.0 - 1e-6


@pytest.mark.parametrize("seed", range(3))
def test_row_log_softmax_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    x = nc.Tensor(rng.standard_normal((4, 5)), requires_grad=True, dtype=np.float64)
    mask = np.ones((4, 5), dtype=bool)
    mask[:, 0] = False
    direction = rng.standard_normal((4, 5)) * mask

    def loss_fn():
        logp = nc.mask_fill(nc.row_log_softmax(x, mask), mask, 0.0)
        return nc.total_sum(nc.mul(logp, nc.Tensor(direction)))

    assert nc.check_gradients(loss_fn, [x]) < 1e-6


def test_row_log_softmax_rows_sum_to_one():
    rng = np.random.default_rng(5)
    x = nc.Tensor(rng.standard_normal((3, 6)))
    mask = np.ones((3, 6), dtype=bool)
    mask[:, 2] = False
    logp = nc.row_log_softmax(x, mask)
    sums = np.where(mask, np.exp(logp.data), 0.0).sum(axis=1)
    np.testing.assert_allclose(sums, 1.0, atol=1e-6)
    assert np.all(np.isneginf(logp.data[~mask]))


def test_row_log_softmax_extreme_logits_stable():
    x = nc.Tensor(np.array([[1000.0, 999.0, -1000.0]]), dtype=np.float64)
    logp = nc.row_log_softmax(x)
    assert np.all(np.isfinite(logp.data))


def test_row_log_softmax_all_masked_row():
    x = nc.Tensor(np.zeros((2, 3)))
    mask = np.ones((2, 3), dtype=bool)
    mask[1] = False
    with pytest.raises(nc.AllMaskedRowError):
        nc.row_log_softmax(x, mask)


def test_mask_fill_blocks_gradient():
    x = nc.Tensor(np.array([[1.0, 2.0]]), requires_grad=True, dtype=np.float64)
    keep = np.array([[True, False]])
    with nc.Tape() as tape:
        y = nc.mask_fill(x, keep, 7.0)
        loss = nc.total_sum(y)
        grads = nc.backprop(tape, loss)
    np.testing.assert_array_equal(y.data, [[1.0, 7.0]])
    np.testing.assert_array_equal(grads[x], [[1.0, 0.0]])


def test_gather2d_forward_and_backward():
    x = nc.Tensor(np.arange(12, dtype=np.float64).reshape(3, 4), requires_grad=True)
    rows = [0, 1, 1]
    cols = [2, 3, 3]
    with nc.Tape() as tape:
        picked = nc.gather2d(x, rows, cols)
        loss = nc.total_sum(picked)
        grads = nc.backprop(tape, loss)
    np.testing.assert_array_equal(picked.data, [2.0, 7.0, 7.0])
    expected = np.zeros((3, 4))
    expected[0, 2] = 1.0
    expected[1, 3] = 2.0  # duplicate index accumulates
    np.testing.assert_array_equal(grads[x], expected)


def test_nonfinite_forward_raises():
    x = nc.Tensor(np.array([[1e308]]), dtype=np.float64)
    with np.errstate(over="ignore"), pytest.raises(nc.NonFiniteError):
        nc.mul(x, x)


def test_adam_first_step_matches_hand_computation():
    # one param, value 1.0, grad 0.5, lr 0.1: first step is lr * g/|g| scale
    p = nc.Tensor(np.array([1.0]), requires_grad=True, dtype=np.float64)
    opt = nc.Adam([p], lr=0.1)
    opt.step({p: np.array([0.5])})
    # m_hat = 0.5, v_hat = 0.25, update = 0.1 * 0.5 / (0.5 + 1e-8)
    expected = 1.0 - 0.1 * 0.5 / (math.sqrt(0.25) + 1e-8)
    np.testing.assert_allclose(p.data, [expected], rtol=1e-12)


def test_adam_zero_gradient_keeps_param():
    p = nc.Tensor(np.array([3.0]), requires_grad=True, dtype=np.float64)
    opt = nc.Adam([p], lr=0.1)
    opt.step({p: np.zeros(1)})
    np.testing.assert_array_equal(p.data, [3.0])


def test_adam_missing_gradient_treated_as_zero():
    p = nc.Tensor(np.array([3.0]), requires_grad=True, dtype=np.float64)
    q = nc.Tensor(np.array([1.0]), requires_grad=True, dtype=np.float64)
    opt = nc.Adam([p, q], lr=0.1)
    opt.step({q: np.array([1.0])})
    np.testing.assert_array_equal(p.data, [3.0])
    assert q.data[0] < 1.0


def test_adam_deterministic():
    def run():
        rng = np.random.default_rng(7)
        p = nc.Tensor(rng.standard_normal(4), requires_grad=True, dtype=np.float64)
        opt = nc.Adam([p], lr=0.05)
        for k in range(10):
            g = np.sin(p.data + k)
            opt.step({p: g})
        return p.data.copy()

    np.testing.assert_array_equal(run(), run())


def test_cosine_schedule_endpoints():
    s = nc.CosineSchedule(0.01, 1e-4, 100)
    assert s.at(0) == pytest.approx(0.01)
    assert s.at(99) == pytest.approx(1e-4)


def test_cosine_schedule_three_epochs_midpoint():
    s = nc.CosineSchedule(0.01, 1e-4, 3)
    # midpoint of the cosine: min + 0.5 * span
    assert s.at(1) == pytest.approx(1e-4 + 0.5 * (0.01 - 1e-4))


def test_cosine_schedule_single_epoch():
    s = nc.CosineSchedule(0.01, 1e-4, 1)
    assert s.at(0) == 0.01


@given(st.integers(min_value=2, max_value=50))
@settings(max_examples=25, deadline=None)
def test_cosine_schedule_monotone_nonincreasing(total):
    s = nc.CosineSchedule(0.01, 1e-4, total)
    values = [s.at(e) for e in range(total)]
    assert all(a >= b - 1e-15 for a, b in zip(values, values[1:]))


def test_cosine_schedule_rejects_out_of_range():
    s = nc.CosineSchedule(0.01, 1e-4, 5)
    with pytest.raises(ValueError):
        s.at(5)
    with pytest.raises(ValueError):
        s.at(-1)
