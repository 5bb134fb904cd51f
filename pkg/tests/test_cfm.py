import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from swayflow import tensor as T
from swayflow.cfm import (
    FlowStep,
    cfm_loss,
    ot_interpolate,
    probe_path_sample,
    sample_noise,
    sample_training_step,
    sample_training_steps,
)
from swayflow.gradcheck import grad_check
from swayflow.tensor import Graph, ShapeError, Tensor


def test_flow_step_range():
    FlowStep(0.0), FlowStep(1.0)
    with pytest.raises(ValueError):
        FlowStep(1.5)


def test_interpolate_endpoints_exact(rng):
    x0, x1 = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    np.testing.assert_array_equal(ot_interpolate(x0, x1, FlowStep(0.0)).data, x0)
    np.testing.assert_array_equal(ot_interpolate(x0, x1, FlowStep(1.0)).data, x1)


def test_interpolate_hand_value():
    out = ot_interpolate(np.zeros(2), np.array([2.0, 4.0]), FlowStep(0.25))
    np.testing.assert_allclose(out.data, [0.5, 1.0], rtol=0, atol=1e-15)


def test_interpolate_shape_mismatch():
    with pytest.raises(ShapeError):
        ot_interpolate(np.zeros(2), np.zeros(3), 0.5)


def test_interpolate_per_example_steps(rng):
    x0, x1 = rng.standard_normal((3, 5, 2)), rng.standard_normal((3, 5, 2))
    t = np.array([0.0, 0.5, 1.0])
    out = ot_interpolate(x0, x1, t).data
    np.testing.assert_array_equal(out[0], x0[0])
    np.testing.assert_array_equal(out[2], x1[2])
    np.testing.assert_allclose(out[1], 0.5 * (x0[1] + x1[1]), atol=1e-15)


@given(t=st.floats(0, 1), s=st.floats(0, 1), seed=st.integers(0, 10_000))
def test_interpolation_composes_affinely(t, s, seed):
    r = np.random.default_rng(seed)
    x0, x1 = r.standard_normal(6), r.standard_normal(6)
    a = ot_interpolate(x0, x1, t).data
    b = ot_interpolate(x0, x1, s).data
    # the point at s along the segment from psi_t to x1 equals psi at t + s(1 - t)
    composed = ot_interpolate(a, x1, s).data
    direct = ot_interpolate(x0, x1, t + s * (1 - t)).data
    np.testing.assert_allclose(composed, direct, atol=1e-12)
    np.testing.assert_allclose(ot_interpolate(x0, x1, FlowStep(t)).data, (1 - t) * x0 + t * x1, atol=1e-12)
    assert a.shape == b.shape == x0.shape


def test_probe_sample_invariants(rng):
    x0, x1 = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
    s = probe_path_sample(x0, x1, FlowStep(0.3))
    assert s.psi_t.shape == s.target.shape == s.x0.shape == s.x1.shape
    np.testing.assert_allclose(s.psi_t, 0.7 * x0 + 0.3 * x1, atol=1e-12)
    np.testing.assert_array_equal(s.target, x1 - x0)


# -- loss --------------------------------------------------------------------


def test_loss_zero_at_target(rng):
    s = probe_path_sample(rng.standard_normal((2, 3)), rng.standard_normal((2, 3)), FlowStep(0.4))
    assert cfm_loss(Tensor(s.target), s).item() == 0.0


def test_loss_unit_offset(rng):
    s = probe_path_sample(rng.standard_normal((5, 3)), rng.standard_normal((5, 3)), FlowStep(0.4))
    assert cfm_loss(Tensor(s.target + 1.0), s).item() == pytest.approx(1.0, abs=1e-12)


def test_masked_loss_hand_value():
    target = np.array([[1.0], [3.0]])
    loss = cfm_loss(Tensor(np.zeros((2, 1))), target, mask=np.array([0, 1]))
    assert loss.item() == 9.0


def test_all_zero_mask_rejected():
    with pytest.raises(ValueError):
        cfm_loss(Tensor(np.zeros((2, 1))), np.ones((2, 1)), mask=np.zeros(2))


def test_non_binary_mask_rejected():
    with pytest.raises(ValueError):
        cfm_loss(Tensor(np.zeros((2, 1))), np.ones((2, 1)), mask=np.array([0.5, 1.0]))


def test_loss_ignores_unmasked_region(rng):
    target = rng.standard_normal((6, 2))
    mask = np.array([1, 1, 0, 0, 1, 0])
    pred = target.copy()
    pred[mask == 0] += 100.0
    assert cfm_loss(Tensor(pred), target, mask).item() == 0.0


def test_loss_gradient_vanishes_at_minimum(rng):
    target = rng.standard_normal((4, 3))
    v = Tensor(target.copy(), requires_grad=True)
    with Graph() as g:
        loss = cfm_loss(v, target, mask=np.array([1, 0, 1, 1]))
    g.backward(loss)
    np.testing.assert_array_equal(v.grad, 0.0)
    report = grad_check(lambda p: cfm_loss(p, target, mask=np.array([1, 0, 1, 1])), Tensor(target + 0.1))
    assert report.passed


# -- draws -------------------------------------------------------------------


def test_training_steps_uniform():
    rng = np.random.default_rng(0)
    t = sample_training_steps(rng, 1_000_000)
    assert abs(t.mean() - 0.5) < 0.002
    assert stats.kstest(t, "uniform").statistic < 0.002


def test_training_step_reproducible():
    a = [sample_training_step(np.random.default_rng(7)).t for _ in range(3)]
    assert a[0] == a[1] == a[2]
    assert 0.0 <= a[0] <= 1.0


def test_noise_moments_and_determinism():
    x = sample_noise((1_000_000,), np.random.default_rng(0), np.float64).data
    assert abs(x.mean()) < 0.005
    assert abs(x.var() - 1.0) < 0.01
    y = sample_noise((1_000_000,), np.random.default_rng(0), np.float64).data
    np.testing.assert_array_equal(x, y)
    assert sample_noise((0,), np.random.default_rng(0)).shape == (0,)


# -- smoke: a linear field learns a 1-D Gaussian target ------------------------


def test_linear_field_fits_gaussian_target():
    rng = np.random.default_rng(0)
    w = Tensor(np.zeros((6, 1)), requires_grad=True)
    lr = 0.05
    losses = []
    for step in range(2000):
        x1 = 3.0 + 0.1 * rng.standard_normal((64, 1))
        x0 = rng.standard_normal((64, 1))
        t = rng.random((64, 1))
        psi = (1 - t) * x0 + t * x1
        feats = np.hstack([np.ones_like(t), t, t * t, psi, t * psi, t * t * psi])
        with Graph() as g:
            loss = cfm_loss(T.matmul(Tensor(feats), w), x1 - x0)
        g.backward(loss)
        w.data -= lr * min(1.0, (step + 1) / 100) * w.grad
        w.grad = None
        losses.append(loss.item())
    first = np.mean(losses[:10])
    last = np.mean(losses[-100:])
    assert last < 0.05 * first
    smoothed = np.convolve(losses[100:], np.ones(200) / 200, mode="valid")
    assert smoothed[-1] < smoothed[0]
