import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from blockquant.quant import (GAMMA, ZETA, AdaRoundState, QuantParams, QuantState, act_fake_quant, act_step_grad,
                              activation_sites, adaround_apply, adaround_reg, beta_schedule, init_step_size,
                              quantize_rtn, rectified_sigmoid, reg_active, step_scan)
from blockquant.recon import rtn_model
from blockquant.tensor import Tensor, backward, finite_diff_grad, rel_error
from blockquant.utils import ParameterError, UsageError

BITS = (2, 3, 4, 8)


@pytest.mark.parametrize("bits", BITS)
def test_rtn_grid_membership_and_idempotence(bits):
    rng = np.random.default_rng(bits)
    w = rng.normal(scale=2.0, size=100_000)
    q = QuantParams(bits, init_step_size(w, bits))
    out = quantize_rtn(w, q)
    k = out / q.step
    np.testing.assert_array_equal(np.round(k) * q.step, out)
    assert np.round(k).min() >= q.qmin and np.round(k).max() <= q.qmax
    np.testing.assert_array_equal(quantize_rtn(out, q), out)


@pytest.mark.parametrize("bits", BITS)
def test_rtn_is_the_closest_grid_point(bits):
    rng = np.random.default_rng(100 + bits)
    w = rng.normal(size=100_000)
    q = QuantParams(bits, 0.37)
    grid = q.grid()
    error = np.abs(quantize_rtn(w, q) - w)
    best = np.concatenate([np.min(np.abs(chunk[:, None] - grid[None, :]), axis=1)
                           for chunk in np.array_split(w, 20)])
    np.testing.assert_allclose(error, best, rtol=0, atol=1e-12)


@given(st.floats(1e-3, 10.0), st.sampled_from(BITS), st.integers(0, 2 ** 16))
def test_rtn_properties(step, bits, seed):
    w = np.random.default_rng(seed).normal(scale=step * 2 ** bits / 4, size=64)
    q = QuantParams(bits, step)
    out = quantize_rtn(w, q)
    assert np.all(np.abs(out - quantize_rtn(out, q)) == 0)
    inside = (w >= q.qmin * step) & (w <= q.qmax * step)
    assert np.all(np.abs(out - w)[inside] <= step / 2 + 1e-9 * np.abs(w[inside]) + 1e-12)


def test_step_scan_includes_max_over_p(rng):
    w = rng.normal(size=(8, 8))
    candidates, errors = step_scan(w, 4)
    assert len(candidates) == len(errors) == 100
    assert np.isclose(candidates, np.max(np.abs(w)) / 7).any()
    assert init_step_size(w, 4) == candidates[np.argmin(errors)]


def test_step_size_of_zero_tensor_is_rejected():
    with pytest.raises(ParameterError):
        init_step_size(np.zeros(4), 4)


def test_per_channel_step_sizes(rng):
    w = rng.normal(size=(3, 2, 3, 3)) * np.array([0.1, 1.0, 10.0]).reshape(-1, 1, 1, 1)
    steps = init_step_size(w, 4, per_channel=True)
    assert steps.shape == (3,)
    assert steps[0] < steps[1] < steps[2]
    q = QuantParams(4, steps, per_channel=True)
    assert quantize_rtn(w, q).shape == w.shape
    with pytest.raises(UsageError):
        q.grid()


def test_quant_params_validation():
    with pytest.raises(ParameterError):
        QuantParams(5, 1.0)
    with pytest.raises(ParameterError):
        QuantParams(4, 0.0)
    assert (QuantParams(4, 1.0).qmin, QuantParams(4, 1.0).qmax) == (-8, 7)
    assert (QuantParams(4, 1.0, signed=False).qmin, QuantParams(4, 1.0, signed=False).qmax) == (0, 15)


def test_rectified_sigmoid_range():
    v = np.linspace(-20, 20, 101)
    h = rectified_sigmoid(v)
    assert h.min() == 0.0 and h.max() == 1.0
    assert np.all(np.diff(h) >= 0)


def test_adaround_starts_at_the_fractional_offset(rng):
    w = rng.normal(size=(4, 5))
    q = QuantParams(4, 0.1)
    state = AdaRoundState.init_from(w, q)
    np.testing.assert_allclose(state.soft(), w / 0.1 - np.floor(w / 0.1), atol=1e-9)


def test_harden_gives_nearest_rounding(rng):
    w = rng.normal(size=(6, 6))
    q = QuantParams(4, init_step_size(w, 4))
    state = AdaRoundState.init_from(w, q)
    state.harden()
    assert set(np.unique(state.soft())) <= {0.0, 1.0}
    np.testing.assert_allclose(adaround_apply(w, q, state), quantize_rtn(w, q))


def test_harden_reports_binarized_fraction():
    state = AdaRoundState(v=np.array([10.0, -10.0, 0.0, 0.0]))
    assert state.harden() == 0.5
    assert state.binarized_fraction() == 1.0


def test_adaround_reg_gradient(rng):
    state = AdaRoundState(v=rng.uniform(-2, 2, size=(3, 4)), reg_weight=0.5)
    v = Tensor(state.v.copy(), requires_grad=True)
    grads = backward(adaround_reg(state, 3.0, v))

    def value(a):
        return adaround_reg(AdaRoundState(v=a, reg_weight=0.5), 3.0)

    assert rel_error(grads[v], finite_diff_grad(value, state.v)) < 1e-6
    assert adaround_reg(state, 3.0, v).item() == pytest.approx(adaround_reg(state, 3.0))


def test_adaround_reg_vanishes_on_binary_offsets():
    state = AdaRoundState(v=np.array([10.0, -10.0]))
    assert adaround_reg(state, 2.0) == 0.0
    with pytest.raises(ParameterError):
        adaround_reg(state, 0.0)


def test_beta_schedule():
    total = 1000
    betas = [beta_schedule(it, total) for it in range(total)]
    assert betas[0] == 20.0 and betas[200] == 20.0
    assert betas[-1] == pytest.approx(2.0)
    assert all(b >= a - 1e-12 for a, b in zip(betas[1:], betas))
    assert not reg_active(199, total) and reg_active(200, total)
    with pytest.raises(UsageError):
        beta_schedule(total, total)


def test_act_step_grad_branches():
    q = QuantParams(4, 0.25, signed=False)
    x = np.array([-1.0, 0.0, 0.3, 10.0])
    assert act_step_grad(x[:2], q, np.ones(2)) == 0.0
    # 0.3/0.25 = 1.2 rounds to 1; 10 is clipped at p = 15
    assert act_step_grad(x, q, np.ones(4)) == pytest.approx((1 - 1.2) + 15)


def _true_fake_quant_loss(x, upstream, bits):
    def loss(s):
        s = float(np.asarray(s).reshape(-1)[0])
        p = 2 ** bits - 1
        return float(np.sum(upstream * np.clip(np.round(x / s), 0, p) * s))
    return loss


@pytest.mark.parametrize("case", range(100))
def test_act_step_grad_against_finite_differences(case):
    """The STE step gradient plus the straight-through x/s term is the derivative of the true quantizer."""
    rng = np.random.default_rng(case)
    bits = int(rng.choice([2, 4, 8]))
    s = float(rng.uniform(0.05, 1.0))
    q = QuantParams(bits, s, signed=False)
    r = rng.uniform(-3.0, q.qmax + 3.0, size=32)
    # keep away from rounding and clipping boundaries
    frac = r - np.floor(r)
    keep = (np.abs(frac - 0.5) > 0.02) & (np.abs(r - q.qmax) > 0.02) & (np.abs(r) > 0.02)
    x = r[keep] * s
    upstream = rng.normal(size=x.shape)
    ste = act_step_grad(x, q, upstream)
    inside = (x > 0) & (x < q.qmax * s)
    straight_through = float(np.sum(upstream[inside] * x[inside] / s))
    numeric = finite_diff_grad(_true_fake_quant_loss(x, upstream, bits), np.array([s]), h=1e-6 * s)[0]
    assert rel_error(ste + straight_through, numeric) < 1e-4


def test_act_fake_quant_is_straight_through(rng):
    q = QuantParams(4, 0.2, signed=False)
    x = Tensor(np.array([-0.5, 0.1, 1.0, 5.0]), requires_grad=True)
    grads = backward(act_fake_quant(x, q).sum())
    np.testing.assert_array_equal(grads[x], [0.0, 1.0, 1.0, 0.0])
    step = Tensor(np.array(0.2), requires_grad=True)
    grads = backward(act_fake_quant(Tensor(x.data), q, step).sum())
    assert grads[step] == pytest.approx(act_step_grad(x.data, q, np.ones(4)))


def test_activation_sites(resnet):
    assert activation_sites(resnet, 'block') == ['b1.conv1', 'b2.conv1', 'b3.conv1', 'b4.conv1', 'head']
    assert activation_sites(resnet, 'layer') == list(resnet.layer_ids[1:])
    with pytest.raises(UsageError):
        activation_sites(resnet, 'stage')


def test_size_of_four_bit_model(mlp):
    quant = rtn_model(mlp, 4, first_last_bits=None)
    elements = sum(layer.weight.size for layer in mlp.layers)
    assert quant.size_bytes(mlp) == elements * 4 / 8
    pinned = rtn_model(mlp, 4)
    assert pinned.bits() == {'fc1': 8, 'fc2': 4, 'fc3': 4, 'head': 8}


def test_quant_state_tensors_reload(mlp, rng):
    quant = rtn_model(mlp, 2)
    layer = mlp.layer('fc2')
    lq = quant.get('fc2')
    lq.rounding = AdaRoundState.init_from(layer.weight, lq.weight)
    lq.rounding.harden()
    reloaded = QuantState.from_tensors(quant.to_tensors())
    for layer in mlp.layers:
        np.testing.assert_allclose(reloaded.weight(layer).data, quant.weight(layer).data, atol=1e-6)
    assert reloaded.get('fc2').rounding.zeta == ZETA and reloaded.get('fc2').rounding.gamma == GAMMA
