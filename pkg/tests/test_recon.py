import dataclasses
import io
import itertools
import math

import numpy as np
import pytest

from blockquant.container import CalibrationSet
from blockquant.model import LayerSpec, NetworkModel, forward, partition
from blockquant.quant import AdaRoundState, HARD_V
from blockquant.recon import (LOG_FIELDS, AdamState, ReconConfig, adam_step, calibrate_model, collect_unit_io,
                              fim_weighted_loss, fp_pass, init_quant_state, objective_weights, reconstruct_unit,
                              rtn_model, unit_objective)
from blockquant.tensor import softmax
from blockquant.utils import NumericError, TSDictWriter, UsageError


def fast_config(**overrides):
    values = dict(iters=200, log_every=50)
    values.update(overrides)
    return dataclasses.replace(ReconConfig.from_profile('desk'), **values).validate()


def test_profiles():
    desk, paper = ReconConfig.from_profile('desk'), ReconConfig.from_profile('paper')
    assert (desk.iters, desk.batch_size, desk.lr_round, desk.lr_step) == (2000, 32, 1e-2, 4e-5)
    assert (paper.iters, paper.lr_round) == (20000, 1e-3)
    assert (desk.reg_weight, desk.beta_start, desk.beta_end, desk.warmup) == (0.01, 20.0, 2.0, 0.2)
    assert ReconConfig.from_profile('desk', iters=None).iters == 2000
    with pytest.raises(UsageError):
        ReconConfig.from_profile('laptop')


@pytest.mark.parametrize("overrides", [dict(iters=0), dict(beta_end=30.0), dict(warmup=1.0),
                                       dict(objective='hessian'), dict(propagate='none'), dict(workers=0)])
def test_config_validation(overrides):
    with pytest.raises(UsageError):
        ReconConfig(**overrides).validate()


def test_fim_weighted_loss():
    dz = np.array([[1.0, 2.0], [0.0, 1.0]])
    g = np.array([[1.0, 1.0], [3.0, 2.0]])
    # (1 + 4) + (0 + 4), averaged over two samples
    assert fim_weighted_loss(dz, g).item() == pytest.approx(4.5)
    assert fim_weighted_loss(np.array([1.0, 2.0]), np.array([2.0, 1.0])).item() == pytest.approx(8.0)
    with pytest.raises(UsageError):
        fim_weighted_loss(dz, g[:1])


def test_objective_weights(mlp, mlp_calib):
    unit = partition(mlp, 'block')[1]
    cache = collect_unit_io(mlp, mlp_calib, unit)
    ones = objective_weights(cache, dataclasses.replace(ReconConfig(), objective='mse'))
    assert all(np.all(w == 1.0) for w in ones)
    raw = objective_weights(cache, ReconConfig())
    scaled = objective_weights(cache, dataclasses.replace(ReconConfig(), normalize_grads=True))
    assert np.mean([np.mean(w * w) for w in scaled]) == pytest.approx(1.0)
    np.testing.assert_array_equal(raw[0], cache.out_grads[0])


def test_adam_first_step_moves_by_lr():
    state = AdamState(lr=0.1)
    params = {'a': np.array([1.0, -1.0]), 'b': np.array(3.0)}
    updated = adam_step(state, params, {'a': np.array([2.0, -0.5]), 'b': None})
    np.testing.assert_allclose(updated['a'], [0.9, -0.9], atol=1e-6)
    assert updated['b'] == 3.0


def test_adam_moves_by_lr_under_a_constant_gradient():
    state = AdamState(lr=0.01)
    params = {'w': np.array([0.0, 5.0])}
    for _ in range(50):
        updated = adam_step(state, params, {'w': np.array([0.3, -2.0])})
        np.testing.assert_allclose(updated['w'] - params['w'], [-0.01, 0.01], rtol=1e-6)
        params = updated


def scalar_adam(grads, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    x, m, v = 0.0, 0.0, 0.0
    for t, g in enumerate(grads, 1):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        x -= lr * (m / (1 - beta1 ** t)) / (math.sqrt(v / (1 - beta2 ** t)) + eps)
    return x


def test_adam_matches_a_scalar_implementation(rng):
    grads = rng.normal(size=(100, 3))
    state = AdamState(lr=1e-3)
    params = {'w': np.zeros(3)}
    for g in grads:
        params = adam_step(state, params, {'w': g})
    expected = [scalar_adam(grads[:, i], 1e-3) for i in range(3)]
    np.testing.assert_allclose(params['w'], expected, rtol=0, atol=1e-10)


def test_collect_unit_io_matches_the_fp_trace(resnet, resnet_calib):
    fp = fp_pass(resnet, resnet_calib, 16)
    units = {u.id: u for u in partition(resnet, 'layer')}
    cache = collect_unit_io(resnet, resnet_calib, units['layer:b1.conv2'], batch_size=16, fp_batches=fp)
    assert len(cache) == 2
    np.testing.assert_array_equal(cache.inputs[0]['b1.conv1'], fp[0].trace.inputs['b1.conv1'].data)
    np.testing.assert_array_equal(cache.fp_outputs[1], fp[1].trace.preacts['b1.conv2'].data)
    assert cache.out_grads[0].shape == cache.fp_outputs[0].shape


def test_collect_unit_io_reads_the_quantized_model(resnet, resnet_calib):
    quant = rtn_model(resnet, 2, calib=resnet_calib, act_bits=4)
    fp = fp_pass(resnet, resnet_calib, 16)
    units = {u.id: u for u in partition(resnet, 'layer')}
    cache = collect_unit_io(resnet, resnet_calib, units['layer:b1.conv2'], quant, 16, fp)
    for b, fb in enumerate(fp):
        trace = forward(resnet, fb.x, quant)
        np.testing.assert_array_equal(cache.inputs[b]['b1.conv2'], trace.raw_inputs['b1.conv2'].data)
        np.testing.assert_array_equal(cache.inputs[b]['b1.conv1'], trace.inputs['b1.conv1'].data)
        np.testing.assert_array_equal(cache.fp_outputs[b], fb.trace.preacts['b1.conv2'].data)
    assert not np.array_equal(cache.inputs[0]['b1.conv2'], fp[0].trace.raw_inputs['b1.conv2'].data)


def test_head_gradient_is_softmax_minus_onehot(mlp, mlp_calib):
    head = partition(mlp, 'layer')[-1]
    cache = collect_unit_io(mlp, mlp_calib, head, batch_size=32)
    for b, start in enumerate(range(0, len(mlp_calib), 32)):
        labels = mlp_calib.labels[start:start + 32]
        expected = softmax(cache.fp_outputs[b]) - np.eye(3)[labels]
        np.testing.assert_allclose(cache.out_grads[b], expected / len(labels), atol=1e-12)


def test_on_grid_weights_keep_zero_loss(rng):
    weight = np.array([[-0.5, -0.25], [0.0, 0.25]])
    layer = LayerSpec('fc', 'linear', weight, np.zeros(2), activation='none')
    model = NetworkModel((layer,), input_shape=(2,), name='on-grid').validate()
    calib = CalibrationSet(rng.normal(size=(64, 2)), rng.integers(2, size=64), source='memory', seed=0)
    cfg = fast_config(weight_bits=2, first_last_bits=None, objective='mse', reg_weight=0.0)
    quant = init_quant_state(model, cfg)
    assert float(quant.get('fc').weight.step) == pytest.approx(0.25)
    unit = partition(model, 'layer')[0]
    cache = collect_unit_io(model, calib, unit, batch_size=cfg.batch_size)
    report = reconstruct_unit(model, unit, cache, quant, cfg)
    assert report.init_loss == pytest.approx(0.0, abs=1e-20)
    assert report.final_loss == pytest.approx(0.0, abs=1e-20)
    np.testing.assert_allclose(quant.get('fc').quantized(weight), weight, atol=1e-12)


def single_layer_problem(seed, n_in=5, n_out=2, orthogonal=True):
    """A 10-weight linear unit at 2 bits with its calibration set."""
    rng = np.random.default_rng(seed)
    layer = LayerSpec('fc', 'linear', rng.normal(size=(n_out, n_in)), np.zeros(n_out), activation='none')
    model = NetworkModel((layer,), input_shape=(n_in,), name='one-layer').validate()
    if orthogonal:
        q, _ = np.linalg.qr(rng.normal(size=(64, n_in)))
        x = q * np.sqrt(64 / n_in)
    else:
        x = rng.normal(size=(64, n_in)) @ rng.normal(size=(n_in, n_in))
    calib = CalibrationSet(x, rng.integers(n_out, size=64), source='memory', seed=seed)
    return model, calib


def brute_force_best(model, unit, cache, quant, weights):
    lq = quant.get('fc')
    best = np.inf
    for signs in itertools.product((-HARD_V, HARD_V), repeat=lq.rounding.v.size):
        lq.rounding = AdaRoundState(v=np.array(signs).reshape(lq.rounding.v.shape))
        best = min(best, unit_objective(model, unit, cache, quant, weights))
    return best


def test_learned_rounding_matches_brute_force():
    hits = 0
    for seed in range(10):
        model, calib = single_layer_problem(seed)
        cfg = fast_config(weight_bits=2, first_last_bits=None, objective='mse', iters=500, seed=seed)
        quant = init_quant_state(model, cfg)
        unit = partition(model, 'layer')[0]
        cache = collect_unit_io(model, calib, unit, batch_size=cfg.batch_size)
        report = reconstruct_unit(model, unit, cache, quant, cfg)
        weights = objective_weights(cache, cfg)
        final = unit_objective(model, unit, cache, quant, weights)
        assert final == pytest.approx(report.final_loss)
        best = brute_force_best(model, unit, cache, quant.copy(), weights)
        hits += final <= best + 1e-6
    assert hits >= 9


@pytest.mark.parametrize("seed", range(3))
def test_reconstruction_never_loses_to_nearest(seed):
    model, calib = single_layer_problem(seed, orthogonal=False)
    cfg = fast_config(weight_bits=2, first_last_bits=None, seed=seed)
    quant = init_quant_state(model, cfg)
    unit = partition(model, 'layer')[0]
    cache = collect_unit_io(model, calib, unit, batch_size=cfg.batch_size)
    report = reconstruct_unit(model, unit, cache, quant, cfg)
    assert report.final_loss <= report.init_loss
    assert report.kept in ('learned', 'nearest')
    assert set(np.unique(quant.get('fc').rounding.soft())) <= {0.0, 1.0}
    best = brute_force_best(model, unit, cache, quant.copy(), objective_weights(cache, cfg))
    assert best <= report.final_loss + 1e-12


def test_calibrate_model_writes_log_and_is_deterministic(mlp, mlp_calib):
    cfg = fast_config(weight_bits=4)
    log = io.StringIO()
    writer = TSDictWriter(log, LOG_FIELDS)
    writer.writeheader()
    quant, table, reports = calibrate_model(mlp, mlp_calib, cfg, writer, measure=True)
    assert [r.unit for r in reports] == ['layer:fc1', 'block:0', 'layer:head']
    assert all(r.final_loss <= r.init_loss for r in reports)
    assert quant.bits() == {'fc1': 8, 'fc2': 4, 'fc3': 4, 'head': 8}
    lines = log.getvalue().strip().splitlines()
    assert lines[0] == ','.join(LOG_FIELDS)
    # iterations 0, 50, 100, 150 and 199 for each of the three units
    assert len(lines) == 1 + 3 * 5
    # pinned layers never ran at 4 bits, so only the body is measured
    assert table.choices('fc2') == (4,) and ('fc1', 8) not in table.diag

    again, _, _ = calibrate_model(mlp, mlp_calib, cfg, measure=False)
    for lid in mlp.quantizable_ids:
        np.testing.assert_array_equal(again.get(lid).rounding.v, quant.get(lid).rounding.v)


def test_calibration_with_activation_quantization(resnet, resnet_calib):
    cfg = fast_config(weight_bits=4, quantize_activations=True, act_bits=8, iters=50, granularity='block')
    quant, _, reports = calibrate_model(resnet, resnet_calib, cfg, measure=False)
    assert len(reports) == 6
    assert quant.get('stem').act is None
    assert quant.get('b1.conv1').act.bits == 8 and quant.get('b1.conv2').act is None
    assert float(quant.get('b1.conv1').act.step) > 0


def test_nan_loss_names_the_iteration(mlp, mlp_calib):
    x = mlp_calib.x.copy()
    x[:, 0] = np.nan
    calib = dataclasses.replace(mlp_calib, x=x)
    with pytest.raises(NumericError) as raised:
        calibrate_model(mlp, calib, fast_config(objective='mse'), measure=False)
    assert raised.value.iteration == 0


def test_bit_config_overrides_uniform_bits(mlp, mlp_calib):
    cfg = fast_config(weight_bits=4, bit_config={'fc2': 2, 'fc3': 8}, rounding='nearest')
    quant, table, _ = calibrate_model(mlp, mlp_calib, cfg, measure=True)
    assert table is None
    assert quant.bits() == {'fc1': 8, 'fc2': 2, 'fc3': 8, 'head': 8}


def test_rtn_model_follow_policy(mlp):
    assert set(rtn_model(mlp, 2, first_last_bits=None).bits().values()) == {2}
