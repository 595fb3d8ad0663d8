"""Block reconstruction: learn weight rounding (and activation steps) unit by unit.

Each unit minimises Σ g²·(ẑ − z)² at its output, g being the task-loss
gradient of the full precision model, with Adam on the rounding variables.
"""
import copy
import logging
import math
from concurrent.futures import ThreadPoolExecutor, wait
from dataclasses import asdict, dataclass, field

import numpy as np

from blockquant.model import Granularity, Trace, forward, partition, run_layers, run_unit, unit_inputs
from blockquant.quant import (AdaRoundState, LayerQuant, QuantParams, QuantState, activation_sites,
                              adaround_reg, beta_schedule, init_step_size, reg_active, warmup_end)
from blockquant.tensor import Tensor, backward, cross_entropy
from blockquant.utils import (DimensionError, NumericError, ParameterError, UsageError, split_to_batches,
                              validate_bits)

logger = logging.getLogger(__name__)

LOG_FIELDS = ['unit', 'iteration', 'recon_loss', 'reg_loss', 'beta']

PROFILES = {
    'desk': {'iters': 2000, 'batch_size': 32, 'lr_round': 1e-2, 'lr_step': 4e-5},
    'paper': {'iters': 20000, 'batch_size': 32, 'lr_round': 1e-3, 'lr_step': 4e-5},
}


@dataclass(frozen=True)
class ReconConfig:
    iters: int = 2000
    batch_size: int = 32
    lr_round: float = 1e-2
    lr_step: float = 4e-5
    reg_weight: float = 0.01
    beta_start: float = 20.0
    beta_end: float = 2.0
    warmup: float = 0.2
    granularity: str = 'block'
    weight_bits: int = 4
    quantize_activations: bool = False
    act_bits: int = 8
    act_placement: str = 'block'
    first_last_bits: int = 8
    rounding: str = 'adaround'
    objective: str = 'fim'
    propagate: str = 'quantized'
    normalize_grads: bool = False
    per_channel: bool = False
    bit_config: dict = None
    seed: int = 0
    workers: int = 1
    log_every: int = 100

    @classmethod
    def from_profile(cls, name='desk', **overrides):
        if name not in PROFILES:
            raise UsageError('unknown profile {}, expected one of {}'.format(name, sorted(PROFILES)))
        values = dict(PROFILES[name])
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values).validate()

    def validate(self):
        if self.iters <= 0:
            raise UsageError('iterations must be positive')
        if self.batch_size <= 0:
            raise UsageError('batch size must be positive')
        if self.lr_round <= 0 or self.lr_step <= 0:
            raise UsageError('learning rates must be positive')
        if self.reg_weight < 0:
            raise UsageError('regulariser weight must be nonnegative')
        if not 0 < self.beta_end <= self.beta_start:
            raise UsageError('need 0 < beta_end <= beta_start')
        if not 0 <= self.warmup < 1:
            raise UsageError('warmup fraction must lie in [0, 1)')
        Granularity(self.granularity)
        for bits in (self.weight_bits, self.act_bits):
            validate_bits(bits)
        if self.first_last_bits is not None:
            validate_bits(self.first_last_bits)
        for name, value, allowed in (('rounding', self.rounding, ('adaround', 'nearest')),
                                     ('objective', self.objective, ('fim', 'mse')),
                                     ('propagate', self.propagate, ('quantized', 'fp')),
                                     ('act_placement', self.act_placement, ('block', 'layer'))):
            if value not in allowed:
                raise UsageError('{} must be one of {}, got {}'.format(name, allowed, value))
        if self.workers < 1:
            raise UsageError('workers must be at least 1')
        return self

    def to_dict(self):
        return asdict(self)


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state, params, grads):
    """One bias-corrected Adam update of every entry of `params` that has a gradient."""
    state.step_count += 1
    t = state.step_count
    updated = {}
    for key, param in params.items():
        grad = grads.get(key)
        if grad is None:
            updated[key] = param
            continue
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != np.shape(param):
            raise DimensionError('gradient of shape {} for parameter {} of shape {}'.format(
                grad.shape, key, np.shape(param)))
        m = state.beta1 * state.m.get(key, 0.0) + (1 - state.beta1) * grad
        v = state.beta2 * state.v.get(key, 0.0) + (1 - state.beta2) * grad * grad
        state.m[key], state.v[key] = m, v
        m_hat = m / (1 - state.beta1 ** t)
        v_hat = v / (1 - state.beta2 ** t)
        updated[key] = param - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return updated


@dataclass
class FPBatch:
    x: np.ndarray
    labels: np.ndarray
    trace: Trace
    grads: dict


def fp_pass(model, calib, batch_size=32):
    """Full precision traces of every calibration batch, with ∂L/∂z for every layer."""
    if len(calib) == 0:
        raise UsageError('calibration set is empty')
    batches = []
    for start, end in split_to_batches(len(calib), batch_size):
        x, labels = calib.x[start:end], calib.labels[start:end]
        trace = forward(model, x, requires_grad=True)
        backward(cross_entropy(trace.output, labels))
        grads = {lid: z.grad for lid, z in trace.preacts.items()}
        batches.append(FPBatch(x, labels, trace, grads))
    return batches


@dataclass
class UnitCache:
    unit: object
    inputs: list
    fp_outputs: list
    out_grads: list

    def __len__(self):
        return len(self.inputs)


def collect_unit_io(model, calib, unit, quant=None, batch_size=32, fp_batches=None):
    """Boundary inputs, FP outputs and output gradients of `unit` per calibration batch.

    With `quant` given, inputs come from the model with those quantizers
    active upstream; gradients always come from the full precision model.
    """
    if len(calib) == 0:
        raise UsageError('calibration set is empty')
    fp_batches = fp_batches if fp_batches is not None else fp_pass(model, calib, batch_size)
    needed = unit_inputs(model, unit)
    prefix = model.layer_ids[:model.positions[unit.first]]
    cache = UnitCache(unit, [], [], [])
    for fb in fp_batches:
        if quant is None:
            source = fb.trace
        elif prefix:
            source = run_layers(model, prefix, {model.stem: Tensor(fb.x)}, quant)
        else:
            source = Trace()
        inputs = {unit.first: fb.x if not prefix else source.activations[prefix[-1]].data}
        for src in needed[1:]:
            inputs[src] = source.inputs[src].data
        cache.inputs.append(inputs)
        cache.fp_outputs.append(fb.trace.preacts[unit.last].data)
        cache.out_grads.append(fb.grads[unit.last])
    return cache


def fim_weighted_loss(dz, g):
    """Σ g²·Δz² averaged over the batch (leading) axis."""
    dz = dz if isinstance(dz, Tensor) else Tensor(dz)
    g = np.asarray(g, dtype=np.float64)
    if dz.shape != g.shape:
        raise UsageError('output change of shape {} with gradient of shape {}'.format(dz.shape, g.shape))
    n = dz.shape[0] if dz.ndim > 1 else 1
    return (dz.square() * (g * g)).sum() * (1.0 / n)


def objective_weights(cache, cfg):
    if cfg.objective == 'mse':
        return [np.ones_like(g) for g in cache.out_grads]
    grads = cache.out_grads
    if cfg.normalize_grads:
        mean_sq = np.mean([np.mean(g * g) for g in grads])
        if mean_sq > 0:
            grads = [g / math.sqrt(mean_sq) for g in grads]
    return grads


def unit_objective(model, unit, cache, quant, weights, workers=1):
    """Batch mean of the reconstruction loss over the whole cache."""
    def batch_loss(b):
        inputs = {lid: Tensor(a) for lid, a in cache.inputs[b].items()}
        out = run_unit(model, unit, inputs, quant).output
        return fim_weighted_loss(out - cache.fp_outputs[b], weights[b]).item()

    if workers <= 1:
        losses = [batch_loss(b) for b in range(len(cache))]
    else:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            futures = [executor.submit(batch_loss, b) for b in range(len(cache))]
            wait(futures)
        losses = [f.result() for f in futures]
    return float(np.mean(losses))


@dataclass
class UnitReport:
    unit: str
    init_loss: float
    final_loss: float
    learned_loss: float
    binarized: dict
    kept: str

    def to_dict(self):
        return asdict(self)


def _nearest_rounding(quant, lids):
    for lid in lids:
        lq = quant.get(lid)
        if lq is None or lq.rounding is None:
            continue
        lq.rounding.harden()


def reconstruct_unit(model, unit, cache, quant, cfg, log=None, seed=None):
    """Calibrate the quantizers of `unit` in place and report the objective.

    The learned rounding replaces rounding-to-nearest only if it lowers the
    objective on the cache.
    """
    weights = objective_weights(cache, cfg)
    snapshot = {lid: copy.deepcopy(quant.get(lid)) for lid in unit.layers if lid in quant}
    _nearest_rounding(quant, unit.layers)
    init_loss = unit_objective(model, unit, cache, quant, weights, cfg.workers)
    for lid, lq in snapshot.items():
        quant.layers[lid] = copy.deepcopy(lq)

    learn_steps = cfg.quantize_activations
    rounding_vars, step_vars = quant.begin_training(unit.layers, learn_steps)
    if not rounding_vars and not step_vars:
        quant.end_training()
        _nearest_rounding(quant, unit.layers)
        return UnitReport(unit.id, init_loss, init_loss, init_loss, {}, 'nearest')

    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    adam_round, adam_steps = AdamState(cfg.lr_round), AdamState(cfg.lr_step)
    steps_from = warmup_end(cfg.iters, cfg.warmup)
    order = []
    for it in range(cfg.iters):
        if not order:
            order = list(rng.permutation(len(cache)))
        b = order.pop(0)
        inputs = {lid: Tensor(a) for lid, a in cache.inputs[b].items()}
        out = run_unit(model, unit, inputs, quant).output
        recon = fim_weighted_loss(out - cache.fp_outputs[b], weights[b])
        beta = beta_schedule(it, cfg.iters, cfg.beta_start, cfg.beta_end, cfg.warmup)
        total, reg_value = recon, 0.0
        if reg_active(it, cfg.iters, cfg.warmup):
            for lid, v in rounding_vars.items():
                reg = adaround_reg(quant.get(lid).rounding, beta, v)
                total = total + reg
                reg_value += reg.item()
        loss = total.item()
        if not math.isfinite(loss):
            quant.end_training()
            raise NumericError('unit {}: loss is {} at iteration {}'.format(unit.id, loss, it), iteration=it)
        grads = backward(total)
        if rounding_vars:
            updated = adam_step(adam_round, {lid: v.data for lid, v in rounding_vars.items()},
                                {lid: grads.get(v) for lid, v in rounding_vars.items()})
            for lid, v in rounding_vars.items():
                v.data = updated[lid]
        if step_vars and it >= steps_from:
            updated = adam_step(adam_steps, {lid: s.data for lid, s in step_vars.items()},
                                {lid: grads.get(s) for lid, s in step_vars.items()})
            for lid, s in step_vars.items():
                s.data = np.asarray(max(float(updated[lid]), 1e-8))
        if log is not None and (it % cfg.log_every == 0 or it == cfg.iters - 1):
            log.writerow({'unit': unit.id, 'iteration': it, 'recon_loss': '{:.6e}'.format(recon.item()),
                          'reg_loss': '{:.6e}'.format(reg_value), 'beta': '{:.4f}'.format(beta)})
    quant.end_training()

    binarized = quant.harden(unit.layers)
    for lid, fraction in binarized.items():
        if fraction < 0.99:
            logger.warning('unit %s: only %.1f%% of rounding offsets of %s binarized before hardening',
                           unit.id, 100 * fraction, lid)
    learned_loss = unit_objective(model, unit, cache, quant, weights, cfg.workers)
    kept = 'learned'
    if learned_loss > init_loss:
        for lid, lq in snapshot.items():
            quant.layers[lid] = lq
        _nearest_rounding(quant, unit.layers)
        kept = 'nearest'
    final_loss = min(learned_loss, init_loss)
    logger.info('unit %s: objective %.4e -> %.4e (%s rounding kept)', unit.id, init_loss, final_loss, kept)
    return UnitReport(unit.id, init_loss, final_loss, learned_loss, binarized, kept)


def layer_bits(model, lid, cfg):
    if cfg.bit_config and lid in cfg.bit_config:
        return validate_bits(int(cfg.bit_config[lid]))
    if cfg.first_last_bits is not None and lid in (model.stem, model.head):
        return cfg.first_last_bits
    return cfg.weight_bits


def _act_step(samples, bits, lid):
    try:
        return init_step_size(samples, bits, signed=False)
    except ParameterError:
        logger.warning('layer %s sees only zeros on the calibration set, activation step set to 1', lid)
        return 1.0


def init_quant_state(model, cfg, fp_batches=None):
    """Step sizes from the MSE scan and rounding variables at the identity offsets."""
    sites = set(activation_sites(model, cfg.act_placement)) if cfg.quantize_activations else set()
    if sites and fp_batches is None:
        raise UsageError('activation quantization needs calibration traces')
    layers = {}
    for layer in model.layers:
        if not layer.quantizable:
            continue
        bits = layer_bits(model, layer.id, cfg)
        q = QuantParams(bits, init_step_size(layer.weight, bits, per_channel=cfg.per_channel),
                        per_channel=cfg.per_channel, mode=cfg.rounding)
        rounding = None
        if cfg.rounding == 'adaround':
            rounding = AdaRoundState.init_from(layer.weight, q, reg_weight=cfg.reg_weight,
                                               beta_start=cfg.beta_start, beta_end=cfg.beta_end,
                                               warmup=cfg.warmup, total_iters=cfg.iters)
        act = None
        if layer.id in sites:
            samples = np.concatenate([fb.trace.raw_inputs[layer.id].data.reshape(-1) for fb in fp_batches])
            act = QuantParams(cfg.act_bits, _act_step(samples, cfg.act_bits, layer.id), signed=False)
        layers[layer.id] = LayerQuant(q, rounding, act)
    return QuantState(layers)


def rtn_model(model, bits, calib=None, act_bits=None, first_last_bits=8, batch_size=32):
    """Round-to-nearest baseline."""
    cfg = ReconConfig(weight_bits=bits, rounding='nearest', first_last_bits=first_last_bits,
                      quantize_activations=act_bits is not None, act_bits=act_bits or 8).validate()
    fp_batches = fp_pass(model, calib, batch_size) if act_bits is not None else None
    return init_quant_state(model, cfg, fp_batches)


class Calibrator:
    """Calibrates every reconstruction unit of a model in topological order."""

    def __init__(self, model, calib, config, log=None):
        self.model = model
        self.calib = calib
        self.config = config.validate()
        self.log = log
        self.quant = None
        self.reports = []

    def work_flow(self):
        cfg = self.config
        fp_batches = fp_pass(self.model, self.calib, cfg.batch_size)
        self.quant = init_quant_state(self.model, cfg, fp_batches)
        units = partition(self.model, cfg.granularity)
        logger.info('calibrating %d units at %s granularity, %d-bit weights%s', len(units), cfg.granularity,
                    cfg.weight_bits, ', {}-bit activations'.format(cfg.act_bits) if cfg.quantize_activations else '')
        for index, unit in enumerate(units):
            upstream = self.quant if cfg.propagate == 'quantized' else None
            cache = collect_unit_io(self.model, self.calib, unit, upstream, cfg.batch_size, fp_batches)
            self.reports.append(reconstruct_unit(self.model, unit, cache, self.quant, cfg, self.log,
                                                 seed=[cfg.seed, index]))
        return self.quant


def calibrate_model(model, calib, cfg, log=None, measure=False):
    """Returns (QuantState, SensitivityTable or None, unit reports).

    With `measure`, the table holds one entry per layer: the loss change of
    that layer alone at `cfg.weight_bits` against full precision. Tables
    for the search come from `measure_sensitivities` over every bitwidth.
    """
    calibrator = Calibrator(model, calib, cfg, log)
    quant = calibrator.work_flow()
    table = None
    if measure and not cfg.bit_config:
        from blockquant.mixedprec import measure_sensitivities
        table = measure_sensitivities(model, {cfg.weight_bits: quant}, calib, reference=None,
                                      batch_size=cfg.batch_size, workers=cfg.workers)
    return quant, table, calibrator.reports
