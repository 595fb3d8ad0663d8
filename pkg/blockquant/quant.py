"""Uniform symmetric fake quantization.

Weights use the signed grid s·{-2^(b-1), ..., 2^(b-1)-1}; post-ReLU
activations use the unsigned grid s·{0, ..., 2^b-1}. Rounding is either
to-nearest or learned (AdaRound-style rectified sigmoid over floor/ceil).
"""
import copy
import logging
import math
from dataclasses import dataclass

import numpy as np

from blockquant.tensor import Tensor
from blockquant.utils import ParameterError, UsageError, validate_bits

logger = logging.getLogger(__name__)

ZETA = 1.1
GAMMA = -0.1
HARD_V = 10.0
STEP_SCAN = (0.2, 1.2, 100)


@dataclass
class QuantParams:
    bits: int
    step: np.ndarray
    signed: bool = True
    per_channel: bool = False
    mode: str = 'nearest'

    def __post_init__(self):
        validate_bits(self.bits)
        self.step = np.asarray(self.step, dtype=np.float64)
        if np.any(self.step <= 0):
            raise ParameterError('step size must be positive')
        if self.mode not in ('nearest', 'adaround'):
            raise UsageError('unknown rounding mode {}'.format(self.mode))

    @property
    def qmin(self):
        return -2 ** (self.bits - 1) if self.signed else 0

    @property
    def qmax(self):
        return 2 ** (self.bits - 1) - 1 if self.signed else 2 ** self.bits - 1

    def step_like(self, ndim):
        if self.step.ndim == 0:
            return self.step
        return self.step.reshape((-1,) + (1,) * (ndim - 1))

    def grid(self):
        if self.step.ndim:
            raise UsageError('grid() needs a single step size')
        return self.step * np.arange(self.qmin, self.qmax + 1)


def _check_step(step):
    if np.any(np.asarray(step) <= 0):
        raise ParameterError('step size must be positive, got {}'.format(step))


def quantize_rtn(w, q):
    """s·clip(round(w/s), n, p); ties go to the even integer."""
    w = np.asarray(w, dtype=np.float64)
    s = q.step_like(w.ndim)
    _check_step(s)
    return np.clip(np.round(w / s), q.qmin, q.qmax) * s


def _rtn_error(w, s, qmin, qmax):
    return float(np.sum((np.clip(np.round(w / s), qmin, qmax) * s - w) ** 2))


def step_scan(w, bits, signed=True):
    """Candidate steps and their squared quantization errors.

    Candidates are spaced 0.01·max|w|/p apart starting at 0.2·max|w|/p, so
    max|w|/p itself is among them.
    """
    w = np.asarray(w, dtype=np.float64)
    peak = float(np.max(np.abs(w)))
    if peak == 0.0:
        raise ParameterError('cannot initialise a step size for an all-zero tensor')
    unit_grid = QuantParams(bits, 1.0, signed=signed)
    lo, hi, count = STEP_SCAN
    candidates = (lo + (hi - lo) * np.arange(count) / count) * peak / unit_grid.qmax
    errors = np.array([_rtn_error(w, s, unit_grid.qmin, unit_grid.qmax) for s in candidates])
    return candidates, errors


def init_step_size(w, bits, signed=True, per_channel=False):
    w = np.asarray(w, dtype=np.float64)
    if per_channel:
        fallback = init_step_size(w, bits, signed)
        steps = []
        for channel in w:
            if np.max(np.abs(channel)) == 0.0:
                steps.append(fallback)
            else:
                steps.append(init_step_size(channel, bits, signed))
        return np.array(steps)
    candidates, errors = step_scan(w, bits, signed)
    return float(candidates[np.argmin(errors)])


def rectified_sigmoid(v, zeta=ZETA, gamma=GAMMA):
    return np.clip(1.0 / (1.0 + np.exp(-v)) * (zeta - gamma) + gamma, 0.0, 1.0)


@dataclass
class AdaRoundState:
    v: np.ndarray
    zeta: float = ZETA
    gamma: float = GAMMA
    reg_weight: float = 0.01
    beta_start: float = 20.0
    beta_end: float = 2.0
    warmup: float = 0.2
    total_iters: int = 2000

    @classmethod
    def init_from(cls, w, q, **kwargs):
        """v such that the soft rounding offset equals frac(w/s)."""
        zeta, gamma = kwargs.get('zeta', ZETA), kwargs.get('gamma', GAMMA)
        scaled = np.asarray(w, dtype=np.float64) / q.step_like(np.ndim(w))
        rest = scaled - np.floor(scaled)
        v = -np.log((zeta - gamma) / (rest - gamma) - 1.0)
        return cls(v=v, **kwargs)

    def soft(self):
        return rectified_sigmoid(self.v, self.zeta, self.gamma)

    def binarized_fraction(self, tol=0.01):
        h = self.soft()
        return float(np.mean((h <= tol) | (h >= 1.0 - tol))) if h.size else 1.0

    def harden(self):
        """Snap every offset to 0 or 1 and return the fraction that already was."""
        fraction = self.binarized_fraction()
        self.v = np.where(self.soft() >= 0.5, HARD_V, -HARD_V)
        return fraction


def adaround_apply(w, q, state):
    w = np.asarray(w, dtype=np.float64)
    if state.v.shape != w.shape:
        raise UsageError('rounding variable of shape {} for weight {}'.format(state.v.shape, w.shape))
    s = q.step_like(w.ndim)
    _check_step(s)
    return s * np.clip(np.floor(w / s) + state.soft(), q.qmin, q.qmax)


def soft_rounding(v, zeta=ZETA, gamma=GAMMA):
    """Rectified sigmoid as a differentiable op on a Tensor."""
    sig = 1.0 / (1.0 + np.exp(-v.data))
    stretched = sig * (zeta - gamma) + gamma
    inside = (stretched > 0.0) & (stretched < 1.0)
    return Tensor.custom(np.clip(stretched, 0.0, 1.0), (v,),
                         lambda g: (g * (zeta - gamma) * sig * (1.0 - sig) * inside,), op='soft_rounding')


def adaround_weight(w, q, v, state):
    """s·clip(floor(w/s) + h(v), n, p), differentiable in v."""
    if v.shape != np.shape(w):
        raise UsageError('rounding variable of shape {} for weight {}'.format(v.shape, np.shape(w)))
    s = q.step_like(np.ndim(w))
    base = np.floor(np.asarray(w) / s)
    h = soft_rounding(v, state.zeta, state.gamma)
    raw = base + h.data
    inside = (raw >= q.qmin) & (raw <= q.qmax)
    return Tensor.custom(s * np.clip(raw, q.qmin, q.qmax), (h,), lambda g: (g * s * inside,), op='adaround')


def adaround_reg(state, beta, v=None):
    """λ Σ (1 − |2h − 1|^β). With a Tensor `v` the result is a Tensor."""
    if beta <= 0:
        raise ParameterError('beta must be positive, got {}'.format(beta))
    if v is None:
        h = state.soft()
        return float(state.reg_weight * np.sum(1.0 - np.abs(2.0 * h - 1.0) ** beta))
    h = soft_rounding(v, state.zeta, state.gamma)
    centered = 2.0 * h.data - 1.0
    value = state.reg_weight * np.sum(1.0 - np.abs(centered) ** beta)

    def backward(g):
        return (-g * state.reg_weight * beta * np.abs(centered) ** (beta - 1.0) * np.sign(centered) * 2.0,)

    return Tensor.custom(value, (h,), backward, op='adaround_reg')


def warmup_end(total, warmup):
    return int(math.floor(warmup * total))


def beta_schedule(iteration, total, beta_start=20.0, beta_end=2.0, warmup=0.2):
    """β_start through the warmup, then half-cosine annealing down to β_end."""
    if not 0 <= iteration < total:
        raise UsageError('iteration {} outside [0, {})'.format(iteration, total))
    start = warmup_end(total, warmup)
    if iteration <= start or total - start <= 1:
        return beta_start
    progress = (iteration - start) / (total - 1 - start)
    return beta_end + 0.5 * (beta_start - beta_end) * (1.0 + math.cos(math.pi * progress))


def reg_active(iteration, total, warmup=0.2):
    return iteration >= warmup_end(total, warmup)


def act_fake_quant(x, q, step=None):
    """s·clip(round(x/s), 0, p) for post-ReLU inputs.

    Straight-through for x inside [0, p·s]. When `step` is a trainable
    scalar Tensor it receives the learned-step-size gradient.
    """
    s = float(step.data) if step is not None else float(q.step)
    _check_step(s)
    out = np.clip(np.round(x.data / s), 0, q.qmax) * s
    parents = (x,) if step is None else (x, step)

    def backward(g):
        pass_through = g * ((x.data >= 0.0) & (x.data <= q.qmax * s))
        if step is None:
            return (pass_through,)
        return pass_through, np.asarray(act_step_grad(x.data, q, g, s))

    return Tensor.custom(out, parents, backward, op='act_quant')


def act_step_grad(x, q, upstream, step=None):
    """Σ ∂L/∂x̂ · { 0 if x ≤ 0; p if x ≥ p·s; round(x/s) − x/s otherwise }"""
    s = float(q.step) if step is None else float(step)
    _check_step(s)
    x = np.asarray(x, dtype=np.float64)
    r = x / s
    local = np.where(x <= 0.0, 0.0, np.where(r >= q.qmax, float(q.qmax), np.round(r) - r))
    return float(np.sum(np.asarray(upstream) * local))


@dataclass
class LayerQuant:
    weight: QuantParams = None
    rounding: AdaRoundState = None
    act: QuantParams = None

    @property
    def bits(self):
        return self.weight.bits if self.weight is not None else None

    def quantized(self, w):
        if self.weight is None:
            return np.asarray(w, dtype=np.float64)
        if self.rounding is None:
            return quantize_rtn(w, self.weight)
        return adaround_apply(w, self.weight, self.rounding)


def activation_sites(model, placement='block'):
    """Layers whose input gets an activation quantizer (never the stem)."""
    if placement not in ('block', 'layer'):
        raise UsageError('unknown activation placement {}'.format(placement))
    sites = []
    for layer in model.layers[1:]:
        if not layer.quantizable:
            continue
        block = model.block_of.get(layer.id)
        if placement == 'layer' or block is None or model.blocks[block][0] == layer.id:
            sites.append(layer.id)
    return sites


class QuantState:
    """Quantizers of a model keyed by layer id; also the forward hook of `run_layers`."""

    def __init__(self, layers=None):
        self.layers = dict(layers or {})
        self._rounding_vars = {}
        self._step_vars = {}

    def __contains__(self, lid):
        return lid in self.layers

    def get(self, lid):
        return self.layers.get(lid)

    def weight(self, layer):
        lq = self.layers.get(layer.id)
        if lq is None or lq.weight is None:
            return Tensor(layer.weight)
        if layer.id in self._rounding_vars:
            return adaround_weight(layer.weight, lq.weight, self._rounding_vars[layer.id], lq.rounding)
        return Tensor(lq.quantized(layer.weight))

    def bias(self, layer):
        return Tensor(layer.bias)

    def quantize_input(self, lid, x):
        lq = self.layers.get(lid)
        if lq is None or lq.act is None:
            return x
        return act_fake_quant(x, lq.act, self._step_vars.get(lid))

    def begin_training(self, layer_ids, learn_steps=False):
        """Expose rounding variables (and activation steps) of `layer_ids` as trainable Tensors."""
        for lid in layer_ids:
            lq = self.layers.get(lid)
            if lq is None:
                continue
            if lq.rounding is not None:
                self._rounding_vars[lid] = Tensor(lq.rounding.v.copy(), requires_grad=True)
            if learn_steps and lq.act is not None:
                self._step_vars[lid] = Tensor(np.array(float(lq.act.step)), requires_grad=True)
        return dict(self._rounding_vars), dict(self._step_vars)

    def end_training(self):
        for lid, v in self._rounding_vars.items():
            self.layers[lid].rounding.v = v.data.copy()
        for lid, s in self._step_vars.items():
            self.layers[lid].act.step = np.asarray(max(float(s.data), 1e-8))
        self._rounding_vars, self._step_vars = {}, {}

    def harden(self, layer_ids):
        fractions = {}
        for lid in layer_ids:
            lq = self.layers.get(lid)
            if lq is not None and lq.rounding is not None:
                fractions[lid] = lq.rounding.harden()
        return fractions

    def bits(self):
        return {lid: lq.bits for lid, lq in self.layers.items() if lq.weight is not None}

    def size_bytes(self, model):
        total = 0.0
        for layer in model.layers:
            lq = self.layers.get(layer.id)
            bits = lq.bits if lq is not None and lq.bits is not None else 32
            total += layer.weight.size * bits / 8
        return total

    def copy(self):
        return QuantState(copy.deepcopy(self.layers))

    def with_layers(self, overrides):
        state = self.copy()
        for lid, lq in overrides.items():
            state.layers[lid] = copy.deepcopy(lq)
        return state

    def to_tensors(self):
        entries = {}
        for lid, lq in self.layers.items():
            meta, tensors = {}, {}
            if lq.weight is not None:
                meta.update(bits=lq.weight.bits, mode=lq.weight.mode, per_channel=lq.weight.per_channel)
                tensors['qstep'] = lq.weight.step
            if lq.rounding is not None:
                meta.update(zeta=lq.rounding.zeta, gamma=lq.rounding.gamma)
                tensors['vround'] = lq.rounding.v
            if lq.act is not None:
                meta['act_bits'] = lq.act.bits
                tensors['astep'] = lq.act.step
            entries[lid] = (meta, tensors)
        return entries

    @classmethod
    def from_tensors(cls, entries):
        layers = {}
        for lid, (meta, tensors) in entries.items():
            weight = rounding = act = None
            if 'qstep' in tensors:
                weight = QuantParams(meta['bits'], tensors['qstep'],
                                     per_channel=meta.get('per_channel', False),
                                     mode=meta.get('mode', 'nearest'))
            if 'vround' in tensors:
                rounding = AdaRoundState(v=tensors['vround'], zeta=meta.get('zeta', ZETA),
                                         gamma=meta.get('gamma', GAMMA))
            if 'astep' in tensors:
                act = QuantParams(meta['act_bits'], tensors['astep'], signed=False)
            layers[lid] = LayerQuant(weight, rounding, act)
        return cls(layers)
