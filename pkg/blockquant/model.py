"""Network description, forward execution, batch-norm folding and partitioning."""
import dataclasses
import logging
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property

import numpy as np

from blockquant.tensor import Tensor, conv2d, cross_entropy, linear, relu
from blockquant.utils import DimensionError, InputError, NumericError, UsageError, split_to_batches

logger = logging.getLogger(__name__)

LAYER_KINDS = ('linear', 'conv2d')
ACTIVATIONS = ('relu', 'none')


class Granularity(str, Enum):
    LAYER = 'layer'
    BLOCK = 'block'
    STAGE = 'stage'
    NET = 'net'


@dataclass(frozen=True)
class BatchNorm:
    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    eps: float = 1e-5

    @property
    def channels(self):
        return self.gamma.shape[0]

    def scale(self):
        denom = self.var + self.eps
        if np.any(denom <= 0):
            raise NumericError('batch norm variance + eps must be positive')
        return self.gamma / np.sqrt(denom)


@dataclass(frozen=True)
class LayerSpec:
    id: str
    kind: str
    weight: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: int = 0
    bn: BatchNorm = None
    quantizable: bool = True
    activation: str = 'relu'

    @property
    def out_channels(self):
        return self.weight.shape[0]

    def validate(self):
        if self.kind not in LAYER_KINDS:
            raise UsageError('layer {}: unknown kind {}'.format(self.id, self.kind))
        if self.activation not in ACTIVATIONS:
            raise UsageError('layer {}: unknown activation {}'.format(self.id, self.activation))
        rank = 2 if self.kind == 'linear' else 4
        if self.weight.ndim != rank:
            raise DimensionError('layer {}: {} weight must be {}-D, got {}'.format(
                self.id, self.kind, rank, self.weight.shape))
        if self.bias.shape != (self.out_channels,):
            raise DimensionError('layer {}: bias shape {} for {} outputs'.format(
                self.id, self.bias.shape, self.out_channels))
        if self.bn is not None and self.bn.channels != self.out_channels:
            raise DimensionError('layer {}: batch norm has {} channels, layer has {}'.format(
                self.id, self.bn.channels, self.out_channels))
        if self.stride < 1 or self.padding < 0:
            raise UsageError('layer {}: bad stride/padding'.format(self.id))


@dataclass(frozen=True)
class ReconUnit:
    id: str
    layers: tuple

    @property
    def first(self):
        return self.layers[0]

    @property
    def last(self):
        return self.layers[-1]


@dataclass(frozen=True)
class NetworkModel:
    layers: tuple
    blocks: tuple = ()
    stages: tuple = ()
    residual_links: tuple = ()
    input_shape: tuple = ()
    name: str = ''
    metadata: dict = field(default_factory=dict, compare=False)

    @cached_property
    def positions(self):
        return {layer.id: i for i, layer in enumerate(self.layers)}

    @cached_property
    def block_of(self):
        return {lid: b for b, block in enumerate(self.blocks) for lid in block}

    @cached_property
    def links_into(self):
        links = {}
        for src, dst in self.residual_links:
            links.setdefault(dst, []).append(src)
        return links

    @property
    def stem(self):
        return self.layers[0].id

    @property
    def head(self):
        return self.layers[-1].id

    @property
    def layer_ids(self):
        return tuple(layer.id for layer in self.layers)

    @property
    def quantizable_ids(self):
        return tuple(layer.id for layer in self.layers if layer.quantizable)

    def layer(self, lid):
        try:
            return self.layers[self.positions[lid]]
        except KeyError:
            raise UsageError('unknown layer id {}'.format(lid)) from None

    def replace_layers(self, layers):
        return dataclasses.replace(self, layers=tuple(layers))

    def validate(self):
        if not self.layers:
            raise UsageError('model has no layers')
        if len(self.positions) != len(self.layers):
            raise UsageError('duplicate layer ids')
        for layer in self.layers:
            layer.validate()
        prev_end = -1
        for b, block in enumerate(self.blocks):
            if not block:
                raise UsageError('block {} is empty'.format(b))
            pos = [self.positions[lid] if lid in self.positions else None for lid in block]
            if None in pos:
                raise UsageError('block {} names an unknown layer'.format(b))
            if pos != list(range(pos[0], pos[0] + len(pos))) or pos[0] <= prev_end:
                raise UsageError('block {} is not a contiguous range after block {}'.format(b, b - 1))
            prev_end = pos[-1]
        for layer in self.layers[1:-1]:
            if layer.quantizable and layer.id not in self.block_of:
                raise UsageError('layer {} lies between stem and head but in no block'.format(layer.id))
        flat = [b for stage in self.stages for b in stage]
        if self.stages and flat != list(range(len(self.blocks))):
            raise UsageError('stages must partition the blocks in order')
        for src, dst in self.residual_links:
            if src not in self.positions or dst not in self.positions:
                raise UsageError('residual link {}->{} names an unknown layer'.format(src, dst))
            if self.block_of.get(src) is None or self.block_of.get(src) != self.block_of.get(dst):
                raise UsageError('residual link {}->{} crosses a block boundary'.format(src, dst))
            if self.positions[src] > self.positions[dst]:
                raise UsageError('residual link {}->{} points backwards'.format(src, dst))
        return self


@dataclass
class Trace:
    """Per-layer tensors of one forward run.

    `raw_inputs` are what reached a layer, `inputs` what it consumed after
    its input quantizer, `preacts` the pre-activations z and `activations`
    h(z).
    """
    raw_inputs: dict = field(default_factory=dict)
    inputs: dict = field(default_factory=dict)
    preacts: dict = field(default_factory=dict)
    activations: dict = field(default_factory=dict)
    last: str = None

    @property
    def output(self):
        return self.preacts[self.last]


def _bn_forward(bn, out, conv):
    scale = bn.scale()
    shape = (1, -1, 1, 1) if conv else (1, -1)
    return (out - bn.mean.reshape(shape)) * scale.reshape(shape) + bn.beta.reshape(shape)


def layer_forward(layer, x, weight, bias):
    if layer.kind == 'conv2d':
        out = conv2d(x, weight, bias, stride=layer.stride, padding=layer.padding)
    else:
        if x.ndim > 2:
            x = x.reshape(x.shape[0], -1)
        out = linear(x, weight, bias)
    if layer.bn is not None:
        out = _bn_forward(layer.bn, out, layer.kind == 'conv2d')
    return out


def run_layers(model, layer_ids, inputs, quant=None, trace=None):
    """Run a contiguous run of layers.

    `inputs[first]` is the raw input of the first layer; residual sources
    outside the run are read from `inputs` as already-consumed tensors.
    `quant` supplies weights and input quantizers; None runs full precision.
    """
    trace = trace if trace is not None else Trace()
    prev = None
    for lid in layer_ids:
        layer = model.layer(lid)
        raw = inputs[lid] if prev is None else prev
        trace.raw_inputs[lid] = raw
        x = quant.quantize_input(lid, raw) if quant is not None else raw
        trace.inputs[lid] = x
        if quant is not None:
            weight, bias = quant.weight(layer), quant.bias(layer)
        else:
            weight, bias = Tensor(layer.weight), Tensor(layer.bias)
        z = layer_forward(layer, x, weight, bias)
        for src in model.links_into.get(lid, ()):
            skip = trace.inputs[src] if src in trace.inputs else inputs[src]
            if skip.shape != z.shape:
                raise DimensionError('residual {}->{}: shapes {} and {}'.format(src, lid, skip.shape, z.shape))
            z = z + skip
        trace.preacts[lid] = z
        prev = relu(z) if layer.activation == 'relu' else z
        trace.activations[lid] = prev
        trace.last = lid
    return trace


def check_input(model, x):
    x = np.asarray(x)
    if model.input_shape and tuple(x.shape[1:]) != tuple(model.input_shape):
        raise InputError('input samples of shape {} for a model expecting {}'.format(
            x.shape[1:], tuple(model.input_shape)))
    return x


def forward(model, x, quant=None, requires_grad=False):
    x = check_input(model, x)
    return run_layers(model, model.layer_ids, {model.stem: Tensor(x, requires_grad=requires_grad)}, quant)


def forward_to(model, x, lid, quant=None):
    """Pre-activation z of layer `lid`, residual additions included."""
    end = model.positions.get(lid)
    if end is None:
        raise UsageError('unknown layer id {}'.format(lid))
    x = check_input(model, x)
    trace = run_layers(model, model.layer_ids[:end + 1], {model.stem: Tensor(x)}, quant)
    return trace.preacts[lid]


def run_unit(model, unit, inputs, quant=None):
    return run_layers(model, unit.layers, inputs, quant)


def unit_inputs(model, unit):
    """Layer ids whose input tensors a unit takes from outside itself."""
    inside = set(unit.layers)
    needed = [unit.first]
    for lid in unit.layers:
        for src in model.links_into.get(lid, ()):
            if src not in inside and src not in needed:
                needed.append(src)
    return tuple(needed)


def fold_bn(model):
    layers = []
    for layer in model.layers:
        if layer.bn is None:
            layers.append(layer)
            continue
        scale = layer.bn.scale()
        shape = (-1,) + (1,) * (layer.weight.ndim - 1)
        weight = layer.weight * scale.reshape(shape)
        bias = scale * (layer.bias - layer.bn.mean) + layer.bn.beta
        layers.append(dataclasses.replace(layer, weight=weight, bias=bias, bn=None))
    folded = sum(1 for layer in model.layers if layer.bn is not None)
    if folded:
        logger.info('folded batch norm into %d layers', folded)
    return model.replace_layers(layers)


def _span(model, first, last):
    return tuple(model.layer_ids[model.positions[first]:model.positions[last] + 1])


def partition(model, granularity):
    granularity = Granularity(granularity)
    units = []
    covered = set()
    if granularity == Granularity.BLOCK:
        for b, block in enumerate(model.blocks):
            units.append(ReconUnit('block:{}'.format(b), tuple(block)))
    elif granularity == Granularity.STAGE:
        for s, stage in enumerate(model.stages):
            first, last = model.blocks[stage[0]][0], model.blocks[stage[-1]][-1]
            units.append(ReconUnit('stage:{}'.format(s), _span(model, first, last)))
    elif granularity == Granularity.NET and model.blocks:
        units.append(ReconUnit('net', _span(model, model.blocks[0][0], model.blocks[-1][-1])))
    for unit in units:
        covered.update(unit.layers)
    for layer in model.layers:
        if layer.quantizable and layer.id not in covered:
            units.append(ReconUnit('layer:{}'.format(layer.id), (layer.id,)))
    units.sort(key=lambda u: model.positions[u.first])
    return units


def evaluate(model, x, labels, quant=None, batch_size=256):
    """Top-1 accuracy and mean cross-entropy."""
    x = check_input(model, x)
    labels = np.asarray(labels)
    correct, loss = 0, 0.0
    for start, end in split_to_batches(len(x), batch_size):
        logits = forward(model, x[start:end], quant).output
        loss += cross_entropy(logits, labels[start:end]).item() * (end - start)
        correct += int(np.sum(np.argmax(logits.data, axis=1) == labels[start:end]))
    return {'accuracy': correct / len(x), 'loss': loss / len(x)}
