"""Mixed precision bit assignment.

Sensitivities are measured from unified-precision calibrations, the
fitness of a bit configuration is read off the sensitivity table, and a
genetic search finds the fittest configuration under a hardware budget.
"""
import itertools
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor, wait
from dataclasses import dataclass, field

import numpy as np

from blockquant.model import forward, partition
from blockquant.quant import LayerQuant
from blockquant.recon import fp_pass
from blockquant.utils import (ConstraintError, DataError, LoadError, ScaleError, SearchError, UsageError,
                              validate_bits)

logger = logging.getLogger(__name__)

SEARCH_BITS = (2, 4, 8)
MAX_PERMUTATION_BLOCK = 6
MAX_EXHAUSTIVE = 12
STALL_LIMIT = 10 ** 4
MB = 2 ** 20


@dataclass(frozen=True)
class BitConfig:
    layers: tuple
    bits: tuple

    def __post_init__(self):
        if len(self.layers) != len(self.bits):
            raise UsageError('{} bitwidths for {} layers'.format(len(self.bits), len(self.layers)))
        for b in self.bits:
            validate_bits(b, SEARCH_BITS)

    def as_dict(self):
        return dict(zip(self.layers, self.bits))


def _subset_key(subset, order):
    return '+'.join(sorted(subset, key=order.index))


@dataclass
class SensitivityTable:
    layers: tuple
    groups: tuple
    diag: dict = field(default_factory=dict)
    offdiag2: dict = field(default_factory=dict)
    capped: set = field(default_factory=set)
    reference: int = 8

    def choices(self, lid):
        bits = sorted(b for (layer, b) in self.diag if layer == lid and b in SEARCH_BITS)
        if not bits:
            raise DataError('sensitivity table has no entry for layer {}'.format(lid))
        return tuple(bits)

    def monotonicity_violations(self, slack=1e-6):
        found = []
        for lid in self.layers:
            present = [b for b in (8, 4, 2) if (lid, b) in self.diag]
            for hi, lo in zip(present, present[1:]):
                if self.diag[(lid, hi)] > self.diag[(lid, lo)] + slack:
                    found.append((lid, hi, lo))
        return found

    def to_dict(self):
        return {
            'reference': self.reference,
            'layers': list(self.layers),
            'groups': [list(g) for g in self.groups],
            'capped': sorted(self.capped),
            'diag': {lid: {str(b): v for (layer, b), v in sorted(self.diag.items()) if layer == lid}
                     for lid in self.layers},
            'offdiag2': {str(gi): {_subset_key(subset, list(self.layers)): v
                                   for (g, subset), v in self.offdiag2.items() if g == gi}
                         for gi in range(len(self.groups))},
        }

    @classmethod
    def from_dict(cls, data):
        try:
            table = cls(layers=tuple(data['layers']), groups=tuple(tuple(g) for g in data['groups']),
                        capped=set(data.get('capped', [])), reference=data.get('reference', 8))
            for lid, entries in data['diag'].items():
                for b, value in entries.items():
                    table.diag[(lid, int(b))] = float(value)
            for gi, entries in data['offdiag2'].items():
                for key, value in entries.items():
                    table.offdiag2[(int(gi), frozenset(key.split('+')))] = float(value)
        except (KeyError, TypeError, ValueError) as e:
            raise LoadError('malformed sensitivity table: {}'.format(e)) from e
        return table

    def save(self, path):
        with open(path, 'w') as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path):
        try:
            with open(path) as f:
                return cls.from_dict(json.load(f))
        except (OSError, json.JSONDecodeError) as e:
            raise LoadError('{}: {}'.format(path, e)) from e


def output_degradation(model, quant, fp_batches):
    """Batch mean of Σ g²·(ẑ − z)² at the network output, g per sample."""
    total = 0.0
    for fb in fp_batches:
        n = len(fb.x)
        g = fb.grads[model.head] * n
        dz = forward(model, fb.x, quant).output.data - fb.trace.output.data
        total += float(np.sum(g * g * dz * dz)) / n
    return total / len(fp_batches)


def _reference_state(model, calibrated, reference):
    if reference is not None:
        if reference not in calibrated:
            raise UsageError('no {}-bit calibration to use as reference'.format(reference))
        return calibrated[reference].copy()
    base = next(iter(calibrated.values())).copy()
    for lid, lq in base.layers.items():
        base.layers[lid] = LayerQuant(None, None, lq.act)
    return base


def measure_sensitivities(model, calibrated, calib, reference=8, batch_size=32, workers=1,
                          max_block=MAX_PERMUTATION_BLOCK):
    """Diagonal and 2-bit intra-block sensitivities from unified calibrations.

    `calibrated` maps bitwidth to the QuantState of a unified calibration at
    that width. With `reference` None the reference is full precision
    weights.
    """
    if not calibrated:
        raise UsageError('no calibrations to measure')
    base = _reference_state(model, calibrated, reference)
    fp_batches = fp_pass(model, calib, batch_size)
    layers = tuple(lid for lid in model.quantizable_ids)
    groups = tuple(tuple(lid for lid in unit.layers if lid in base) for unit in partition(model, 'block'))
    groups = tuple(g for g in groups if g)
    table = SensitivityTable(layers=layers, groups=groups, reference=reference or 32)

    def swapped(bits, lids):
        overrides = {}
        for lid in lids:
            lq = calibrated[bits].get(lid)
            overrides[lid] = LayerQuant(lq.weight, lq.rounding, base.get(lid).act)
        return base.with_layers(overrides)

    jobs = []
    for bits in sorted(calibrated):
        for lid in layers:
            lq = calibrated[bits].get(lid)
            if lq is None or lq.bits != bits:
                continue
            jobs.append((('diag', lid, bits), bits, (lid,)))
    if 2 in calibrated:
        for gi, group in enumerate(groups):
            members = [lid for lid in group if calibrated[2].get(lid).bits == 2]
            if len(members) > max_block:
                logger.warning('block %d has %d layers, using diagonal 2-bit terms only', gi, len(members))
                table.capped.add(gi)
                continue
            for size in range(1, len(members) + 1):
                for subset in itertools.combinations(members, size):
                    jobs.append((('offdiag2', gi, frozenset(subset)), 2, subset))

    def measure(job):
        _, bits, lids = job
        return output_degradation(model, swapped(bits, lids), fp_batches)

    if workers <= 1:
        values = [measure(job) for job in jobs]
    else:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            futures = [executor.submit(measure, job) for job in jobs]
            wait(futures)
        values = [f.result() for f in futures]
    reference_loss = output_degradation(model, base, fp_batches)
    for (key, _, _), value in zip(jobs, values):
        if key[0] == 'diag':
            table.diag[(key[1], key[2])] = value - reference_loss
        else:
            table.offdiag2[(key[1], key[2])] = value - reference_loss
    for lid, hi, lo in table.monotonicity_violations():
        logger.warning('layer %s: %d-bit sensitivity exceeds %d-bit', lid, hi, lo)
    logger.info('measured %d sensitivities (reference %s-bit)', len(jobs), reference or 'full precision')
    return table


def _genome(c, table):
    if isinstance(c, BitConfig):
        lookup = c.as_dict()
        try:
            return tuple(lookup[lid] for lid in table.layers)
        except KeyError as e:
            raise DataError('bit config misses layer {}'.format(e)) from None
    return tuple(c)


def fitness(c, table):
    """Diagonal terms of the non-2-bit layers plus each block's 2-bit subset term."""
    bits = dict(zip(table.layers, _genome(c, table)))
    total = 0.0
    for lid, b in bits.items():
        if b == 2:
            continue
        try:
            total += table.diag[(lid, b)]
        except KeyError:
            raise DataError('no sensitivity for layer {} at {} bits'.format(lid, b)) from None
    for gi, group in enumerate(table.groups):
        subset = frozenset(lid for lid in group if bits.get(lid) == 2)
        if not subset:
            continue
        try:
            if gi in table.capped:
                total += sum(table.diag[(lid, 2)] for lid in subset)
            else:
                total += table.offdiag2[(gi, subset)]
        except KeyError:
            raise DataError('no 2-bit sensitivity for {} in block {}'.format(sorted(subset), gi)) from None
    return total


@dataclass
class HardwareEntry:
    id: str
    elements: int
    latency: dict = field(default_factory=dict)


@dataclass
class HardwareTable:
    constraint: str
    act_bits: int
    layers: list

    def __post_init__(self):
        if self.constraint not in ('latency', 'size'):
            raise UsageError('constraint must be latency or size, got {}'.format(self.constraint))
        self.index = {entry.id: entry for entry in self.layers}

    def validate(self):
        for entry in self.layers:
            if any(v <= 0 for v in entry.latency.values()):
                raise DataError('layer {}: latency must be positive'.format(entry.id))
            for (w, a), value in entry.latency.items():
                for lower in (b for b in SEARCH_BITS if b < w):
                    if (lower, a) in entry.latency and entry.latency[(lower, a)] > value:
                        raise DataError('layer {}: latency grows when weights drop from {} to {} bits'.format(
                            entry.id, w, lower))
        return self

    def cost(self, lid, bits, act_bits=None):
        entry = self.index.get(lid)
        if entry is None:
            raise DataError('hardware table has no layer {}'.format(lid))
        if self.constraint == 'size':
            return entry.elements * bits / 8
        act_bits = act_bits or self.act_bits
        try:
            return entry.latency[(bits, act_bits)]
        except KeyError:
            raise DataError('no latency for layer {} at w{}a{}'.format(lid, bits, act_bits)) from None

    def to_dict(self):
        layers = []
        for entry in self.layers:
            latency = {}
            for (w, a), value in sorted(entry.latency.items()):
                latency[str(w) if a == self.act_bits else '{}x{}'.format(w, a)] = value
            layers.append({'id': entry.id, 'elements': entry.elements, 'latency_ms': latency})
        return {'constraint': self.constraint, 'act_bits': self.act_bits, 'layers': layers}

    @classmethod
    def from_dict(cls, data):
        try:
            act_bits = int(data.get('act_bits', 8))
            layers = []
            for item in data['layers']:
                latency = {}
                for key, value in item.get('latency_ms', {}).items():
                    w, _, a = str(key).partition('x')
                    latency[(int(w), int(a) if a else act_bits)] = float(value)
                layers.append(HardwareEntry(item['id'], int(item.get('elements', 0)), latency))
            table = cls(data.get('constraint', 'latency'), act_bits, layers)
        except (KeyError, TypeError, ValueError) as e:
            raise LoadError('malformed hardware table: {}'.format(e)) from e
        return table.validate()

    def save(self, path):
        with open(path, 'w') as f:
            json.dump(self.to_dict(), f, indent=2)

    @classmethod
    def load(cls, path):
        try:
            with open(path) as f:
                return cls.from_dict(json.load(f))
        except (OSError, json.JSONDecodeError) as e:
            raise LoadError('{}: {}'.format(path, e)) from e


def hardware_measure(c, hw, act_bits=None, layers=None):
    """Latency in ms, or size in MB (2^20 bytes), of a bit configuration."""
    if isinstance(c, BitConfig):
        pairs = zip(c.layers, c.bits)
    else:
        pairs = zip(layers if layers is not None else [e.id for e in hw.layers], c)
    total = sum(hw.cost(lid, bits, act_bits) for lid, bits in pairs)
    return total / MB if hw.constraint == 'size' else total


RESNET18_LAYERS = (
    ('conv1', 3 * 64 * 7 * 7),
    *(('layer1.{}.conv{}'.format(b, i), 64 * 64 * 9) for b in range(2) for i in (1, 2)),
    ('layer2.0.conv1', 64 * 128 * 9), ('layer2.0.conv2', 128 * 128 * 9), ('layer2.0.downsample', 64 * 128),
    ('layer2.1.conv1', 128 * 128 * 9), ('layer2.1.conv2', 128 * 128 * 9),
    ('layer3.0.conv1', 128 * 256 * 9), ('layer3.0.conv2', 256 * 256 * 9), ('layer3.0.downsample', 128 * 256),
    ('layer3.1.conv1', 256 * 256 * 9), ('layer3.1.conv2', 256 * 256 * 9),
    ('layer4.0.conv1', 256 * 512 * 9), ('layer4.0.conv2', 512 * 512 * 9), ('layer4.0.downsample', 256 * 512),
    ('layer4.1.conv1', 512 * 512 * 9), ('layer4.1.conv2', 512 * 512 * 9),
    ('fc', 512 * 1000),
)


def resnet18_size_manifest():
    """Size-only hardware table with the weight element counts of ResNet-18."""
    return HardwareTable('size', 8, [HardwareEntry(lid, n) for lid, n in RESNET18_LAYERS])


PEAK_MACS = 256e9
WEIGHT_BANDWIDTH = 16e9


def synthetic_hardware_table(model, act_bits=8):
    """Latency lookup table of an accelerator whose throughput doubles each time
    weight or activation width halves, from 256 GMAC/s at 8x8."""
    trace = forward(model, np.zeros((1,) + tuple(model.input_shape)))
    entries = []
    for layer in model.layers:
        if not layer.quantizable:
            continue
        z = trace.preacts[layer.id]
        per_output = layer.weight.size // layer.weight.shape[0]
        macs = z.size * per_output
        latency = {}
        for w in SEARCH_BITS:
            for a in SEARCH_BITS:
                compute = macs / (PEAK_MACS * (8 / w) * (8 / a))
                transfer = layer.weight.size * w / 8 / WEIGHT_BANDWIDTH
                latency[(w, a)] = 1e3 * (compute + transfer)
        entries.append(HardwareEntry(layer.id, int(layer.weight.size), latency))
    return HardwareTable('latency', act_bits, entries).validate()


def crossover(parents, rng):
    """Uniform per-gene mix of two parents drawn from `parents`."""
    if not parents:
        raise UsageError('crossover needs at least one parent')
    a = parents[rng.integers(len(parents))]
    b = parents[rng.integers(len(parents))]
    take_a = rng.random(len(a)) < 0.5
    return tuple(x if pick else y for x, y, pick in zip(a, b, take_a))


def mutate(parent, p, rng, choices=None):
    """Resample each gene uniformly from its choices with probability p."""
    choices = choices or [SEARCH_BITS] * len(parent)
    flips = rng.random(len(parent)) < p
    return tuple(opts[rng.integers(len(opts))] if flip else gene
                 for gene, flip, opts in zip(parent, flips, choices))


def _gaussian_genome(rng, choices):
    genome = []
    for opts, idx in zip(choices, np.clip(np.rint(rng.normal(1.0, 1.0, len(choices))), 0, 2).astype(int)):
        wanted = SEARCH_BITS[idx]
        genome.append(min(opts, key=lambda b: (abs(b - wanted), b)))
    return tuple(genome)


@dataclass
class SearchResult:
    config: BitConfig
    fitness: float
    hardware: float
    generations: list = field(default_factory=list)
    evaluated: int = 0

    def to_dict(self):
        return {'bits': self.config.as_dict(), 'fitness': self.fitness, 'hardware': self.hardware,
                'evaluated': self.evaluated, 'generations': self.generations}


def minimal_config(table, hw, act_bits=None):
    return tuple(min(table.choices(lid), key=lambda b: (hw.cost(lid, b, act_bits), b)) for lid in table.layers)


def _check_feasible(table, hw, delta, act_bits):
    minimal = minimal_config(table, hw, act_bits)
    h_min = hardware_measure(minimal, hw, act_bits, table.layers)
    if h_min > delta:
        raise ConstraintError('budget {} is below the minimal achievable {}'.format(delta, h_min), minimal=h_min)
    return minimal


class GeneticSearch:
    """Evolves bit configurations under H(c) ≤ δ, keeping the best K ever seen."""

    def __init__(self, table, hw, delta, population=50, generations=100, mutation=0.1, seed=0,
                 topk=10, act_bits=None, on_admit=None):
        if population < 2 or generations < 1 or topk < 1:
            raise UsageError('need population >= 2, generations >= 1 and topk >= 1')
        if not 0.0 <= mutation <= 1.0:
            raise UsageError('mutation probability must lie in [0, 1]')
        self.table, self.hw, self.delta = table, hw, delta
        self.population_size, self.generations, self.mutation = population, generations, mutation
        self.topk, self.act_bits, self.on_admit = topk, act_bits, on_admit
        self.rng = np.random.default_rng(seed)
        self.choices = [table.choices(lid) for lid in table.layers]
        self.cache = {}
        self.archive = []
        self.log = []

    def hardware(self, genome):
        return hardware_measure(genome, self.hw, self.act_bits, self.table.layers)

    def fitness(self, genome):
        if genome not in self.cache:
            self.cache[genome] = fitness(genome, self.table)
        return self.cache[genome]

    def _admit(self, genome):
        h = self.hardware(genome)
        if h > self.delta:
            return False
        if self.on_admit is not None:
            self.on_admit(genome, h)
        return True

    def _breed(self, count, make):
        children, rejects = [], 0
        while len(children) < count:
            child = make()
            if self._admit(child):
                children.append(child)
                rejects = 0
                continue
            rejects += 1
            if rejects >= STALL_LIMIT:
                raise SearchError('{} consecutive infeasible children'.format(STALL_LIMIT))
        return children

    def initial_population(self, minimal):
        population = [minimal]
        if self.on_admit is not None:
            self.on_admit(minimal, self.hardware(minimal))
        rejects = 0
        while len(population) < self.population_size:
            genome = _gaussian_genome(self.rng, self.choices)
            if self._admit(genome):
                population.append(genome)
                rejects = 0
                continue
            rejects += 1
            if rejects >= STALL_LIMIT:
                logger.warning('initial sampling stalled, filling %d slots with the minimal config',
                               self.population_size - len(population))
                population.extend([minimal] * (self.population_size - len(population)))
        return population

    def _update_archive(self, population):
        pool = {g: self.fitness(g) for g in self.archive}
        pool.update({g: self.fitness(g) for g in population})
        self.archive = sorted(pool, key=lambda g: (pool[g], g))[:self.topk]

    def work_flow(self):
        minimal = _check_feasible(self.table, self.hw, self.delta, self.act_bits)
        population = self.initial_population(minimal)
        half = self.population_size // 2
        for gen in range(self.generations):
            self._update_archive(population)
            best = self.archive[0]
            self.log.append({'generation': gen, 'best_fitness': self.fitness(best),
                             'mean_fitness': float(np.mean([self.fitness(g) for g in population])),
                             'best_hardware': self.hardware(best)})
            population = self._breed(half, lambda: crossover(self.archive, self.rng))
            population += self._breed(self.population_size - half,
                                      lambda: mutate(self.archive[self.rng.integers(len(self.archive))],
                                                     self.mutation, self.rng, self.choices))
        self._update_archive(population)
        best = self.archive[0]
        logger.info('search done: fitness %.4e, hardware %.4f, %d configs evaluated',
                    self.fitness(best), self.hardware(best), len(self.cache))
        return SearchResult(BitConfig(self.table.layers, best), self.fitness(best), self.hardware(best),
                            self.log, len(self.cache))


def ga_search(table, hw, delta, population=50, generations=100, mutation=0.1, seed=0, topk=10,
              act_bits=None, on_admit=None):
    return GeneticSearch(table, hw, delta, population, generations, mutation, seed, topk, act_bits,
                         on_admit).work_flow()


def exhaustive_search(table, hw, delta, act_bits=None):
    n = len(table.layers)
    if n > MAX_EXHAUSTIVE:
        raise ScaleError('exhaustive search over {} layers exceeds {}'.format(n, MAX_EXHAUSTIVE))
    _check_feasible(table, hw, delta, act_bits)
    best, best_fit = None, math.inf
    for genome in itertools.product(*(table.choices(lid) for lid in table.layers)):
        if hardware_measure(genome, hw, act_bits, table.layers) > delta:
            continue
        fit = fitness(genome, table)
        if fit < best_fit:
            best, best_fit = genome, fit
    return SearchResult(BitConfig(table.layers, best), best_fit,
                        hardware_measure(best, hw, act_bits, table.layers))
