"""Run configuration: profile defaults, then the JSON config file, then CLI flags."""
import dataclasses
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field

from blockquant.hessian import EPSILONS
from blockquant.recon import ReconConfig
from blockquant.utils import LoadError, UsageError

logger = logging.getLogger(__name__)

DEFAULT_CONFIG = 'config.json'

# CLI/config names that land in ReconConfig
RECON_KEYS = {
    'bits': 'weight_bits',
    'iters': 'iters',
    'batch_size': 'batch_size',
    'lr_round': 'lr_round',
    'lr_step': 'lr_step',
    'reg_weight': 'reg_weight',
    'granularity': 'granularity',
    'act_bits': 'act_bits',
    'act_placement': 'act_placement',
    'rounding': 'rounding',
    'objective': 'objective',
    'propagate': 'propagate',
    'per_channel': 'per_channel',
    'normalize_grads': 'normalize_grads',
    'seed': 'seed',
    'workers': 'workers',
    'log_every': 'log_every',
}


def load_config(path=DEFAULT_CONFIG, explicit=False):
    """The parsed config file, or {} when the default file is absent."""
    if not os.path.isfile(path):
        if explicit:
            raise LoadError('config file {} not found'.format(path))
        return {}
    try:
        with open(path) as file:
            return json.load(file)
    except json.JSONDecodeError as e:
        raise LoadError('{}: {}'.format(path, e)) from e


@dataclass(frozen=True)
class RunConfig:
    command: str
    recon: ReconConfig = field(default_factory=ReconConfig)
    profile: str = 'desk'
    model: str = None
    calib: str = None
    test: str = None
    data: str = None
    out: str = None
    calib_size: int = 1024
    seed: int = 0
    sensitivity: str = None
    hardware: str = None
    delta: float = math.inf
    population: int = 50
    generations: int = 100
    mutation: float = 0.1
    topk: int = 10
    measure_sensitivity: bool = False
    bit_config: str = None
    targets: str = 'labels'
    epsilons: tuple = EPSILONS
    verify_samples: int = None
    margin: float = 0.05
    granularities: tuple = ('layer', 'block', 'stage', 'net')

    def validate(self):
        self.recon.validate()
        if self.calib_size < 1:
            raise UsageError('calibration size must be positive')
        if self.population < 2 or self.generations < 1 or self.topk < 1:
            raise UsageError('search needs population >= 2, generations >= 1, topk >= 1')
        if not 0.0 <= self.mutation <= 1.0:
            raise UsageError('mutation probability must lie in [0, 1]')
        if self.targets not in ('model', 'labels'):
            raise UsageError('targets must be model or labels')
        if (self.verify_samples is not None and self.verify_samples < 1) or self.margin < 0:
            raise UsageError('verify needs at least one sample and a nonnegative margin')
        return self

    def to_dict(self):
        return asdict(self)


def _first_last(value):
    if value is None or value == 'follow':
        return None
    return int(value)


def resolve(command, flags, file_config=None):
    """Merge `flags` (None means unset) over the command's config section over profile defaults."""
    section = dict((file_config or {}).get(command, {}))
    values = dict(section)
    values.update({k: v for k, v in flags.items() if v is not None})
    profile = values.get('profile', 'desk')

    overrides = {RECON_KEYS[k]: v for k, v in values.items() if k in RECON_KEYS}
    if 'act_bits' in overrides:
        overrides['quantize_activations'] = True
    recon = ReconConfig.from_profile(profile, **overrides)
    if 'first_last_bits' in values:
        recon = dataclasses.replace(recon, first_last_bits=_first_last(values['first_last_bits']))
    if values.get('bit_config'):
        recon = dataclasses.replace(recon, bit_config=read_bit_config(values['bit_config']))

    known = {f.name for f in dataclasses.fields(RunConfig)} - {'command', 'recon', 'profile'}
    run_values = {k: v for k, v in values.items() if k in known}
    if 'delta' in run_values:
        run_values['delta'] = float(run_values['delta'])
    if 'epsilons' in run_values:
        run_values['epsilons'] = tuple(float(e) for e in run_values['epsilons'])
    if 'granularities' in run_values:
        run_values['granularities'] = tuple(run_values['granularities'])
    unknown = sorted(set(section) - known - set(RECON_KEYS) - {'profile', 'first_last_bits'})
    if unknown:
        logger.warning('ignoring unknown %s settings: %s', command, ', '.join(unknown))
    return RunConfig(command=command, recon=recon.validate(), profile=profile, **run_values).validate()


def read_bit_config(path):
    """Per-layer bits from a search result ({"bits": {layer: bits}}) or a plain mapping."""
    try:
        with open(path) as f:
            data = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise LoadError('{}: {}'.format(path, e)) from e
    bits = data.get('bits', data) if isinstance(data, dict) else None
    if not isinstance(bits, dict):
        raise LoadError('{}: expected a mapping of layer ids to bits'.format(path))
    return {str(k): int(v) for k, v in bits.items()}
