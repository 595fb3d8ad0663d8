"""On-disk model containers and datasets.

A model is a directory holding `manifest.json` plus one BQTN file per
tensor. A dataset is a single BQTD file.
"""
import json
import logging
import os
import struct
from dataclasses import dataclass

import numpy as np

from blockquant.model import BatchNorm, LayerSpec, NetworkModel
from blockquant.utils import DataError, LoadError, UsageError

logger = logging.getLogger(__name__)

MANIFEST = 'manifest.json'
MANIFEST_FORMAT = 'blockquant-model'
TENSOR_MAGIC = b'BQTN'
DATASET_MAGIC = b'BQTD'
BN_FIELDS = ('gamma', 'beta', 'mean', 'var')


def write_tensor(path, array):
    array = np.asarray(array, dtype='<f4')
    with open(path, 'wb') as f:
        f.write(TENSOR_MAGIC)
        f.write(struct.pack('<I', array.ndim))
        f.write(struct.pack('<{}I'.format(array.ndim), *array.shape))
        f.write(array.tobytes(order='C'))


def _read_exact(f, size, path):
    buf = f.read(size)
    if len(buf) != size:
        raise LoadError('{}: truncated file'.format(path))
    return buf


def read_tensor(path):
    try:
        with open(path, 'rb') as f:
            if f.read(4) != TENSOR_MAGIC:
                raise LoadError('{}: not a BQTN tensor file'.format(path))
            rank, = struct.unpack('<I', _read_exact(f, 4, path))
            shape = struct.unpack('<{}I'.format(rank), _read_exact(f, 4 * rank, path))
            count = int(np.prod(shape, dtype=np.int64))
            data = np.frombuffer(_read_exact(f, 4 * count, path), dtype='<f4')
    except FileNotFoundError:
        raise LoadError('{} not found'.format(path)) from None
    return data.reshape(shape).astype(np.float64)


def write_dataset(path, x, labels):
    x = np.asarray(x, dtype='<f4')
    labels = np.asarray(labels, dtype='<u4')
    if len(labels) != len(x):
        raise UsageError('{} labels for {} samples'.format(len(labels), len(x)))
    sample_shape = x.shape[1:]
    with open(path, 'wb') as f:
        f.write(DATASET_MAGIC)
        f.write(struct.pack('<II', len(x), len(sample_shape)))
        f.write(struct.pack('<{}I'.format(len(sample_shape)), *sample_shape))
        f.write(x.tobytes(order='C'))
        f.write(labels.tobytes())


@dataclass
class Dataset:
    x: np.ndarray
    labels: np.ndarray
    source: str = ''

    def __len__(self):
        return len(self.x)


@dataclass
class CalibrationSet(Dataset):
    seed: int = 0


def load_dataset(path):
    try:
        with open(path, 'rb') as f:
            if f.read(4) != DATASET_MAGIC:
                raise LoadError('{}: not a BQTD dataset file'.format(path))
            count, rank = struct.unpack('<II', _read_exact(f, 8, path))
            shape = struct.unpack('<{}I'.format(rank), _read_exact(f, 4 * rank, path))
            per_sample = int(np.prod(shape, dtype=np.int64))
            x = np.frombuffer(_read_exact(f, 4 * count * per_sample, path), dtype='<f4')
            labels = np.frombuffer(_read_exact(f, 4 * count, path), dtype='<u4')
    except FileNotFoundError:
        raise LoadError('{} not found'.format(path)) from None
    return Dataset(x.reshape((count,) + shape).astype(np.float64), labels.astype(np.int64), source=path)


def load_calibration(path, n=None, seed=0):
    """Seeded subsample of `n` samples without replacement, in seeded order."""
    data = load_dataset(path)
    total = len(data)
    n = total if n is None else n
    if n > total:
        raise DataError('asked for {} calibration samples, {} has {}'.format(n, path, total))
    if n < 1:
        raise UsageError('calibration set must hold at least one sample')
    order = np.random.default_rng(seed).permutation(total)[:n]
    logger.info('calibration set: %d of %d samples from %s (seed %d)', n, total, path, seed)
    return CalibrationSet(data.x[order], data.labels[order], source=path, seed=seed)


def _tensor_name(lid, key):
    return '{}.{}.bqtn'.format(lid, key)


def save_model(model, path, quant=None):
    """Write `model` (and optionally its quantization state) under directory `path`."""
    os.makedirs(path, exist_ok=True)
    quant_entries = quant.to_tensors() if quant is not None else {}
    layers = []
    for layer in model.layers:
        entry = {
            'id': layer.id,
            'kind': layer.kind,
            'stride': layer.stride,
            'padding': layer.padding,
            'activation': layer.activation,
            'quantizable': layer.quantizable,
            'weight': _tensor_name(layer.id, 'weight'),
            'bias': _tensor_name(layer.id, 'bias'),
            'bn': None,
        }
        write_tensor(os.path.join(path, entry['weight']), layer.weight)
        write_tensor(os.path.join(path, entry['bias']), layer.bias)
        if layer.bn is not None:
            entry['bn'] = {'eps': layer.bn.eps}
            for key in BN_FIELDS:
                entry['bn'][key] = _tensor_name(layer.id, 'bn_' + key)
                write_tensor(os.path.join(path, entry['bn'][key]), getattr(layer.bn, key))
        if layer.id in quant_entries:
            meta, tensors = quant_entries[layer.id]
            entry['quant'] = dict(meta)
            for key, array in tensors.items():
                entry['quant'][key] = _tensor_name(layer.id, key)
                write_tensor(os.path.join(path, entry['quant'][key]), array)
        layers.append(entry)
    manifest = {
        'format': MANIFEST_FORMAT,
        'version': 1,
        'name': model.name,
        'input_shape': list(model.input_shape),
        'layers': layers,
        'blocks': [list(block) for block in model.blocks],
        'stages': [list(stage) for stage in model.stages],
        'residual_links': [list(link) for link in model.residual_links],
        'metadata': model.metadata,
    }
    with open(os.path.join(path, MANIFEST), 'w') as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return path


def read_manifest(path):
    manifest_path = os.path.join(path, MANIFEST)
    if not os.path.isfile(manifest_path):
        raise LoadError('{} not found in {}'.format(MANIFEST, path))
    try:
        with open(manifest_path) as f:
            manifest = json.load(f)
    except json.JSONDecodeError as e:
        raise LoadError('{}: {}'.format(manifest_path, e)) from e
    if manifest.get('format') != MANIFEST_FORMAT:
        raise LoadError('{}: not a blockquant manifest'.format(manifest_path))
    return manifest


def load_model(path):
    """Returns (model, quant_entries) where quant_entries maps layer id to
    (manifest quant entry, {tensor key: array}) for quantized containers."""
    manifest = read_manifest(path)
    layers, quant_entries = [], {}
    try:
        for entry in manifest['layers']:
            bn = None
            if entry.get('bn'):
                bn = BatchNorm(eps=entry['bn'].get('eps', 1e-5),
                               **{key: read_tensor(os.path.join(path, entry['bn'][key])) for key in BN_FIELDS})
            layers.append(LayerSpec(
                id=entry['id'],
                kind=entry['kind'],
                weight=read_tensor(os.path.join(path, entry['weight'])),
                bias=read_tensor(os.path.join(path, entry['bias'])),
                stride=entry.get('stride', 1),
                padding=entry.get('padding', 0),
                bn=bn,
                quantizable=entry.get('quantizable', True),
                activation=entry.get('activation', 'relu'),
            ))
            if entry.get('quant'):
                meta = {k: v for k, v in entry['quant'].items() if not str(v).endswith('.bqtn')}
                tensors = {k: read_tensor(os.path.join(path, v))
                           for k, v in entry['quant'].items() if str(v).endswith('.bqtn')}
                quant_entries[entry['id']] = (meta, tensors)
    except KeyError as e:
        raise LoadError('{}: layer entry misses {}'.format(os.path.join(path, MANIFEST), e)) from e
    model = NetworkModel(
        layers=tuple(layers),
        blocks=tuple(tuple(block) for block in manifest.get('blocks', [])),
        stages=tuple(tuple(stage) for stage in manifest.get('stages', [])),
        residual_links=tuple(tuple(link) for link in manifest.get('residual_links', [])),
        input_shape=tuple(manifest.get('input_shape', [])),
        name=manifest.get('name', ''),
        metadata=manifest.get('metadata', {}),
    )
    model.validate()
    logger.info('loaded model %s: %d layers, %d blocks from %s',
                model.name, len(model.layers), len(model.blocks), path)
    return model, quant_entries
