"""Batch commands behind the CLI. Each takes a resolved RunConfig and writes its artifacts under `out`."""
import dataclasses
import json
import logging
import os

import numpy as np

from blockquant import __version__
from blockquant.container import load_calibration, load_dataset, load_model, save_model
from blockquant.fixtures import make_fixtures
from blockquant.hessian import OracleBatch, away_from_kinks, model_targets, monotone_decrease, verify_quadratic_forms
from blockquant.mixedprec import (MB, SEARCH_BITS, HardwareTable, SensitivityTable, ga_search,
                                  measure_sensitivities)
from blockquant.model import evaluate, fold_bn
from blockquant.quant import QuantState
from blockquant.recon import LOG_FIELDS, calibrate_model
from blockquant.utils import DataError, TSDictWriter, UsageError

logger = logging.getLogger(__name__)

GENERATION_FIELDS = ['generation', 'best_fitness', 'mean_fitness', 'best_hardware']


def _require(run, *names):
    missing = [name for name in names if getattr(run, name) is None]
    if missing:
        raise UsageError('{} needs {}'.format(run.command, ', '.join('--' + n.replace('_', '-') for n in missing)))


def write_report(path, run, payload):
    """JSON report carrying the resolved run configuration and tool version."""
    report = dict(payload)
    report['config'] = run.to_dict()
    report['version'] = __version__
    with open(path, 'w') as f:
        json.dump(report, f, indent=2, sort_keys=True)
    logger.info('wrote %s', path)
    return report


def model_summary(model, quant, data=None):
    quant = quant or QuantState()
    summary = {
        'bits': {layer.id: quant.bits().get(layer.id, 32) for layer in model.layers},
        'size_mb': quant.size_bytes(model) / MB,
    }
    if data is not None:
        summary.update(evaluate(model, data.x, data.labels, quant if quant.layers else None))
    return summary


def _load_fp(path):
    model, _ = load_model(path)
    return fold_bn(model)


def cmd_calibrate(run):
    _require(run, 'model', 'calib', 'out')
    model = _load_fp(run.model)
    calib = load_calibration(run.calib, run.calib_size, run.seed)
    os.makedirs(run.out, exist_ok=True)
    cfg = run.recon

    with open(os.path.join(run.out, 'calibration.csv'), 'w', newline='') as f:
        writer = TSDictWriter(f, LOG_FIELDS)
        writer.writeheader()
        calibrated = {}
        if run.measure_sensitivity:
            for bits in SEARCH_BITS:
                unified = dataclasses.replace(cfg, weight_bits=bits, bit_config=None)
                calibrated[bits] = calibrate_model(model, calib, unified, writer, measure=False)
        if cfg.weight_bits in calibrated and not cfg.bit_config:
            quant, _, reports = calibrated[cfg.weight_bits]
            table = None
        else:
            quant, table, reports = calibrate_model(model, calib, cfg, writer, measure=not run.measure_sensitivity)

    if run.measure_sensitivity:
        table = measure_sensitivities(model, {b: c[0] for b, c in calibrated.items()}, calib, reference=8,
                                      batch_size=cfg.batch_size, workers=cfg.workers)
    if table is not None:
        table.save(os.path.join(run.out, 'sensitivity.json'))
    save_model(model, os.path.join(run.out, 'model'), quant)

    payload = {'units': [r.to_dict() for r in reports], 'calibration_samples': len(calib)}
    if table is not None:
        payload['sensitivity_violations'] = [list(v) for v in table.monotonicity_violations()]
    test = load_dataset(run.test) if run.test else None
    payload['quantized'] = model_summary(model, quant, test)
    if test is not None:
        payload['full_precision'] = evaluate(model, test.x, test.labels)
        logger.info('test accuracy %.4f (full precision %.4f)', payload['quantized']['accuracy'],
                    payload['full_precision']['accuracy'])
    write_report(os.path.join(run.out, 'report.json'), run, payload)
    return 0


def cmd_search(run):
    _require(run, 'sensitivity', 'hardware', 'out')
    table = SensitivityTable.load(run.sensitivity)
    hw = HardwareTable.load(run.hardware)
    result = ga_search(table, hw, run.delta, run.population, run.generations, run.mutation, run.seed, run.topk,
                       run.recon.act_bits if run.recon.quantize_activations else None)
    os.makedirs(run.out, exist_ok=True)
    with open(os.path.join(run.out, 'generations.csv'), 'w', newline='') as f:
        writer = TSDictWriter(f, GENERATION_FIELDS)
        writer.writeheader()
        for row in result.generations:
            writer.writerow(row)
    write_report(os.path.join(run.out, 'search.json'), run, result.to_dict())
    print(json.dumps(result.config.as_dict(), indent=2))
    return 0


def _print_table(name, summary):
    print('{:<24} {:>6}'.format(name, 'bits'))
    for lid, bits in summary['bits'].items():
        print('{:<24} {:>6}'.format(lid, bits))
    print('size: {:.4f} MB'.format(summary['size_mb']))
    if 'accuracy' in summary:
        print('accuracy: {:.4f}  loss: {:.4f}'.format(summary['accuracy'], summary['loss']))


def cmd_eval(run):
    _require(run, 'model', 'data')
    model, entries = load_model(run.model)
    model = fold_bn(model)
    quant = QuantState.from_tensors(entries) if entries else None
    data = load_dataset(run.data)
    summary = model_summary(model, quant, data)
    summary['model'] = run.model
    summary['dataset'] = run.data
    if run.out:
        os.makedirs(run.out, exist_ok=True)
        write_report(os.path.join(run.out, 'eval.json'), run, summary)
    _print_table(model.name, summary)
    return 0


def oracle_batch(model, data, targets='labels', margin=0.05, samples=None):
    """Points whose ReLUs all sit farther than `margin` from their kink, the first `samples` if given."""
    keep = away_from_kinks(model, data.x, margin)
    x, labels = data.x[keep][:samples], data.labels[keep][:samples]
    if len(x) == 0:
        raise DataError('no sample of {} clears the kink margin {}'.format(data.source, margin))
    if samples is not None and len(x) < samples:
        logger.warning('only %d of the requested %d samples clear the kink margin', len(x), samples)
    if targets == 'model':
        logger.warning('soft targets from the model itself zero the loss gradient, '
                       'so the minimum precondition holds by construction')
        return OracleBatch(x, model_targets(model, x))
    return OracleBatch(x, labels)


def cmd_verify(run):
    _require(run, 'model', 'data')
    model = _load_fp(run.model)
    batch = oracle_batch(model, load_dataset(run.data), run.targets, run.margin, run.verify_samples)
    reports = verify_quadratic_forms(model, batch, run.epsilons, run.seed, workers=run.recon.workers)
    passed = monotone_decrease(reports)
    payload = {'rungs': [r.to_dict() for r in reports], 'monotone': passed, 'samples': len(batch)}
    if run.out:
        os.makedirs(run.out, exist_ok=True)
        write_report(os.path.join(run.out, 'verify.json'), run, payload)
    print(json.dumps(payload['rungs'], indent=2))
    if not passed:
        logger.error('linearization error does not shrink with epsilon')
    return 0 if passed else 1


def cmd_ablate(run):
    """Accuracy of the same calibration at every reconstruction granularity."""
    _require(run, 'model', 'calib', 'test', 'out')
    model = _load_fp(run.model)
    calib = load_calibration(run.calib, run.calib_size, run.seed)
    test = load_dataset(run.test)
    os.makedirs(run.out, exist_ok=True)
    rows = {}
    with open(os.path.join(run.out, 'calibration.csv'), 'w', newline='') as f:
        writer = TSDictWriter(f, LOG_FIELDS)
        writer.writeheader()
        for granularity in run.granularities:
            cfg = dataclasses.replace(run.recon, granularity=granularity).validate()
            quant, _, _ = calibrate_model(model, calib, cfg, writer, measure=False)
            rows[granularity] = evaluate(model, test.x, test.labels, quant)
            logger.info('%s granularity: accuracy %.4f', granularity, rows[granularity]['accuracy'])
    write_report(os.path.join(run.out, 'ablation.json'), run,
                 {'granularity': rows, 'full_precision': evaluate(model, test.x, test.labels)})
    for granularity, metrics in rows.items():
        print('{:<8} {:.4f}'.format(granularity, metrics['accuracy']))
    return 0


def cmd_make_fixtures(run):
    _require(run, 'out')
    written = make_fixtures(run.out, run.seed)
    print(json.dumps({name: float(np.round(m['accuracy'], 4)) for name, m in written.items()}, indent=2))
    return 0


COMMANDS = {
    'calibrate': cmd_calibrate,
    'search': cmd_search,
    'eval': cmd_eval,
    'verify': cmd_verify,
    'ablate': cmd_ablate,
    'make-fixtures': cmd_make_fixtures,
}
