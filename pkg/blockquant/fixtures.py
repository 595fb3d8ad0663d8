"""Toy models and synthetic datasets small enough for brute-force oracles."""
import dataclasses
import logging
import os

import numpy as np
import scipy.optimize as optim

from blockquant.container import load_dataset, load_model, save_model, write_dataset
from blockquant.hessian import away_from_kinks, hessian_from_grad
from blockquant.mixedprec import synthetic_hardware_table
from blockquant.model import BatchNorm, LayerSpec, NetworkModel, evaluate, fold_bn, run_layers
from blockquant.recon import AdamState, adam_step
from blockquant.tensor import Tensor, backward, cross_entropy
from blockquant.utils import NumericError, split_to_batches

logger = logging.getLogger(__name__)

MLP_CLASSES = 3
RESNET_CLASSES = 4
ORACLE_POINTS = 16
ORACLE_COPIES = 2
KINK_MARGIN = 0.05


def _he(rng, shape):
    fan_in = int(np.prod(shape[1:]))
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def _linear(rng, lid, n_in, n_out, activation='relu'):
    return LayerSpec(lid, 'linear', _he(rng, (n_out, n_in)), np.zeros(n_out), activation=activation)


def _conv(rng, lid, c_in, c_out, k, stride=1, padding=0):
    return LayerSpec(lid, 'conv2d', _he(rng, (c_out, c_in, k, k)), np.zeros(c_out), stride=stride, padding=padding)


def tiny_mlp(rng, in_features=4, hidden=8, classes=MLP_CLASSES):
    layers = (
        _linear(rng, 'fc1', in_features, hidden),
        _linear(rng, 'fc2', hidden, hidden),
        _linear(rng, 'fc3', hidden, hidden),
        _linear(rng, 'head', hidden, classes, activation='none'),
    )
    return NetworkModel(layers, blocks=(('fc2', 'fc3'),), stages=((0,),), input_shape=(in_features,),
                        name='tiny-mlp').validate()


def tiny_resnet(rng, classes=RESNET_CLASSES):
    """Four residual blocks over 1×8×8 inputs: 4, 8, 8 and 16 channels."""
    layers = (
        _conv(rng, 'stem', 1, 4, 3, padding=1),
        _conv(rng, 'b1.conv1', 4, 4, 3, padding=1),
        _conv(rng, 'b1.conv2', 4, 4, 3, padding=1),
        _conv(rng, 'b2.conv1', 4, 8, 2, stride=2),
        _conv(rng, 'b2.conv2', 8, 8, 3, padding=1),
        _conv(rng, 'b3.conv1', 8, 8, 3, padding=1),
        _conv(rng, 'b3.conv2', 8, 8, 3, padding=1),
        _conv(rng, 'b4.conv1', 8, 16, 2, stride=2),
        _conv(rng, 'b4.conv2', 16, 16, 3, padding=1),
        _linear(rng, 'head', 16 * 2 * 2, classes, activation='none'),
    )
    blocks = (('b1.conv1', 'b1.conv2'), ('b2.conv1', 'b2.conv2'), ('b3.conv1', 'b3.conv2'),
              ('b4.conv1', 'b4.conv2'))
    links = (('b1.conv1', 'b1.conv2'), ('b2.conv2', 'b2.conv2'), ('b3.conv1', 'b3.conv2'),
             ('b4.conv2', 'b4.conv2'))
    return NetworkModel(layers, blocks=blocks, stages=((0,), (1, 2), (3,)), residual_links=links,
                        input_shape=(1, 8, 8), name='tiny-resnet').validate()


def mlp_task(rng, count, in_features=4, classes=MLP_CLASSES, task_seed=1234):
    """Gaussian inputs labelled by a fixed random linear rule."""
    rule = np.random.default_rng(task_seed).normal(size=(classes, in_features))
    x = rng.normal(size=(count, in_features))
    return x, np.argmax(x @ rule.T, axis=1)


def image_task(rng, count, classes=RESNET_CLASSES, noise=2.5, task_seed=4321):
    """8×8 class templates, randomly shifted by up to one pixel, under Gaussian noise."""
    templates = np.random.default_rng(task_seed).normal(size=(classes, 8, 8))
    labels = rng.integers(classes, size=count)
    shifts = rng.integers(-1, 2, size=(count, 2))
    x = np.stack([np.roll(templates[y], tuple(s), axis=(0, 1)) for y, s in zip(labels, shifts)])
    x = x + noise * rng.normal(size=x.shape)
    return x[:, None], labels


class ParamHook:
    """Forward hook running a model on trainable copies of every weight and bias."""

    def __init__(self, params):
        self.tensors = {key: Tensor(value, requires_grad=True) for key, value in params.items()}

    def weight(self, layer):
        return self.tensors[(layer.id, 'weight')]

    def bias(self, layer):
        return self.tensors[(layer.id, 'bias')]

    def quantize_input(self, lid, x):
        return x


def model_params(model):
    params = {}
    for layer in model.layers:
        params[(layer.id, 'weight')] = np.asarray(layer.weight, dtype=np.float64)
        params[(layer.id, 'bias')] = np.asarray(layer.bias, dtype=np.float64)
    return params


def with_params(model, params):
    return model.replace_layers([dataclasses.replace(layer, weight=params[(layer.id, 'weight')],
                                                     bias=params[(layer.id, 'bias')])
                                 for layer in model.layers])


def batch_loss(model, params, x, labels):
    """Cross-entropy of `model` run on `params`, with its gradient per parameter."""
    hook = ParamHook(params)
    trace = run_layers(model, model.layer_ids, {model.stem: Tensor(x)}, hook)
    loss = cross_entropy(trace.output, labels)
    grads = backward(loss)
    return loss.item(), {key: grads.get(t, np.zeros(t.shape)) for key, t in hook.tensors.items()}


def train(model, x, labels, epochs=20, lr=1e-2, batch_size=64, seed=0):
    """Plain Adam on the cross-entropy of every weight and bias."""
    rng = np.random.default_rng(seed)
    params = model_params(model)
    adam = AdamState(lr)
    for epoch in range(epochs):
        order = rng.permutation(len(x))
        total = 0.0
        for start, end in split_to_batches(len(x), batch_size):
            idx = order[start:end]
            loss, grads = batch_loss(model, params, x[idx], labels[idx])
            params.update(adam_step(adam, params, grads))
            total += loss * (end - start)
        logger.info('%s epoch %d: loss %.4f', model.name, epoch, total / len(x))
    return with_params(model, params)


def converge(model, x, labels, gtol=1e-10, max_iter=20000, newton_steps=5):
    """Drive the full-batch cross-entropy to a stationary point.

    L-BFGS over every weight and bias, then Newton steps on a
    finite-difference Hessian for as long as they lower both the loss and
    the largest gradient entry.
    """
    params = model_params(model)
    keys = list(params)
    shapes = [params[key].shape for key in keys]
    cuts = np.cumsum([params[key].size for key in keys])[:-1]

    def unpack(theta):
        return {key: chunk.reshape(shape) for key, chunk, shape in zip(keys, np.split(theta, cuts), shapes)}

    def objective(theta):
        loss, grads = batch_loss(model, unpack(theta), x, labels)
        return loss, np.concatenate([grads[key].reshape(-1) for key in keys])

    theta = np.concatenate([params[key].reshape(-1) for key in keys])
    result = optim.minimize(objective, theta, jac=True, method='L-BFGS-B',
                            options={'gtol': gtol, 'ftol': 1e-15, 'maxiter': max_iter, 'maxcor': 50})
    theta = result.x
    loss, grad = objective(theta)
    for _ in range(newton_steps):
        hess = hessian_from_grad(lambda t: objective(t)[1], theta, max_dim=theta.size)
        step = np.linalg.lstsq(hess, -grad, rcond=1e-8)[0]
        new_loss, new_grad = objective(theta + step)
        if new_loss > loss or np.max(np.abs(new_grad)) >= np.max(np.abs(grad)):
            break
        theta, loss, grad = theta + step, new_loss, new_grad
    logger.info('%s: loss %.8f, max |grad| %.3e after %d L-BFGS iterations', model.name, loss,
                np.max(np.abs(grad)), result.nit)
    return with_params(model, unpack(theta))


def oracle_rows(x, labels, classes, copies=ORACLE_COPIES):
    """Each point once under every class, then `copies` more times under its own label.

    Every label frequency at a point lies strictly inside (0, 1), so the
    cross-entropy of these rows has a finite minimum.
    """
    rows = [(point, y) for point, label in zip(x, labels)
            for y in list(range(classes)) + [label] * copies]
    return np.stack([point for point, _ in rows]), np.array([y for _, y in rows])


def converge_on_oracle(model, x, labels, path, points=ORACLE_POINTS, margin=2 * KINK_MARGIN, rounds=5):
    """Converge `model` on the oracle rows of `points` kink-clear samples, written to `path`.

    Samples whose ReLUs drift within KINK_MARGIN of a kink are dropped and
    the remaining ones converged again.
    """
    x = np.asarray(x, dtype=np.float32).astype(np.float64)
    pick = np.flatnonzero(away_from_kinks(model, x, margin))[:points]
    for _ in range(rounds):
        if len(pick) < MLP_CLASSES:
            break
        rows_x, rows_y = oracle_rows(x[pick], labels[pick], MLP_CLASSES)
        write_dataset(path, rows_x, rows_y)
        oracle = load_dataset(path)
        model = converge(model, oracle.x, oracle.labels)
        clear = away_from_kinks(model, x[pick], KINK_MARGIN)
        if clear.all():
            return model
        logger.info('%d oracle points moved near a kink, converging again without them', int(np.sum(~clear)))
        pick = pick[clear]
    raise NumericError('could not converge {} on kink-clear oracle points'.format(model.name))


def attach_batch_norm(model, rng):
    """Unfold random batch norm statistics into every conv layer without changing the function."""
    layers = []
    for layer in model.layers:
        if layer.kind != 'conv2d':
            layers.append(layer)
            continue
        k = layer.out_channels
        bn = BatchNorm(gamma=rng.uniform(0.5, 1.5, k), beta=rng.normal(0.0, 0.1, k),
                       mean=rng.normal(0.0, 0.1, k), var=rng.uniform(0.5, 1.5, k))
        scale = bn.scale()
        weight = layer.weight / scale.reshape(-1, 1, 1, 1)
        bias = (layer.bias - bn.beta) / scale + bn.mean
        layers.append(dataclasses.replace(layer, weight=weight, bias=bias, bn=bn))
    return model.replace_layers(layers)


def _stamp_metrics(path, test_path):
    """Record the reloaded model's test metrics in its own manifest."""
    model, _ = load_model(path)
    data = load_dataset(test_path)
    metrics = evaluate(fold_bn(model), data.x, data.labels)
    model = dataclasses.replace(model, metadata={'fp_accuracy': metrics['accuracy'], 'fp_loss': metrics['loss'],
                                                 'test_set': os.path.basename(test_path)})
    save_model(model, path)
    return metrics


def make_fixtures(out, seed=0):
    rng = np.random.default_rng(seed)
    data_dir = os.path.join(out, 'data')
    hw_dir = os.path.join(out, 'hardware')
    os.makedirs(data_dir, exist_ok=True)
    os.makedirs(hw_dir, exist_ok=True)
    written = {}

    x, y = mlp_task(rng, 2048)
    write_dataset(os.path.join(data_dir, 'mlp-train.bqtd'), x[:1536], y[:1536])
    write_dataset(os.path.join(data_dir, 'mlp-test.bqtd'), x[1536:], y[1536:])
    mlp = tiny_mlp(rng)
    save_model(mlp, os.path.join(out, 'tiny-mlp-unconverged'))
    trained = train(mlp, x[:1536], y[:1536], epochs=30, lr=1e-2, seed=seed)
    trained = converge_on_oracle(trained, x[:1536], y[:1536], os.path.join(data_dir, 'mlp-oracle.bqtd'))
    save_model(trained, os.path.join(out, 'tiny-mlp'))
    written['tiny-mlp'] = _stamp_metrics(os.path.join(out, 'tiny-mlp'), os.path.join(data_dir, 'mlp-test.bqtd'))
    written['tiny-mlp-unconverged'] = _stamp_metrics(os.path.join(out, 'tiny-mlp-unconverged'),
                                                     os.path.join(data_dir, 'mlp-test.bqtd'))

    x, y = image_task(rng, 3072)
    write_dataset(os.path.join(data_dir, 'resnet-train.bqtd'), x[:2048], y[:2048])
    write_dataset(os.path.join(data_dir, 'resnet-test.bqtd'), x[2048:], y[2048:])
    resnet = train(tiny_resnet(rng), x[:2048], y[:2048], epochs=15, lr=5e-3, seed=seed)
    save_model(attach_batch_norm(resnet, rng), os.path.join(out, 'tiny-resnet'))
    written['tiny-resnet'] = _stamp_metrics(os.path.join(out, 'tiny-resnet'),
                                            os.path.join(data_dir, 'resnet-test.bqtd'))
    synthetic_hardware_table(resnet).save(os.path.join(hw_dir, 'tiny-resnet-latency.json'))

    for name, metrics in written.items():
        logger.info('fixture %s: test accuracy %.4f, loss %.4f', name, metrics['accuracy'], metrics['loss'])
    return written
