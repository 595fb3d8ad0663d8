"""Brute-force second-order checks at oracle scale.

Full Hessians by differencing gradients, the Gauss-Newton quadratic form
through per-output Jacobian rows, and the comparison of weight-space and
output-space quadratic forms under shrinking perturbations.
"""
import logging
from concurrent.futures import ThreadPoolExecutor, wait
from dataclasses import asdict, dataclass

import numpy as np

from blockquant.model import forward, run_layers
from blockquant.tensor import Tensor, backward, cross_entropy, mse_loss, softmax
from blockquant.utils import PreconditionError, ScaleError, UsageError

logger = logging.getLogger(__name__)

MAX_DIM = 200
MAX_CLASSES = 32
EPSILONS = (1e-1, 1e-2, 1e-3, 1e-4)


@dataclass
class FlatParams:
    """Quantizable weights stacked into one vector θ."""
    theta: np.ndarray
    index: dict
    shapes: dict

    @classmethod
    def from_model(cls, model):
        index, shapes, chunks, offset = {}, {}, [], 0
        for layer in model.layers:
            if not layer.quantizable:
                continue
            index[layer.id] = (offset, layer.weight.size)
            shapes[layer.id] = layer.weight.shape
            chunks.append(layer.weight.reshape(-1))
            offset += layer.weight.size
        return cls(np.concatenate(chunks).astype(np.float64), index, shapes)

    @property
    def dim(self):
        return self.theta.size

    def unflatten(self, theta):
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.dim,):
            raise UsageError('θ of shape {} for {} parameters'.format(theta.shape, self.dim))
        return {lid: theta[off:off + n].reshape(self.shapes[lid]) for lid, (off, n) in self.index.items()}

    def flatten(self, weights):
        return np.concatenate([np.asarray(weights[lid]).reshape(-1) for lid in self.index])


@dataclass
class OracleBatch:
    x: np.ndarray
    targets: np.ndarray
    loss: str = 'ce'

    def __len__(self):
        return len(self.x)


class WeightOverride:
    """Forward hook running a model with the weights given as Tensors."""

    def __init__(self, weights):
        self.weights = weights

    def weight(self, layer):
        return self.weights.get(layer.id, Tensor(layer.weight))

    def bias(self, layer):
        return Tensor(layer.bias)

    def quantize_input(self, lid, x):
        return x


def _run(model, flat, theta, x, requires_grad=False):
    weights = {lid: Tensor(w, requires_grad=requires_grad) for lid, w in flat.unflatten(theta).items()}
    trace = run_layers(model, model.layer_ids, {model.stem: Tensor(x)}, WeightOverride(weights))
    return trace.output, weights


def _loss(batch, logits):
    if batch.loss == 'mse':
        return mse_loss(logits, batch.targets)
    return cross_entropy(logits, batch.targets)


def loss_and_grad(model, batch, theta=None, flat=None):
    flat = flat or FlatParams.from_model(model)
    theta = flat.theta if theta is None else theta
    logits, weights = _run(model, flat, theta, batch.x, requires_grad=True)
    loss = _loss(batch, logits)
    grads = backward(loss)
    return loss.item(), flat.flatten({lid: grads.get(w, np.zeros(w.shape)) for lid, w in weights.items()})


def hessian_from_grad(grad_fn, theta, h=1e-5, symmetrize=True, max_dim=MAX_DIM):
    """H_ij = (∇f(θ+h·e_j)_i − ∇f(θ−h·e_j)_i) / 2h"""
    theta = np.asarray(theta, dtype=np.float64)
    d = theta.size
    if d > max_dim:
        raise ScaleError('Hessian of dimension {} exceeds {}'.format(d, max_dim))
    hess = np.zeros((d, d))
    for j in range(d):
        step = np.zeros(d)
        step[j] = h
        hess[:, j] = (grad_fn(theta + step) - grad_fn(theta - step)) / (2 * h)
    return 0.5 * (hess + hess.T) if symmetrize else hess


def full_hessian_fd(model, batch, theta=None, h=1e-5, symmetrize=True):
    flat = FlatParams.from_model(model)
    theta = flat.theta if theta is None else theta
    return hessian_from_grad(lambda t: loss_and_grad(model, batch, t, flat)[1], theta, h, symmetrize)


def output_hessian(model, batch, theta=None):
    """Per-sample Hessian of the loss w.r.t. the network output: diag(p) − ppᵀ for cross-entropy."""
    flat = FlatParams.from_model(model)
    logits, _ = _run(model, flat, flat.theta if theta is None else theta, batch.x)
    n, m = logits.shape
    if m > MAX_CLASSES:
        raise ScaleError('{} classes exceed the oracle limit of {}'.format(m, MAX_CLASSES))
    if batch.loss == 'mse':
        return np.broadcast_to(np.eye(m), (n, m, m)).copy()
    p = softmax(logits.data)
    return np.einsum('ni,ij->nij', p, np.eye(m)) - np.einsum('ni,nj->nij', p, p)


def jacobian(model, x, theta=None, flat=None):
    """∂z/∂θ of each sample in x: shape (N, m, d), one backward pass per output."""
    flat = flat or FlatParams.from_model(model)
    theta = flat.theta if theta is None else theta
    rows = []
    for sample in x:
        logits, weights = _run(model, flat, theta, sample[None], requires_grad=True)
        m = logits.shape[1]
        jac = np.zeros((m, flat.dim))
        for k in range(m):
            pick = np.zeros((1, m))
            pick[0, k] = 1.0
            grads = backward((logits * pick).sum())
            jac[k] = flat.flatten({lid: grads.get(w, np.zeros(w.shape)) for lid, w in weights.items()})
        rows.append(jac)
    return np.stack(rows)


def gn_quadratic(model, batch, dtheta, theta=None):
    """Mean over samples of (J_n Δθ)ᵀ H^(z)_n (J_n Δθ)."""
    jac = jacobian(model, batch.x, theta)
    hz = output_hessian(model, batch, theta)
    dz = jac @ np.asarray(dtheta, dtype=np.float64)
    return float(np.mean(np.einsum('ni,nij,nj->n', dz, hz, dz)))


def gn_matrix(model, batch, theta=None):
    """G = mean over samples of J_nᵀ H^(z)_n J_n."""
    jac = jacobian(model, batch.x, theta)
    hz = output_hessian(model, batch, theta)
    return np.einsum('nid,nij,nje->de', jac, hz, jac) / len(batch)


def fim_diag_preact(model, batch, lid):
    """Batch mean of (∂L/∂z)² at layer `lid`, L being the batch loss."""
    trace = forward(model, batch.x, requires_grad=True)
    backward(_loss(batch, trace.output))
    return np.mean(trace.preacts[lid].grad ** 2, axis=0)


def model_targets(model, x):
    """The model's own predictive distribution: an exact minimum of the soft-target loss."""
    return softmax(forward(model, x).output.data)


def away_from_kinks(model, x, margin):
    """Mask of the samples whose ReLU pre-activations all stay more than `margin` away from zero."""
    trace = forward(model, x)
    keep = np.ones(len(x), dtype=bool)
    for layer in model.layers:
        if layer.activation != 'relu':
            continue
        z = np.abs(trace.preacts[layer.id].data).reshape(len(x), -1)
        keep &= z.min(axis=1) > margin
    return keep


def output_residual(x, out_grad):
    """Largest |∂L/∂z| at any distinct input, rows sharing an input summed."""
    _, group = np.unique(np.asarray(x).reshape(len(x), -1), axis=0, return_inverse=True)
    group = np.asarray(group).reshape(-1)
    summed = np.zeros((group.max() + 1, out_grad.shape[1]))
    np.add.at(summed, group, out_grad)
    return float(np.max(np.abs(summed)))


@dataclass
class QuadraticReport:
    epsilon: float
    dtheta_norm: float
    lhs: float
    gn: float
    rhs: float
    rel_gn_hessian: float
    rel_linearization: float
    residual_grad: float
    grad_norm: float

    def to_dict(self):
        return asdict(self)


def _relative(a, b):
    if a == b:
        return 0.0
    scale = abs(b)
    return abs(a - b) / scale if scale > 0 else float('inf')


def verify_quadratic_forms(model, batch, epsilons=EPSILONS, seed=0, grad_tol=1e-4, direction=None, workers=1,
                           hessian=None):
    """Compare ΔθᵀHΔθ, ΔθᵀGΔθ and E[Δzᵀ H^(z) Δz] (true Δz) along one direction.

    `batch` must sit at a minimum of its loss: ‖∇θL‖∞ < grad_tol.
    """
    flat = FlatParams.from_model(model)
    _, grad = loss_and_grad(model, batch, flat=flat)
    grad_norm = float(np.max(np.abs(grad)))
    if grad_norm >= grad_tol:
        raise PreconditionError('model is not at a minimum: ‖∇θL‖∞ = {:.3e}'.format(grad_norm),
                                grad_norm=grad_norm)
    logits, _ = _run(model, flat, flat.theta, batch.x, requires_grad=True)
    backward(_loss(batch, logits))
    residual = output_residual(batch.x, logits.grad)
    logger.info('‖∇θL‖∞ %.3e, largest output gradient %.3e', grad_norm, residual)
    hess = hessian if hessian is not None else full_hessian_fd(model, batch)
    jac = jacobian(model, batch.x, flat=flat)
    hz = output_hessian(model, batch)
    if direction is None:
        direction = np.random.default_rng(seed).normal(size=flat.dim)
    direction = np.asarray(direction, dtype=np.float64)
    norm = np.linalg.norm(direction)
    unit = direction / norm if norm > 0 else direction
    z0 = logits.data

    def rung(eps):
        dtheta = eps * unit
        lhs = float(dtheta @ hess @ dtheta)
        dz_lin = jac @ dtheta
        gn = float(np.mean(np.einsum('ni,nij,nj->n', dz_lin, hz, dz_lin)))
        moved, _ = _run(model, flat, flat.theta + dtheta, batch.x)
        dz = moved.data - z0
        rhs = float(np.mean(np.einsum('ni,nij,nj->n', dz, hz, dz)))
        return QuadraticReport(eps, float(np.linalg.norm(dtheta)), lhs, gn, rhs,
                               _relative(gn, lhs), _relative(rhs, gn), residual, grad_norm)

    if workers <= 1:
        reports = [rung(eps) for eps in epsilons]
    else:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            futures = [executor.submit(rung, eps) for eps in epsilons]
            wait(futures)
        reports = [f.result() for f in futures]
    for report in reports:
        logger.info('eps %.0e: lhs %.6e gn %.6e rhs %.6e linearization error %.3e',
                    report.epsilon, report.lhs, report.gn, report.rhs, report.rel_linearization)
    return reports


def monotone_decrease(reports):
    errors = [r.rel_linearization for r in reports]
    return all(b < a for a, b in zip(errors, errors[1:]))
