"""Dense tensors with reverse-mode differentiation.

Every op returns a new Tensor; values are never mutated after creation.
A Tensor that requires grad remembers its parents and a closure mapping the
upstream gradient to one gradient per parent, which is all `backward` needs.
"""
import logging

import numpy as np

from blockquant.utils import DimensionError, InputError, ParameterError, UsageError

logger = logging.getLogger(__name__)

DTYPE = np.float64


class Tensor:
    __slots__ = ('data', 'requires_grad', 'grad', 'op', '_parents', '_backward')

    def __init__(self, data, requires_grad=False, op='leaf', parents=(), backward=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad = None
        self.op = op
        self._parents = parents
        self._backward = backward

    @classmethod
    def custom(cls, data, parents, backward, op='custom'):
        """Result of an op defined outside this module.

        `backward(g)` must return one gradient (or None) per parent.
        """
        parents = tuple(parents)
        if not any(p.requires_grad for p in parents):
            return cls(data, op=op)
        return cls(data, requires_grad=True, op=op, parents=parents, backward=backward)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        if self.size != 1:
            raise UsageError('item() needs a single element, got shape {}'.format(self.shape))
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return 'Tensor(shape={}, op={}, requires_grad={})'.format(self.shape, self.op, self.requires_grad)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tensor_sum(self, axis)

    def mean(self, axis=None):
        count = self.size if axis is None else self.shape[axis]
        return tensor_sum(self, axis) * (1.0 / count)

    def square(self):
        return square(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def as_tensor(value):
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as e:
        raise DimensionError('cannot add shapes {} and {}'.format(a.shape, b.shape)) from e
    return Tensor.custom(out, (a, b),
                         lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), op='add')


def neg(a):
    return Tensor.custom(-a.data, (a,), lambda g: (-g,), op='neg')


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as e:
        raise DimensionError('cannot multiply shapes {} and {}'.format(a.shape, b.shape)) from e
    return Tensor.custom(out, (a, b),
                         lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                         op='mul')


def square(a):
    return Tensor.custom(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), op='square')


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError('matmul needs 2-D operands, got {} and {}'.format(a.shape, b.shape))
    if a.shape[1] != b.shape[0]:
        raise DimensionError('matmul inner extents differ: {} and {}'.format(a.shape, b.shape))
    return Tensor.custom(a.data @ b.data, (a, b),
                         lambda g: (g @ b.data.T, a.data.T @ g), op='matmul')


def relu(x):
    # subgradient 0 at exactly 0
    mask = x.data > 0
    return Tensor.custom(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), op='relu')


def tensor_sum(a, axis=None):
    shape = a.shape

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor.custom(a.data.sum(axis=axis), (a,), backward, op='sum')


def reshape(a, shape):
    shape_in = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise DimensionError('cannot reshape {} into {}'.format(shape_in, shape)) from e
    return Tensor.custom(out, (a,), lambda g: (g.reshape(shape_in),), op='reshape')


def transpose(a, axes):
    inverse = tuple(np.argsort(axes))
    return Tensor.custom(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), op='transpose')


def flatten(a):
    """Keep the batch axis, merge the rest."""
    return reshape(a, (a.shape[0], -1))


def linear(x, w, b=None):
    """x[N,in] · w[out,in]ᵀ + b[out]"""
    out = matmul(x, transpose(w, (1, 0)))
    if b is not None:
        out = add(out, b)
    return out


def _out_extent(size, kernel, stride, padding):
    span = size + 2 * padding - kernel
    if span < 0 or span % stride:
        raise DimensionError(
            'output extent ({} + 2*{} - {})/{} + 1 is not integral'.format(size, padding, kernel, stride))
    return span // stride + 1


def im2col(x, kh, kw, stride=1, padding=0):
    """Gather every kh×kw patch of x[N,C,H,W] into the rows of a [N·H'·W', C·kh·kw] matrix.

    Returns the patch matrix together with H' and W'. Its backward pass is the
    scatter-add (col2im) of row gradients onto the input positions they came from.
    """
    n, c, h, w = x.shape
    ho = _out_extent(h, kh, stride, padding)
    wo = _out_extent(w, kw, stride, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)

    def backward(g):
        g = g.reshape(n, ho, wo, c, kh, kw)
        dxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=DTYPE)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                    g[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return (dxp[:, :, padding:padding + h, padding:padding + w],)

    return Tensor.custom(cols, (x,), backward, op='im2col'), ho, wo


def conv2d(x, w, b=None, stride=1, padding=0):
    """Cross-correlation of x[N,C,H,W] with w[K,C,kh,kw], lowered onto matmul."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError('conv2d needs 4-D input and kernel, got {} and {}'.format(x.shape, w.shape))
    n = x.shape[0]
    k, c, kh, kw = w.shape
    if x.shape[1] != c:
        raise DimensionError('conv2d channel mismatch: input {} vs kernel {}'.format(x.shape, w.shape))
    cols, ho, wo = im2col(x, kh, kw, stride, padding)
    out = matmul(cols, transpose(reshape(w, (k, c * kh * kw)), (1, 0)))
    out = transpose(reshape(out, (n, ho, wo, k)), (0, 3, 1, 2))
    if b is not None:
        out = add(out, reshape(as_tensor(b), (1, k, 1, 1)))
    return out


def log_softmax(z):
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(z):
    return np.exp(log_softmax(z))


def _targets_matrix(labels, n, m):
    labels = np.asarray(labels)
    if labels.ndim == 2:
        if labels.shape != (n, m):
            raise DimensionError('soft targets of shape {} for logits ({}, {})'.format(labels.shape, n, m))
        return labels.astype(DTYPE)
    if labels.shape != (n,):
        raise DimensionError('{} labels for a batch of {}'.format(labels.shape, n))
    if np.any(labels < 0) or np.any(labels >= m):
        raise InputError('labels must lie in [0, {})'.format(m))
    onehot = np.zeros((n, m), dtype=DTYPE)
    onehot[np.arange(n), labels.astype(np.int64)] = 1.0
    return onehot


def cross_entropy(logits, labels):
    """Batch mean of -log softmax(logits)[label].

    `labels` holds class indices, or rows of a probability matrix (soft targets).
    """
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise DimensionError('cross_entropy expects [N, m] logits, got {}'.format(logits.shape))
    n, m = logits.shape
    target = _targets_matrix(labels, n, m)
    logp = log_softmax(logits.data)
    loss = -np.sum(target * logp) / n
    p = np.exp(logp)
    return Tensor.custom(loss, (logits,), lambda g: (g * (p - target) / n,), op='cross_entropy')


def mse_loss(pred, target):
    """Batch mean of ½‖pred − target‖²."""
    pred = as_tensor(pred)
    target = np.asarray(target, dtype=DTYPE)
    if target.shape != pred.shape:
        raise DimensionError('mse_loss shapes differ: {} vs {}'.format(pred.shape, target.shape))
    n = pred.shape[0]
    diff = pred.data - target
    return Tensor.custom(0.5 * np.sum(diff * diff) / n, (pred,), lambda g: (g * diff / n,), op='mse')


class Graph:
    """Nodes that lead to `root` and need gradients, every node after its inputs."""

    def __init__(self, root):
        self.root = root
        self.nodes = _toposort(root)

    @property
    def parameters(self):
        return [node for node in self.nodes if node.op == 'leaf' and node.requires_grad]


def _toposort(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root, graph=None):
    """Propagate d(root)/d(node) to every node of the graph.

    Sets `.grad` on each reached node and returns {leaf: gradient} for the
    trainable leaves. Fan-out gradients add up.
    """
    if root.size != 1:
        raise UsageError('backward needs a scalar root, got shape {}'.format(root.shape))
    if not root.requires_grad:
        return {}
    if graph is None:
        graph = Graph(root)
    grads = {id(root): np.ones_like(root.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g
        if node._backward is None:
            continue
        for parent, parent_grad in zip(node._parents, node._backward(g)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + parent_grad
            else:
                grads[key] = parent_grad
    return {node: node.grad for node in graph.parameters}


def finite_diff_grad(f, x, h=1e-5):
    """Central differences (f(x+h·e_i) − f(x−h·e_i)) / 2h for every coordinate of x."""
    if h <= 0:
        raise ParameterError('finite difference step must be positive, got {}'.format(h))
    x = np.array(x, dtype=DTYPE)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fplus = float(f(x.copy()))
        flat[i] = orig - h
        fminus = float(f(x.copy()))
        flat[i] = orig
        gflat[i] = (fplus - fminus) / (2 * h)
    return grad


def rel_error(a, b, floor=1e-12):
    """max|a − b| relative to the larger of max|a|, max|b|."""
    a, b = np.asarray(a, dtype=DTYPE), np.asarray(b, dtype=DTYPE)
    scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(b), initial=0.0), floor)
    return float(np.max(np.abs(a - b), initial=0.0) / scale)
