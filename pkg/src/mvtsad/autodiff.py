"""Dense tensors with reverse-mode automatic differentiation.

Minimal engine sufficient to train the transformer autoencoder: tensors wrap
numpy arrays (float32 for training, float64 for gradient verification), ops
record backward closures on an implicit graph, and ``Tensor.backward`` runs a
topological traversal that visits each node once, after all of its consumers.

Tensors are treated as immutable once created; only ``grad`` buffers mutate
during the backward pass. Kernels defer to numpy/BLAS, which may thread
internally; results are reproducible for a fixed thread count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .errors import DimensionError, ParameterError

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

_grad_enabled = True


class no_grad:
    """Context manager that disables graph recording (inference fast path)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Propagate gradients to every tensor this value depends on."""
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(
                    f"backward() without explicit gradient needs a scalar, got shape {self.shape}"
                )
            grad = np.ones_like(self.data)
        _accumulate(self, np.asarray(grad, dtype=self.data.dtype))
        # Iterative post-order DFS: reversed postorder visits each node only
        # after all of its consumers.
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _needs_graph(*tensors):
    if not _grad_enabled:
        return False
    return any(t.requires_grad or t._parents for t in tensors)


def _make(data, parents, backward):
    out = Tensor(data)
    if _needs_graph(*parents):
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accumulate(t, g, owned=False):
    """Add ``g`` into ``t.grad``.

    ``owned=True`` promises the caller hands over the buffer (freshly
    allocated, or a view of a gradient that is dead after this closure) so the
    first accumulation can skip the copy. A closure must transfer ownership of
    any one buffer at most once.
    """
    if not (t.requires_grad or t._parents):
        return
    if t.grad is None:
        if owned and g.dtype == t.data.dtype:
            t.grad = g
        else:
            t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to ``shape``."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if keep:
        g = g.sum(axis=keep, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data + b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make(out_data, (a, b), backward)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data - b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _make(out_data, (a, b), backward)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data * b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _make(out_data, (a, b), backward)


def scale(a, s):
    a = _as_tensor(a)
    s = float(s)

    def backward(g):
        _accumulate(a, g * s)

    return _make(a.data * s, (a,), backward)


def reshape(a, shape):
    a = _as_tensor(a)
    out_data = a.data.reshape(shape)

    def backward(g):
        _accumulate(a, g.reshape(a.shape))

    return _make(out_data, (a,), backward)


def transpose(a, axes):
    a = _as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        _accumulate(a, g.transpose(inv))

    return _make(a.data.transpose(axes), (a,), backward)


def swap_last2(a):
    a = _as_tensor(a)
    perm = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    return transpose(a, perm)


def concat(tensors, axis):
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accumulate(t, g[tuple(idx)])

    return _make(out_data, tensors, backward)


def stack(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    out_data = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        for i, t in enumerate(tensors):
            _accumulate(t, np.take(g, i, axis=axis))

    return _make(out_data, tensors, backward)


def sum_all(a):
    a = _as_tensor(a)
    out_data = np.asarray(a.data.sum())

    def backward(g):
        _accumulate(a, np.full(a.shape, g, dtype=a.data.dtype))

    return _make(out_data, (a,), backward)


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------


def matmul(a, b):
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")

    if b.ndim == 2 and a.ndim >= 2:
        # Hot path for linear layers: fold leading axes into one GEMM.
        p, q = a.shape[-1], b.shape[-1]
        a2d = a.data.reshape(-1, p)
        out_data = (a2d @ b.data).reshape(a.shape[:-1] + (q,))

        def backward(g):
            g2d = g.reshape(-1, q)
            _accumulate(a, (g2d @ b.data.T).reshape(a.shape))
            _accumulate(b, a2d.T @ g2d)

        return _make(out_data, (a, b), backward)

    out_data = a.data @ b.data

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        _accumulate(a, _unbroadcast(ga, a.shape))
        _accumulate(b, _unbroadcast(gb, b.shape))

    return _make(out_data, (a, b), backward)


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------


def softmax_rows(a):
    """Softmax along the last axis, stabilised by max subtraction."""
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        gy = y * (g - (g * y).sum(axis=-1, keepdims=True))
        _accumulate(a, gy)

    return _make(y, (a,), backward)


def gelu(a):
    """x * Phi(x) with the exact Gaussian CDF (erf form, not tanh)."""
    a = _as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out_data = x * cdf

    def backward(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        _accumulate(a, g * (cdf + x * pdf))

    return _make(out_data, (a,), backward)


# ---------------------------------------------------------------------------
# batch normalisation
# ---------------------------------------------------------------------------


@dataclass
class NormState:
    """Learnable gain/bias plus running statistics for one norm layer."""

    gain: Tensor
    bias: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1

    @classmethod
    def create(cls, width, dtype=np.float32):
        return cls(
            gain=Tensor(np.ones(width, dtype=dtype), requires_grad=True),
            bias=Tensor(np.zeros(width, dtype=dtype), requires_grad=True),
            running_mean=np.zeros(width, dtype=dtype),
            running_var=np.ones(width, dtype=dtype),
        )


def batch_norm(x, state, training):
    """Normalise each feature (last axis) over all leading axes.

    Training mode uses batch statistics and updates the running ones with
    ``state.momentum``; inference mode uses the running statistics. Epsilon
    inside the variance guards zero-variance channels.
    """
    x = _as_tensor(x)
    gain, bias = state.gain, state.bias
    axes = tuple(range(x.ndim - 1))
    n = int(np.prod([x.shape[i] for i in axes])) if axes else 1

    if training:
        if n < 2:
            raise ParameterError(f"batch_norm training mode needs >= 2 samples per feature, got {n}")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        m = state.momentum
        state.running_mean[...] = (1.0 - m) * state.running_mean + m * mu
        state.running_var[...] = (1.0 - m) * state.running_var + m * var
    else:
        mu = state.running_mean
        var = state.running_var

    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (x.data - mu) * inv_std
    out_data = gain.data * xhat + bias.data

    if training:

        def backward(g):
            _accumulate(gain, (g * xhat).sum(axis=axes))
            _accumulate(bias, g.sum(axis=axes))
            dxhat = g * gain.data
            # Backprop through the batch statistics themselves.
            gx = (
                dxhat
                - dxhat.mean(axis=axes)
                - xhat * (dxhat * xhat).mean(axis=axes)
            ) * inv_std
            _accumulate(x, gx)

    else:

        def backward(g):
            _accumulate(gain, (g * xhat).sum(axis=axes))
            _accumulate(bias, g.sum(axis=axes))
            _accumulate(x, g * gain.data * inv_std)

    return _make(out_data, (x, gain, bias), backward)


# ---------------------------------------------------------------------------
# dropout
# ---------------------------------------------------------------------------


def dropout(x, rate, training, rng=None):
    """Zero elements with probability ``rate``; survivors scaled by 1/(1-rate)."""
    x = _as_tensor(x)
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ParameterError("dropout in training mode needs a seeded generator")
    keep = rng.random(x.shape) >= rate
    mask = keep.astype(x.data.dtype) * (1.0 / (1.0 - rate))

    def backward(g):
        _accumulate(x, g * mask)

    return _make(x.data * mask, (x,), backward)


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    tolerance: float
    max_rel_err: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)

    @property
    def passed(self):
        return not self.failures

    @property
    def worst(self):
        if not self.max_rel_err:
            return None
        name = max(self.max_rel_err, key=self.max_rel_err.get)
        return name, self.max_rel_err[name]


def gradient_check(f, named_params, step=1e-4, tolerance=1e-4):
    """Compare reverse-mode gradients of ``f`` against central differences.

    ``f`` maps the parameter dict to a scalar Tensor and must be deterministic
    (dropout off, fixed masks). Parameters should be float64; the finite
    difference uses ``step`` on every element. Returns a report with the max
    relative error per tensor and the names of tensors above ``tolerance``.
    """
    report = GradCheckReport(tolerance=tolerance)
    for t in named_params.values():
        t.zero_grad()
    out = f(named_params)
    if out.size != 1:
        raise DimensionError(f"gradient_check needs a scalar objective, got shape {out.shape}")
    out.backward()
    analytic = {
        name: (np.zeros_like(t.data) if t.grad is None else t.grad.copy())
        for name, t in named_params.items()
    }
    for name, t in named_params.items():
        flat = t.data.reshape(-1)
        fd = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = float(f(named_params).data)
            flat[i] = orig - step
            f_minus = float(f(named_params).data)
            flat[i] = orig
            fd[i] = (f_plus - f_minus) / (2.0 * step)
        fd = fd.reshape(t.shape)
        a = analytic[name]
        denom = max(float(np.abs(fd).max(initial=0.0)), float(np.abs(a).max(initial=0.0)), 1e-8)
        err = float(np.abs(a - fd).max(initial=0.0)) / denom
        report.max_rel_err[name] = err
        if err > tolerance:
            report.failures.append(name)
    return report


def zero_grads(named_params):
    for t in named_params.values():
        t.zero_grad()
