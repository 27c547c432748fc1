"""Reverse-mode differentiation over numpy arrays.

Every op records its parents and a closure mapping the output gradient to
parent gradients; :func:`backward` walks the recorded graph in reverse
creation order and frees it afterwards.  All values are float64.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

_counter = itertools.count()


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "op", "_parents", "_backward", "_id")
    __array_ufunc__ = None  # make numpy defer to the reflected Tensor operators

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64) if not isinstance(data, np.ndarray) or data.dtype != np.float64 else data
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self.op = "leaf"
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self._id = next(_counter)

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def values(self) -> np.ndarray:
        return self.data.reshape(-1)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def named(self, name: str) -> "Tensor":
        self.name = name
        return self

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label})"

    # -- operators ------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)


def _raise_not_scalar(t: Tensor):
    raise ContractError(f"expected a scalar tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise ----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _node(out, (a, b), bw, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    if isinstance(exponent, Tensor):
        raise ContractError("power takes a fixed (non-tensor) exponent")
    p = float(exponent)

    def bw(g):
        return (g * p * a.data ** (p - 1.0),)

    return _node(a.data ** p, (a,), bw, f"pow{p:g}")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.logaddexp(0.0, x)
    sig = 0.5 * (1.0 + np.tanh(0.5 * x))
    return _node(out, (a,), lambda g: (g * sig,), "softplus")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _node(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    scale = np.where(a.data > 0, 1.0, slope)
    return _node(a.data * scale, (a,), lambda g: (g * scale,), "leaky_relu")


def elu(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    neg_part = np.expm1(np.minimum(x, 0.0))
    out = np.where(x > 0, x, neg_part)
    dx = np.where(x > 0, 1.0, neg_part + 1.0)
    return _node(out, (a,), lambda g: (g * dx,), "elu")


def identity(a) -> Tensor:
    return as_tensor(a)


ACTIVATIONS = {
    "identity": identity,
    "tanh": tanh,
    "elu": elu,
    "relu": relu,
    "sigmoid": sigmoid,
    "leaky_relu": leaky_relu,
}


# -- reductions and shape ops --------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(np.asarray(out), (a,), bw, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return tsum(a, axis, keepdims) * (1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
    return transpose(a, tuple(axes))


def expand_dims(a, axis: int) -> Tensor:
    a = as_tensor(a)
    return reshape(a, np.expand_dims(a.data, axis).shape)


def getitem(a, index) -> Tensor:
    a = as_tensor(a)

    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(p, (int, slice, type(Ellipsis), type(None))) for p in parts)

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _node(np.array(a.data[index]), (a,), bw, "slice")


def take(a, indices, axis: int = -1) -> Tensor:
    """Gather along ``axis``; indices equal to ``-1`` (after ``pad_zero``) read zero."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    axis = axis % a.ndim
    out = np.take(a.data, idx, axis=axis)

    def bw(g):
        moved = np.moveaxis(g, list(range(axis, axis + idx.ndim)), list(range(g.ndim - idx.ndim, g.ndim)))
        flat_g = moved.reshape(moved.shape[: g.ndim - idx.ndim] + (-1,))
        acc = np.zeros(a.shape[:axis] + a.shape[axis + 1:] + (a.shape[axis],))
        np.add.at(acc, (Ellipsis, idx.reshape(-1)), flat_g)
        return (np.moveaxis(acc, -1, axis),)

    return _node(out, (a,), bw, "take")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ContractError("concat needs at least one tensor")
    axis = axis % ts[0].ndim
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(np.concatenate([t.data for t in ts], axis=axis), ts, bw, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [expand_dims(as_tensor(t), axis) for t in tensors]
    return concat(ts, axis=axis)


def pad_zero(a, axis: int = -1) -> Tensor:
    """Append one zero along ``axis`` so that gather index -1 reads zero."""
    a = as_tensor(a)
    shape = list(a.shape)
    shape[axis] = 1
    return concat([a, Tensor(np.zeros(shape))], axis=axis)


# -- linear algebra --------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product with numpy batching rules; a 1-D left operand acts as a row vector."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 1 and b.ndim >= 2:
        if a.shape[0] != b.shape[-2]:
            raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
        out = matmul(reshape(a, (1, a.shape[0])), b)
        return reshape(out, out.shape[:-2] + out.shape[-1:])
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(a.data @ b.data, (a, b), bw, "matmul")


def softmax(logits, axis: int = -1) -> Tensor:
    x = as_tensor(logits)
    if x.size == 0:
        raise ContractError("softmax of an empty vector")
    if not np.all(np.isfinite(x.data)):
        raise NumericError("softmax received non-finite logits")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (x,), bw, "softmax")


def masked_softmax(logits, mask: np.ndarray, axis: int = -1) -> Tensor:
    """Softmax restricted to ``mask``; masked entries are exactly zero."""
    x = as_tensor(logits)
    m = np.broadcast_to(mask, x.shape)
    filled = np.where(m, x.data, -np.inf)
    mx = filled.max(axis=axis, keepdims=True)
    e = np.where(m, np.exp(filled - mx), 0.0)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (x,), bw, "masked_softmax")


# -- convolutions ----------------------------------------------------------

def _fftconv_full(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Full linear convolution along the last axis with broadcast leading dims."""
    n = x.shape[-1] + k.shape[-1] - 1
    if x.shape[-1] * k.shape[-1] <= 4096:
        lead = np.broadcast_shapes(x.shape[:-1], k.shape[:-1])
        xb = np.broadcast_to(x, lead + x.shape[-1:])
        kb = np.broadcast_to(k, lead + k.shape[-1:])
        out = np.zeros(lead + (n,))
        for j in range(kb.shape[-1]):
            out[..., j:j + xb.shape[-1]] += kb[..., j:j + 1] * xb
        return out
    nfft = 1 << (n - 1).bit_length()
    spec = np.fft.rfft(x, nfft) * np.fft.rfft(k, nfft)
    return np.fft.irfft(spec, nfft)[..., :n]


_CONV_MODES = ("full", "same", "valid")


def conv1d(signal, kernel, mode: str = "same") -> Tensor:
    """Discrete convolution along the last axis.

    ``same`` keeps the first ``T`` samples of the full convolution, so
    ``out[t]`` only depends on ``signal[:t+1]`` (causal alignment).
    Leading dimensions of signal and kernel broadcast.
    """
    x, k = as_tensor(signal), as_tensor(kernel)
    if mode not in _CONV_MODES:
        raise ContractError(f"unknown conv mode {mode!r}")
    T, L = x.shape[-1], k.shape[-1]
    if L == 0:
        raise ContractError("empty convolution kernel")
    if mode == "valid" and L > T:
        raise DimensionError(f"valid convolution needs kernel length {L} <= signal length {T}")
    full = _fftconv_full(x.data, k.data)
    lo, hi = {"full": (0, T + L - 1), "same": (0, T), "valid": (L - 1, T)}[mode]

    def bw(g):
        gfull = np.zeros(g.shape[:-1] + (T + L - 1,))
        gfull[..., lo:hi] = g
        gx = _fftconv_full(gfull, k.data[..., ::-1])[..., L - 1:L - 1 + T]
        gk = _fftconv_full(gfull, x.data[..., ::-1])[..., T - 1:T - 1 + L]
        return _unbroadcast(gx, x.shape), _unbroadcast(gk, k.shape)

    return _node(full[..., lo:hi], (x, k), bw, f"conv1d_{mode}")


def _zero_stuff(x: np.ndarray, stride: int) -> np.ndarray:
    n = x.shape[-1]
    out = np.zeros(x.shape[:-1] + ((n - 1) * stride + 1,))
    out[..., ::stride] = x
    return out


def transposed_conv1d(signal, kernel, stride: int = 1) -> Tensor:
    """``out[i*stride + j] += signal[i] * kernel[j]``; length ``(T'-1)*stride + L``."""
    x, k = as_tensor(signal), as_tensor(kernel)
    if stride < 1:
        raise ContractError(f"stride must be >= 1, got {stride}")
    if k.shape[-1] == 0:
        raise ContractError("empty convolution kernel")
    Tp, L = x.shape[-1], k.shape[-1]
    up = _zero_stuff(x.data, stride)
    out = _fftconv_full(up, k.data)

    def bw(g):
        n_up = up.shape[-1]
        gup = _fftconv_full(g, k.data[..., ::-1])[..., L - 1:L - 1 + n_up]
        gx = gup[..., ::stride]
        gk = _fftconv_full(g, up[..., ::-1])[..., n_up - 1:n_up - 1 + L]
        return _unbroadcast(gx, x.shape), _unbroadcast(gk, k.shape)

    return _node(out, (x, k), bw, "transposed_conv1d")


def correlate1d(signal, kernel, stride: int = 1) -> Tensor:
    """Strided valid cross-correlation, ``out[i] = sum_j signal[i*stride + j] * kernel[j]``.

    This is the forward op whose adjoint is :func:`transposed_conv1d`.
    """
    x, k = as_tensor(signal), as_tensor(kernel)
    if stride < 1:
        raise ContractError(f"stride must be >= 1, got {stride}")
    T, L = x.shape[-1], k.shape[-1]
    if L > T:
        raise DimensionError(f"kernel length {L} exceeds signal length {T}")
    valid = conv1d(x, Tensor(k.data[..., ::-1]) if not k.requires_grad else _flip(k), mode="valid")
    n_out = (T - L) // stride + 1
    return getitem(valid, (Ellipsis, slice(0, (n_out - 1) * stride + 1, stride)))


def _flip(k: Tensor) -> Tensor:
    return _node(k.data[..., ::-1].copy(), (k,), lambda g: (g[..., ::-1].copy(),), "flip")


# -- graph traversal -----------------------------------------------------

def _reachable(root: Tensor) -> list[Tensor]:
    seen: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen[id(node)] = node
        stack.extend(p for p in node._parents if p.requires_grad)
    # creation order is a valid topological order
    return sorted(seen.values(), key=lambda t: t._id, reverse=True)


def backward(loss: Tensor, registry: "ParamRegistry | None" = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _reachable(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in order:
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        node._parents = ()
        node._backward = None


def first_nonfinite(root: Tensor, registry: "ParamRegistry | None" = None) -> str | None:
    """Label of the earliest recorded tensor holding NaN/inf, if any."""
    if registry is not None:
        for path, p in registry.items():
            if not np.all(np.isfinite(p.data)):
                return path
    seen: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen[id(node)] = node
        stack.extend(node._parents)
    for node in sorted(seen.values(), key=lambda t: t._id):
        if not np.all(np.isfinite(node.data)):
            return node.name or f"{node.op}#{node._id}"
    return None


# -- parameters ------------------------------------------------------------

class ParamRegistry:
    """Dot-path keyed learnable tensors, iterated in lexicographic order."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, path: str, value) -> Tensor:
        if path in self._params:
            raise ContractError(f"duplicate parameter path {path!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=path)
        self._params[path] = t
        return t

    def __getitem__(self, path: str) -> Tensor:
        return self._params[path]

    def __contains__(self, path: str) -> bool:
        return path in self._params

    def __len__(self) -> int:
        return len(self._params)

    def keys(self) -> list[str]:
        return sorted(self._params)

    def items(self) -> Iterable[tuple[str, Tensor]]:
        for k in self.keys():
            yield k, self._params[k]

    def group(self, prefix: str) -> list[tuple[str, Tensor]]:
        return [(k, t) for k, t in self.items() if k == prefix or k.startswith(prefix + ".")]

    def groups(self, depth: int = 1) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {}
        for k in self.keys():
            out.setdefault(".".join(k.split(".")[:depth]), []).append(k)
        return out

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def num_params(self) -> int:
        return int(sum(t.size for t in self._params.values()))

    def state(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise ContractError(f"parameter mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, v in state.items():
            if v.shape != self._params[k].shape:
                raise DimensionError(f"{k}: stored shape {v.shape} != {self._params[k].shape}")
            self._params[k].data = np.array(v, dtype=np.float64)


# -- finite-difference oracle ----------------------------------------------

def numerical_grad(fn: Callable[[], Tensor], param: Tensor, h: float = 1e-5,
                   indices: Sequence[tuple] | None = None) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. ``param`` (NaN where unsampled)."""
    out = np.full(param.shape, np.nan)
    if indices is None:
        indices = list(np.ndindex(*param.shape))
    for idx in indices:
        orig = param.data[idx]
        param.data[idx] = orig + h
        fp = fn().item()
        param.data[idx] = orig - h
        fm = fn().item()
        param.data[idx] = orig
        out[idx] = (fp - fm) / (2 * h)
    return out


def gradcheck(fn: Callable[[], Tensor], params: dict[str, Tensor] | Sequence[Tensor], h: float = 1e-5,
              max_entries: int | None = None, seed: int = 0) -> dict[str, float]:
    """Relative error ``|g_a - g_n| / max(|g_a|, |g_n|)`` per parameter (2-norm over sampled entries)."""
    if not isinstance(params, dict):
        params = {p.name or f"p{i}": p for i, p in enumerate(params)}
    rng = np.random.default_rng(seed)
    for p in params.values():
        p.grad = None
    loss = fn()
    backward(loss)
    errors = {}
    for name, p in params.items():
        analytic = np.zeros(p.shape) if p.grad is None else p.grad.copy()
        all_idx = list(np.ndindex(*p.shape))
        if max_entries is not None and len(all_idx) > max_entries:
            pick = rng.choice(len(all_idx), size=max_entries, replace=False)
            all_idx = [all_idx[i] for i in sorted(pick)]
        numeric = numerical_grad(fn, p, h, all_idx)
        sel = tuple(np.array(all_idx).T)
        a, n = analytic[sel], numeric[sel]
        scale = max(np.linalg.norm(a), np.linalg.norm(n))
        errors[name] = 0.0 if scale < 1e-12 else float(np.linalg.norm(a - n) / scale)
        p.grad = None
    return errors
