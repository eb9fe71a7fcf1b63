"""Dense-tensor engine with reverse-mode automatic differentiation.

The operator set covers exactly what the two encoder architectures and their
training losses need: matrix products, 1-d (cross-correlation) convolution,
layer normalization, scaled dot-product attention, a small elementwise suite,
pooling/reshaping, and a forward-only FFT magnitude transform.

Tensors are immutable values: the wrapped array is frozen at construction, so
saved activations can never be invalidated by later mutation.  The graph is
held implicitly through parent links and backward closures; ``backward`` on a
scalar walks the nodes in reverse topological order exactly once.

Float32 is the training dtype.  Float64 is reserved for ``grad_check``, which
compares analytic gradients against central finite differences.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .errors import ConfigError, GraphError, ShapeError

_GRAD_ENABLED = True

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@contextmanager
def no_grad():
    """Disable graph construction inside the block (evaluation paths)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """Immutable dense float array, optionally tracked by the autodiff graph."""

    __slots__ = ("data", "requires_grad", "_grad", "_parents", "_backward", "_done")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            raise TypeError("wrap raw array data, not another Tensor")
        arr = np.array(data, dtype=dtype, copy=True)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._grad = None
        self._parents: tuple = ()
        self._backward = None
        self._done = False

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _from_op(data: np.ndarray, parents: Sequence["Tensor"],
                 backward: Callable[[np.ndarray], None]) -> "Tensor":
        out = Tensor.__new__(Tensor)
        data = np.ascontiguousarray(data)
        data.flags.writeable = False
        out.data = data
        out._grad = None
        out._done = False
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # -- basic introspection ---------------------------------------------------

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

    @property
    def grad(self) -> np.ndarray:
        """Accumulated gradient; exact zeros for leaves the loss never reached."""
        if self._grad is None:
            return np.zeros_like(self.data)
        return self._grad

    def zero_grad(self):
        self._grad = None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._item_err()

    def _item_err(self):
        raise ShapeError(f"item() requires a scalar, got shape {self.shape}")

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    # -- backward --------------------------------------------------------------

    def backward(self):
        """Populate ``grad`` on every reachable requires_grad leaf.

        The loss must be scalar and may drive backward only once per graph;
        a second call on the same result raises ``GraphError``.
        """
        if self.data.size != 1:
            raise GraphError(f"backward requires a scalar loss, got shape {self.shape}")
        if self._done:
            raise GraphError("backward was already run for this graph; rebuild it first")
        if not self.requires_grad:
            raise GraphError("loss does not depend on any requires_grad tensor")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            if node._done:
                raise GraphError("graph region already consumed by an earlier backward; "
                                 "rebuild the forward pass first")
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))

        self._grad = np.ones_like(self.data)
        for node in reversed(order):
            fn = node._backward
            if fn is not None:
                node._done = True
                fn(node._grad)
                node._backward = None
                if node is not self:
                    node._grad = None  # intermediate grads are no longer needed
        self._done = True

    def _accum(self, g: np.ndarray):
        if not self.requires_grad:
            return
        if self._grad is None:
            self._grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self._grad = self._grad + np.asarray(g, dtype=self.data.dtype)

    # -- operator sugar ----------------------------------------------------------

    def __add__(self, other):
        return add(self, _coerce(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _coerce(other, self))

    def __rsub__(self, other):
        return sub(_coerce(other, self), self)

    def __mul__(self, other):
        return mul(self, _coerce(other, self))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _coerce(other, self))

    def __neg__(self):
        return mul(self, _coerce(-1.0, self))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def _coerce(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def constant(data, dtype=None) -> Tensor:
    """Graph leaf that never receives a gradient."""
    return Tensor(data, requires_grad=False, dtype=dtype)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- arithmetic ------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data + b.data

    def backward(g):
        a._accum(_unbroadcast(g, a.shape))
        b._accum(_unbroadcast(g, b.shape))

    return Tensor._from_op(out_data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data - b.data

    def backward(g):
        a._accum(_unbroadcast(g, a.shape))
        b._accum(_unbroadcast(-g, b.shape))

    return Tensor._from_op(out_data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data * b.data

    def backward(g):
        a._accum(_unbroadcast(g * b.data, a.shape))
        b._accum(_unbroadcast(g * a.data, b.shape))

    return Tensor._from_op(out_data, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data / b.data

    def backward(g):
        a._accum(_unbroadcast(g / b.data, a.shape))
        b._accum(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return Tensor._from_op(out_data, (a, b), backward)


def texp(x: Tensor) -> Tensor:
    out_data = np.exp(x.data)

    def backward(g):
        x._accum(g * out_data)

    return Tensor._from_op(out_data, (x,), backward)


def tlog(x: Tensor) -> Tensor:
    out_data = np.log(x.data)

    def backward(g):
        x._accum(g / x.data)

    return Tensor._from_op(out_data, (x,), backward)


def tsqrt(x: Tensor) -> Tensor:
    out_data = np.sqrt(x.data)

    def backward(g):
        x._accum(g * 0.5 / out_data)

    return Tensor._from_op(out_data, (x,), backward)


def gelu(x: Tensor) -> Tensor:
    """Gaussian error linear unit, exact erf formulation."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out_data = x.data * cdf

    def backward(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI
        x._accum(g * (cdf + x.data * pdf))

    return Tensor._from_op(out_data, (x,), backward)


def elu(x: Tensor) -> Tensor:
    """ELU with unit alpha: x for x > 0, exp(x) - 1 otherwise."""
    neg = np.expm1(np.minimum(x.data, 0.0))
    pos_mask = x.data > 0
    out_data = np.where(pos_mask, x.data, neg)

    def backward(g):
        x._accum(g * np.where(pos_mask, 1.0, neg + 1.0))

    return Tensor._from_op(out_data, (x,), backward)


def dropout(x: Tensor, p: float, rng) -> Tensor:
    """Inverted dropout.

    ``rng`` is a numpy Generator in training mode; passing ``None`` selects
    eval mode, which is the identity.  The keep mask scales by 1/(1-p).
    """
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must lie in [0, 1), got {p}")
    if rng is None or p == 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    out_data = x.data * keep

    def backward(g):
        x._accum(g * keep)

    return Tensor._from_op(out_data, (x,), backward)


# -- linear algebra ----------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; stacked leading dimensions broadcast as in numpy."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out_data = a.data @ b.data

    def backward(g):
        a._accum(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        b._accum(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return Tensor._from_op(out_data, (a, b), backward)


def conv1d(x: Tensor, kernels: Tensor, stride: int = 1, padding=0) -> Tensor:
    """Cross-correlation over the last axis (no kernel flip).

    ``x`` is (..., c_in, length); ``kernels`` is (c_out, c_in, k).  ``padding``
    is symmetric when an int, or an explicit (left, right) pair — the pair form
    covers same-padding for even kernel widths.
    """
    if x.ndim < 2 or kernels.ndim != 3:
        raise ShapeError(f"conv1d: expected (..., c_in, len) and (c_out, c_in, k), "
                         f"got {x.shape} and {kernels.shape}")
    c_out, c_in, k = kernels.shape
    if x.shape[-2] != c_in:
        raise ShapeError(f"conv1d: input channels {x.shape[-2]} do not match kernels {kernels.shape}")
    pl, pr = (padding, padding) if isinstance(padding, int) else padding
    length = x.shape[-1]
    if length + pl + pr < k:
        raise ShapeError(f"conv1d: kernel width {k} exceeds padded input length {length + pl + pr}")
    if stride < 1:
        raise ConfigError(f"conv1d: stride must be >= 1, got {stride}")

    lead = x.shape[:-2]
    batch = int(np.prod(lead)) if lead else 1
    xb = x.data.reshape(batch, c_in, length)
    xp = np.pad(xb, ((0, 0), (0, 0), (pl, pr)))
    windows = sliding_window_view(xp, k, axis=-1)[:, :, ::stride, :]  # (B, c_in, L_out, k)
    l_out = windows.shape[2]
    out = np.einsum("oik,bilk->bol", kernels.data, windows)
    out_data = out.reshape(*lead, c_out, l_out)

    def backward(g):
        gb = g.reshape(batch, c_out, l_out)
        kernels._accum(np.einsum("bol,bilk->oik", gb, windows))
        if x.requires_grad:
            spread = np.einsum("bol,oik->bilk", gb, kernels.data)
            dxp = np.zeros_like(xp)
            for j in range(k):
                dxp[:, :, j:j + stride * l_out:stride] += spread[:, :, :, j]
            dx = dxp[:, :, pl:pl + length] if pr == 0 else dxp[:, :, pl:-pr]
            x._accum(dx.reshape(x.shape))

    return Tensor._from_op(out_data, (x, kernels), backward)


def depthwise_grid_conv(x: Tensor, weights: Tensor, axis: int) -> Tensor:
    """Per-feature 1-d convolution along ``axis``, zero-padded to same length.

    ``x`` is (..., d) with the feature dimension last; ``weights`` is (d, k),
    one odd-width kernel per feature, applied independently along ``axis``.
    """
    d, k = weights.shape
    if x.shape[-1] != d:
        raise ShapeError(f"depthwise_grid_conv: feature dim {x.shape[-1]} does not match weights {weights.shape}")
    if k % 2 != 1:
        raise ConfigError(f"depthwise_grid_conv: kernel width must be odd, got {k}")
    axis = axis % x.ndim
    if axis == x.ndim - 1:
        raise ShapeError("depthwise_grid_conv: cannot convolve along the feature axis")
    half = k // 2
    pads = [(0, 0)] * x.ndim
    pads[axis] = (half, half)
    xp = np.pad(x.data, pads)
    windows = sliding_window_view(xp, k, axis=axis)  # (..., d, k) with axis restored
    out_data = np.einsum("...dk,dk->...d", windows, weights.data)

    def backward(g):
        weights._accum(np.einsum("ndk,nd->dk", windows.reshape(-1, d, k), g.reshape(-1, d)))
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            mover = np.moveaxis(dxp, axis, -2)  # view; writes land in dxp
            gm = np.moveaxis(g, axis, -2)
            steps = x.shape[axis]
            for j in range(k):
                mover[..., j:j + steps, :] += gm * weights.data[:, j]
            sl = [slice(None)] * x.ndim
            sl[axis] = slice(half, half + steps)
            x._accum(dxp[tuple(sl)])

    return Tensor._from_op(out_data, (x, weights), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ConfigError(f"layer_norm eps must be positive, got {eps}")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gamma/beta must be ({d},), got {gamma.shape} and {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xm = x.data - mu
    inv = 1.0 / np.sqrt((xm * xm).mean(axis=-1, keepdims=True) + eps)
    xhat = xm * inv
    out_data = gamma.data * xhat + beta.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        beta._accum(g.sum(axis=lead))
        gamma._accum((g * xhat).sum(axis=lead))
        if x.requires_grad:
            gx = g * gamma.data
            m1 = gx.mean(axis=-1, keepdims=True)
            m2 = (gx * xhat).mean(axis=-1, keepdims=True)
            x._accum(inv * (gx - m1 - xhat * m2))

    return Tensor._from_op(out_data, (x, gamma, beta), backward)


def softmax_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Scaled dot-product attention over the trailing (tokens, head_dim) axes.

    Logits are scaled by 1/sqrt(head_dim) and softmaxed with the row-max
    subtracted, giving row-stochastic weights applied to ``v``.
    """
    if q.ndim < 2 or q.shape[-1] != k.shape[-1] or k.shape != v.shape:
        raise ShapeError(f"softmax_attention: incompatible shapes {q.shape}, {k.shape}, {v.shape}")
    scale = 1.0 / math.sqrt(q.shape[-1])
    logits = (q.data @ np.swapaxes(k.data, -1, -2)) * scale
    logits -= logits.max(axis=-1, keepdims=True)
    weights = np.exp(logits)
    weights /= weights.sum(axis=-1, keepdims=True)
    out_data = weights @ v.data

    def backward(g):
        v._accum(np.swapaxes(weights, -1, -2) @ g)
        dw = g @ np.swapaxes(v.data, -1, -2)
        ds = weights * (dw - (dw * weights).sum(axis=-1, keepdims=True))
        q._accum((ds @ k.data) * scale)
        k._accum((np.swapaxes(ds, -1, -2) @ q.data) * scale)

    return Tensor._from_op(out_data, (q, k, v), backward)


def attention_weights(q: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Row-stochastic attention weights alone (diagnostics, no gradient)."""
    scale = 1.0 / math.sqrt(q.shape[-1])
    logits = (q @ np.swapaxes(k, -1, -2)) * scale
    logits -= logits.max(axis=-1, keepdims=True)
    w = np.exp(logits)
    return w / w.sum(axis=-1, keepdims=True)


# -- shape manipulation ----------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    out_data = x.data.reshape(shape)

    def backward(g):
        x._accum(g.reshape(x.shape))

    return Tensor._from_op(out_data, (x,), backward)


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(axes) if axes is not None else tuple(reversed(range(x.ndim)))
    inverse = np.argsort(axes)
    out_data = x.data.transpose(axes)

    def backward(g):
        x._accum(g.transpose(inverse))

    return Tensor._from_op(out_data, (x,), backward)


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    out_data = np.swapaxes(x.data, a, b)

    def backward(g):
        x._accum(np.swapaxes(g, a, b))

    return Tensor._from_op(out_data, (x,), backward)


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out_data = np.broadcast_to(x.data, shape)

    def backward(g):
        x._accum(_unbroadcast(g, x.shape))

    return Tensor._from_op(out_data.copy(), (x,), backward)


def take(x: Tensor, key) -> Tensor:
    out_data = x.data[key]

    def backward(g):
        dx = np.zeros_like(x.data)
        np.add.at(dx, key, g)
        x._accum(dx)

    return Tensor._from_op(np.array(out_data), (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            t._accum(piece)

    return Tensor._from_op(out_data, tuple(tensors), backward)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            x._accum(np.broadcast_to(g, x.shape))
            return
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        if not keepdims:
            g = np.expand_dims(g, axes)
        x._accum(np.broadcast_to(g, x.shape))

    return Tensor._from_op(np.asarray(out_data), (x,), backward)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))
    s = tsum(x, axis=axis, keepdims=keepdims)
    return mul(s, _coerce(1.0 / count, s))


def mean_pool(x: Tensor, axis: int, window: int) -> Tensor:
    """Average over non-overlapping windows along ``axis``."""
    axis = axis % x.ndim
    length = x.shape[axis]
    if length % window != 0:
        raise ShapeError(f"mean_pool: axis length {length} is not divisible by window {window}")
    n_out = length // window
    folded_shape = x.shape[:axis] + (n_out, window) + x.shape[axis + 1:]
    out_data = x.data.reshape(folded_shape).mean(axis=axis + 1)

    def backward(g):
        gexp = np.expand_dims(g, axis + 1) / window
        x._accum(np.broadcast_to(gexp, folded_shape).reshape(x.shape))

    return Tensor._from_op(out_data, (x,), backward)


def fft_magnitude(x: Tensor) -> Tensor:
    """Magnitude spectrum along the last axis, full length via symmetry.

    Forward-only feature transform: the output never propagates gradient back
    into ``x``; it behaves as a constant of the graph.
    """
    spectrum = np.abs(np.fft.fft(x.data, axis=-1)).astype(x.dtype)
    return Tensor(spectrum, requires_grad=False)


# -- dropout seeding ----------------------------------------------------------------


class DropoutRng:
    """Counter-based dropout randomness.

    Every dropout site draws its mask from a generator keyed by
    (run seed, step, op index), so a forward pass replays bit-identically for
    a fixed seed and step, regardless of evaluation order elsewhere.
    """

    def __init__(self, seed: int, step: int = 0):
        self.seed = int(seed)
        self.step = int(step)
        self._op = 0

    def begin_step(self, step: int):
        self.step = int(step)
        self._op = 0

    def next_op(self) -> np.random.Generator:
        key = np.random.SeedSequence(entropy=[self.seed, self.step, self._op])
        self._op += 1
        return np.random.default_rng(key)


# -- finite-difference verification ---------------------------------------------------


def grad_check(f: Callable[[list], Tensor], inputs: Iterable[Tensor],
               h: float = 1e-5, coords_per_input: int | None = None,
               rng: np.random.Generator | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps the tensor list to a scalar.  All inputs must be float64.  By
    default every coordinate is perturbed; ``coords_per_input`` spot-checks a
    random subset per tensor (needed for end-to-end model checks, where full
    enumeration is prohibitive).  Relative error uses
    ``|analytic - numeric| / max(1, |numeric|)``.
    """
    inputs = list(inputs)
    if any(t.dtype != np.float64 for t in inputs):
        raise ConfigError("grad_check requires float64 inputs")
    for t in inputs:
        t.zero_grad()
    loss = f(inputs)
    loss.backward()
    analytic = [t.grad.copy() for t in inputs]

    if rng is None:
        rng = np.random.default_rng(0)
    max_err = 0.0
    for i, t in enumerate(inputs):
        flat_ids = np.arange(t.size)
        if coords_per_input is not None and t.size > coords_per_input:
            flat_ids = rng.choice(t.size, size=coords_per_input, replace=False)
        base = t.data.reshape(-1)
        for idx in flat_ids:
            plus = base.copy()
            plus[idx] += h
            minus = base.copy()
            minus[idx] -= h
            args_p = list(inputs)
            args_p[i] = Tensor(plus.reshape(t.shape), dtype=np.float64)
            args_m = list(inputs)
            args_m[i] = Tensor(minus.reshape(t.shape), dtype=np.float64)
            with no_grad():
                numeric = (f(args_p).item() - f(args_m).item()) / (2.0 * h)
            err = abs(analytic[i].reshape(-1)[idx] - numeric) / max(1.0, abs(numeric))
            max_err = max(max_err, err)
    return max_err
