"""Dense float64 tensors with reverse-mode automatic differentiation.

Deliberately small: only the operations needed to express, train and
gradient-check the segmentation models in this package. Values live in
row-major numpy float64 arrays; gradients are plain arrays of the same
shape. The graph is a tape of closures released after one backward pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

# When enabled, every op result is screened for NaN/Inf. Costs a full pass
# over each result, so it is off by default and switched on in tests.
_debug_checks = False


def set_debug_checks(enabled: bool) -> None:
    global _debug_checks
    _debug_checks = bool(enabled)


def debug_checks_enabled() -> bool:
    return _debug_checks


class ShapeError(ValueError):
    """Operand shapes are incompatible; the message names the bad axis."""


class GraphReleasedError(RuntimeError):
    """backward() touched a graph that was already traversed and released."""


class Tensor:
    """A float64 array plus optional gradient tracking.

    Tensors are treated as immutable once created, except for ``grad``
    accumulation and in-place parameter updates between optimizer steps.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "_released")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward_fn: Optional[Callable] = None
        self._released = False

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def sum(self):
        return tensor_sum(self)

    def mean(self):
        return tensor_mean(self)

    # -- backward ------------------------------------------------------------

    def backward(self) -> None:
        """Reverse-mode pass from a scalar. Accumulates into ``.grad`` (no
        implicit zeroing), then releases the graph; a second call on the
        same graph raises GraphReleasedError."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.data.shape}")
        if self._released:
            raise GraphReleasedError("backward() called on a released graph")

        # Iterative post-order topological sort (graphs can be deep).
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            if node._released:
                raise GraphReleasedError("graph contains a node already released by a prior backward()")
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))

        if self.grad is None:
            self.grad = np.ones_like(self.data)
        else:
            self.grad = self.grad + np.ones_like(self.data)

        for node in reversed(topo):
            if node._backward_fn is None:
                continue
            grads = node._backward_fn(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None:
                    continue
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad += g
            node._released = True
            node._backward_fn = None
            node._parents = ()
        self._released = True


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _from_op(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents))
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    if _debug_checks and not np.all(np.isfinite(out.data)):
        raise FloatingPointError("op produced non-finite values from finite inputs")
    return out


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


# -- elementwise -------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _from_op(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from None
    a_data, b_data = a.data, b.data

    def backward(g):
        return _unbroadcast(g * b_data, a_data.shape), _unbroadcast(g * a_data, b_data.shape)

    return _from_op(data, (a, b), backward)


def scale(a, s: float) -> Tensor:
    a = _as_tensor(a)
    s = float(s)

    def backward(g):
        return (g * s,)

    return _from_op(a.data * s, (a,), backward)


def elementwise(op: str, a, b=None) -> Tensor:
    """Dispatch by name: 'add' | 'mul' | 'scale' (scale takes a python float)."""
    if op == "add":
        return add(a, b)
    if op == "mul":
        return mul(a, b)
    if op == "scale":
        return scale(a, b)
    raise ValueError(f"unknown elementwise op {op!r}")


def tensor_sum(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    shape = a.data.shape

    def backward(g):
        return (np.broadcast_to(g, shape).copy(),)

    return _from_op(np.asarray(a.data.sum()), (a,), backward)


def tensor_mean(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size
    shape = a.data.shape

    def backward(g):
        return (np.broadcast_to(g / n, shape).copy(),)

    return _from_op(np.asarray(a.data.mean()), (a,), backward)


# -- convolution -------------------------------------------------------------


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of a 2-d cross-correlation.

    ``padding`` is either "same" (output spatial size = ceil(input/stride),
    any extra pixel of padding goes to the bottom/right) or a non-negative
    int applied to all four sides.
    """

    kernel_h: int
    kernel_w: int
    stride: int = 1
    dilation: int = 1
    groups: int = 1
    padding: Union[str, int] = "same"

    def __post_init__(self):
        if self.kernel_h < 1 or self.kernel_w < 1:
            raise ShapeError(f"kernel must be >= 1, got {self.kernel_h}x{self.kernel_w}")
        if self.stride < 1:
            raise ShapeError(f"stride must be >= 1, got {self.stride}")
        if self.dilation < 1:
            raise ShapeError(f"dilation must be >= 1, got {self.dilation}")
        if self.groups < 1:
            raise ShapeError(f"groups must be >= 1, got {self.groups}")
        if isinstance(self.padding, str):
            if self.padding != "same":
                raise ValueError(f"padding must be 'same' or an int, got {self.padding!r}")
        elif self.padding < 0:
            raise ShapeError(f"padding must be >= 0, got {self.padding}")


def _axis_padding(size: int, kernel: int, stride: int, dilation: int, padding) -> tuple[int, int, int]:
    """Return (before, after, out_size) for one spatial axis."""
    eff = (kernel - 1) * dilation + 1
    if padding == "same":
        out = -(-size // stride)  # ceil
        total = max((out - 1) * stride + eff - size, 0)
        before = total // 2
        return before, total - before, out
    p = int(padding)
    out = (size + 2 * p - eff) // stride + 1
    if out < 1:
        raise ShapeError(
            f"conv2d: spatial size {size} with kernel {kernel}, dilation {dilation}, "
            f"padding {p} leaves no output positions"
        )
    return p, p, out


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor], spec: ConvSpec) -> Tensor:
    """Grouped, dilated 2-d cross-correlation in NCHW layout.

    x: (N, Cin, H, W); w: (Cout, Cin/groups, kh, kw); b: (Cout,) or None.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 4:
        raise ShapeError(f"conv2d: input must be 4-d NCHW, got {x.ndim}-d {x.shape}")
    if w.ndim != 4:
        raise ShapeError(f"conv2d: weight must be 4-d (out, in/groups, kh, kw), got {w.shape}")
    n, cin, h, wid = x.shape
    cout, cin_g, kh, kw = w.shape
    g = spec.groups
    if (kh, kw) != (spec.kernel_h, spec.kernel_w):
        raise ShapeError(
            f"conv2d: weight kernel axes are {kh}x{kw} but spec says {spec.kernel_h}x{spec.kernel_w}"
        )
    if cin % g != 0:
        raise ShapeError(f"conv2d: input channel axis has {cin} channels, not divisible by groups={g}")
    if cout % g != 0:
        raise ShapeError(f"conv2d: output channel axis has {cout} channels, not divisible by groups={g}")
    if cin_g != cin // g:
        raise ShapeError(
            f"conv2d: weight in-channel axis has {cin_g}, expected input_channels/groups = {cin // g}"
        )
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (cout,):
            raise ShapeError(f"conv2d: bias must have shape ({cout},), got {b.shape}")

    top, bottom, oh = _axis_padding(h, kh, spec.stride, spec.dilation, spec.padding)
    left, right, ow = _axis_padding(wid, kw, spec.stride, spec.dilation, spec.padding)

    xp = np.pad(x.data, ((0, 0), (0, 0), (top, bottom), (left, right)))
    s, d = spec.stride, spec.dilation

    depthwise = g == cin and cout == cin and cin_g == 1
    if depthwise:
        out = _depthwise_forward(xp, w.data, kh, kw, s, d, oh, ow)
    else:
        out = _grouped_forward(xp, w.data, g, kh, kw, s, d, oh, ow)
    if b is not None:
        out = out + b.data[None, :, None, None]

    parents = (x, w) if b is None else (x, w, b)

    def backward(gout):
        if depthwise:
            gx_p, gw = _depthwise_backward(xp, w.data, gout, kh, kw, s, d, oh, ow)
        else:
            gx_p, gw = _grouped_backward(xp, w.data, gout, g, kh, kw, s, d, oh, ow)
        gx = gx_p[:, :, top:top + h, left:left + wid]
        if b is None:
            return gx, gw
        return gx, gw, gout.sum(axis=(0, 2, 3))

    return _from_op(out, parents, backward)


def _tap_slices(i: int, j: int, s: int, d: int, oh: int, ow: int) -> tuple[slice, slice]:
    return (
        slice(i * d, i * d + (oh - 1) * s + 1, s),
        slice(j * d, j * d + (ow - 1) * s + 1, s),
    )


def _depthwise_forward(xp, w, kh, kw, s, d, oh, ow):
    n, c = xp.shape[0], xp.shape[1]
    out = np.zeros((n, c, oh, ow))
    for i in range(kh):
        for j in range(kw):
            ri, rj = _tap_slices(i, j, s, d, oh, ow)
            out += w[:, 0, i, j][None, :, None, None] * xp[:, :, ri, rj]
    return out


def _depthwise_backward(xp, w, gout, kh, kw, s, d, oh, ow):
    gx_p = np.zeros_like(xp)
    gw = np.zeros_like(w)
    for i in range(kh):
        for j in range(kw):
            ri, rj = _tap_slices(i, j, s, d, oh, ow)
            gw[:, 0, i, j] = np.einsum("nchw,nchw->c", gout, xp[:, :, ri, rj])
            gx_p[:, :, ri, rj] += w[:, 0, i, j][None, :, None, None] * gout
    return gx_p, gw


def _gather_patches(xp, kh, kw, s, d, oh, ow):
    """(N, C, Hp, Wp) -> (N, C, oh, ow, kh, kw) via fancy indexing."""
    rows = (np.arange(oh) * s)[:, None] + (np.arange(kh) * d)[None, :]
    cols = (np.arange(ow) * s)[:, None] + (np.arange(kw) * d)[None, :]
    return xp[:, :, rows[:, None, :, None], cols[None, :, None, :]]


def _grouped_forward(xp, w, g, kh, kw, s, d, oh, ow):
    n, cin = xp.shape[0], xp.shape[1]
    cout = w.shape[0]
    cin_g, cout_g = cin // g, cout // g
    patches = _gather_patches(xp, kh, kw, s, d, oh, ow)
    # (N, C, oh, ow, kh, kw) -> (g, N*oh*ow, cin_g*kh*kw)
    pg = patches.reshape(n, g, cin_g, oh, ow, kh * kw)
    pg = pg.transpose(1, 0, 3, 4, 2, 5).reshape(g, n * oh * ow, cin_g * kh * kw)
    wg = w.reshape(g, cout_g, cin_g * kh * kw)
    out = np.matmul(pg, wg.transpose(0, 2, 1))  # (g, N*oh*ow, cout_g)
    out = out.reshape(g, n, oh, ow, cout_g).transpose(1, 0, 4, 2, 3)
    return out.reshape(n, cout, oh, ow)


def _grouped_backward(xp, w, gout, g, kh, kw, s, d, oh, ow):
    n, cin = xp.shape[0], xp.shape[1]
    cout = w.shape[0]
    cin_g, cout_g = cin // g, cout // g
    patches = _gather_patches(xp, kh, kw, s, d, oh, ow)
    pg = patches.reshape(n, g, cin_g, oh, ow, kh * kw)
    pg = pg.transpose(1, 0, 3, 4, 2, 5).reshape(g, n * oh * ow, cin_g * kh * kw)
    gg = gout.reshape(n, g, cout_g, oh, ow).transpose(1, 0, 3, 4, 2).reshape(g, n * oh * ow, cout_g)
    gw = np.matmul(gg.transpose(0, 2, 1), pg).reshape(g, cout_g, cin_g, kh, kw)
    gw = gw.reshape(cout, cin_g, kh, kw)
    gpatch = np.matmul(gg, w.reshape(g, cout_g, cin_g * kh * kw))  # (g, N*oh*ow, cin_g*kh*kw)
    gpatch = gpatch.reshape(g, n, oh, ow, cin_g, kh, kw).transpose(1, 0, 4, 2, 3, 5, 6)
    gpatch = gpatch.reshape(n, cin, oh, ow, kh, kw)
    gx_p = np.zeros_like(xp)
    for i in range(kh):
        for j in range(kw):
            ri, rj = _tap_slices(i, j, s, d, oh, ow)
            gx_p[:, :, ri, rj] += gpatch[:, :, :, :, i, j]
    return gx_p, gw


# -- normalization and activations -------------------------------------------


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Per-position normalization over the channel axis of an NCHW tensor."""
    if eps <= 0:
        raise ValueError(f"layer_norm: eps must be > 0, got {eps}")
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if x.ndim != 4:
        raise ShapeError(f"layer_norm: input must be 4-d NCHW, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(
            f"layer_norm: gamma/beta must have shape ({c},), got {gamma.shape} and {beta.shape}"
        )

    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gam = gamma.data[None, :, None, None]
    out = gam * xhat + beta.data[None, :, None, None]

    def backward(g):
        dxh = g * gam
        term = (dxh * xhat).sum(axis=1, keepdims=True)
        dx = inv / c * (c * dxh - dxh.sum(axis=1, keepdims=True) - xhat * term)
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        return dx, dgamma, dbeta

    return _from_op(out, (x, gamma, beta), backward)


def gelu(x: Tensor) -> Tensor:
    """Exact gaussian-error gelu: x * Phi(x)."""
    x = _as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = x.data * cdf

    def backward(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
        return (g * (cdf + x.data * pdf),)

    return _from_op(out, (x,), backward)


# -- bilinear upsampling -----------------------------------------------------


def _interp_matrix(n_in: int, factor: int) -> np.ndarray:
    """Row-interpolation matrix for align-corners-false bilinear upsampling."""
    n_out = n_in * factor
    m = np.zeros((n_out, n_in))
    pos = (np.arange(n_out) + 0.5) / factor - 0.5
    pos = np.clip(pos, 0.0, n_in - 1.0)
    i0 = np.floor(pos).astype(int)
    t = pos - i0
    i1 = np.minimum(i0 + 1, n_in - 1)
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - t)
    np.add.at(m, (rows, i1), t)
    return m


def bilinear_upsample(x: Tensor, factor: int) -> Tensor:
    """Upsample NCHW spatially by an integer factor, align-corners-false
    (output pixel centers map to input coordinate (o + 0.5)/f - 0.5)."""
    if int(factor) != factor or factor < 1:
        raise ValueError(f"bilinear_upsample: factor must be a positive integer, got {factor}")
    factor = int(factor)
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"bilinear_upsample: input must be 4-d NCHW, got {x.shape}")
    n, c, h, w = x.shape
    if factor == 1:
        def backward_id(g):
            return (g,)
        return _from_op(x.data.copy(), (x,), backward_id)

    ry = _interp_matrix(h, factor)
    rx = _interp_matrix(w, factor)
    flat = x.data.reshape(n * c, h, w)
    out = np.matmul(np.matmul(ry, flat), rx.T).reshape(n, c, h * factor, w * factor)

    def backward(g):
        gf = g.reshape(n * c, h * factor, w * factor)
        gx = np.matmul(np.matmul(ry.T, gf), rx).reshape(n, c, h, w)
        return (gx,)

    return _from_op(out, (x,), backward)


# -- loss --------------------------------------------------------------------


def softmax_cross_entropy(logits: Tensor, targets: np.ndarray, ignore_index: int = 255) -> Tensor:
    """Mean pixelwise cross-entropy over positions whose target is not
    ``ignore_index``. An all-ignored target map yields loss 0 with zero
    gradient (documented degenerate case)."""
    logits = _as_tensor(logits)
    if logits.ndim != 4:
        raise ShapeError(f"softmax_cross_entropy: logits must be 4-d NKHW, got {logits.shape}")
    n, k, h, w = logits.shape
    t = np.asarray(targets)
    if t.shape != (n, h, w):
        raise ShapeError(
            f"softmax_cross_entropy: targets must have shape {(n, h, w)}, got {t.shape}"
        )
    if not np.issubdtype(t.dtype, np.integer):
        raise ValueError(f"softmax_cross_entropy: targets must be integers, got dtype {t.dtype}")
    valid = t != ignore_index
    bad = valid & ((t < 0) | (t >= k))
    if bad.any():
        offender = int(t[bad].flat[0])
        raise ValueError(
            f"softmax_cross_entropy: class index {offender} out of range [0, {k}) "
            f"(ignore_index={ignore_index})"
        )
    count = int(valid.sum())

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    tc = np.where(valid, t, 0)
    picked = np.take_along_axis(logp, tc[:, None], axis=1)[:, 0]
    if count == 0:
        loss = np.asarray(0.0)
    else:
        loss = np.asarray(-(picked * valid).sum() / count)

    def backward(g):
        if count == 0:
            return (np.zeros_like(logits.data),)
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, tc[:, None], 1.0, axis=1)
        grad = (p - onehot) * valid[:, None] / count
        return (grad * float(g),)

    return _from_op(loss, (logits,), backward)


# -- optimizer ---------------------------------------------------------------


@dataclass
class AdamState:
    """Per-parameter first/second moment arrays plus the shared step count."""

    m: list
    v: list
    step: int = 0

    @classmethod
    def for_params(cls, params: Sequence[Tensor]) -> "AdamState":
        return cls(
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
        )


def adam_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray],
    state: AdamState,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update, in place on ``params``.

    lr == 0 is a documented no-op on the weights (moments still advance);
    negative lr is rejected.
    """
    if lr < 0:
        raise ValueError(f"adam_step: negative learning rate {lr}")
    if not (0.0 <= beta1 < 1.0) or not (0.0 <= beta2 < 1.0):
        raise ValueError(f"adam_step: betas must be in [0, 1), got {beta1}, {beta2}")
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError(
            f"adam_step: got {len(params)} params, {len(grads)} grads, {len(state.m)} state slots"
        )
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.data.shape:
            raise ShapeError(
                f"adam_step: grad {i} has shape {g.shape}, parameter has {p.data.shape}"
            )
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * (g * g)
        mhat = state.m[i] / c1
        vhat = state.v[i] / c2
        p.data -= lr * mhat / (np.sqrt(vhat) + eps)


# -- gradient checking -------------------------------------------------------


def finite_difference_check(
    f: Callable[[Tensor], Tensor],
    x: np.ndarray,
    h: float = 1e-5,
    max_coords: int = 100,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Compare backward() gradients of scalar-valued ``f`` against central
    finite differences at up to ``max_coords`` coordinates of ``x``.

    Returns the max relative error, with a unit floor in the denominator:
    |a - fd| / max(1, |a|, |fd|). The probe side only ever calls f() on
    plain value tensors, so it is independent of the backward path.
    """
    x = np.array(x, dtype=np.float64)  # private copy; perturbation must not leak
    leaf = Tensor(x.copy(), requires_grad=True)
    out = f(leaf)
    if out.size != 1:
        raise ShapeError("finite_difference_check: f must return a scalar")
    out.backward()
    analytic = leaf.grad

    if rng is None:
        rng = np.random.default_rng(0)
    n = x.size
    if n <= max_coords:
        coords = np.arange(n)
    else:
        coords = rng.choice(n, size=max_coords, replace=False)

    worst = 0.0
    flat = x.reshape(-1)
    for c in coords:
        orig = flat[c]
        flat[c] = orig + h
        f_plus = f(Tensor(x)).item()
        flat[c] = orig - h
        f_minus = f(Tensor(x)).item()
        flat[c] = orig
        fd = (f_plus - f_minus) / (2.0 * h)
        a = analytic.reshape(-1)[c]
        err = abs(a - fd) / max(1.0, abs(a), abs(fd))
        worst = max(worst, err)
    return worst
