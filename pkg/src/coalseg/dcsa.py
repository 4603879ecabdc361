"""Dilation-based convolutional self-attention.

A depthwise 5x5 conv gathers local context; parallel depthwise dilated
convs (kernel s, dilation r) widen the field without s x s x C x C cost;
their sum plus the local map goes through a 1x1 channel mixer to produce
an attention map that multiplies the block input elementwise.

A (s, r) branch covers the same extent as a dense kernel of size
s + (s-1)(r-1); the decomposition's parameter saving relative to covering
that extent densely is tracked by ``param_reduction_rho``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np

from .tensor import ConvSpec, Tensor, add, conv2d, mul

DEFAULT_BRANCHES: tuple = ((3, 1), (5, 2), (7, 3))


@dataclass(frozen=True)
class DCSAConfig:
    channels: int
    local_kernel: int = 5
    branches: tuple = DEFAULT_BRANCHES
    use_bias: bool = False
    # Dense-kernel side length used when quoting the parameter-reduction
    # ratio. 19 covers the default decomposition exactly; 21 reproduces the
    # commonly quoted 81.18% figure.
    accounting_kernel: int = 19

    def __post_init__(self):
        if self.channels < 1:
            raise ValueError(f"channels must be >= 1, got {self.channels}")
        if self.local_kernel < 1:
            raise ValueError(f"local kernel must be >= 1, got {self.local_kernel}")
        object.__setattr__(self, "branches", tuple((int(k), int(r)) for k, r in self.branches))
        for k, r in self.branches:
            if k < 1 or r < 1:
                raise ValueError(f"branch kernel/dilation must be >= 1, got ({k}, {r})")
        if self.accounting_kernel < 1:
            raise ValueError(f"accounting kernel must be >= 1, got {self.accounting_kernel}")


@dataclass
class DCSAWeights:
    cfg: DCSAConfig
    local: Tensor                      # (C, 1, k, k)
    branch: list                       # [(C, 1, s, s), ...]
    mixer: Tensor                      # (C, C, 1, 1)
    local_bias: Optional[Tensor] = None
    branch_bias: list = field(default_factory=list)
    mixer_bias: Optional[Tensor] = None

    def params(self):
        yield self.local
        yield from self.branch
        yield self.mixer
        for b in (self.local_bias, *self.branch_bias, self.mixer_bias):
            if b is not None:
                yield b

    def param_count(self) -> int:
        return sum(p.data.size for p in self.params())


def _trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) resampled until within 2 std, like common vit inits."""
    out = rng.normal(0.0, std, size=shape)
    for _ in range(16):
        bad = np.abs(out) > 2 * std
        if not bad.any():
            break
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
    return np.clip(out, -2 * std, 2 * std)


def init_dcsa_weights(cfg: DCSAConfig, rng: np.random.Generator) -> DCSAWeights:
    c, k = cfg.channels, cfg.local_kernel
    mk = lambda shape: Tensor(_trunc_normal(rng, shape), requires_grad=True)
    zeros = lambda n: Tensor(np.zeros(n), requires_grad=True)
    w = DCSAWeights(
        cfg=cfg,
        local=mk((c, 1, k, k)),
        branch=[mk((c, 1, s, s)) for s, _ in cfg.branches],
        mixer=mk((c, c, 1, 1)),
    )
    if cfg.use_bias:
        w.local_bias = zeros(c)
        w.branch_bias = [zeros(c) for _ in cfg.branches]
        w.mixer_bias = zeros(c)
    return w


def identity_dcsa_weights(cfg: DCSAConfig) -> DCSAWeights:
    """All filters zero, mixer bias one: Att == ones, so apply() is the
    identity map regardless of the input."""
    c, k = cfg.channels, cfg.local_kernel
    w = DCSAWeights(
        cfg=cfg,
        local=Tensor(np.zeros((c, 1, k, k))),
        branch=[Tensor(np.zeros((c, 1, s, s))) for s, _ in cfg.branches],
        mixer=Tensor(np.zeros((c, c, 1, 1))),
        local_bias=Tensor(np.zeros(c)),
        branch_bias=[Tensor(np.zeros(c)) for _ in cfg.branches],
        mixer_bias=Tensor(np.ones(c)),
    )
    return w


# -- analytics ---------------------------------------------------------------


def equivalent_kernel_size(kernel: int, dilation: int) -> int:
    """Dense kernel side covered by a (kernel, dilation) conv:
    K' = K + (K - 1)(r - 1)."""
    if kernel < 1 or dilation < 1:
        raise ValueError(f"kernel and dilation must be >= 1, got ({kernel}, {dilation})")
    return kernel + (kernel - 1) * (dilation - 1)


def param_reduction_rho(
    branch_kernels: Sequence[int],
    h0: int,
    w0: int,
    channels: int = 1,
) -> float:
    """Fraction of parameters saved versus one dense h0 x w0 depthwise
    kernel: 1 - sum(K^2) C / (h0 w0 C). Computed with exact rationals, so
    the channel count cancels exactly and the result is C-independent."""
    if h0 < 1 or w0 < 1:
        raise ValueError(f"dense kernel sides must be >= 1, got {h0}x{w0}")
    if channels < 1:
        raise ValueError(f"channels must be >= 1, got {channels}")
    kernels = [int(k) for k in branch_kernels]
    if not kernels or any(k < 1 for k in kernels):
        raise ValueError(f"branch kernels must be a non-empty list of positives, got {branch_kernels}")
    ratio = Fraction(sum(k * k for k in kernels) * channels, h0 * w0 * channels)
    return float(1 - ratio)


def decomposition_table(cfg: DCSAConfig) -> list:
    """Rows describing every conv in the block: part, kernel, dilation,
    equivalent kernel and parameter count (used by the analyze report)."""
    c = cfg.channels
    rows = [
        {
            "part": "local",
            "kernel": cfg.local_kernel,
            "dilation": 1,
            "equivalent_kernel": cfg.local_kernel,
            "params": c * cfg.local_kernel ** 2,
        }
    ]
    for s, r in cfg.branches:
        rows.append(
            {
                "part": "branch",
                "kernel": s,
                "dilation": r,
                "equivalent_kernel": equivalent_kernel_size(s, r),
                "params": c * s * s,
            }
        )
    rows.append({"part": "mixer", "kernel": 1, "dilation": 1, "equivalent_kernel": 1, "params": c * c})
    return rows


# -- forward -----------------------------------------------------------------


def dcsa_attention_map(x: Tensor, w: DCSAWeights) -> Tensor:
    """Att = mixer( local(x) + sum_branches branch(local(x)) )."""
    cfg = w.cfg
    c = cfg.channels
    u = conv2d(x, w.local, w.local_bias, ConvSpec(cfg.local_kernel, cfg.local_kernel, groups=c))
    s = u
    for (k, r), wb, bb in zip(cfg.branches, w.branch, _padded(w.branch_bias, len(cfg.branches))):
        s = add(s, conv2d(u, wb, bb, ConvSpec(k, k, dilation=r, groups=c)))
    return conv2d(s, w.mixer, w.mixer_bias, ConvSpec(1, 1))


def dcsa_apply(x: Tensor, w: DCSAWeights) -> Tensor:
    """Output = Att (.) x — both factors carry gradient."""
    return mul(dcsa_attention_map(x, w), x)


def _padded(biases: list, n: int) -> list:
    return biases if biases else [None] * n


def impulse_receptive_field(cfg: DCSAConfig) -> tuple:
    """Bounding-box size of the attention response to a centered impulse,
    probed with all-ones filters on a sufficiently large canvas."""
    c, k = cfg.channels, cfg.local_kernel
    # Conservative canvas: full extents, plus margin.
    span = (k - 1) + max([(s - 1) * r for s, r in cfg.branches], default=0)
    half = span // 2 + span % 2 + 2
    size = 2 * half + 1
    probe = DCSAWeights(
        cfg=cfg,
        local=Tensor(np.ones((c, 1, k, k))),
        branch=[Tensor(np.ones((c, 1, s, s))) for s, _ in cfg.branches],
        mixer=Tensor(np.ones((c, c, 1, 1))),
    )
    x = np.zeros((1, c, size, size))
    x[:, :, half, half] = 1.0
    att = dcsa_attention_map(Tensor(x), probe).data
    hit = np.abs(att).sum(axis=(0, 1)) > 0
    rows = np.flatnonzero(hit.any(axis=1))
    cols = np.flatnonzero(hit.any(axis=0))
    return int(rows[-1] - rows[0] + 1), int(cols[-1] - cols[0] + 1)


# -- plain softmax attention, for reference comparisons ----------------------


def softmax_attention_reference(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Row-softmax(q k^T / sqrt(d)) v on (L, d) matrices, numerically stable."""
    q, k, v = (np.asarray(a, dtype=np.float64) for a in (q, k, v))
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ValueError("softmax_attention_reference expects 2-d (L, d) matrices")
    if q.shape[1] != k.shape[1] or k.shape[0] != v.shape[0]:
        raise ValueError(
            f"incompatible attention shapes q{q.shape} k{k.shape} v{v.shape}"
        )
    scores = q @ k.T / np.sqrt(q.shape[1])
    scores -= scores.max(axis=1, keepdims=True)
    weights = np.exp(scores)
    weights /= weights.sum(axis=1, keepdims=True)
    return weights @ v
