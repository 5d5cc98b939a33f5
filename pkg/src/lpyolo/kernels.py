"""Layer-level compute: integer convolution, requantizing activations, max
pooling, and the sigmoid / rescaled-hardtanh pair.

The integer path never touches floats until requantization, where a single
float64 multiplier folds the three scales. The float reference path reuses
the exact same requantize step, which is what makes the two paths provably
bit-identical: both hand it the same integer accumulator values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .qcore import QuantParams, QuantTensor

__all__ = [
    "ConvWeights",
    "RequantSpec",
    "ACTIVATIONS",
    "sigmoid",
    "sigmoid_via_tanh",
    "rescaled_hardtanh",
    "conv2d_acc",
    "conv2d_real",
    "requantize",
    "maxpool",
    "maxpool_grid",
]

# Accumulators must stay within signed 32-bit range; Table-1-sized layers
# peak below 2^28 so this is headroom, not a tight bound.
ACC_LIMIT = 1 << 31

ACTIVATIONS = ("relu", "rescaled_hardtanh")


def sigmoid(x):
    """Logistic function 1/(1+e^-x), computed without large exponentials."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_via_tanh(x):
    """(1 + tanh(x/2)) / 2, algebraically identical to sigmoid."""
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def rescaled_hardtanh(x):
    """clamp(x/4 + 1/2, 0, 1): sigmoid with tanh replaced by its linear clamp.

    Agrees with sigmoid to within ~0.12 everywhere; the gap peaks near x = +-2
    where the clamp saturates but the logistic has not.
    """
    x = np.asarray(x, dtype=np.float64)
    return np.clip(0.25 * x + 0.5, 0.0, 1.0)


@dataclass(frozen=True)
class ConvWeights:
    """Signed quantized filter bank ordered [out][in][kh][kw].

    bias is optional, one 32-bit integer per output channel, expressed at the
    accumulator's scale (in_scale * w_scale) so it adds directly onto the raw
    integer accumulator.
    """

    weights: np.ndarray
    w_params: QuantParams
    bias: np.ndarray | None = None

    def __post_init__(self) -> None:
        w = self.weights
        if w.ndim != 4:
            raise ValueError(f"weights must be [out][in][kh][kw], got ndim={w.ndim}")
        if not np.issubdtype(w.dtype, np.integer):
            raise ValueError(f"weights must be integers, got {w.dtype}")
        out_ch, in_ch, kh, kw = w.shape
        if kh != kw or kh not in (1, 3):
            raise ValueError(f"kernel must be 1x1 or 3x3, got {kh}x{kw}")
        if not self.w_params.signed:
            raise ValueError("weight lattice must be signed")
        lo, hi = int(w.min(initial=0)), int(w.max(initial=0))
        if lo < self.w_params.qmin or hi > self.w_params.qmax:
            raise ValueError(
                f"weights [{lo}, {hi}] exceed "
                f"[{self.w_params.qmin}, {self.w_params.qmax}]"
            )
        if self.bias is not None:
            b = self.bias
            if b.ndim != 1 or b.size != out_ch:
                raise ValueError(f"bias length {b.size} != out channels {out_ch}")
            if not np.issubdtype(b.dtype, np.integer):
                raise ValueError(f"bias must be integers, got {b.dtype}")
            if int(np.abs(b).max(initial=0)) >= ACC_LIMIT:
                raise ValueError("bias exceeds 32-bit accumulator range")

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel(self) -> int:
        return self.weights.shape[2]


@dataclass(frozen=True)
class RequantSpec:
    """Scales and activation mapping a raw accumulator to the next lattice.

    The requant multiplier is derived once, in float64, inside this class;
    integer and float-reference paths must both go through it so the exact
    same rounding decisions fall out of both.
    """

    in_scale: float
    w_scale: float
    out_scale: float
    out_bits: int
    activation: str

    def __post_init__(self) -> None:
        for name in ("in_scale", "w_scale", "out_scale"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0.0):
                raise ValueError(f"{name} must be positive and finite, got {v}")
        if not 1 <= self.out_bits <= 8:
            raise ValueError(f"out_bits {self.out_bits} outside 1..8")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.activation == "rescaled_hardtanh":
            forced = 1.0 / ((1 << self.out_bits) - 1)
            if self.out_scale != forced:
                raise ValueError(
                    f"rescaled_hardtanh requires out_scale {forced!r} "
                    f"for {self.out_bits} bits, got {self.out_scale!r}"
                )

    @property
    def out_params(self) -> QuantParams:
        return QuantParams(bits=self.out_bits, signed=False, scale=self.out_scale)

    def multiplier(self) -> float:
        """Folded scale factor applied to the raw accumulator."""
        if self.activation == "relu":
            return self.in_scale * self.w_scale / self.out_scale
        return self.in_scale * self.w_scale / 4.0 / self.out_scale

    def offset(self) -> float:
        """Additive term in lattice units (hardtanh's +1/2, scaled)."""
        if self.activation == "relu":
            return 0.0
        return 0.5 / self.out_scale


def _check_conv_input(x_shape, w: ConvWeights, pad_same: bool):
    h, wd, c = x_shape
    if c != w.in_channels:
        raise ValueError(f"input channels {c} != weight channels {w.in_channels}")
    k = w.kernel
    pad = k // 2 if pad_same else 0
    if h + 2 * pad < k or wd + 2 * pad < k:
        raise ValueError(f"input {h}x{wd} smaller than {k}x{k} kernel")
    return k, pad


def conv2d_acc(x: QuantTensor, w: ConvWeights, pad_same: bool = True) -> np.ndarray:
    """Integer convolution, stride 1, returning the raw int64 accumulator.

    Padding value is 0, the zero-point, i.e. real 0. Implemented as an
    im2col matmul; bias (if any) is added onto the accumulator.
    """
    k, pad = _check_conv_input(x.shape, w, pad_same)
    grid = x.grid().astype(np.int64)
    if pad:
        grid = np.pad(grid, ((pad, pad), (pad, pad), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(grid, (k, k), axis=(0, 1))
    oh, ow = win.shape[0], win.shape[1]
    cols = win.reshape(oh, ow, w.in_channels * k * k)
    filt = w.weights.reshape(w.out_channels, -1).astype(np.int64)
    acc = cols @ filt.T
    if w.bias is not None:
        acc = acc + w.bias.astype(np.int64)
    if int(np.abs(acc).max(initial=0)) >= ACC_LIMIT:
        raise ValueError("accumulator overflow: |acc| reached 2^31")
    return acc


def conv2d_real(
    x: np.ndarray,
    weights: np.ndarray,
    bias: np.ndarray | None = None,
    pad_same: bool = True,
) -> np.ndarray:
    """Float64 convolution over raw (h, w, c) / [out][in][kh][kw] arrays.

    Deliberately a different algorithm from conv2d_acc (per-tap accumulation
    instead of one flattened matmul) so the two can cross-check each other.
    On integer-valued inputs it is exact: every partial sum stays far below
    2^53.
    """
    x = np.asarray(x, dtype=np.float64)
    wt = np.asarray(weights, dtype=np.float64)
    out_ch, in_ch, kh, kw = wt.shape
    if x.shape[2] != in_ch:
        raise ValueError(f"input channels {x.shape[2]} != weight channels {in_ch}")
    pad = kh // 2 if pad_same else 0
    if pad:
        x = np.pad(x, ((pad, pad), (pad, pad), (0, 0)))
    oh, ow = x.shape[0] - kh + 1, x.shape[1] - kw + 1
    acc = np.zeros((oh, ow, out_ch))
    for ky in range(kh):
        for kx in range(kw):
            acc += x[ky : ky + oh, kx : kx + ow, :] @ wt[:, :, ky, kx].T
    if bias is not None:
        acc += np.asarray(bias, dtype=np.float64)
    return acc


def requantize(acc: np.ndarray, spec: RequantSpec) -> QuantTensor:
    """Map a raw accumulator onto the unsigned output lattice.

    relu: q = clamp(round_half_even(acc * M), 0, qmax). Clamping at zero
    after the round is equivalent to applying ReLU before it, since a
    non-positive accumulator rounds to a non-positive integer.

    rescaled_hardtanh: q = clamp(round_half_even(acc * M + qmax/2), 0, qmax)
    with M folded by 1/4 and out_scale pinned to 1/qmax, which is exactly
    clamp(real/4 + 1/2, 0, 1) expressed in lattice units.

    Accepts int64 accumulators or their exact float64 image; both produce
    identical results because the multiply happens in float64 either way.
    """
    a = np.asarray(acc, dtype=np.float64)
    r = a * spec.multiplier()
    off = spec.offset()
    if off:
        r = r + off
    p = spec.out_params
    q = np.clip(np.rint(r), p.qmin, p.qmax).astype(np.int32)
    h, wd, c = q.shape
    return QuantTensor(shape=(h, wd, c), data=q.reshape(-1), params=p)


def maxpool_grid(grid: np.ndarray, stride: int, pad_value=0) -> np.ndarray:
    """2x2 max pool on a raw (h, w, c) array.

    stride 2 halves both spatial dims (they must be even). stride 1 keeps
    the shape, padding one row and column at the bottom/right with
    pad_value, which must be the range minimum so padding never wins.
    """
    if grid.ndim != 3:
        raise ValueError(f"expected (h, w, c) grid, got ndim={grid.ndim}")
    h, w = grid.shape[0], grid.shape[1]
    if stride == 2:
        if h % 2 or w % 2:
            raise ValueError(f"stride-2 pool needs even spatial dims, got {h}x{w}")
        blocks = grid.reshape(h // 2, 2, w // 2, 2, grid.shape[2])
        return blocks.max(axis=(1, 3))
    if stride == 1:
        padded = np.pad(grid, ((0, 1), (0, 1), (0, 0)), constant_values=pad_value)
        win = np.lib.stride_tricks.sliding_window_view(padded, (2, 2), axis=(0, 1))
        return win.max(axis=(3, 4))
    raise ValueError(f"unsupported pool stride {stride}")


def maxpool(x: QuantTensor, stride: int) -> QuantTensor:
    """2x2 max pool; lattice parameters pass through unchanged."""
    out = maxpool_grid(x.grid(), stride, pad_value=x.params.qmin)
    h, w, c = out.shape
    return QuantTensor(shape=(h, w, c), data=out.reshape(-1), params=x.params)
