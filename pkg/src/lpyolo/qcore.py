"""Quantized tensor primitives: integer lattices, scales, and rounding.

Every tensor in the integer inference path is a flat integer array plus a
:class:`QuantParams` describing its bit width, signedness, and scale (the
real value of one quantization step). Zero-point is always 0: weights are
symmetric and activations are non-negative, so an offset is never needed.

All real arithmetic is 64-bit, which keeps integer accumulators up to 2**53
exactly representable and makes the quantize/dequantize round trip provable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "QuantParams",
    "QuantTensor",
    "FloatTensor",
    "round_half_even",
    "quantize_scalar",
    "dequantize_scalar",
    "quantize_tensor",
    "dequantize_tensor",
]


@dataclass(frozen=True)
class QuantParams:
    """Bit width (1..8), signedness, and positive real scale of a lattice."""

    bits: int
    signed: bool
    scale: float

    def __post_init__(self) -> None:
        if not 1 <= self.bits <= 8:
            raise ValueError(f"bit width {self.bits} outside 1..8")
        if not (math.isfinite(self.scale) and self.scale > 0.0):
            raise ValueError(f"scale must be positive and finite, got {self.scale}")

    @property
    def qmin(self) -> int:
        return -(1 << (self.bits - 1)) if self.signed else 0

    @property
    def qmax(self) -> int:
        return (1 << (self.bits - 1)) - 1 if self.signed else (1 << self.bits) - 1


def round_half_even(x: float) -> int:
    """Round to the nearest integer, ties to the even integer."""
    x = float(x)
    if not math.isfinite(x):
        raise ValueError(f"cannot round non-finite value {x}")
    return round(x)


def quantize_scalar(x: float, p: QuantParams) -> int:
    """Map a real value onto the lattice: round(x / scale), saturating."""
    x = float(x)
    if not math.isfinite(x):
        raise ValueError(f"cannot quantize non-finite value {x}")
    q = round_half_even(x / p.scale)
    return min(max(q, p.qmin), p.qmax)


def dequantize_scalar(q: int, p: QuantParams) -> float:
    """Real value of a lattice point: q * scale."""
    if not p.qmin <= q <= p.qmax:
        raise ValueError(f"quantized value {q} outside [{p.qmin}, {p.qmax}]")
    return q * p.scale


@dataclass(frozen=True)
class QuantTensor:
    """Integer tensor in HWC row-major order with its lattice parameters.

    One int32 slot per element regardless of bit width; sub-byte packing is
    an on-the-wire concern, not an in-memory one.
    """

    shape: tuple[int, int, int]
    data: np.ndarray = field(repr=False)
    params: QuantParams

    def __post_init__(self) -> None:
        h, w, c = self.shape
        n = h * w * c
        if self.data.ndim != 1 or self.data.size != n:
            raise ValueError(f"data length {self.data.size} != {h}*{w}*{c}")
        if not np.issubdtype(self.data.dtype, np.integer):
            raise ValueError(f"expected integer data, got {self.data.dtype}")
        lo, hi = int(self.data.min(initial=0)), int(self.data.max(initial=0))
        if lo < self.params.qmin or hi > self.params.qmax:
            raise ValueError(
                f"values [{lo}, {hi}] exceed lattice range "
                f"[{self.params.qmin}, {self.params.qmax}]"
            )

    @classmethod
    def from_grid(cls, grid: np.ndarray, params: QuantParams) -> "QuantTensor":
        arr = np.ascontiguousarray(grid, dtype=np.int32)
        return cls(shape=tuple(arr.shape), data=arr.reshape(-1), params=params)

    def grid(self) -> np.ndarray:
        """(h, w, c) view of the flat data."""
        return self.data.reshape(self.shape)


@dataclass(frozen=True)
class FloatTensor:
    """Finite float64 tensor in HWC row-major order (reference-path carrier)."""

    shape: tuple[int, int, int]
    data: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        h, w, c = self.shape
        if self.data.ndim != 1 or self.data.size != h * w * c:
            raise ValueError(f"data length {self.data.size} != {h}*{w}*{c}")
        if self.data.dtype != np.float64:
            raise ValueError(f"expected float64 data, got {self.data.dtype}")
        if not np.isfinite(self.data).all():
            raise ValueError("non-finite values in tensor")

    @classmethod
    def from_grid(cls, grid: np.ndarray) -> "FloatTensor":
        arr = np.ascontiguousarray(grid, dtype=np.float64)
        return cls(shape=tuple(arr.shape), data=arr.reshape(-1))

    def grid(self) -> np.ndarray:
        return self.data.reshape(self.shape)


def quantize_tensor(t: FloatTensor, p: QuantParams) -> QuantTensor:
    """Element-wise quantize_scalar; shape preserved."""
    q = np.clip(np.rint(t.data / p.scale), p.qmin, p.qmax).astype(np.int32)
    return QuantTensor(shape=t.shape, data=q, params=p)


def dequantize_tensor(t: QuantTensor) -> FloatTensor:
    """Element-wise dequantize_scalar; shape preserved."""
    return FloatTensor(shape=t.shape, data=t.data.astype(np.float64) * t.params.scale)
