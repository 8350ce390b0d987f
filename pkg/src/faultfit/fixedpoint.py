"""Signed two's-complement fixed-point values and single-bit faults.

Parameters live as floats during simulation. A fault site is converted to
fixed point, one bit is toggled, and the result is converted back.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np

_QFORMAT_RE = re.compile(r"^Q(\d+)\.(\d+)$")


@dataclass(frozen=True)
class QFormat:
    """Fixed-point layout with one sign bit, ``int_bits`` and ``frac_bits``."""

    width: int
    int_bits: int
    frac_bits: int

    def __post_init__(self):
        if self.int_bits < 0 or self.frac_bits < 0:
            raise ValueError(f"bit counts must be non-negative, got {self!r}")
        if not 1 <= self.width <= 64:
            raise ValueError(f"width must be in [1, 64], got {self.width}")
        if self.width != 1 + self.int_bits + self.frac_bits:
            raise ValueError(
                f"width {self.width} != 1 + {self.int_bits} + {self.frac_bits}"
            )

    @classmethod
    def from_width(cls, width: int, frac_bits: int) -> QFormat:
        return cls(width, width - 1 - frac_bits, frac_bits)

    @classmethod
    def parse(cls, text: str) -> QFormat:
        """Parse ``"Q<W>.<F>"``, e.g. ``"Q16.12"``."""
        m = _QFORMAT_RE.match(text.strip())
        if m is None:
            raise ValueError(f"expected 'Q<W>.<F>', got {text!r}")
        return cls.from_width(int(m.group(1)), int(m.group(2)))

    def __str__(self) -> str:
        return f"Q{self.width}.{self.frac_bits}"

    @property
    def raw_min(self) -> int:
        return -(1 << (self.width - 1))

    @property
    def raw_max(self) -> int:
        return (1 << (self.width - 1)) - 1

    @property
    def lsb(self) -> float:
        return math.ldexp(1.0, -self.frac_bits)


@dataclass(frozen=True)
class FixedValue:
    raw: int
    fmt: QFormat

    def __post_init__(self):
        if not self.fmt.raw_min <= self.raw <= self.fmt.raw_max:
            raise ValueError(f"raw {self.raw} outside {self.fmt} range")

    @property
    def value(self) -> float:
        return dequantize(self)


def _round_half_away(y: float) -> int:
    # floor + exact remainder avoids the y + 0.5 rounding trap near 2**52
    a = abs(y)
    r = math.floor(a)
    if a - r >= 0.5:
        r += 1
    return -r if y < 0 else r


def quantize(x: float, fmt: QFormat) -> FixedValue:
    """Round half away from zero onto the grid, then saturate."""
    x = float(x)
    if not math.isfinite(x):
        raise ValueError(f"cannot quantize non-finite value {x}")
    # |x| >= 2**(I+1) saturates; checking first keeps ldexp from overflowing
    bound = math.ldexp(1.0, fmt.width - fmt.frac_bits)
    if abs(x) >= bound:
        return FixedValue(fmt.raw_max if x > 0 else fmt.raw_min, fmt)
    raw = _round_half_away(math.ldexp(x, fmt.frac_bits))
    return FixedValue(min(max(raw, fmt.raw_min), fmt.raw_max), fmt)


def dequantize(v: FixedValue) -> float:
    return math.ldexp(float(v.raw), -v.fmt.frac_bits)


def flip_bit(v: FixedValue, bit_index: int) -> FixedValue:
    """Toggle one bit of the W-bit pattern; bit ``W-1`` is the sign bit."""
    width = v.fmt.width
    if not 0 <= bit_index < width:
        raise ValueError(f"bit index {bit_index} outside [0, {width - 1}]")
    u = (v.raw & ((1 << width) - 1)) ^ (1 << bit_index)
    if u >> (width - 1):
        u -= 1 << width
    return FixedValue(u, v.fmt)


def perturb_float(x: float, fmt: QFormat, bit_index: int) -> float:
    return dequantize(flip_bit(quantize(x, fmt), bit_index))


# Vectorised counterparts, used for bulk checks. Limited to width <= 62 so that
# intermediate values stay inside int64.


def _check_vector_width(fmt: QFormat) -> None:
    if fmt.width > 62:
        raise ValueError("array helpers support widths up to 62 bits")


def quantize_array(x, fmt: QFormat) -> np.ndarray:
    _check_vector_width(fmt)
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("cannot quantize non-finite values")
    bound = math.ldexp(1.0, fmt.width - fmt.frac_bits)
    y = np.abs(np.ldexp(np.clip(x, -bound, bound), fmt.frac_bits))
    r = np.floor(y)
    r = r + (y - r >= 0.5)
    raw = np.where(x < 0, -r, r).astype(np.int64)
    return np.clip(raw, fmt.raw_min, fmt.raw_max)


def dequantize_array(raw, fmt: QFormat) -> np.ndarray:
    return np.ldexp(np.asarray(raw, dtype=np.int64).astype(np.float64), -fmt.frac_bits)


def flip_bit_array(raw, fmt: QFormat, bit_index) -> np.ndarray:
    _check_vector_width(fmt)
    raw = np.asarray(raw, dtype=np.int64)
    bit_index = np.asarray(bit_index, dtype=np.int64)
    if np.any((bit_index < 0) | (bit_index >= fmt.width)):
        raise ValueError(f"bit index outside [0, {fmt.width - 1}]")
    mask = np.int64((1 << fmt.width) - 1)
    u = (raw & mask) ^ (np.int64(1) << bit_index)
    return np.where(u >> (fmt.width - 1) != 0, u - (np.int64(1) << fmt.width), u)
