"""Fixed-point tensor representation and quantization primitives.

Activations use an unsigned affine scheme (scale + zero point), weights and
gradients a signed symmetric one (zero point pinned to 0).  All rounding is
round-half-to-even for reproducibility across platforms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

VALID_BITS = (8, 16, 32)

# storage dtype per bitwidth, used by the file format
STORAGE_DTYPE = {8: np.int8, 16: np.int16, 32: np.int32}


class QuantError(ValueError):
    pass


class OverflowRiskError(QuantError):
    """Raised at construction time when a qmatmul could overflow its accumulator."""


@dataclass(frozen=True)
class QuantParams:
    bits: int
    scale: float
    zero_point: int
    signed: bool

    def __post_init__(self):
        if self.bits not in VALID_BITS:
            raise QuantError(f"bits must be one of {VALID_BITS}, got {self.bits}")
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise QuantError(f"scale must be positive and finite, got {self.scale}")
        if self.signed and self.zero_point != 0:
            raise QuantError("signed quantization requires zero_point = 0")
        if not self.signed and not (0 <= self.zero_point <= 2**self.bits - 1):
            raise QuantError(f"unsigned zero_point {self.zero_point} outside [0, {2**self.bits - 1}]")

    @property
    def qmin(self) -> int:
        return -(2 ** (self.bits - 1)) if self.signed else 0

    @property
    def qmax(self) -> int:
        return 2 ** (self.bits - 1) - 1 if self.signed else 2**self.bits - 1


@dataclass(frozen=True)
class QuantizedTensor:
    data: np.ndarray  # integer values, always held as int64 in memory
    params: QuantParams

    def __post_init__(self):
        object.__setattr__(self, "data", np.asarray(self.data, dtype=np.int64))
        lo, hi = int(self.data.min(initial=0)), int(self.data.max(initial=0))
        if lo < self.params.qmin or hi > self.params.qmax:
            raise QuantError(
                f"stored values [{lo}, {hi}] do not fit {self.params.bits}-bit "
                f"range [{self.params.qmin}, {self.params.qmax}]"
            )

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape


def calibrate_range(samples: Iterable[np.ndarray]) -> tuple[float, float]:
    """Observed global min/max over a stream of float tensors.

    A degenerate range (min == max) is widened by +-0.5 so the derived scale
    is never zero.
    """
    lo = math.inf
    hi = -math.inf
    seen = False
    for s in samples:
        a = np.asarray(s, dtype=np.float64)
        if a.size == 0:
            continue
        if not np.all(np.isfinite(a)):
            raise QuantError("calibration data contains non-finite values")
        seen = True
        lo = min(lo, float(a.min()))
        hi = max(hi, float(a.max()))
    if not seen:
        raise QuantError("no calibration data")
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    return lo, hi


def quant_params(lo: float, hi: float, bits: int, signed: bool) -> QuantParams:
    """Derive scale/zero-point for range [lo, hi].

    Signed mode symmetrizes the range to [-m, m] with m = max(|lo|, |hi|);
    unsigned mode uses an affine zero point so lo maps near integer 0.
    """
    if not lo < hi:
        raise QuantError(f"invalid range: min {lo} >= max {hi}")
    levels = 2**bits - 1
    if signed:
        m = max(abs(lo), abs(hi))
        return QuantParams(bits=bits, scale=2.0 * m / levels, zero_point=0, signed=True)
    scale = (hi - lo) / levels
    zp = int(np.clip(np.rint(-lo / scale), 0, levels))
    return QuantParams(bits=bits, scale=scale, zero_point=zp, signed=False)


def quantize(x: np.ndarray, p: QuantParams) -> QuantizedTensor:
    """Map float values onto the integer grid; out-of-range values saturate."""
    x = np.asarray(x, dtype=np.float64)
    q = np.rint(x / p.scale) + p.zero_point
    q = np.clip(q, p.qmin, p.qmax)
    return QuantizedTensor(data=q.astype(np.int64), params=p)


def dequantize(q: QuantizedTensor) -> np.ndarray:
    return (q.data - q.params.zero_point) * q.params.scale


def _fixed_point_multiplier(ratio: float) -> tuple[int, int]:
    """Express a positive real ratio as (mantissa, right_shift) with a 31-bit mantissa."""
    if ratio <= 0:
        raise QuantError(f"scale ratio must be positive, got {ratio}")
    frac, exp = math.frexp(ratio)  # ratio = frac * 2**exp, 0.5 <= frac < 1
    mant = round(frac * (1 << 31))
    shift = 31 - exp
    if mant == 1 << 31:  # frac rounded up to 1.0
        mant >>= 1
        shift -= 1
    return mant, shift


def requantize(q: QuantizedTensor, target: QuantParams) -> QuantizedTensor:
    """Re-express q on the target grid using only integer arithmetic.

    The scale ratio is applied as a 32-bit fixed-point multiplier followed by
    a rounding right shift, matching what an integer-only device would run.
    """
    if q.params == target:
        return QuantizedTensor(data=q.data.copy(), params=target)
    mant, shift = _fixed_point_multiplier(q.params.scale / target.scale)
    centered = q.data - q.params.zero_point
    prod = centered * mant  # |centered| < 2^32, mant < 2^31: fits int64
    if shift > 0:
        out = (prod + (1 << (shift - 1))) >> shift
    else:
        out = prod << (-shift)
    out = np.clip(out + target.zero_point, target.qmin, target.qmax)
    return QuantizedTensor(data=out, params=target)


def check_matmul_headroom(inner_dim: int, a: QuantParams, b: QuantParams) -> None:
    """Raise if a matmul over inner_dim could overflow a 32-bit accumulator."""
    amax = max(abs(a.qmin - a.zero_point), abs(a.qmax - a.zero_point))
    bmax = max(abs(b.qmin - b.zero_point), abs(b.qmax - b.zero_point))
    if inner_dim * amax * bmax >= 2**31:
        raise OverflowRiskError(
            f"inner dim {inner_dim} with {a.bits}x{b.bits}-bit operands "
            "can overflow the 32-bit accumulator"
        )


def qmatmul(a: QuantizedTensor, b: QuantizedTensor) -> QuantizedTensor:
    """Integer matrix product with 32-bit accumulation.

    Output is a signed 32-bit tensor whose scale is the product of the input
    scales; callers requantize to whatever grid they need.
    """
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise QuantError("qmatmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise QuantError(f"inner dimensions disagree: {a.shape} x {b.shape}")
    check_matmul_headroom(a.shape[1], a.params, b.params)
    acc = (a.data - a.params.zero_point) @ (b.data - b.params.zero_point)
    out_params = QuantParams(
        bits=32, scale=a.params.scale * b.params.scale, zero_point=0, signed=True
    )
    return QuantizedTensor(data=acc, params=out_params)
