"""Bitpacked +-1 tensors and XNOR-popcount compute kernels.

Packing convention: the tensor is flattened row-major, bit i of the logical
tensor lives in word i // 64 at bit position i mod 64 (LSB-first).  Bit value
1 encodes +1, bit value 0 encodes -1.  Trailing pad bits of the last word are
always zero, so structural equality equals semantic equality.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

WORD_BITS = 64


class BitShapeError(ValueError):
    pass


def _pack01(bits01: np.ndarray) -> np.ndarray:
    """Pack a flat 0/1 array into little-endian uint64 words (last axis packed)."""
    packed = np.packbits(bits01.astype(np.uint8, copy=False), axis=-1, bitorder="little")
    n_words = max(1, -(-bits01.shape[-1] // WORD_BITS)) if bits01.shape[-1] else 0
    pad = n_words * 8 - packed.shape[-1]
    if pad:
        packed = np.concatenate(
            [packed, np.zeros(packed.shape[:-1] + (pad,), dtype=np.uint8)], axis=-1
        )
    packed = np.ascontiguousarray(packed)
    return packed.view("<u8").reshape(bits01.shape[:-1] + (n_words,)).astype(np.uint64)


def _unpack01(words: np.ndarray, n: int) -> np.ndarray:
    """Inverse of _pack01: recover the first n bits of each row as 0/1 uint8."""
    as_bytes = np.ascontiguousarray(words, dtype="<u8").view(np.uint8)
    bits = np.unpackbits(as_bytes, axis=-1, bitorder="little")
    return bits[..., :n]


def popcount(words: np.ndarray) -> np.ndarray:
    return np.bitwise_count(words)


@dataclass(frozen=True)
class BitTensor:
    shape: tuple[int, ...]
    words: np.ndarray = field(repr=False)  # uint64, 1-D, canonical (pad bits zero)

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(d) for d in self.shape))
        object.__setattr__(self, "words", np.asarray(self.words, dtype=np.uint64).ravel())
        n = self.size
        expected = -(-n // WORD_BITS)
        if self.words.shape[0] != expected:
            raise BitShapeError(f"{expected} words expected for {n} bits, got {self.words.shape[0]}")

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64)) if self.shape else 1

    def unpack01(self) -> np.ndarray:
        """Logical bits as a 0/1 uint8 array of self.shape."""
        return _unpack01(self.words, self.size).reshape(self.shape)

    def unpack(self) -> np.ndarray:
        """Logical values as a +-1 int8 array of self.shape."""
        return (self.unpack01().astype(np.int8) * 2) - 1

    def reshape(self, shape: tuple[int, ...]) -> "BitTensor":
        if int(np.prod(shape, dtype=np.int64)) != self.size:
            raise BitShapeError(f"cannot reshape {self.shape} to {shape}")
        return BitTensor(shape=tuple(shape), words=self.words)

    def __eq__(self, other) -> bool:
        if not isinstance(other, BitTensor):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.words, other.words)


def from01(bits01: np.ndarray) -> BitTensor:
    """Build a BitTensor from a 0/1 array (0 encodes -1)."""
    a = np.asarray(bits01)
    return BitTensor(shape=a.shape, words=_pack01(a.reshape(-1)))


def pack(values) -> BitTensor:
    """Pack a +-1 array into canonical bitpacked form."""
    a = np.asarray(values)
    if not np.all(np.isin(a, (-1, 1))):
        raise ValueError("pack expects values in {-1, +1}")
    return from01(a == 1)


def unpack(b: BitTensor) -> np.ndarray:
    return b.unpack()


def binarize(x) -> BitTensor:
    """Sign binarization: bit set iff value >= 0 (ties at 0 go to +1)."""
    from .quant import QuantizedTensor  # local import to avoid a cycle

    if isinstance(x, QuantizedTensor):
        vals = x.data - x.params.zero_point
    elif isinstance(x, BitTensor):
        return x
    else:
        vals = np.asarray(x)
    return from01(vals >= 0)


def xnor_dot(a: BitTensor, b: BitTensor) -> int:
    """Sum of elementwise +-1 products, computed as n - 2*popcount(a XOR b)."""
    if a.size != b.size:
        raise BitShapeError(f"length mismatch: {a.size} vs {b.size}")
    return a.size - 2 * int(popcount(a.words ^ b.words).sum())


def _packed_rows(bits01_2d: np.ndarray) -> np.ndarray:
    """Pack each row of a 2-D 0/1 array into word-aligned uint64 rows."""
    return _pack01(bits01_2d)


def _xnor_gemm(a_rows: np.ndarray, b_rows: np.ndarray, k: int) -> np.ndarray:
    """a_rows (m, W) vs b_rows (n, W) packed over a k-long inner axis -> (m, n) int32."""
    diff = popcount(a_rows[:, None, :] ^ b_rows[None, :, :]).sum(axis=-1, dtype=np.int64)
    return (k - 2 * diff).astype(np.int32)


def bin_matmul(a: BitTensor, w: BitTensor) -> np.ndarray:
    """Binary matrix product over +-1 semantics; exact int32 result.

    a has shape (m, k), w has shape (k, n).
    """
    if len(a.shape) != 2 or len(w.shape) != 2:
        raise BitShapeError("bin_matmul expects 2-D operands")
    m, k = a.shape
    k2, n = w.shape
    if k != k2:
        raise BitShapeError(f"inner dimensions disagree: {a.shape} x {w.shape}")
    a_rows = _packed_rows(a.unpack01())
    w_cols = _packed_rows(w.unpack01().T)
    return _xnor_gemm(a_rows, w_cols, k)


@dataclass(frozen=True)
class BinConvSpec:
    kernel_h: int
    kernel_w: int
    stride: int
    padding: int
    in_channels: int
    out_channels: int

    def __post_init__(self):
        if self.kernel_h < 1 or self.kernel_w < 1:
            raise ValueError("kernel extents must be >= 1")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if self.padding < 0:
            raise ValueError("padding must be >= 0")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be >= 1")

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        oh = (h + 2 * self.padding - self.kernel_h) // self.stride + 1
        ow = (w + 2 * self.padding - self.kernel_w) // self.stride + 1
        if oh < 1 or ow < 1:
            raise BitShapeError(f"kernel {self.kernel_h}x{self.kernel_w} too large for input {h}x{w}")
        return oh, ow


def _patches01(x01: np.ndarray, spec: BinConvSpec) -> np.ndarray:
    """im2col on a 0/1 NHWC array; padded positions get 0 (i.e. -1)."""
    n, h, w, c = x01.shape
    oh, ow = spec.out_hw(h, w)
    p = spec.padding
    if p:
        x01 = np.pad(x01, ((0, 0), (p, p), (p, p), (0, 0)), constant_values=0)
    cols = np.empty((n, oh, ow, spec.kernel_h, spec.kernel_w, c), dtype=np.uint8)
    s = spec.stride
    for i in range(spec.kernel_h):
        for j in range(spec.kernel_w):
            cols[:, :, :, i, j, :] = x01[:, i : i + oh * s : s, j : j + ow * s : s, :]
    return cols.reshape(n * oh * ow, spec.kernel_h * spec.kernel_w * c)


def bin_conv2d(x: BitTensor, w: BitTensor, spec: BinConvSpec) -> np.ndarray:
    """Binary 2-D convolution (NHWC x KHWIO) via im2col + XNOR gemm.

    Padded positions contribute -1.  Returns exact int32 counts of shape
    (N, OH, OW, out_channels); every element lies in [-K, K] with
    K = kernel_h * kernel_w * in_channels.
    """
    if len(x.shape) != 4:
        raise BitShapeError(f"input must be NHWC, got shape {x.shape}")
    if x.shape[3] != spec.in_channels:
        raise BitShapeError(f"input channels {x.shape[3]} != spec {spec.in_channels}")
    expected_w = (spec.kernel_h, spec.kernel_w, spec.in_channels, spec.out_channels)
    if w.shape != expected_w:
        raise BitShapeError(f"weight shape {w.shape} != spec {expected_w}")
    n, h, wd, _ = x.shape
    oh, ow = spec.out_hw(h, wd)
    k = spec.kernel_h * spec.kernel_w * spec.in_channels
    a_rows = _packed_rows(_patches01(x.unpack01(), spec))
    w_cols = _packed_rows(w.unpack01().reshape(k, spec.out_channels).T)
    return _xnor_gemm(a_rows, w_cols, k).reshape(n, oh, ow, spec.out_channels)
