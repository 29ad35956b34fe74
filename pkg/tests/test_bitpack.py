"""Bitpacked tensors and XNOR-popcount kernels against independent oracles."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from binreplay.bitpack import (
    BinConvSpec,
    BitShapeError,
    BitTensor,
    bin_conv2d,
    bin_matmul,
    binarize,
    from01,
    pack,
    popcount,
    unpack,
    xnor_dot,
)
from binreplay.quant import QuantParams, QuantizedTensor
from helpers import naive_conv2d_pm1


class TestPackUnpack:
    @given(st.lists(st.sampled_from([-1, 1]), min_size=1, max_size=300))
    @settings(max_examples=200, deadline=None)
    def test_round_trip(self, values):
        a = np.array(values, dtype=np.int8)
        assert np.array_equal(unpack(pack(a)), a)

    def test_multidimensional_round_trip(self, rng):
        a = rng.choice([-1, 1], size=(3, 5, 7)).astype(np.int8)
        b = pack(a)
        assert b.shape == (3, 5, 7)
        assert np.array_equal(b.unpack(), a)

    def test_pack_rejects_non_pm1(self):
        with pytest.raises(ValueError):
            pack(np.array([1, 0, -1]))

    def test_pad_bits_canonically_zero(self, rng):
        # equality must be structural: same logical bits => same words
        a = rng.choice([-1, 1], size=70).astype(np.int8)
        t1 = pack(a)
        words = t1.words.copy()
        words[-1] |= np.uint64(1) << np.uint64(63)  # poke a pad bit
        assert int(t1.words[-1] >> np.uint64(6)) == 0
        assert pack(a) == t1

    def test_word_count_validation(self):
        with pytest.raises(BitShapeError):
            BitTensor(shape=(65,), words=np.zeros(1, dtype=np.uint64))

    def test_reshape(self):
        t = from01(np.arange(12) % 2)
        r = t.reshape((3, 4))
        assert r.shape == (3, 4)
        assert np.array_equal(r.unpack01().ravel(), t.unpack01())
        with pytest.raises(BitShapeError):
            t.reshape((5, 3))

    def test_popcount(self):
        assert popcount(np.array([0xFF, 0x0, 0b1011], dtype=np.uint64)).tolist() == [8, 0, 3]


class TestBinarize:
    def test_sign_with_ties_positive(self):
        t = binarize(np.array([-0.5, 0.0, 2.0, -3.0]))
        assert t.unpack().tolist() == [-1, 1, 1, -1]

    def test_quantized_tensor_uses_zero_point(self):
        p = QuantParams(bits=8, scale=0.1, zero_point=100, signed=False)
        q = QuantizedTensor(data=np.array([99, 100, 150]), params=p)
        assert binarize(q).unpack().tolist() == [-1, 1, 1]

    def test_bit_tensor_passthrough(self):
        t = pack(np.array([1, -1]))
        assert binarize(t) is t


class TestXnorDot:
    def test_matches_float_oracle(self, rng):
        for _ in range(100):
            n = int(rng.integers(1, 200))
            a = rng.choice([-1, 1], size=n)
            b = rng.choice([-1, 1], size=n)
            assert xnor_dot(pack(a), pack(b)) == int(a @ b)

    @given(st.integers(1, 128), st.integers(0, 2**32))
    @settings(max_examples=100, deadline=None)
    def test_parity(self, n, seed):
        # sum of n values in {-1, +1} always has the parity of n
        r = np.random.default_rng(seed)
        a, b = r.choice([-1, 1], size=(2, n))
        assert (xnor_dot(pack(a), pack(b)) - n) % 2 == 0

    def test_length_mismatch(self):
        with pytest.raises(BitShapeError):
            xnor_dot(pack(np.ones(3)), pack(np.ones(4)))


class TestBinMatmul:
    def test_matches_float_oracle(self, rng):
        for _ in range(50):
            m, k, n = (int(v) for v in rng.integers(1, 33, size=3))
            a = rng.choice([-1, 1], size=(m, k))
            w = rng.choice([-1, 1], size=(k, n))
            got = bin_matmul(pack(a), pack(w))
            assert got.dtype == np.int32
            assert np.array_equal(got, a @ w)

    def test_inner_dim_mismatch(self):
        with pytest.raises(BitShapeError):
            bin_matmul(pack(np.ones((2, 3))), pack(np.ones((4, 2))))


class TestBinConv2d:
    @pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (2, 0)])
    def test_matches_nested_loop_oracle(self, stride, padding, rng):
        for _ in range(10):
            n = int(rng.integers(1, 3))
            h, wd = (int(v) for v in rng.integers(4, 9, size=2))
            cin, cout = (int(v) for v in rng.integers(1, 5, size=2))
            kh, kw = (int(v) for v in rng.integers(1, 4, size=2))
            x = rng.choice([-1, 1], size=(n, h, wd, cin))
            w = rng.choice([-1, 1], size=(kh, kw, cin, cout))
            spec = BinConvSpec(kh, kw, stride, padding, cin, cout)
            got = bin_conv2d(pack(x), pack(w), spec)
            assert np.array_equal(got, naive_conv2d_pm1(x, w, stride, padding))

    def test_1x1_kernel_is_per_pixel_dot(self, rng):
        x = rng.choice([-1, 1], size=(2, 5, 5, 8))
        w = rng.choice([-1, 1], size=(1, 1, 8, 3))
        spec = BinConvSpec(1, 1, 1, 0, 8, 3)
        got = bin_conv2d(pack(x), pack(w), spec)
        want = np.einsum("nhwc,co->nhwo", x, w[0, 0])
        assert np.array_equal(got, want)

    def test_output_bounds(self, rng):
        spec = BinConvSpec(3, 3, 1, 1, 4, 6)
        x = rng.choice([-1, 1], size=(2, 8, 8, 4))
        w = rng.choice([-1, 1], size=(3, 3, 4, 6))
        out = bin_conv2d(pack(x), pack(w), spec)
        k = 3 * 3 * 4
        assert out.min() >= -k and out.max() <= k

    def test_shape_validation(self):
        spec = BinConvSpec(3, 3, 1, 1, 4, 6)
        with pytest.raises(BitShapeError):
            bin_conv2d(pack(np.ones((2, 8, 8, 3))), pack(np.ones((3, 3, 4, 6))), spec)
        with pytest.raises(BitShapeError):
            bin_conv2d(pack(np.ones((2, 8, 8, 4))), pack(np.ones((3, 3, 3, 6))), spec)

    def test_kernel_too_large(self):
        spec = BinConvSpec(9, 9, 1, 0, 1, 1)
        with pytest.raises(BitShapeError):
            spec.out_hw(4, 4)
