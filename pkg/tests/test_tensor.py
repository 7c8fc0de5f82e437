"""Tensor kernels: deterministic arithmetic, statistics, QTNS io."""

import numpy as np
import pytest

import onegraph as og
from onegraph import tensor as tz
from onegraph.errors import FormatError, RangeError, ShapeError
from onegraph.rng import Rng


def naive_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n), dtype=np.float32)
    for i in range(m):
        for j in range(n):
            acc = np.float32(0.0)
            for kk in range(k):
                acc = np.float32(acc + np.float32(a[i, kk] * b[kk, j]))
            out[i, j] = acc
    return out


class TestMatmul:
    def test_identity(self):
        x = np.array([[1, 2], [3, 4]], dtype=np.float32)
        eye = np.eye(2, dtype=np.float32)
        assert np.array_equal(og.matmul(eye, x), x)

    def test_annihilator(self):
        eye = np.eye(2, dtype=np.float32)
        z = np.zeros((2, 3), dtype=np.float32)
        assert np.array_equal(og.matmul(eye, z), z)

    def test_matches_triple_loop(self):
        rng = Rng(1234)
        a = rng.uniform((3, 4), -2, 2)
        b = rng.uniform((4, 2), -2, 2)
        assert np.array_equal(og.matmul(a, b), naive_matmul(a, b))

    def test_matches_triple_loop_many(self):
        for seed in range(10):
            rng = Rng(seed)
            a = rng.uniform((5, 7), -3, 3)
            b = rng.uniform((7, 4), -3, 3)
            assert np.array_equal(og.matmul(a, b), naive_matmul(a, b))

    def test_shape_mismatch(self):
        a = np.zeros((2, 3), dtype=np.float32)
        with pytest.raises(ShapeError):
            og.matmul(a, a)

    def test_rejects_non_fp32(self):
        a = np.zeros((2, 2), dtype=np.int8)
        with pytest.raises(ShapeError):
            og.matmul(a, a.astype(np.float32))


class TestElementwise:
    def test_additive_identity(self):
        x = Rng(3).uniform((4, 5), -1, 1)
        assert np.array_equal(og.elementwise(x, np.zeros_like(x), "add"), x)

    def test_multiplicative_identity(self):
        x = Rng(4).uniform((4, 5), -1, 1)
        assert np.array_equal(og.elementwise(x, np.ones_like(x), "mul"), x)

    def test_add_values(self):
        a = np.array([1.0, 2.0], dtype=np.float32)
        b = np.array([3.0, 4.0], dtype=np.float32)
        assert np.array_equal(og.elementwise(a, b, "add"), np.array([4.0, 6.0], dtype=np.float32))

    def test_commutative_bitwise(self):
        rng = Rng(5)
        a = rng.uniform((8, 8), -10, 10)
        b = rng.uniform((8, 8), -10, 10)
        assert np.array_equal(og.elementwise(a, b, "add"), og.elementwise(b, a, "add"))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            og.elementwise(np.zeros((2,), np.float32), np.zeros((3,), np.float32), "add")


class TestActivation:
    def test_relu(self):
        x = np.array([-1.0, 2.0], dtype=np.float32)
        assert np.array_equal(og.activation(x, "relu"), np.array([0.0, 2.0], dtype=np.float32))

    def test_silu_zero(self):
        x = np.zeros((1,), dtype=np.float32)
        assert og.activation(x, "silu")[0] == 0.0

    def test_silu_formula(self):
        x = Rng(6).uniform((100,), -4, 4)
        expected = (x * (1.0 / (1.0 + np.exp(-x.astype(np.float64))))).astype(np.float32)
        assert np.allclose(og.activation(x, "silu"), expected, atol=1e-6)


class TestConv2d:
    def test_matches_direct_loops(self):
        rng = Rng(7)
        x = rng.uniform((1, 2, 5, 5), -1, 1)
        w = rng.uniform((3, 2, 3, 3), -1, 1)
        out = og.conv2d(x, w, stride=(2, 2), padding=(1, 1))
        # dumb reference: pad, then explicit dot per output pixel
        xp = np.zeros((1, 2, 7, 7), dtype=np.float32)
        xp[:, :, 1:6, 1:6] = x
        ref = np.zeros_like(out)
        for co in range(3):
            for oy in range(out.shape[2]):
                for ox in range(out.shape[3]):
                    patch = xp[0, :, 2 * oy:2 * oy + 3, 2 * ox:2 * ox + 3].astype(np.float64)
                    ref[0, co, oy, ox] = np.sum(patch * w[co].astype(np.float64))
        assert np.allclose(out, ref, atol=1e-5)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            og.conv2d(np.zeros((1, 2, 4, 4), np.float32), np.zeros((1, 3, 3, 3), np.float32))


class TestHistogram:
    def test_constant_tensor_single_bin(self):
        x = np.full((50,), 0.25, dtype=np.float32)
        h = og.histogram(x, 4, 0.0, 1.0)
        assert h.total == 50
        assert h.counts[1] == 50

    def test_two_bins(self):
        x = np.array([0.0, 1.0], dtype=np.float32)
        h = og.histogram(x, 2, 0.0, 1.0)
        assert list(h.counts) == [1, 1]

    def test_uniform_four_bins(self):
        x = Rng(2024).uniform((10_000,), 0.0, 1.0)
        h = og.histogram(x, 4, 0.0, 1.0)
        # counting oracle
        manual = [0, 0, 0, 0]
        for v in x:
            idx = min(int(v * 4), 3)
            manual[idx] += 1
        assert list(h.counts) == manual
        for c in h.counts:
            assert abs(c - 2500) < 0.05 * 2500

    def test_total_preserved_with_outliers(self):
        x = np.array([-5.0, 0.5, 9.0], dtype=np.float32)
        h = og.histogram(x, 3, 0.0, 1.0)
        assert h.total == 3

    def test_degenerate_range(self):
        with pytest.raises(RangeError):
            og.histogram(np.zeros((3,), np.float32), 4, 1.0, 1.0)

    def test_too_few_bins(self):
        with pytest.raises(RangeError):
            og.histogram(np.zeros((3,), np.float32), 1, 0.0, 1.0)


class TestCosine:
    def test_self_similarity(self):
        v = Rng(8).uniform((32,), -1, 1)
        assert og.cosine_similarity(v, v) == pytest.approx(1.0, abs=1e-6)

    def test_antiparallel(self):
        v = Rng(9).uniform((32,), -1, 1)
        assert og.cosine_similarity(v, -v) == pytest.approx(-1.0, abs=1e-6)

    def test_orthogonal(self):
        a = np.array([1.0, 0.0], dtype=np.float32)
        b = np.array([0.0, 1.0], dtype=np.float32)
        assert og.cosine_similarity(a, b) == 0.0

    def test_zero_norm_error(self):
        z = np.zeros((4,), dtype=np.float32)
        with pytest.raises(RangeError):
            og.cosine_similarity(z, z)


class TestPsnr:
    def test_identical_capped(self):
        x = Rng(10).uniform((16,), 0, 1)
        assert og.psnr(x, x, 1.0) == 99.0

    def test_full_scale_error(self):
        ref = np.zeros((1,), dtype=np.float32)
        test = np.full((1,), 2.0, dtype=np.float32)
        assert og.psnr(ref, test, 2.0) == pytest.approx(0.0, abs=1e-9)

    def test_matches_direct_formula(self):
        rng = Rng(11)
        ref = rng.uniform((64,), 0, 1)
        test = ref + rng.uniform((64,), -0.05, 0.05)
        mse = float(np.mean((ref.astype(np.float64) - test.astype(np.float64)) ** 2))
        expected = 10.0 * np.log10(1.0 / mse)
        assert og.psnr(ref, test, 1.0) == pytest.approx(expected, abs=1e-6)


class TestRng:
    def test_deterministic(self):
        assert np.array_equal(Rng(42).normal((100,)), Rng(42).normal((100,)))
        assert np.array_equal(Rng(42).uniform((100,)), Rng(42).uniform((100,)))

    def test_child_streams_differ(self):
        base = Rng(42)
        a = base.child("a").uniform((50,))
        b = base.child("b").uniform((50,))
        assert not np.array_equal(a, b)

    def test_normal_moments(self):
        z = Rng(1).normal((200_000,))
        assert abs(float(z.mean())) < 0.01
        assert abs(float(z.std()) - 1.0) < 0.01


class TestQtns:
    def test_roundtrip(self, tmp_path):
        for dtype in (np.float32, np.int8, np.int16, np.int32):
            arr = (Rng(12).uniform((3, 4, 2), -100, 100)).astype(dtype)
            path = tmp_path / f"{np.dtype(dtype).name}.qtns"
            og.write_qtns(path, arr)
            back = og.read_qtns(path)
            assert back.dtype == arr.dtype
            assert np.array_equal(back, arr)

    def test_header_layout(self):
        arr = np.zeros((2, 3), dtype=np.int8)
        raw = tz.qtns_bytes(arr)
        assert raw[:4] == b"QTNS"
        assert raw[4:6] == b"\x01\x00"   # version 1, little-endian
        assert raw[6] == 1               # dtype code i8
        assert raw[7] == 2               # rank

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.qtns"
        p.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(FormatError):
            og.read_qtns(p)

    def test_truncated(self, tmp_path):
        arr = np.zeros((4, 4), dtype=np.float32)
        raw = tz.qtns_bytes(arr)
        p = tmp_path / "trunc.qtns"
        p.write_bytes(raw[:-8])
        with pytest.raises(FormatError):
            og.read_qtns(p)
