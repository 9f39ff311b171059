"""Kernel builds: layout checks plus numba/numpy agreement."""

import numpy as np
import numpy.testing as npt
import pytest

from bnnkit import kernels
from bnnkit.accel import NUMBA_ENABLED

BACKENDS = ["numpy"] + (["numba"] if NUMBA_ENABLED else [])


def rand_bits(rng, r, length):
    return (rng.random((r, length)) > 0.5).astype(np.uint8)


class TestPackLayout:
    def test_lsb_first_single_word(self):
        bits = np.zeros((1, 64), dtype=np.uint8)
        bits[0, 0] = 1
        bits[0, 5] = 1
        words = kernels.get_impl("pack_rows", "numpy")(bits)
        assert words[0, 0] == (1 << 0) | (1 << 5)

    def test_tail_bits_zero(self):
        bits = np.ones((1, 70), dtype=np.uint8)
        words = kernels.get_impl("pack_rows", "numpy")(bits)
        assert words.shape == (1, 2)
        assert words[0, 1] == 0x3F

    @pytest.mark.parametrize("backend", BACKENDS)
    @pytest.mark.parametrize("length", [1, 7, 64, 65, 128, 130, 513])
    def test_roundtrip(self, backend, length):
        rng = np.random.default_rng(length)
        bits = rand_bits(rng, 3, length)
        p = kernels.get_impl("pack_rows", backend)
        u = kernels.get_impl("unpack_rows", backend)
        npt.assert_array_equal(u(p(bits), length), bits)


@pytest.mark.skipif(not NUMBA_ENABLED, reason="numba build unavailable")
class TestBackendAgreement:
    def test_im2col(self):
        rng = np.random.default_rng(0)
        for shape, k, s, p in [((2, 3, 8, 8), 3, 1, 1), ((1, 2, 7, 7), 3, 2, 0),
                               ((2, 1, 6, 5), 5, 2, 2), ((1, 4, 4, 4), 1, 1, 0)]:
            x = rng.standard_normal(shape).astype(np.float32)
            a = kernels.get_impl("im2col", "numpy")(x, k, k, s, p, -1.0)
            b = kernels.get_impl("im2col", "numba")(x, k, k, s, p, -1.0)
            npt.assert_array_equal(a, b)

    def test_col2im(self):
        rng = np.random.default_rng(1)
        shape, k, s, p = (2, 3, 6, 6), 3, 1, 1
        oh = (6 + 2 * p - k) // s + 1
        cols = rng.standard_normal((2 * oh * oh, 3 * k * k)).astype(np.float32)
        a = kernels.get_impl("col2im", "numpy")(cols, shape, k, k, s, p)
        b = kernels.get_impl("col2im", "numba")(cols, shape, k, k, s, p)
        # builds accumulate in different orders, so f32 rounding differs
        npt.assert_allclose(a, b, rtol=1e-5, atol=1e-6)

    def test_pack_and_gemm(self):
        rng = np.random.default_rng(2)
        for length in [5, 64, 100, 257]:
            abits = rand_bits(rng, 4, length)
            bbits = rand_bits(rng, 3, length)
            outs = []
            for backend in ("numpy", "numba"):
                p = kernels.get_impl("pack_rows", backend)
                g = kernels.get_impl("xnor_gemm", backend)
                outs.append(g(p(abits), p(bbits), length))
            npt.assert_array_equal(outs[0], outs[1])

    def test_xnor_dot_words(self):
        rng = np.random.default_rng(3)
        for length in [1, 63, 64, 65, 200]:
            bits = rand_bits(rng, 2, length)
            words = kernels.get_impl("pack_rows", "numpy")(bits)
            a = kernels.get_impl("xnor_dot_words", "numpy")(words[0], words[1], length)
            b = kernels.get_impl("xnor_dot_words", "numba")(words[0], words[1], length)
            assert a == b


class TestXnorGemmOracle:
    @pytest.mark.parametrize("backend", BACKENDS)
    def test_matches_pm1_matmul(self, backend):
        rng = np.random.default_rng(4)
        for _ in range(20):
            length = int(rng.integers(1, 300))
            r, f = int(rng.integers(1, 6)), int(rng.integers(1, 6))
            abits = rand_bits(rng, r, length)
            bbits = rand_bits(rng, f, length)
            pm_a = abits.astype(np.int64) * 2 - 1
            pm_b = bbits.astype(np.int64) * 2 - 1
            p = kernels.get_impl("pack_rows", backend)
            g = kernels.get_impl("xnor_gemm", backend)
            npt.assert_array_equal(g(p(abits), p(bbits), length), pm_a @ pm_b.T)


@pytest.mark.skipif(not NUMBA_ENABLED, reason="single build, nothing to compare")
class TestFusedOpAgreement:
    """The fused training-loop kernels must match the numpy spellings."""

    def _pair(self, name):
        return kernels.get_impl(name, "numpy"), kernels.get_impl(name, "numba")

    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    def test_sign_mask_closed(self, dtype):
        rng = np.random.default_rng(11)
        x = (rng.standard_normal((3, 4, 5, 2)) * 2).astype(dtype)
        x.flat[0] = 0.0
        x.flat[1] = 1.0
        x.flat[2] = -1.0
        f_np, f_nb = self._pair("sign_mask_closed")
        s0, m0 = f_np(x)
        s1, m1 = f_nb(x)
        npt.assert_array_equal(s0, s1)
        npt.assert_array_equal(m0, m1)
        assert s0.dtype == m1.dtype == dtype

    @pytest.mark.parametrize("shape", [(4, 6), (2, 3, 5, 4)])
    def test_prelu_fwd(self, shape):
        rng = np.random.default_rng(12)
        x = rng.standard_normal(shape).astype(np.float32)
        alpha = rng.uniform(0.1, 0.5, shape[1]).astype(np.float32)
        f_np, f_nb = self._pair("prelu_fwd")
        npt.assert_array_equal(f_np(x, alpha), f_nb(x, alpha))

    @pytest.mark.parametrize("shape", [(4, 6), (2, 3, 5, 4)])
    def test_prelu_bwd(self, shape):
        rng = np.random.default_rng(13)
        x = rng.standard_normal(shape).astype(np.float32)
        g = rng.standard_normal(shape).astype(np.float32)
        alpha = rng.uniform(0.1, 0.5, shape[1]).astype(np.float32)
        f_np, f_nb = self._pair("prelu_bwd")
        gx0, ga0 = f_np(x, g, alpha)
        gx1, ga1 = f_nb(x, g, alpha)
        npt.assert_array_equal(gx0, gx1)
        npt.assert_allclose(ga0, ga1, rtol=1e-6, atol=1e-7)

    def test_bn_fwd_train(self):
        rng = np.random.default_rng(14)
        x = rng.standard_normal((8, 5, 6, 7)).astype(np.float32) * 3 + 1
        gamma = rng.uniform(0.5, 1.5, 5).astype(np.float32)
        beta = rng.standard_normal(5).astype(np.float32)
        f_np, f_nb = self._pair("bn_fwd_train")
        y0, mu0, var0 = f_np(x, gamma, beta, 1e-5)
        y1, mu1, var1 = f_nb(x, gamma, beta, 1e-5)
        npt.assert_allclose(mu0, mu1, rtol=1e-6, atol=1e-6)
        npt.assert_allclose(var0, var1, rtol=1e-5, atol=1e-6)
        npt.assert_allclose(y0, y1, rtol=1e-5, atol=1e-5)
        assert y1.dtype == np.float32 and mu1.dtype == np.float32

    def test_bn_bwd_train(self):
        rng = np.random.default_rng(15)
        x = rng.standard_normal((8, 5, 6, 7)).astype(np.float32)
        g = rng.standard_normal((8, 5, 6, 7)).astype(np.float32)
        gamma = rng.uniform(0.5, 1.5, 5).astype(np.float32)
        mu = x.mean(axis=(0, 2, 3))
        istd = (1.0 / np.sqrt(x.var(axis=(0, 2, 3)) + 1e-5)).astype(np.float32)
        f_np, f_nb = self._pair("bn_bwd_train")
        gx0, gg0, gb0 = f_np(x, g, gamma, mu, istd)
        gx1, gg1, gb1 = f_nb(x, g, gamma, mu, istd)
        npt.assert_allclose(gx0, gx1, rtol=1e-4, atol=1e-6)
        npt.assert_allclose(gg0, gg1, rtol=1e-5, atol=1e-6)
        npt.assert_allclose(gb0, gb1, rtol=1e-5, atol=1e-6)

    def test_crop_resize(self):
        rng = np.random.default_rng(16)
        imgs = rng.random((6, 3, 14, 11)).astype(np.float32)
        cy = rng.uniform(0, 4, 6).astype(np.float32)
        cx = rng.uniform(0, 3, 6).astype(np.float32)
        chh = rng.uniform(4, 9, 6).astype(np.float32)
        cww = rng.uniform(4, 7, 6).astype(np.float32)
        f_np, f_nb = self._pair("crop_resize")
        a = f_np(imgs, cy, cx, chh, cww, 8, 8)
        b = f_nb(imgs, cy, cx, chh, cww, 8, 8)
        npt.assert_allclose(a, b, rtol=1e-6, atol=1e-6)
