import numpy as np
import pytest
from hypothesis import given, strategies as st

from saresdet import spectral as S
from saresdet import tensor as T
from saresdet.tensor import ShapeError, Tensor

from oracles import naive_dft2
from test_tensor import check_grad

pow2 = st.sampled_from([1, 2, 4, 8, 16, 32, 64])


class TestFFT:
    def test_constant_dc(self):
        s = S.fft2(Tensor(np.full((1, 1, 8, 4), 3.0)))
        z = s.to_complex()
        assert z[0, 0, 0, 0] == pytest.approx(3.0 * 32)
        z[0, 0, 0, 0] = 0
        assert np.abs(z).max() < 1e-5

    def test_vs_naive_dft(self, rng):
        x = rng.normal(size=(2, 3, 8, 8))
        assert np.abs(S.fft2(Tensor(x)).to_complex() - naive_dft2(x)).max() < 1e-4

    @given(pow2, pow2, st.integers(0, 2**31))
    def test_vs_matrix_dft_and_roundtrip(self, h, w, seed):
        x = np.random.default_rng(seed).normal(size=(1, 2, h, w)).astype(np.float32)
        spec = S.fft2(Tensor(x))
        assert np.abs(spec.to_complex() - S.dft2(Tensor(x)).to_complex()).max() < 1e-4 * max(1, np.sqrt(h * w))
        assert np.abs(S.ifft2(spec).data - x).max() < 1e-4
        energy = (x.astype(np.float64) ** 2).sum()
        assert abs(energy - (np.abs(spec.to_complex()) ** 2).sum() / (h * w)) <= 1e-4 * energy

    def test_non_power_of_two_redirects(self):
        with pytest.raises(ShapeError, match="dft2"):
            S.fft2(Tensor(np.zeros((1, 1, 6, 8))))
        S.dft2(Tensor(np.zeros((1, 1, 6, 8))))


class TestHaar:
    def test_constant_block(self):
        sb = S.haar_dwt2(Tensor(np.full((1, 1, 2, 2), 1.5)))
        assert sb.LL.data.item() == 3.0 and sb.LH.data.item() == sb.HL.data.item() == sb.HH.data.item() == 0.0

    def test_hand_block(self):
        sb = S.haar_dwt2(Tensor(np.array([[[[1.0, 2], [3, 4]]]])))
        assert [t.data.item() for t in sb.as_tuple()] == [5.0, -1.0, -2.0, 0.0]

    def test_odd_rejected(self):
        with pytest.raises(ShapeError):
            S.haar_dwt2(Tensor(np.zeros((1, 1, 3, 4))))

    @given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**31))
    def test_roundtrip_and_energy(self, hh, hw, seed):
        x = np.random.default_rng(seed).normal(size=(1, 2, 2 * hh, 2 * hw)).astype(np.float32)
        sb = S.haar_dwt2(Tensor(x))
        assert np.abs(S.haar_idwt2(sb).data - x).max() < 1e-5
        e = float((x.astype(np.float64) ** 2).sum())
        assert abs(sb.energy() - e) <= 1e-5 * e

    def test_gradients(self):
        for band in ("LL", "LH", "HL", "HH"):
            check_grad(lambda x, b=band: getattr(S.haar_dwt2(x), b), (1, 2, 4, 4))
        check_grad(lambda a, b, c, d: S.haar_idwt2(S.WaveletSubbands(a, b, c, d)), *[(1, 2, 2, 3)] * 4)


class TestSoftThreshold:
    def test_values(self):
        out = S.soft_threshold(Tensor(np.array([[[[1.5, -0.3]]]])), Tensor(np.array([1.0])))
        assert out.data.ravel()[0] == pytest.approx(0.5)
        out = S.soft_threshold(Tensor(np.array([[[[-0.3]]]])), Tensor(np.array([0.5])))
        assert out.data.item() == 0.0

    @given(st.lists(st.floats(-10, 10), min_size=1, max_size=16), st.floats(0, 5))
    def test_properties(self, vals, t):
        x = Tensor(np.array(vals).reshape(1, 1, 1, -1))
        tt = Tensor(np.array([t]))
        out = S.soft_threshold(x, tt).data
        assert np.all(np.abs(out) <= np.abs(x.data))
        assert np.array_equal(S.soft_threshold(Tensor(-x.data), tt).data, -out)
        assert np.array_equal(S.soft_threshold(x, Tensor(np.array([0.0]))).data, x.data)

    def test_negative_threshold_rejected(self):
        with pytest.raises(ValueError):
            S.soft_threshold(Tensor(np.zeros((1, 1, 1, 1))), Tensor(np.array([-1.0])))

    def test_gradient(self, rng):
        x = rng.normal(size=(2, 3, 4, 4))
        x[np.abs(np.abs(x) - 0.3) < 0.05] = 1.0  # keep away from the kinks
        with T.precision("float64"):
            xt, tt = Tensor(x, requires_grad=True), Tensor(np.full(3, 0.3), requires_grad=True)
            with T.Tape() as tape:
                out = T.total(S.soft_threshold(xt, tt))
            tape.backward(out)
        live = np.abs(x) > 0.3
        assert np.array_equal(xt.grad, live.astype(float))
        assert np.allclose(tt.grad, -(np.sign(x) * live).sum(axis=(0, 2, 3)))


class TestBands:
    def test_single_band_all_ones(self):
        assert np.all(S.radial_band_mask(8, 8, 1).data == 1)

    @given(st.sampled_from([2, 4, 8, 16]), st.sampled_from([2, 4, 8, 16]), st.integers(1, 6))
    def test_partition(self, h, w, bands):
        m = S.radial_band_mask(h, w, bands).data
        assert m.shape == (bands, 1, h, w)
        assert set(np.unique(m)) <= {0.0, 1.0}
        assert np.array_equal(m.sum(axis=0)[0], np.ones((h, w)))

    def test_dc_and_nyquist(self):
        m = S.band_masks(8, 8, 4)
        assert m[0, 0, 0] == 1  # DC in natural FFT order
        assert m[3, 4, 4] == 1  # Nyquist corner at index H/2, W/2


class TestDifferentiableSpectral:
    def test_log_magnitude_gradient(self):
        check_grad(S.log_magnitude, (2, 2, 4, 8))

    def test_band_mean_gradient(self):
        masks = S.band_masks(4, 4, 2)
        check_grad(lambda x: S.band_mean(x, masks), (2, 3, 4, 4))

    def test_gain_filter_gradient(self):
        masks = S.band_masks(8, 8, 4)
        check_grad(lambda x, g: S.spectral_gain_filter(x, g, masks), (2, 3, 8, 8), (4, 3))

    def test_all_pass(self, rng):
        x = rng.normal(size=(1, 2, 8, 8))
        out = S.spectral_gain_filter(Tensor(x), Tensor(np.ones((4, 2))), S.band_masks(8, 8, 4))
        assert np.abs(out.data - x).max() < 1e-10

    def test_masked_output_is_real(self, rng):
        x = rng.normal(size=(1, 1, 8, 8))
        g = np.array([[1.0], [0.3], [0.0], [2.0]])
        field = np.einsum("bc,bhw->chw", g, S.band_masks(8, 8, 4))
        back = S.ifft2_complex(S.ComplexSpectrum.from_complex(field * S.fft2(Tensor(x)).to_complex(), np.float64))
        assert np.abs(back.imag).max() < 1e-4
