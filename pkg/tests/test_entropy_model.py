"""
Tests for quantization, the discretized Gaussian, the factorized density and the
rate-distortion objective.
"""
import math

import numpy as np
import pytest

import tensor as T
from entropy_model import (DISTORTION_SCALE, P_MIN, FactorizedDensity, factorized_likelihood,
                           gaussian_uniform_likelihood, gaussian_uniform_pmf, quantize, rate_bits, rd_loss,
                           round_half_away)
from tensor import Tensor
from trainer import Adam


# =============================================================================
# Quantization
# =============================================================================

class TestQuantize:

    def test_round_half_away(self):
        values = np.array([-1.5, -0.5, 0.5, 1.5, 2.4])
        np.testing.assert_array_equal(round_half_away(values), [-2, -1, 1, 2, 2])

    def test_round_mode_cuts_gradient(self):
        out = quantize(Tensor([0.4, 1.6], requires_grad=True), "round")
        np.testing.assert_array_equal(out.data, [0.0, 2.0])
        assert not out.requires_grad

    def test_noise_is_bounded_and_passes_gradient(self, rng):
        y = Tensor(rng.normal(size=1000), requires_grad=True)
        out = quantize(y, "noise", rng)
        assert np.abs(out.data - y.data).max() <= 0.5
        out.sum().backward()
        np.testing.assert_array_equal(y.grad, np.ones(1000))

    def test_noise_is_unbiased(self, rng):
        y = np.zeros(100_000)
        out = quantize(Tensor(y), "noise", rng).data
        assert abs(out.mean()) < 5e-3
        assert out.var() == pytest.approx(1.0 / 12.0, rel=0.02)

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            quantize(Tensor([1.0]), "floor")


# =============================================================================
# Gaussian likelihood
# =============================================================================

class TestGaussianLikelihood:

    def test_reference_value(self):
        p = gaussian_uniform_likelihood(Tensor([0.0]), Tensor([0.0]), Tensor([1.0])).data
        assert p.item() == pytest.approx(0.382925, abs=1e-5)

    def test_pmf_sums_to_one(self, rng):
        symbols = np.arange(-400, 401, dtype=np.float64)
        for _ in range(1000):
            mu, sigma = rng.uniform(-20, 20), rng.uniform(0.05, 30)
            assert gaussian_uniform_pmf(symbols, mu, sigma).sum() == pytest.approx(1.0, abs=1e-6)

    def test_matches_reference_math(self, rng):
        y = np.round(rng.normal(0, 4, size=50))
        mu, sigma = rng.normal(size=50), rng.uniform(0.2, 3.0, size=50)
        p = gaussian_uniform_likelihood(Tensor(y), Tensor(mu), Tensor(sigma), clamp=False).data
        np.testing.assert_allclose(p, gaussian_uniform_pmf(y, mu, sigma), rtol=1e-9, atol=1e-15)

    def test_symmetric_around_mean(self):
        left = gaussian_uniform_pmf(np.array([-3.0]), 0.0, 1.5)
        right = gaussian_uniform_pmf(np.array([3.0]), 0.0, 1.5)
        np.testing.assert_allclose(left, right)

    def test_tail_is_clamped(self):
        p = gaussian_uniform_likelihood(Tensor([60.0]), Tensor([0.0]), Tensor([0.5])).data
        assert p.item() == P_MIN

    def test_gradient(self, rng):
        mu = Tensor(rng.normal(size=6), requires_grad=True)
        sigma = Tensor(rng.uniform(0.5, 2.0, size=6))
        y = Tensor(np.round(rng.normal(size=6) * 2))
        fn = lambda t: rate_bits(gaussian_uniform_likelihood(y, t, sigma))  # noqa: E731
        assert T.grad_check(fn, mu) < 1e-4

    def test_rate_of_half_is_one_bit(self):
        assert rate_bits(Tensor(np.full(8, 0.5))).item() == pytest.approx(8.0)


# =============================================================================
# Factorized density
# =============================================================================

class TestFactorizedDensity:

    @pytest.fixture
    def density(self, rng):
        return FactorizedDensity(3, rng)

    def test_pmf_sums_to_one(self, density):
        symbols = np.tile(np.arange(-200, 201, dtype=np.float64), (3, 1))
        np.testing.assert_allclose(density.pmf(symbols).sum(axis=1), 1.0, atol=1e-6)

    def test_median_starts_at_zero(self, density):
        np.testing.assert_allclose(density.cdf(np.zeros((3, 1))), 0.5, atol=1e-9)

    def test_cdf_is_monotone(self, density):
        values = np.tile(np.linspace(-20, 20, 101), (3, 1))
        assert np.all(np.diff(density.cdf(values), axis=1) >= 0)

    def test_likelihood_matches_pmf(self, density, rng):
        z = np.round(rng.normal(0, 3, size=(2, 3, 2, 2)))
        p = density.likelihood(Tensor(z), clamp=False).data
        flat = z.transpose(1, 0, 2, 3).reshape(3, -1)
        expected = density.pmf(flat).reshape(3, 2, 2, 2).transpose(1, 0, 2, 3)
        np.testing.assert_allclose(p, expected, rtol=1e-9)
        assert np.all(density.likelihood(Tensor(np.zeros((1, 3, 1, 1)))).data > 0)

    def test_factorized_likelihood_is_density_likelihood(self, density, rng):
        z = Tensor(np.round(rng.normal(0, 3, size=(2, 3, 2, 2))))
        np.testing.assert_array_equal(factorized_likelihood(z, density).data, density.likelihood(z).data)

    @pytest.mark.slow
    def test_fits_gaussian_samples(self):
        rng = np.random.default_rng(5)
        samples = np.round(rng.normal(0, 2, size=(1, 1, 1, 4000)))
        _, counts = np.unique(samples, return_counts=True)
        frequencies = counts / counts.sum()
        entropy = -(frequencies * np.log2(frequencies)).sum()
        with T.precision("float64"):
            density = FactorizedDensity(1, rng)
            optimizer = Adam(density.parameters(), lr=1e-2)
            for _ in range(1500):
                optimizer.zero_grad()
                bits = rate_bits(density.likelihood(Tensor(samples))) * (1.0 / samples.size)
                bits.backward()
                optimizer.step()
        assert bits.item() < entropy + 0.05
        symbols = np.arange(-6.0, 7.0)
        np.testing.assert_allclose(density.pmf(symbols[None])[0], gaussian_uniform_pmf(symbols, 0.0, 2.0),
                                   atol=0.02)

    def test_channel_mismatch(self, density):
        with pytest.raises(T.ShapeError):
            density.likelihood(Tensor(np.zeros((1, 2, 1, 1))))

    def test_gradient(self, density, rng):
        z = Tensor(np.round(rng.normal(0, 2, size=(1, 3, 2, 2))))
        fn = lambda t: rate_bits(density.likelihood(z))  # noqa: E731
        assert T.grad_check(lambda t: fn(t), density.biases[0]) < 1e-4
        assert T.grad_check(lambda t: fn(t), density.matrices[1]) < 1e-4


# =============================================================================
# Rate-distortion objective
# =============================================================================

class TestRdLoss:

    def test_zero_lambda_is_rate_only(self, rng):
        x, x_hat = rng.uniform(size=(1, 3, 4, 4)), rng.uniform(size=(1, 3, 4, 4))
        loss = rd_loss(x, x_hat, 32.0, 8.0, 0.0, 16)
        assert loss.total.item() == pytest.approx(2.5)
        assert loss.bpp == pytest.approx(2.5)

    def test_distortion_term(self):
        x = np.zeros((1, 3, 2, 2))
        loss = rd_loss(x, x + 0.1, 0.0, 0.0, 0.02, 4)
        assert loss.mse.item() == pytest.approx(0.01)
        assert loss.total.item() == pytest.approx(0.02 * DISTORTION_SCALE * 0.01)
        assert loss.psnr == pytest.approx(20.0)

    def test_identical_images_cap_psnr(self):
        x = np.ones((1, 3, 2, 2))
        assert rd_loss(x, x, 1.0, 1.0, 0.01, 4).psnr == 100.0

    def test_rejects_empty_image(self):
        with pytest.raises(ValueError):
            rd_loss(np.zeros(3), np.zeros(3), 1.0, 1.0, 0.01, 0)

    def test_to_dict_keys(self):
        loss = rd_loss(np.zeros(3), np.full(3, 0.5), 4.0, 2.0, 0.01, 2)
        assert set(loss.to_dict()) == {'loss', 'bpp_y', 'bpp_z', 'mse', 'psnr'}
        assert loss.to_dict()['psnr'] == pytest.approx(10.0 * math.log10(4.0))
