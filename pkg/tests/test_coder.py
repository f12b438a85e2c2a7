"""
Tests for CDF quantization and the range coder.
"""
import numpy as np
import pytest
from scipy import stats

from coder import (TOTAL, CoderError, build_cdf, build_cdf_from_pmf, ideal_bits, normal_cdf,
                   quantize_pmf, range_decode, range_encode, uniform_cdf)


def gaussian_stream(rng, n, s_min=-40, s_max=40):
    mu = rng.normal(0, 3, size=n)
    sigma = rng.uniform(0.1, 6.0, size=n)
    symbols = np.clip(np.round(rng.normal(mu, sigma)), s_min, s_max).astype(np.int64)
    return symbols, build_cdf(mu, sigma, s_min, s_max)


# =============================================================================
# CDF tables
# =============================================================================

class TestCdfTables:

    def test_normal_cdf_accuracy(self):
        x = np.linspace(-8, 8, 4001)
        assert np.abs(normal_cdf(x) - stats.norm.cdf(x)).max() < 1.5e-7

    def test_uniform_three_symbols(self):
        np.testing.assert_array_equal(quantize_pmf(np.ones(3) / 3)[0], [21846, 21845, 21845])

    def test_count_floor(self):
        counts = quantize_pmf(np.array([1.0, 1e-12, 1e-12]))[0]
        np.testing.assert_array_equal(counts, [TOTAL - 2, 1, 1])

    def test_counts_sum_to_total(self, rng):
        counts = quantize_pmf(rng.dirichlet(np.full(50, 0.05), size=20))
        assert np.all(counts.sum(axis=-1) == TOTAL)
        assert counts.min() >= 1

    def test_tails_are_folded(self):
        cdf = build_cdf(100.0, 1.0, -3, 3)
        counts = cdf.counts()
        assert counts[-1] == TOTAL - 6
        assert cdf.cumulative[0] == 0 and cdf.cumulative[-1] == TOTAL

    def test_batched_table(self):
        cdf = build_cdf(np.zeros(4), np.ones(4), -5, 5)
        assert cdf.batched and len(cdf) == 4
        assert cdf.cumulative.shape == (4, 12)

    def test_range_too_wide(self):
        with pytest.raises(CoderError):
            uniform_cdf(0, TOTAL)

    def test_sigma_must_be_positive(self):
        with pytest.raises(CoderError):
            build_cdf(0.0, 0.0, -2, 2)

    def test_pmf_length_checked(self):
        with pytest.raises(CoderError):
            build_cdf_from_pmf(np.ones(4), 0, 5)


# =============================================================================
# Range coder
# =============================================================================

class TestRangeCoder:

    def test_round_trip(self, rng):
        symbols, cdf = gaussian_stream(rng, 2000)
        data = range_encode(symbols, cdf)
        np.testing.assert_array_equal(range_decode(data, cdf), symbols)

    def test_round_trip_shared_table(self, rng):
        cdf = uniform_cdf(-7, 7)
        symbols = rng.integers(-7, 8, size=500)
        np.testing.assert_array_equal(range_decode(range_encode(symbols, cdf), cdf, 500), symbols)

    def test_round_trip_table_list(self, rng):
        tables = [uniform_cdf(0, 1), uniform_cdf(-3, 3), build_cdf(0.0, 0.2, -1, 1)]
        symbols = [1, -3, 0]
        np.testing.assert_array_equal(range_decode(range_encode(symbols, tables), tables), symbols)

    def test_extreme_symbols(self):
        cdf = build_cdf(0.0, 0.05, -20, 20)
        symbols = np.array([20, -20, 0, 20, -20] * 40)
        np.testing.assert_array_equal(range_decode(range_encode(symbols, cdf), cdf, 200), symbols)

    def test_empty_stream(self):
        cdf = uniform_cdf(0, 3)
        assert len(range_decode(range_encode([], cdf), cdf, 0)) == 0

    def test_rate_close_to_ideal(self, rng):
        symbols, cdf = gaussian_stream(rng, 5000)
        data = range_encode(symbols, cdf)
        assert 8 * len(data) <= ideal_bits(symbols, cdf) * 1.01 + 32

    def test_out_of_range_symbol(self):
        with pytest.raises(CoderError, match="outside"):
            range_encode([0, 9], uniform_cdf(0, 3))

    def test_truncated_stream(self, rng):
        symbols, cdf = gaussian_stream(rng, 2000)
        data = range_encode(symbols, cdf)
        with pytest.raises(CoderError, match="truncated"):
            range_decode(data[:len(data) // 2], cdf)

    def test_shared_table_needs_count(self):
        with pytest.raises(CoderError):
            range_decode(b"\x00" * 8, uniform_cdf(0, 3))

    def test_row_count_checked(self):
        with pytest.raises(CoderError):
            range_encode([0, 1, 2], build_cdf(np.zeros(2), np.ones(2), -2, 2))

    def test_uniform_256_costs_a_byte_per_symbol(self, rng):
        cdf = uniform_cdf(0, 255)
        symbols = rng.integers(0, 256, size=10_000)
        assert ideal_bits(symbols, cdf) == pytest.approx(80_000.0)
        data = range_encode(symbols, cdf)
        assert 10_000 <= len(data) <= 10_100
        np.testing.assert_array_equal(range_decode(data, cdf, 10_000), symbols)

    def test_skewed_table_approaches_entropy(self, rng):
        cdf = build_cdf_from_pmf(np.array([0.99, 0.01]), 0, 1)
        symbols = (rng.random(10_000) < 0.01).astype(np.int64)
        data = range_encode(symbols, cdf)
        entropy = -(0.99 * np.log2(0.99) + 0.01 * np.log2(0.01))
        assert entropy == pytest.approx(0.081, abs=1e-3)
        assert 8 * len(data) / 10_000 == pytest.approx(entropy, abs=0.03)
        np.testing.assert_array_equal(range_decode(data, cdf, 10_000), symbols)

    @pytest.mark.slow
    def test_million_symbols(self, rng):
        cdf = build_cdf(0.0, 2.0, -30, 30)
        symbols = np.clip(np.round(rng.normal(0, 2, size=1_000_000)), -30, 30).astype(np.int64)
        data = range_encode(symbols, cdf)
        np.testing.assert_array_equal(range_decode(data, cdf, len(symbols)), symbols)
        assert 8 * len(data) <= ideal_bits(symbols, cdf) * 1.01 + 32
