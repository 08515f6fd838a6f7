"""Speckle physics: trigamma, Gamma sampling, scenes, homomorphic maps."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import polygamma

from sonospeck import tensor as T
from sonospeck.errors import ValidationError
from sonospeck.speckle import (SpeckleSpec, enl, from_log, looks_from_variance,
                               make_scene, sample_speckle, substream, to_log, trigamma)
from sonospeck.tensor import Tensor


class TestTrigamma:
    def test_analytic_value_at_one(self):
        assert trigamma(1.0) == pytest.approx(math.pi**2 / 6, abs=1e-11)

    @pytest.mark.parametrize("looks,expected", [
        (9, 0.1175), (12, 0.0869), (15, 0.0689), (4, 0.2838),
    ])
    def test_reference_values_4dp(self, looks, expected):
        assert round(trigamma(looks), 4) == expected

    def test_against_scipy_oracle(self):
        for L in np.linspace(0.3, 25.0, 113):
            assert trigamma(float(L)) == pytest.approx(float(polygamma(1, L)), abs=1e-10)

    @given(st.floats(0.5, 20.0))
    @settings(max_examples=40, deadline=None)
    def test_recurrence_identity(self, L):
        # psi(1, L) = psi(1, L+1) + 1/L^2
        assert trigamma(L) == pytest.approx(trigamma(L + 1) + 1.0 / L**2, abs=1e-12)

    def test_strictly_decreasing(self):
        grid = np.linspace(0.25, 20.0, 80)
        vals = [trigamma(float(x)) for x in grid]
        assert all(a > b for a, b in zip(vals, vals[1:]))

    def test_nonpositive_rejected(self):
        with pytest.raises(ValidationError):
            trigamma(0.0)


class TestLooksFromVariance:
    def test_paper_operating_points(self):
        assert looks_from_variance(0.2838) == pytest.approx(4.0, abs=1e-3)
        assert looks_from_variance(0.1175) == pytest.approx(9.0, abs=1e-2)

    def test_round_trip(self):
        assert looks_from_variance(trigamma(7.5)) == pytest.approx(7.5, abs=1e-6)

    def test_out_of_range_rejected(self):
        with pytest.raises(ValidationError):
            looks_from_variance(0.0)
        with pytest.raises(ValidationError):
            looks_from_variance(trigamma(0.5) * 1.01)

    def test_spec_invariant(self):
        spec = SpeckleSpec.from_looks(6.0)
        assert spec.sigma2_tgt == pytest.approx(trigamma(6.0), abs=1e-12)
        with pytest.raises(ValidationError):
            SpeckleSpec(looks=6.0, sigma2_tgt=0.5)


class TestSampleSpeckle:
    def test_unit_mean_l4(self):
        n = sample_speckle((1_000_000,), 4.0, 123)
        assert n.mean() == pytest.approx(1.0, abs=0.005)

    def test_variance_is_inverse_looks(self):
        n = sample_speckle((1_000_000,), 4.0, 124)
        assert n.var() == pytest.approx(0.25, abs=0.01)

    def test_log_variance_matches_trigamma(self):
        n = sample_speckle((1_000_000,), 4.0, 125)
        assert np.log(n).var() == pytest.approx(0.2838, abs=0.01)

    def test_positive_and_reproducible(self):
        a = sample_speckle((1000,), 1.0, 7)
        assert (a > 0).all()
        np.testing.assert_array_equal(a, sample_speckle((1000,), 1.0, 7))

    @pytest.mark.parametrize("looks", [1, 2, 3, 4, 9, 12, 15])
    def test_moments_all_looks(self, looks):
        n = sample_speckle((1_000_000,), float(looks), 1000 + looks)
        # 3-sigma Monte-Carlo bands around the analytic moments
        mean_tol = 3 * math.sqrt(1.0 / looks / 1e6)
        assert n.mean() == pytest.approx(1.0, abs=mean_tol)
        logvar = np.log(n).var()
        tol = 3 * logvar * math.sqrt(2.0 / 1e6) * 3  # generous kurtosis allowance
        assert logvar == pytest.approx(trigamma(looks), abs=max(tol, 2e-3))

    def test_substream_independence_of_order(self):
        a1 = substream(5, 1, 10).gamma(4.0, 0.25, 100)
        _ = substream(5, 99, 3).gamma(4.0, 0.25, 17)
        a2 = substream(5, 1, 10).gamma(4.0, 0.25, 100)
        np.testing.assert_array_equal(a1, a2)


class TestHomomorphic:
    def test_unit_image_zero_eps(self):
        y = Tensor(np.ones((1, 1, 4, 4)))
        np.testing.assert_array_equal(to_log(y, 0.0).data, np.zeros((1, 1, 4, 4)))

    def test_round_trip(self):
        rng = np.random.default_rng(0)
        y = Tensor(rng.uniform(0.01, 1.0, (1, 1, 32, 32)).astype(np.float32))
        back = from_log(to_log(y, 1e-6))
        assert np.abs(back.data - y.data).max() < 2e-6

    def test_negative_rejected(self):
        with pytest.raises(ValidationError):
            to_log(Tensor(np.full((1, 1, 2, 2), -0.1)), 1e-6)

    def test_log_of_product_is_sum_of_logs(self):
        rng = np.random.default_rng(1)
        x = rng.uniform(0.1, 1.0, (1, 1, 16, 16))
        n = rng.uniform(0.2, 2.0, (1, 1, 16, 16))
        lhs = to_log(Tensor(x * n), 0.0).data
        rhs = to_log(Tensor(x), 0.0).data + to_log(Tensor(n), 0.0).data
        assert np.abs(lhs - rhs).max() < 1e-6

    def test_multiplicative_noise_log_variance(self):
        # constant reflectivity: Var(log y) equals the trigamma target
        x = np.full((256, 256), 0.5)
        n = sample_speckle((256, 256), 4.0, 9)
        y = Tensor((x * n).reshape(1, 1, 256, 256))
        assert T.reduce_var(to_log(y, 1e-6)).item() == pytest.approx(0.2838, abs=0.02)


class TestMakeScene:
    def test_constant_has_zero_variance(self):
        scene = make_scene("constant", 64, 4.0, 4.0, 0)
        assert float(scene.clean.data.var()) == 0.0

    def test_piecewise_two_levels_ratio(self):
        scene = make_scene("piecewise", 64, 4.0, 4.0, 1)
        levels = np.unique(scene.clean.data)
        assert len(levels) == 2
        assert levels.max() / levels.min() == pytest.approx(4.0, rel=1e-6)

    def test_blobs_in_range(self):
        scene = make_scene("blobs", 64, 4.0, 4.0, 2)
        assert scene.clean.data.min() >= 0.1 - 1e-6
        assert scene.clean.data.max() <= 1.0 + 1e-6

    def test_noise_ratio_log_variance(self):
        scene = make_scene("piecewise", 128, 4.0, 4.0, 3)
        ratio = scene.noisy.data / scene.clean.data
        assert np.log(ratio).var() == pytest.approx(trigamma(4.0), rel=0.05)

    def test_reproducible(self):
        a = make_scene("blobs", 64, 4.0, 2.0, 11)
        b = make_scene("blobs", 64, 4.0, 2.0, 11)
        np.testing.assert_array_equal(a.noisy.data, b.noisy.data)

    def test_size_validated(self):
        with pytest.raises(ValidationError):
            make_scene("constant", 16, 4.0, 4.0, 0)


class TestEnl:
    def test_constant_region_is_infinite(self):
        assert enl(np.full((10, 10), 0.7)) == math.inf

    def test_hand_value(self):
        # mean 2, population variance 1 -> ENL 4
        assert enl(np.array([1.0, 3.0])) == pytest.approx(4.0, abs=1e-12)

    def test_gamma_monte_carlo(self):
        n = sample_speckle((1_000_000,), 4.0, 321)
        assert enl(n) == pytest.approx(4.0, abs=0.05)

    def test_empty_rejected(self):
        with pytest.raises(ValidationError):
            enl(np.zeros((0,)))
