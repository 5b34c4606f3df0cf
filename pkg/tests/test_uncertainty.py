"""Tests for the uncertainty models, including Monte Carlo cross-checks."""

from __future__ import annotations

import math

import numpy as np
import pytest
from scipy import special

from rdvtrade import uncertainty as unc


def bisect_normal_quantile(p: float) -> float:
    """Independent inverse-CDF oracle: bisection on the erf-based CDF."""

    def cdf(x: float) -> float:
        return 0.5 * (1.0 + special.erf(x / math.sqrt(2.0)))

    lo, hi = -10.0, 10.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if cdf(mid) < p:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


class TestQuantile:
    def test_matches_bisection_oracle(self):
        for p in (0.001, 0.003, 0.05, 0.5, 0.9, 0.997):
            assert unc.inv_norm_cdf(p) == pytest.approx(
                bisect_normal_quantile(p), abs=1e-9
            )

    def test_qbar_value(self):
        params = unc.UncertaintyParams()
        assert params.qbar == pytest.approx(2.7478, abs=1e-4)
        assert params.qbar == pytest.approx(
            unc.inv_norm_cdf(1.0 - 0.003), rel=1e-12
        )

    def test_rejects_endpoints(self):
        with pytest.raises(ValueError):
            unc.inv_norm_cdf(0.0)
        with pytest.raises(ValueError):
            unc.inv_norm_cdf(1.0)


class TestNavFloor:
    def test_far_and_near_plateaus(self):
        params = unc.UncertaintyParams()
        assert np.array_equal(unc.nav_floor(5e4, params), params.nav_far)
        assert np.array_equal(unc.nav_floor(1e4, params), params.nav_far)
        assert np.array_equal(unc.nav_floor(500.0, params), params.nav_near)
        assert np.array_equal(unc.nav_floor(1e3, params), params.nav_near)

    def test_linear_blend_midpoint(self):
        params = unc.UncertaintyParams()
        mid = unc.nav_floor(5.5e3, params)
        assert np.allclose(mid, 0.5 * (params.nav_far + params.nav_near))

    def test_blend_is_continuous_at_edges(self):
        params = unc.UncertaintyParams()
        assert np.allclose(
            unc.nav_floor(1e4 - 1e-6, params), params.nav_far, rtol=1e-6
        )
        assert np.allclose(
            unc.nav_floor(1e3 + 1e-6, params), params.nav_near, rtol=1e-6
        )


class TestNavCov:
    def setup_method(self):
        self.params = unc.UncertaintyParams()
        self.a = 6738.14e3
        # synthetic but representative local map: position rows scale by a
        rng = np.random.default_rng(1)
        self.psi = rng.normal(scale=self.a, size=(6, 6))

    def test_rank_one_structure(self):
        roe = np.array([1e-4, -2e-3, 1e-5, 0.0, 0.0, 0.0])
        cov = unc.nav_cov(roe, self.psi, self.params, self.a)
        eigvals = np.linalg.eigvalsh(cov)
        assert eigvals[-1] > 0.0
        assert np.abs(eigvals[:-1]).max() < 1e-18 * eigvals[-1] + 1e-300

    def test_diagonal_variant(self):
        params = unc.UncertaintyParams(rank_one_nav=False)
        roe = np.array([1e-4, -2e-3, 1e-5, 0.0, 0.0, 0.0])
        cov = unc.nav_cov(roe, self.psi, params, self.a)
        assert np.allclose(cov, np.diag(np.diag(cov)))

    def test_scales_linearly_with_range(self):
        roe = np.array([0.0, 2e-3, 0.0, 0.0, 0.0, 0.0])
        far = unc.nav_cov(roe, self.psi, self.params, self.a)
        farther = unc.nav_cov(2.0 * roe, self.psi, self.params, self.a)
        rho = np.linalg.norm((self.psi @ roe)[:3])
        assert rho > self.params.range_far  # both on the far plateau
        assert np.allclose(farther, 2.0 * far, rtol=1e-12)


class TestGatesCov:
    def test_reference_value_unit_radial_burn(self):
        params = unc.UncertaintyParams()
        cov = unc.gates_cov(np.array([1.0, 0.0, 0.0]), params)
        assert np.allclose(
            np.diag(cov), [4.09e-6, 1.8e-7, 1.8e-7], rtol=1e-12
        )
        off = cov - np.diag(np.diag(cov))
        assert np.abs(off).max() < 1e-20

    def test_zero_thrust_floor(self):
        params = unc.UncertaintyParams()
        cov = unc.gates_cov(np.zeros(3), params)
        assert np.allclose(
            np.diag(cov),
            [params.sigma_fixed_mag**2, params.sigma_fixed_dir**2, params.sigma_fixed_dir**2],
        )

    def test_rotation_consistency(self):
        # eigenvalues must be the along/across variances regardless of direction
        params = unc.UncertaintyParams()
        rng = np.random.default_rng(4)
        for _ in range(20):
            u = rng.normal(size=3)
            mag = np.linalg.norm(u)
            cov = unc.gates_cov(u, params)
            expected = sorted(
                [
                    params.sigma_fixed_mag**2 + (params.sigma_prop_mag * mag) ** 2,
                    params.sigma_fixed_dir**2 + (params.sigma_prop_dir * mag) ** 2,
                    params.sigma_fixed_dir**2 + (params.sigma_prop_dir * mag) ** 2,
                ]
            )
            assert np.allclose(np.linalg.eigvalsh(cov), expected, rtol=1e-10)

    def test_normal_axis_thrust_uses_fallback_pivot(self):
        params = unc.UncertaintyParams()
        cov = unc.gates_cov(np.array([0.0, 0.0, 2.0]), params)
        var_along = params.sigma_fixed_mag**2 + (params.sigma_prop_mag * 2.0) ** 2
        var_across = params.sigma_fixed_dir**2 + (params.sigma_prop_dir * 2.0) ** 2
        half_trust = unc.FRAME_HALF_TRUST_FLOORS * params.sigma_fixed_mag
        weight = 4.0 / (4.0 + half_trust**2)
        expected = weight * var_along + (1.0 - weight) * var_across
        assert cov[2, 2] == pytest.approx(expected, rel=1e-12)

    def test_small_burn_rotation_has_bounded_effect(self):
        # Rotating a burn far below the fixed floor must barely move the
        # covariance; without the frame fade the swing is order-one.
        params = unc.UncertaintyParams()
        tiny = 1e-5
        a = unc.gates_cov(np.array([tiny, 0.0, 0.0]), params)
        b = unc.gates_cov(np.array([0.0, tiny, 0.0]), params)
        swing = np.abs(a - b).max() / np.abs(a).max()
        assert swing < 1e-3


def _sqrt_psd(cov: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(cov)
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


class TestDriftRecursion:
    def test_matches_monte_carlo(self):
        params = unc.UncertaintyParams()
        a = 6738.14e3
        rng = np.random.default_rng(100)
        n_sub, n_samples = 8, 40000
        for _ in range(3):
            # well-conditioned synthetic substep maps near identity
            stms = np.stack(
                [
                    np.eye(6) + rng.normal(scale=0.05, size=(6, 6))
                    for _ in range(n_sub)
                ]
            )
            sigma0 = np.outer(rng.normal(scale=1e-5, size=6), rng.normal(scale=1e-5, size=6))
            sigma0 = sigma0 @ sigma0.T + 1e-12 * np.eye(6)
            seq = unc.drift_cov_sequence(sigma0, stms, params, a)

            x = rng.standard_normal((n_samples, 6)) @ _sqrt_psd(sigma0).T
            q_l = math.sqrt(params.process_noise) / a
            for i in range(n_sub):
                x = x @ stms[i].T + q_l * rng.standard_normal((n_samples, 6))
            sample_cov = np.cov(x.T)
            err = np.linalg.norm(sample_cov - seq[-1]) / np.linalg.norm(seq[-1])
            assert err < 0.05

    def test_zero_process_noise_pure_congruence(self):
        params = unc.UncertaintyParams(process_noise=0.0)
        rng = np.random.default_rng(8)
        stms = np.stack([np.eye(6) + rng.normal(scale=0.1, size=(6, 6)) for _ in range(4)])
        sigma0 = np.eye(6) * 1e-8
        seq = unc.drift_cov_sequence(sigma0, stms, params, 7000e3)
        total = np.linalg.multi_dot([stms[3], stms[2], stms[1], stms[0]])
        assert np.allclose(seq[-1], total @ sigma0 @ total.T, rtol=1e-12)

    def test_output_shape_and_symmetry(self):
        params = unc.UncertaintyParams()
        stms = np.stack([np.eye(6)] * 5)
        seq = unc.drift_cov_sequence(np.eye(6) * 1e-9, stms, params, 7000e3)
        assert seq.shape == (5, 6, 6)
        assert np.allclose(seq, np.transpose(seq, (0, 2, 1)))
