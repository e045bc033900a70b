"""The error matrix, the per-query bound report, and the isotropic closed
forms, cross-checked against the dense route and against each other."""

import math

import numpy as np
import pytest

from metareg import (
    Dataset,
    Environment,
    IsotropicSpec,
    TaskData,
    bound_report,
    corollary1_bound,
    corollary2_bound,
    eigen_formulas,
    harmonic_mean,
    lower_highprob_coefficient,
    matrix_M,
    pooled_information,
    posterior_params,
    upper_highprob_coefficient,
)

from conftest import (
    dense_information,
    dense_matrix_M,
    random_environment,
    sample_dataset,
)

SIXTEEN_SQRT_E = 16.0 * math.exp(0.5)


def _hand_designs(n=4):
    return [np.array([[1.0]])] * n


def _isotropic_design(d, m, rng):
    """An m x d design with X^T X = (m/d) I: m/d stacked orthonormal frames.
    Requires d | m."""
    assert m % d == 0
    blocks = []
    for _ in range(m // d):
        Q, _ = np.linalg.qr(rng.standard_normal((d, d)))
        blocks.append(Q)
    return np.vstack(blocks)


class TestCoefficients:
    def test_domain_validation(self):
        for bad in (0.0, 1.0, -0.3, 1.5):
            with pytest.raises(ValueError):
                lower_highprob_coefficient(bad)
            with pytest.raises(ValueError):
                upper_highprob_coefficient(bad)

    def test_lower_coefficient_hand_value(self):
        """At delta = 1 - 1/(4 e^2) the log collapses to exactly 1."""
        delta = 1.0 - 1.0 / (4.0 * math.e**2)
        assert lower_highprob_coefficient(delta) == pytest.approx(1.0, abs=1e-12)

    def test_lower_coefficient_sign(self):
        assert lower_highprob_coefficient(0.5) < 0.0
        assert lower_highprob_coefficient(0.75) == pytest.approx(0.0, abs=1e-12)
        assert lower_highprob_coefficient(0.9) > 0.0

    def test_upper_coefficient_formula(self):
        assert upper_highprob_coefficient(0.1) == pytest.approx(2.0 * math.log(20.0))


class TestMatrixM:
    def test_hand_scalar_instance(self):
        """Four unit design rows: each contributes 1/2 to the information,
        and (1/2)^2 / 2 = 0.125."""
        M = matrix_M(_hand_designs(), 1.0, np.eye(1))
        assert M[0, 0] == pytest.approx(0.125, abs=1e-12)

    def test_matches_dense_route(self, rng):
        for sizes in ([5, 4, 6], [3, 3, 3, 3, 7], [4, 2, 5, 6]):
            env = random_environment(3, rng)
            ds = sample_dataset(env, sizes, rng)
            np.testing.assert_allclose(
                matrix_M(ds, env.sigma2, env.Sigma),
                dense_matrix_M(ds, env),
                atol=1e-10,
            )

    def test_isotropic_eigenvalues(self, rng):
        d, n, sigma2, lam = 3, 5, 1.4, 0.6
        ms = [6, 9, 3, 6, 12]
        Xs = [_isotropic_design(d, m, rng) for m in ms]
        M = matrix_M(Xs, sigma2, lam * np.eye(d))
        H = n / sum(1.0 / (lam + d * sigma2 / m) for m in ms)
        expected = sigma2**2 * d**2 / (ms[-1] * lam + d * sigma2) ** 2 * H / n
        np.testing.assert_allclose(np.linalg.eigvalsh(M), expected, rtol=1e-9)

    def test_rank_deficient_pool_rejected(self):
        X = np.array([[1.0, 0.0]])
        with pytest.raises(ValueError, match="rank 1 < d=2"):
            matrix_M([X, X], 1.0, np.eye(2))

    def test_information_kwarg_matches_pooling(self, rng):
        env = random_environment(3, rng)
        ds = sample_dataset(env, [5, 4, 6], rng)
        A = pooled_information(ds, env.sigma2, env.Sigma)
        np.testing.assert_allclose(
            matrix_M(ds, env.sigma2, env.Sigma, information=A),
            matrix_M(ds, env.sigma2, env.Sigma),
            atol=1e-12,
        )

    def test_pooled_information_matches_dense(self, rng):
        env = random_environment(3, rng)
        ds = sample_dataset(env, [4, 6, 2], rng)
        np.testing.assert_allclose(
            pooled_information(ds, env.sigma2, env.Sigma),
            dense_information(ds, env),
            atol=1e-10,
        )

    def test_result_is_psd(self, rng):
        env = random_environment(4, rng)
        ds = sample_dataset(env, [6, 5, 7], rng)
        M = matrix_M(ds, env.sigma2, env.Sigma)
        np.testing.assert_allclose(M, M.T, atol=1e-12)
        assert np.linalg.eigvalsh(M).min() >= -1e-12

    def test_continuous_at_singular_covariance(self, rng):
        """The G A^{-1} G^T form needs no Sigma inverse, so shrinking the
        trailing eigenvalues to zero moves the result smoothly."""
        d = 3
        V, _ = np.linalg.qr(rng.standard_normal((d, d)))
        Xs = [rng.standard_normal((5, d)) for _ in range(4)]
        lead = np.array([2.0, 1.0, 0.0])
        Sigma0 = (V * lead) @ V.T
        Sigma_eps = (V * (lead + [0, 0, 1e-9])) @ V.T
        M0 = matrix_M(Xs, 1.0, Sigma0)
        Meps = matrix_M(Xs, 1.0, Sigma_eps)
        np.testing.assert_allclose(M0, Meps, atol=1e-7)


class TestBoundReport:
    def test_hand_instance(self):
        rep = bound_report(_hand_designs(), 1.0, np.eye(1), np.array([1.0]), deltas=(0.05,))
        assert rep.xMx == pytest.approx(0.125, abs=1e-12)
        assert rep.xTx == pytest.approx(0.5, abs=1e-12)
        assert rep.expected_risk_mle == pytest.approx(1.625, abs=1e-12)
        assert rep.lower_unbiased == pytest.approx(1.625, abs=1e-12)
        assert rep.lower_all == pytest.approx(0.125 / SIXTEEN_SQRT_E + 1.5, abs=1e-12)
        assert rep.lower_all == pytest.approx(1.504739, abs=1e-6)

    def test_zero_query_collapses_to_noise(self, rng):
        env = random_environment(3, rng)
        ds = sample_dataset(env, [4, 5, 6], rng)
        rep = bound_report(ds, env.sigma2, env.Sigma, np.zeros(3), deltas=(0.2,))
        for value in (
            rep.xMx,
            rep.xTx,
            rep.expected_risk_mle - env.sigma2,
            rep.lower_all - env.sigma2,
            rep.lower_highprob[0.2] - env.sigma2,
            rep.upper_highprob[0.2] - env.sigma2,
        ):
            assert value == pytest.approx(0.0, abs=1e-12)

    def test_invalid_delta_rejected(self):
        with pytest.raises(ValueError):
            bound_report(_hand_designs(), 1.0, np.eye(1), np.array([1.0]), deltas=(1.2,))

    def test_ordering(self, rng):
        for trial in range(10):
            env = random_environment(3, rng)
            ds = sample_dataset(env, [5, 4, 6], rng)
            x = rng.standard_normal(3)
            rep = bound_report(ds, env.sigma2, env.Sigma, x)
            assert rep.lower_all <= rep.lower_unbiased
            assert rep.expected_risk_mle == pytest.approx(
                rep.xMx + rep.xTx + rep.sigma2, rel=1e-12
            )

    def test_weak_lower_bound_reported_unclamped(self, rng):
        """Small delta makes the M coefficient negative; the report keeps it."""
        env = random_environment(2, rng)
        ds = sample_dataset(env, [4, 5], rng)
        x = rng.standard_normal(2)
        rep = bound_report(ds, env.sigma2, env.Sigma, x, deltas=(0.05,))
        expected = lower_highprob_coefficient(0.05) * rep.xMx + rep.xTx + rep.sigma2
        assert rep.lower_highprob[0.05] == pytest.approx(expected, rel=1e-12)
        assert rep.lower_highprob[0.05] < rep.xTx + rep.sigma2


class TestIsotropicSpec:
    def test_requires_exactly_one_spectrum(self):
        with pytest.raises(ValueError):
            IsotropicSpec(d=2, n=3, m=(2, 2, 2), sigma2=1.0)
        with pytest.raises(ValueError):
            IsotropicSpec(d=2, n=3, m=(2, 2, 2), sigma2=1.0, tau2=1.0, eigenvalues=(1.0,))

    def test_eigenvalues_must_descend(self):
        with pytest.raises(ValueError):
            IsotropicSpec(d=3, n=2, m=(2, 2), sigma2=1.0, eigenvalues=(1.0, 2.0))

    def test_sizes_match_n(self):
        with pytest.raises(ValueError):
            IsotropicSpec(d=2, n=3, m=(2, 2), sigma2=1.0, tau2=1.0)

    def test_harmonic_mean_hand_value(self):
        spec = IsotropicSpec(d=1, n=2, m=(1, 2), sigma2=1.0, tau2=1.0)
        # entries are 1 + 1/1 = 2 and 1 + 1/2 = 1.5; HM = 2/(1/2 + 2/3)
        assert harmonic_mean(spec, 1.0) == pytest.approx(2.0 / (0.5 + 2.0 / 3.0))


class TestEigenFormulas:
    def test_hand_tau_value(self):
        spec = IsotropicSpec(d=2, n=2, m=(2, 2), sigma2=1.0, tau2=1.0)
        lam_M, lam_T = eigen_formulas(spec)
        np.testing.assert_allclose(lam_T, 0.5)

    def test_matches_matrix_route(self, rng):
        d, sigma2 = 3, 1.2
        eigs = (1.5, 0.8, 0.3)
        ms = (6, 3, 9, 6)
        spec = IsotropicSpec(d=d, n=4, m=ms, sigma2=sigma2, eigenvalues=eigs)
        lam_M, lam_T = eigen_formulas(spec)
        V, _ = np.linalg.qr(rng.standard_normal((d, d)))
        Sigma = (V * np.array(eigs)) @ V.T
        Xs = [_isotropic_design(d, m, rng) for m in ms]
        M = matrix_M(Xs, sigma2, Sigma)
        target = TaskData(X=Xs[-1], Y=np.zeros(ms[-1]))
        Tau = posterior_params(target, np.zeros(d), sigma2, Sigma).Tau
        np.testing.assert_allclose(np.sort(np.linalg.eigvalsh(M)), np.sort(lam_M), rtol=1e-9)
        np.testing.assert_allclose(np.sort(np.linalg.eigvalsh(Tau)), np.sort(lam_T), rtol=1e-9)

    def test_zero_prior_eigenvalue_kills_posterior(self):
        spec = IsotropicSpec(d=3, n=2, m=(3, 3), sigma2=1.0, eigenvalues=(1.0,))
        lam_M, lam_T = eigen_formulas(spec)
        assert lam_T[-1] == 0.0 and lam_T[-2] == 0.0


class TestCorollary1:
    def test_hand_value(self):
        spec = IsotropicSpec(d=1, n=4, m=(1, 1, 1, 1), sigma2=1.0, tau2=1.0)
        expected = 2.0 / (SIXTEEN_SQRT_E * 16.0) + 0.5
        assert corollary1_bound(spec) == pytest.approx(expected, rel=1e-12)
        assert corollary1_bound(spec) == pytest.approx(0.504739, abs=1e-6)

    def test_matches_matrix_route(self, rng):
        """On an actual isotropic instance the closed form reproduces
        (lower_all - sigma2)/sigma2 at a unit query."""
        d, sigma2, tau2 = 3, 1.3, 0.8
        ms = (6, 3, 9, 6)
        spec = IsotropicSpec(d=d, n=4, m=ms, sigma2=sigma2, tau2=tau2)
        Xs = [_isotropic_design(d, m, rng) for m in ms]
        x = rng.standard_normal(d)
        x /= np.linalg.norm(x)
        rep = bound_report(Xs, sigma2, tau2 * np.eye(d), x)
        assert corollary1_bound(spec) == pytest.approx(
            (rep.lower_all - sigma2) / sigma2, rel=1e-9
        )

    def test_query_norm_scaling(self):
        spec = IsotropicSpec(d=2, n=3, m=(2, 2, 2), sigma2=1.0, tau2=1.0)
        assert corollary1_bound(spec, norm_x=2.0) == pytest.approx(
            4.0 * corollary1_bound(spec), rel=1e-12
        )

    def test_large_n_limit(self):
        """The surviving term approaches 1/(m_n/d + sigma2/tau2)."""
        d, m, sigma2, tau2 = 4, 8, 1.5, 0.7
        spec = IsotropicSpec(d=d, n=10**6, m=(m,) * 10**6, sigma2=sigma2, tau2=tau2)
        limit = 1.0 / (m / d + sigma2 / tau2)
        assert corollary1_bound(spec) == pytest.approx(limit, rel=1e-4)

    def test_zero_task_variance_single_task(self):
        """tau2 = 0 leaves only the meta-mean error term, of size
        d sigma2 / m up to the constant."""
        d, m, sigma2 = 3, 6, 1.0
        spec = IsotropicSpec(d=d, n=1, m=(m,), sigma2=sigma2, tau2=0.0)
        value = corollary1_bound(spec)
        assert value == pytest.approx(d * sigma2 / m / SIXTEEN_SQRT_E / sigma2, rel=1e-12)


class TestCorollary2:
    def test_full_rank_spherical_reduces_to_corollary1(self):
        spec1 = IsotropicSpec(d=3, n=4, m=(3, 3, 3, 3), sigma2=1.1, tau2=0.9)
        spec2 = IsotropicSpec(
            d=3, n=4, m=(3, 3, 3, 3), sigma2=1.1, eigenvalues=(0.9, 0.9, 0.9)
        )
        assert corollary2_bound(spec2) == pytest.approx(corollary1_bound(spec1), rel=1e-12)

    def test_hand_value(self):
        spec = IsotropicSpec(d=2, n=2, m=(2, 2), sigma2=1.0, eigenvalues=(1.0,))
        first = 2.0 * 2.0 / (SIXTEEN_SQRT_E * 2.0 * 16.0)
        second = 0.25
        assert corollary2_bound(spec) == pytest.approx(first + second, rel=1e-12)
        assert corollary2_bound(spec) == pytest.approx(0.004739 + 0.25, abs=1e-6)

    def test_matches_matrix_route_in_trailing_eps_limit(self, rng):
        """Equal leading eigenvalues, query in the leading eigenspace with
        squared norm s/d: padding the spectrum with eps ~ 1e-8 reproduces the
        closed form to about the same accuracy."""
        d, s, lam, sigma2 = 4, 2, 0.9, 1.2
        ms = (4, 8, 4)
        spec = IsotropicSpec(d=d, n=3, m=ms, sigma2=sigma2, eigenvalues=(lam,) * s)
        V, _ = np.linalg.qr(rng.standard_normal((d, d)))
        eps = 1e-8
        Sigma = (V * np.array([lam, lam, eps, eps])) @ V.T
        Xs = [_isotropic_design(d, m, rng) for m in ms]
        u = rng.standard_normal(s)
        x = V[:, :s] @ (u / np.linalg.norm(u)) * math.sqrt(s / d)
        rep = bound_report(Xs, sigma2, Sigma, x)
        assert corollary2_bound(spec) == pytest.approx(
            (rep.lower_all - sigma2) / sigma2, rel=1e-4
        )

    def test_projection_norm_scaling(self):
        spec = IsotropicSpec(d=4, n=3, m=(4, 4, 4), sigma2=1.0, eigenvalues=(1.0, 0.5))
        assert corollary2_bound(spec, proj_norm2=1.0) == pytest.approx(
            2.0 * corollary2_bound(spec), rel=1e-12
        )
