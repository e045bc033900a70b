"""Shared fixtures and dense reference implementations.

The oracles here deliberately take the slow route: they materialize the full
M x M marginal covariance, call real inverses, and condition in observation
space. The package never does any of that, so agreement between the two is
meaningful. Everything assumes sigma2 > 0; full-rank oracles additionally
assume what their names say.
"""

import numpy as np
import pytest
from scipy import stats

from metareg import Dataset, Environment, TaskData


# ----------------------------------------------------------------------
# dense reference implementations
# ----------------------------------------------------------------------


def dense_marginal_cov(dataset, env):
    """Full M x M covariance of the stacked responses: block-diagonal
    X_i Sigma X_iᵀ + sigma2 I."""
    blocks = [
        t.X @ env.Sigma @ t.X.T + env.sigma2 * np.eye(t.m) for t in dataset
    ]
    m_total = sum(t.m for t in dataset)
    K = np.zeros((m_total, m_total))
    at = 0
    for B in blocks:
        m = B.shape[0]
        K[at : at + m, at : at + m] = B
        at += m
    return K


def dense_log_likelihood(dataset, env):
    """Stacked-Gaussian log density via scipy, built on the dense covariance."""
    K = dense_marginal_cov(dataset, env)
    y = np.concatenate([t.Y for t in dataset])
    mean = np.concatenate([t.X @ env.alpha for t in dataset])
    return stats.multivariate_normal.logpdf(y, mean=mean, cov=K)


def dense_posterior(task, alpha, sigma2, Sigma):
    """Condition theta on Y in observation space.

    Joint covariance of (theta, Y) is [[Sigma, Sigma Xᵀ], [X Sigma, K_block]]
    with K_block = X Sigma Xᵀ + sigma2 I, which is invertible whenever
    sigma2 > 0, so this also covers singular Sigma.
    """
    X, Y = task.X, task.Y
    if task.m == 0:
        return np.asarray(alpha, dtype=float), np.asarray(Sigma, dtype=float)
    K_block = X @ Sigma @ X.T + sigma2 * np.eye(task.m)
    gain = Sigma @ X.T @ np.linalg.inv(K_block)
    mu = alpha + gain @ (Y - X @ alpha)
    Tau = Sigma - gain @ X @ Sigma
    return mu, Tau


def dense_mle_alpha(dataset, env):
    """GLS estimate through the materialized covariance:
    (Psiᵀ K⁻¹ Psi)⁻¹ Psiᵀ K⁻¹ Y."""
    K = dense_marginal_cov(dataset, env)
    Psi = np.vstack([t.X for t in dataset])
    y = np.concatenate([t.Y for t in dataset])
    Kinv = np.linalg.inv(K)
    A = Psi.T @ Kinv @ Psi
    return np.linalg.solve(A, Psi.T @ Kinv @ y)


def dense_information(dataset, env):
    """Psiᵀ K⁻¹ Psi with K materialized."""
    K = dense_marginal_cov(dataset, env)
    Psi = np.vstack([t.X for t in dataset])
    return Psi.T @ np.linalg.inv(K) @ Psi


def dense_matrix_M(dataset, env):
    """Tau_n Sigma⁻¹ A⁻¹ Sigma⁻¹ Tau_n, real inverses throughout.

    Requires positive definite Sigma; the last task is the target.
    """
    A = dense_information(dataset, env)
    _, Tau = dense_posterior(
        dataset.target, np.zeros(env.d), env.sigma2, env.Sigma
    )
    Sinv = np.linalg.inv(env.Sigma)
    middle = np.linalg.inv(A)
    M = Tau @ Sinv @ middle @ Sinv @ Tau
    return 0.5 * (M + M.T)


def dense_ols(X, Y):
    """Normal equations with a real inverse; X must have full column rank."""
    return np.linalg.inv(X.T @ X) @ X.T @ Y


def projector_cos2(A, B):
    """Largest eigenvalue of P_A P_B, the squared max correlation between
    the two column spans."""
    Qa, _ = np.linalg.qr(A)
    Qb, _ = np.linalg.qr(B)
    Pa = Qa @ Qa.T
    Pb = Qb @ Qb.T
    w = np.linalg.eigvals(Pa @ Pb)
    return float(np.max(w.real))


# ----------------------------------------------------------------------
# random instance builders
# ----------------------------------------------------------------------


def random_spd(d, rng, jitter=0.5):
    """Random symmetric positive definite matrix, eigenvalues >= jitter."""
    F = rng.standard_normal((d, d))
    return F @ F.T / d + jitter * np.eye(d)


def random_psd_singular(d, r, rng):
    """Random PSD matrix of rank r < d."""
    F = rng.standard_normal((d, r))
    return F @ F.T / d


def random_environment(d, rng, singular_rank=None):
    Sigma = (
        random_spd(d, rng)
        if singular_rank is None
        else random_psd_singular(d, singular_rank, rng)
    )
    return Environment(
        alpha=rng.standard_normal(d),
        sigma2=float(rng.uniform(0.3, 2.0)),
        Sigma=Sigma,
    )


def sample_task(env, m, rng):
    X = rng.standard_normal((m, env.d))
    theta = rng.multivariate_normal(env.alpha, env.Sigma)
    Y = X @ theta + np.sqrt(env.sigma2) * rng.standard_normal(m)
    return TaskData(X=X, Y=Y)


def sample_dataset(env, sizes, rng):
    return Dataset(tasks=[sample_task(env, m, rng) for m in sizes])


# ----------------------------------------------------------------------
# fixtures
# ----------------------------------------------------------------------


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


@pytest.fixture
def small_env(rng):
    """d = 3 environment with a well-conditioned covariance."""
    return random_environment(3, rng)


@pytest.fixture
def small_dataset(small_env, rng):
    """Five tasks of mixed sizes, including one wider than d."""
    return sample_dataset(small_env, [5, 2, 7, 4, 6], rng)
