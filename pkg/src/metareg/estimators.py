# Posterior of the target-task parameter, the plug-in predictor family, the
# generalized-least-squares meta-mean estimate, and weighted biased ridge.
#
# Every formula with a Sigma^{-1} in it is evaluated in the equivalent
# conditioning form built on solves with (sigma2 I + Sigma X^T X), which is
# invertible for every PSD Sigma. For singular Sigma this keeps the posterior
# confined to the affine span alpha + range(Sigma), which is the exact
# degenerate-prior posterior (and the limit of the full-rank formulas).

from dataclasses import dataclass

import numpy as np

from .core import PosteriorParams, _as_array, check_psd, sym


def _validate_prior(sigma2, Sigma):
    sigma2 = float(sigma2)
    if not np.isfinite(sigma2) or sigma2 <= 0.0:
        raise ValueError(f"sigma2 must be positive, got {sigma2}")
    return sigma2, check_psd(Sigma, "Sigma")


def _cap(Sigma, sigma2, S):
    return sigma2 * np.eye(Sigma.shape[0]) + Sigma @ S


def posterior_params(task, alpha, sigma2, Sigma):
    """Posterior mean and covariance of the task parameter given one task.

    Tau = (Sigma^{-1} + XᵀX/sigma2)^{-1} and mu = Tau(Sigma^{-1} alpha + XᵀY/sigma2),
    computed as Tau = Sigma - (sigma2 I + Sigma S)^{-1} Sigma S Sigma and
    mu = alpha + (sigma2 I + Sigma S)^{-1} Sigma Xᵀ(Y - X alpha) with S = XᵀX.
    """
    sigma2, Sigma = _validate_prior(sigma2, Sigma)
    alpha = _as_array(alpha, "alpha", 1)
    if task.m == 0:
        return PosteriorParams(mu=alpha.copy(), Tau=Sigma.copy())
    S = task.X.T @ task.X
    C = _cap(Sigma, sigma2, S)
    Tau = sym(Sigma - np.linalg.solve(C, Sigma @ S @ Sigma))
    mu = alpha + np.linalg.solve(C, Sigma @ (task.X.T @ task.Y - S @ alpha))
    return PosteriorParams(mu=mu, Tau=Tau)


def plug_in_theta(a, task, sigma2, Sigma):
    """Plug-in coefficient estimate Tau(Sigma^{-1} a + XᵀY/sigma2).

    Affine in a; at a = alpha it is the posterior mean.
    """
    sigma2, Sigma = _validate_prior(sigma2, Sigma)
    a = _as_array(a, "a", 1)
    if task.m == 0:
        return a.copy()
    S = task.X.T @ task.X
    C = _cap(Sigma, sigma2, S)
    return a + np.linalg.solve(C, Sigma @ (task.X.T @ task.Y - S @ a))


def alpha_normal_equations(dataset, sigma2, Sigma):
    """Accumulated normal equations of the meta-mean: A = Psiᵀ K^{-1} Psi and
    rhs = Psiᵀ K^{-1} Y, built task by task. Contributions from disjoint task
    sets add, so callers can cache the sum over a fixed pool."""
    sigma2, Sigma = _validate_prior(sigma2, Sigma)
    d = dataset.d
    A = np.zeros((d, d))
    rhs = np.zeros(d)
    for t in dataset:
        if t.m == 0:
            continue
        S = t.X.T @ t.X
        b = t.X.T @ t.Y
        W = np.linalg.solve(_cap(Sigma, sigma2, S), Sigma @ np.column_stack([S, b]))
        A += (S - S @ W[:, :d]) / sigma2
        rhs += (b - S @ W[:, d]) / sigma2
    return sym(A), rhs


def solve_alpha(A, rhs):
    """Meta-mean from accumulated normal equations; rejects rank deficiency."""
    d = A.shape[0]
    w = np.linalg.eigvalsh(A)
    if w[0] <= 1e-12 * max(w[-1], 1e-300):
        rank = int(np.sum(w > 1e-12 * max(w[-1], 1e-300)))
        raise ValueError(f"pooled design does not span the parameter space: rank {rank} < d={d}")
    return np.linalg.solve(A, rhs)


def mle_alpha(dataset, sigma2, Sigma):
    """Generalized-least-squares meta-mean (Psiᵀ K^{-1} Psi)^{-1} Psiᵀ K^{-1} Y.

    Computed from the per-task block structure of K; requires the pooled
    design to span R^d.
    """
    A, rhs = alpha_normal_equations(dataset, sigma2, Sigma)
    return solve_alpha(A, rhs)


@dataclass(frozen=True)
class WbrlsConfig:
    """Weighted biased ridge settings: pull toward b under the Gamma norm with
    weight lam."""

    b: np.ndarray
    Gamma: np.ndarray
    lam: float

    def __post_init__(self):
        b = _as_array(self.b, "b", 1)
        Gamma = check_psd(self.Gamma, "Gamma")
        lam = float(self.lam)
        if lam < 0:
            raise ValueError(f"lam must be nonnegative, got {lam}")
        if Gamma.shape[0] != b.shape[0]:
            raise ValueError(f"b has length {b.shape[0]} but Gamma is {Gamma.shape}")
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "Gamma", Gamma)
        object.__setattr__(self, "lam", lam)


def wbrls(task, cfg):
    """Minimizer of sum of squared residuals + (lam/2)·||theta - b||²_Gamma:
    (XᵀX + lam Gamma)^{-1}(XᵀY + lam Gamma b)."""
    A = task.X.T @ task.X + cfg.lam * cfg.Gamma
    rhs = task.X.T @ task.Y + cfg.lam * (cfg.Gamma @ cfg.b)
    try:
        theta = np.linalg.solve(A, rhs)
    except np.linalg.LinAlgError as e:
        raise ValueError(f"singular normal system in weighted biased ridge: {e}") from e
    # guard against solve() accepting a numerically singular system
    if not np.all(np.isfinite(theta)):
        raise ValueError("singular normal system in weighted biased ridge")
    return theta


def alpha_for_prediction(pred_value, x, task, sigma2, Sigma):
    """A biasing vector a whose plug-in prediction at x equals pred_value.

    Returns Sigma Tau^{-1} x · c with c = (pred_value - xᵀ·theta_hat(0)) / ||x||²;
    Sigma Tau^{-1} x = x + Sigma XᵀX x / sigma2 needs no inversion at all.
    """
    sigma2, Sigma = _validate_prior(sigma2, Sigma)
    x = _as_array(x, "x", 1)
    nrm2 = float(x @ x)
    if nrm2 == 0.0:
        raise ValueError("x must be nonzero")
    if task.m == 0:
        theta0_x = 0.0
        direction = x.copy()
    else:
        S = task.X.T @ task.X
        theta0 = np.linalg.solve(_cap(Sigma, sigma2, S), Sigma @ (task.X.T @ task.Y))
        theta0_x = float(x @ theta0)
        direction = x + (Sigma @ (S @ x)) / sigma2
    c = (float(pred_value) - theta0_x) / nrm2
    return direction * c


def predict(theta, x):
    """Inner product xᵀtheta."""
    theta = _as_array(theta, "theta", 1)
    x = _as_array(x, "x", 1)
    if theta.shape[0] != x.shape[0]:
        raise ValueError(f"theta has length {theta.shape[0]} but x has length {x.shape[0]}")
    return float(theta @ x)
