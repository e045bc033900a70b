# Transfer-risk identity and distribution-dependent bounds: the error-matrix M,
# per-query bound reports, closed forms for isotropic designs, and the
# eigenvalue formulas they rest on.

import math
from dataclasses import dataclass

import numpy as np

from .core import Dataset, TaskData, _as_array, check_psd, sym

# computed, not hard-coded decimal
SIXTEEN_SQRT_E = 16.0 * math.exp(0.5)


def lower_highprob_coefficient(delta):
    """M-term coefficient of the high-probability lower bound at error
    probability delta; negative (weak but valid bound) when delta <= 3/4."""
    delta = float(delta)
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must be in (0, 1), got {delta}")
    return 0.5 * math.log(1.0 / (4.0 * (1.0 - delta)))


def upper_highprob_coefficient(delta):
    """M-term coefficient of the high-probability upper bound at error
    probability delta."""
    delta = float(delta)
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must be in (0, 1), got {delta}")
    return 2.0 * math.log(2.0 / delta)


def _design_list(dataset_inputs):
    if isinstance(dataset_inputs, Dataset):
        return [t.X for t in dataset_inputs]
    out = []
    for i, X in enumerate(dataset_inputs):
        if isinstance(X, TaskData):
            X = X.X
        X = np.asarray(X, dtype=float)
        if X.ndim != 2:
            raise ValueError(f"design {i} must be a matrix, got shape {X.shape}")
        out.append(X)
    if not out:
        raise ValueError("need at least one design")
    d = out[0].shape[1]
    for i, X in enumerate(out):
        if X.shape[1] != d:
            raise ValueError(f"design {i}: dimension mismatch, d={X.shape[1]} but d={d} for design 0")
    return out


def pooled_information(dataset_inputs, sigma2, Sigma):
    """A = sum_i X_iᵀ (X_i Sigma X_iᵀ + sigma2 I)^{-1} X_i via d x d solves.

    Contributions from disjoint design sets add, so callers can cache the sum
    over a fixed pool of tasks.
    """
    Xs = _design_list(dataset_inputs)
    d = Xs[0].shape[1]
    A = np.zeros((d, d))
    for X in Xs:
        if X.shape[0] == 0:
            continue
        S = X.T @ X
        C = sigma2 * np.eye(d) + Sigma @ S
        A += (S - S @ np.linalg.solve(C, Sigma @ S)) / sigma2
    return sym(A)


def matrix_M(dataset_inputs, sigma2, Sigma, information=None):
    """Error matrix of the meta-mean plug-in: Tau Sigma^{-1} A^{-1} Sigma^{-1} Tau
    with A the pooled information matrix.

    Evaluated as G A^{-1} Gᵀ with G = sigma2 (sigma2 I + Sigma XₙᵀXₙ)^{-1}, which
    stays finite for singular Sigma. The last design is the target task.
    information, when given, must be the pooled information of all tasks
    including the target; only the target design is read from dataset_inputs.
    """
    Xs = _design_list(dataset_inputs)
    sigma2 = float(sigma2)
    if sigma2 <= 0.0:
        raise ValueError(f"sigma2 must be positive, got {sigma2}")
    Sigma = check_psd(Sigma, "Sigma")
    d = Sigma.shape[0]
    A = pooled_information(Xs, sigma2, Sigma) if information is None else sym(np.asarray(information, dtype=float))
    w = np.linalg.eigvalsh(A)
    if w[0] <= 1e-12 * max(w[-1], 1e-300):
        rank = int(np.sum(w > 1e-12 * max(w[-1], 1e-300)))
        raise ValueError(f"pooled design does not span the parameter space: rank {rank} < d={d}")
    Sn = Xs[-1].T @ Xs[-1]
    G = sigma2 * np.linalg.inv(sigma2 * np.eye(d) + Sigma @ Sn)
    return sym(G @ np.linalg.solve(A, G.T))


def _tau_matrix(Xn, sigma2, Sigma):
    if Xn.shape[0] == 0:
        return Sigma.copy()
    S = Xn.T @ Xn
    C = sigma2 * np.eye(Sigma.shape[0]) + Sigma @ S
    return sym(Sigma - np.linalg.solve(C, Sigma @ S @ Sigma))


def _quad(A, x):
    v = float(x @ A @ x)
    return v if v > 0.0 else 0.0  # PSD by construction; clip fp noise


@dataclass(frozen=True)
class BoundReport:
    """All bound and risk values at one query point.

    lower_highprob / upper_highprob map each requested error probability delta
    to the bound value that holds with probability at least 1 - delta.
    """

    xMx: float
    xTx: float
    sigma2: float
    expected_risk_mle: float
    lower_unbiased: float
    lower_all: float
    lower_highprob: dict
    upper_highprob: dict


def bound_report(dataset_inputs, sigma2, Sigma, x, deltas=()):
    """Evaluate the risk identity and all lower/upper bounds at query x.

    expected_risk_mle = lower_unbiased = xᵀMx + xᵀTau x + sigma2;
    lower_all divides the M term by 16·sqrt(e). High-probability coefficients
    are reported as-is (the lower one is negative for delta <= 3/4).
    """
    Xs = _design_list(dataset_inputs)
    sigma2 = float(sigma2)
    Sigma = check_psd(Sigma, "Sigma")
    x = _as_array(x, "x", 1)
    M = matrix_M(Xs, sigma2, Sigma)
    Tau = _tau_matrix(Xs[-1], sigma2, Sigma)
    xMx = _quad(M, x)
    xTx = _quad(Tau, x)
    base = xTx + sigma2
    lower_hp = {float(dl): lower_highprob_coefficient(dl) * xMx + base for dl in deltas}
    upper_hp = {float(dl): upper_highprob_coefficient(dl) * xMx + base for dl in deltas}
    return BoundReport(
        xMx=xMx,
        xTx=xTx,
        sigma2=sigma2,
        expected_risk_mle=xMx + base,
        lower_unbiased=xMx + base,
        lower_all=xMx / SIXTEEN_SQRT_E + base,
        lower_highprob=lower_hp,
        upper_highprob=upper_hp,
    )


# =========================
# Isotropic closed forms
# =========================


@dataclass(frozen=True)
class IsotropicSpec:
    """Problem sizes for designs with X_iᵀX_i = (m_i/d) I and an isotropic or
    rank-s task covariance spectrum.

    Exactly one of tau2 (spherical: Sigma = tau2 I) or eigenvalues
    (descending, positive, rank s <= d) must be given.
    """

    d: int
    n: int
    m: tuple
    sigma2: float
    tau2: float = None
    eigenvalues: tuple = None

    def __post_init__(self):
        if self.d < 1 or self.n < 1:
            raise ValueError("d and n must be positive")
        m = tuple(int(v) for v in (self.m if np.iterable(self.m) else [self.m] * self.n))
        if len(m) != self.n or any(v < 1 for v in m):
            raise ValueError(f"m must be {self.n} positive sample sizes, got {m}")
        if float(self.sigma2) <= 0.0:
            raise ValueError("sigma2 must be positive")
        if (self.tau2 is None) == (self.eigenvalues is None):
            raise ValueError("give exactly one of tau2 or eigenvalues")
        if self.tau2 is not None and float(self.tau2) < 0.0:
            raise ValueError("tau2 must be nonnegative")
        if self.eigenvalues is not None:
            ev = tuple(float(v) for v in self.eigenvalues)
            if len(ev) < 1 or len(ev) > self.d:
                raise ValueError(f"rank must be in [1, d], got {len(ev)}")
            if any(v <= 0.0 for v in ev):
                raise ValueError("eigenvalues must be strictly positive up to the rank")
            if any(ev[j] < ev[j + 1] for j in range(len(ev) - 1)):
                raise ValueError("eigenvalues must be sorted in descending order")
            object.__setattr__(self, "eigenvalues", ev)
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "sigma2", float(self.sigma2))
        if self.tau2 is not None:
            object.__setattr__(self, "tau2", float(self.tau2))

    @property
    def m_n(self):
        return self.m[-1]

    @property
    def rank(self):
        return self.d if self.eigenvalues is None else len(self.eigenvalues)


def harmonic_mean(spec, z):
    """H_z = n / sum_i 1/(z + d sigma2 / m_i)."""
    terms = z + spec.d * spec.sigma2 / np.asarray(spec.m, dtype=float)
    return spec.n / float(np.sum(1.0 / terms))


def eigen_formulas(spec):
    """Eigenvalues of M and Tau for isotropic designs, one pair per dimension.

    lam_M(lam) = sigma2²·d²/(m_n lam + d sigma2)² · H_lam / n and
    lam_T(lam) = d sigma2 lam / (d sigma2 + m_n lam), evaluated on the spectrum
    padded with zeros beyond the rank (where lam_M tends to the nonzero limit
    d sigma2 / M and lam_T to 0).
    """
    d, s2, m_n = spec.d, spec.sigma2, spec.m_n
    if spec.tau2 is not None:
        lams = np.full(d, spec.tau2)
    else:
        lams = np.zeros(d)
        lams[: spec.rank] = spec.eigenvalues
    lam_M = np.array(
        [s2**2 * d**2 / (m_n * lam + d * s2) ** 2 * harmonic_mean(spec, lam) / spec.n for lam in lams]
    )
    lam_T = np.array([d * s2 * lam / (d * s2 + m_n * lam) for lam in lams])
    return lam_M, lam_T


def corollary1_bound(spec, norm_x=1.0):
    """Spherical closed-form lower bound on the excess of E[L(x)] over sigma2,
    in units of sigma2, at ||x|| = norm_x:

    (H_{tau2}/(16 sqrt e)) · d² sigma2 / (n (tau2 m_n + d sigma2)²)
      + d tau2 / (tau2 m_n + d sigma2).
    """
    if spec.tau2 is None:
        raise ValueError("spherical spectrum (tau2) required")
    d, s2, m_n, t2 = spec.d, spec.sigma2, spec.m_n, spec.tau2
    H = harmonic_mean(spec, t2)
    first = (H / SIXTEEN_SQRT_E) * d**2 * s2 / (spec.n * (t2 * m_n + d * s2) ** 2)
    second = d * t2 / (t2 * m_n + d * s2)
    return float(norm_x) ** 2 * (first + second)


def corollary2_bound(spec, proj_norm2=None):
    """Rank-s closed-form lower bound, same units as corollary1_bound.

    proj_norm2 is the squared norm of the query's projection onto the rank-s
    support; the displayed form fixes it to s/d (default).
    """
    if spec.eigenvalues is None:
        raise ValueError("rank-s spectrum (eigenvalues) required")
    d, s2, m_n = spec.d, spec.sigma2, spec.m_n
    lam1, lams = spec.eigenvalues[0], spec.eigenvalues[-1]
    if proj_norm2 is None:
        proj_norm2 = spec.rank / spec.d
    H = harmonic_mean(spec, lams)
    first = (H / SIXTEEN_SQRT_E) * d**2 * s2 / (spec.n * (lam1 * m_n + d * s2) ** 2)
    second = d * lams / (lams * m_n + d * s2)
    return float(proj_norm2) * (first + second)
