# Domain types for multi-task fixed-design regression (environment, tasks,
# stacked designs) plus the block-structured marginal Gaussian: K^{-1} products
# and the marginal log-likelihood, never materializing the full M x M matrix.

from dataclasses import dataclass, field

import numpy as np

LOG_2PI = float(np.log(2.0 * np.pi))

# =========================
# Numerics utilities
# =========================


def sym(A):
    """Symmetrize: (A + A^T)/2, drift control after products."""
    return (A + A.T) / 2.0


def _as_array(a, name, ndim):
    a = np.asarray(a, dtype=float)
    if a.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-dimensional, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite values")
    return a


def _readonly(a):
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


def check_psd(A, name="matrix", sym_rtol=1e-12, eig_rtol=1e-10):
    """Validate symmetry (relative) and eigenvalue nonnegativity of a square matrix.

    Returns the symmetrized copy. Raises ValueError when the input is
    asymmetric beyond sym_rtol or has an eigenvalue below -eig_rtol * lambda_max.
    """
    A = _as_array(A, name, 2)
    if A.shape[0] != A.shape[1]:
        raise ValueError(f"{name} must be square, got shape {A.shape}")
    scale = np.max(np.abs(A)) if A.size else 0.0
    if scale > 0 and np.max(np.abs(A - A.T)) > sym_rtol * scale:
        raise ValueError(f"{name} is not symmetric (relative tolerance {sym_rtol})")
    S = sym(A)
    w = np.linalg.eigvalsh(S) if S.size else np.zeros(0)
    lam_max = max(w[-1], 0.0) if w.size else 0.0
    if w.size and w[0] < -eig_rtol * lam_max:
        raise ValueError(f"{name} is not PSD: min eigenvalue {w[0]:.3e}")
    return S


def psd_pinv(A, cutoff=1e-10):
    """Pseudo-inverse of a symmetric PSD matrix via eigendecomposition.

    Eigenvalues below cutoff * lambda_max are treated as exact zeros.
    """
    S = sym(np.asarray(A, dtype=float))
    w, V = np.linalg.eigh(S)
    lam_max = max(w[-1], 0.0)
    keep = w > cutoff * lam_max
    inv_w = np.where(keep, 1.0 / np.where(keep, w, 1.0), 0.0)
    return sym((V * inv_w) @ V.T)


# =========================
# Domain types
# =========================


@dataclass(frozen=True)
class Environment:
    """Task distribution (alpha, sigma2, Sigma): theta_i ~ N(alpha, Sigma),
    label noise N(0, sigma2)."""

    alpha: np.ndarray
    sigma2: float
    Sigma: np.ndarray

    def __post_init__(self):
        alpha = _as_array(self.alpha, "alpha", 1)
        sigma2 = float(self.sigma2)
        if not np.isfinite(sigma2) or sigma2 <= 0.0:
            raise ValueError(f"sigma2 must be positive, got {sigma2}")
        Sigma = check_psd(self.Sigma, "Sigma")
        if Sigma.shape[0] != alpha.shape[0]:
            raise ValueError(
                f"alpha has length {alpha.shape[0]} but Sigma is {Sigma.shape[0]}x{Sigma.shape[1]}"
            )
        object.__setattr__(self, "alpha", _readonly(alpha))
        object.__setattr__(self, "sigma2", sigma2)
        object.__setattr__(self, "Sigma", _readonly(Sigma))

    @property
    def d(self):
        return self.alpha.shape[0]


@dataclass(frozen=True)
class TaskData:
    """One task: fixed m x d design X and length-m targets Y. m = 0 is legal."""

    X: np.ndarray
    Y: np.ndarray

    def __post_init__(self):
        X = _as_array(self.X, "X", 2)
        Y = _as_array(self.Y, "Y", 1)
        if X.shape[0] != Y.shape[0]:
            raise ValueError(f"X has {X.shape[0]} rows but Y has length {Y.shape[0]}")
        object.__setattr__(self, "X", _readonly(X))
        object.__setattr__(self, "Y", _readonly(Y))

    @property
    def m(self):
        return self.X.shape[0]

    @property
    def d(self):
        return self.X.shape[1]


@dataclass(frozen=True)
class Dataset:
    """Ordered tasks (D_1, ..., D_n); the last task is the prediction target."""

    tasks: tuple

    def __init__(self, tasks):
        tasks = tuple(tasks)
        if len(tasks) == 0:
            raise ValueError("Dataset needs at least one task")
        d = tasks[0].d
        for i, t in enumerate(tasks):
            if not isinstance(t, TaskData):
                raise ValueError(f"task {i}: expected TaskData, got {type(t).__name__}")
            if t.d != d:
                raise ValueError(f"task {i}: dimension mismatch, d={t.d} but d={d} for task 0")
        object.__setattr__(self, "tasks", tasks)

    @property
    def n(self):
        return len(self.tasks)

    @property
    def d(self):
        return self.tasks[0].d

    @property
    def M(self):
        return sum(t.m for t in self.tasks)

    @property
    def target(self):
        return self.tasks[-1]

    def __iter__(self):
        return iter(self.tasks)

    def __len__(self):
        return len(self.tasks)


@dataclass(frozen=True)
class AggregateDesign:
    """Row-stacked design Psi (M x d) with per-task [start, stop) row ranges."""

    Psi: np.ndarray
    task_offsets: tuple


@dataclass(frozen=True)
class PosteriorParams:
    """Gaussian posterior over a task parameter: mean mu, covariance Tau."""

    mu: np.ndarray
    Tau: np.ndarray


# =========================
# Aggregate constructions
# =========================


def build_aggregate(dataset):
    """Stack the per-task designs into Psi and record the block row ranges."""
    offsets = []
    stop = 0
    for t in dataset:
        start, stop = stop, stop + t.m
        offsets.append((start, stop))
    Psi = np.vstack([t.X for t in dataset]) if stop > 0 else np.zeros((0, dataset.d))
    return AggregateDesign(Psi=_readonly(Psi), task_offsets=tuple(offsets))


def _check_env_dataset(dataset, env):
    if env.d != dataset.d:
        raise ValueError(f"environment has d={env.d} but dataset has d={dataset.d}")


def _cap_solve(Sigma, sigma2, S, B):
    # Solve (sigma2*I + Sigma S) Z = B. The coefficient matrix has eigenvalues
    # sigma2 + eig(Sigma S) with eig(Sigma S) real nonnegative, so it is
    # invertible for every PSD Sigma, including singular ones.
    d = Sigma.shape[0]
    C = sigma2 * np.eye(d) + Sigma @ S
    return np.linalg.solve(C, B)


def _block_K_inv_apply(X, Sigma, sigma2, v):
    # (X Sigma X^T + sigma2 I)^{-1} v without forming the m x m block:
    # equals (v - X w)/sigma2 with (sigma2 I + Sigma X^T X) w = Sigma X^T v.
    if X.shape[0] == 0:
        return v
    w = _cap_solve(Sigma, sigma2, X.T @ X, Sigma @ (X.T @ v))
    return (v - X @ w) / sigma2


def apply_K_inverse(dataset, env, v):
    """Apply the inverse marginal covariance K^{-1} to an M-vector, blockwise.

    K is block diagonal with blocks X_i Sigma X_i^T + sigma2 I; each block is
    inverted through a d x d solve.
    """
    _check_env_dataset(dataset, env)
    v = _as_array(v, "v", 1)
    if v.shape[0] != dataset.M:
        raise ValueError(f"v has length {v.shape[0]}, expected M={dataset.M}")
    out = np.empty_like(v)
    stop = 0
    for t in dataset:
        start, stop = stop, stop + t.m
        out[start:stop] = _block_K_inv_apply(t.X, env.Sigma, env.sigma2, v[start:stop])
    return out


def marginal_log_likelihood(dataset, env):
    """Log-density of the stacked targets: ln N(Y; Psi alpha, K), blockwise.

    Uses det(X Sigma X^T + sigma2 I) = sigma2^(m-d) det(sigma2 I + Sigma X^T X)
    so no m x m factorization is needed.
    """
    _check_env_dataset(dataset, env)
    M = dataset.M
    if M < 1:
        raise ValueError("marginal_log_likelihood needs at least one sample")
    Sigma, sigma2, alpha = env.Sigma, env.sigma2, env.alpha
    d = env.d
    log_sigma2 = np.log(sigma2)
    quad = 0.0
    logdet = 0.0
    for i, t in enumerate(dataset):
        if t.m == 0:
            continue
        r = t.Y - t.X @ alpha
        Xtr = t.X.T @ r
        S = t.X.T @ t.X
        C = sigma2 * np.eye(d) + Sigma @ S
        w = np.linalg.solve(C, Sigma @ Xtr)
        quad += (r @ r - Xtr @ w) / sigma2
        sign, ld = np.linalg.slogdet(C)
        if sign <= 0:
            raise ValueError(f"task {i}: marginal covariance block is not positive definite")
        logdet += (t.m - d) * log_sigma2 + ld
    return -0.5 * (quad + logdet + M * LOG_2PI)
