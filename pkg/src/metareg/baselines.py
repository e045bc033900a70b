# Baseline estimators the meta-learner is compared against: per-task and
# pooled least squares, biased ridge with a cross-validated pull strength,
# the method-of-moments subspace estimator, regression restricted to a given
# representation, and the subspace alignment metric.

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .core import Dataset, TaskData, _as_array


@dataclass(frozen=True)
class CvConfig:
    n_folds: int = 10
    n_lambda: int = 50
    lambda_range: tuple = (0.0, 100.0)
    n_splits_per_task: int = 10
    seed: int = 0

    def __post_init__(self):
        if int(self.n_folds) < 2:
            raise ValueError("n_folds must be at least 2")
        if int(self.n_lambda) < 1:
            raise ValueError("n_lambda must be at least 1")
        lo, hi = (float(v) for v in self.lambda_range)
        if not (np.isfinite(lo) and np.isfinite(hi) and 0.0 <= lo < hi):
            raise ValueError(f"lambda_range must satisfy 0 <= low < high, got {self.lambda_range}")
        if int(self.n_splits_per_task) < 1:
            raise ValueError("n_splits_per_task must be at least 1")
        object.__setattr__(self, "lambda_range", (lo, hi))


@dataclass(frozen=True)
class RepresentationBasis:
    """d x s matrix whose column span is the representation subspace."""

    B: np.ndarray
    s: int

    def __post_init__(self):
        B = _as_array(self.B, "B", 2)
        if not 1 <= int(self.s) <= B.shape[0]:
            raise ValueError(f"s must be in [1, {B.shape[0]}], got {self.s}")
        if B.shape[1] != int(self.s):
            raise ValueError(f"B has {B.shape[1]} columns but s={self.s}")
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "s", int(self.s))

    @property
    def d(self):
        return self.B.shape[0]


def ols(task):
    """Per-task least squares; minimum-norm solution when X is rank deficient."""
    theta, *_ = np.linalg.lstsq(task.X, task.Y, rcond=None)
    return theta


def pooled_bias(dataset):
    """Least squares on all tasks stacked into one regression; serves both as
    the all-tasks baseline and as the pull target of the biased ridge."""
    Xs = [t.X for t in dataset if t.m > 0]
    if not Xs:
        return np.zeros(dataset.d)
    Xp = np.vstack(Xs)
    Yp = np.concatenate([t.Y for t in dataset if t.m > 0])
    theta, *_ = np.linalg.lstsq(Xp, Yp, rcond=None)
    return theta


def biased_regression(task, bias, lam):
    """Ridge pulled toward bias: (XᵀX + lam I)⁻¹(XᵀY + lam·bias).

    lam=0 falls back to minimum-norm least squares when X is rank deficient.
    """
    bias = _as_array(bias, "bias", 1)
    if bias.shape[0] != task.d:
        raise ValueError(f"bias has dimension {bias.shape[0]}, task has d={task.d}")
    lam = float(lam)
    if not (np.isfinite(lam) and lam >= 0.0):
        raise ValueError(f"lambda must be finite and nonnegative, got {lam}")
    if lam == 0.0:
        return ols(task)
    S = task.X.T @ task.X
    return np.linalg.solve(S + lam * np.eye(task.d), task.X.T @ task.Y + lam * bias)


# =========================
# Lambda search
# =========================


def _lambda_candidates(cfg, rng):
    lo, hi = cfg.lambda_range
    floor = max(lo, 1e-3)
    lams = np.exp(rng.uniform(np.log(floor), np.log(hi), size=cfg.n_lambda))
    if lo <= 0.0:
        lams = np.concatenate([[0.0], lams])
    return np.sort(lams)


def _ridge_path_loss(Xa, Ya, Xt, Yt, bias, lams):
    # one eigendecomposition of the adaptation Gram serves every candidate
    d = Xa.shape[1]
    S = Xa.T @ Xa if Xa.shape[0] else np.zeros((d, d))
    c = Xa.T @ Ya if Xa.shape[0] else np.zeros(d)
    w, V = np.linalg.eigh(S)
    w = np.clip(w, 0.0, None)
    rhs = V.T @ c
    rhs_bias = V.T @ bias
    coef = np.empty((d, len(lams)))
    for j, lam in enumerate(lams):
        if lam > 0.0:
            coef[:, j] = (rhs + lam * rhs_bias) / (w + lam)
        else:
            cutoff = 1e-10 * max(w[-1], 1e-300)
            coef[:, j] = np.where(w > cutoff, rhs / np.where(w > cutoff, w, 1.0), 0.0)
    thetas = V @ coef
    resid = Xt @ thetas - Yt[:, None]
    return np.mean(resid**2, axis=0)


def select_lambda(source_tasks, cfg, target_m):
    """Pick the ridge pull strength by grouped cross-validation.

    Tasks are shuffled into n_folds groups; each group's bias comes from the
    complement, and each of its tasks is split n_splits_per_task times into an
    adaptation part of size min(target_m, m-1) and a held-out part. Returns the
    candidate with the smallest loss averaged over all evaluated splits; when
    several candidates tie to within rounding noise of the target scale, the
    strongest pull wins.
    """
    tasks = list(source_tasks)
    if len(tasks) < cfg.n_folds:
        raise ValueError(f"need at least {cfg.n_folds} source tasks, got {len(tasks)}")
    if int(target_m) < 0:
        raise ValueError(f"target_m must be nonnegative, got {target_m}")
    rng = np.random.default_rng(cfg.seed)
    lams = _lambda_candidates(cfg, rng)
    order = rng.permutation(len(tasks))
    groups = np.array_split(order, cfg.n_folds)
    if any(len(g) == 0 for g in groups):
        raise ValueError("a cross-validation group is empty")
    losses = np.zeros(len(lams))
    evaluated = 0
    scale = 0.0
    for k, group in enumerate(groups):
        in_group = np.zeros(len(tasks), dtype=bool)
        in_group[group] = True
        bias = pooled_bias(Dataset([t for i, t in enumerate(tasks) if not in_group[i]]))
        for i in group:
            t = tasks[i]
            if t.m < 1:
                continue
            a = min(int(target_m), t.m - 1)
            for _ in range(cfg.n_splits_per_task):
                perm = rng.permutation(t.m)
                adapt, test = perm[:a], perm[a:]
                losses += _ridge_path_loss(t.X[adapt], t.Y[adapt], t.X[test], t.Y[test], bias, lams)
                scale += float(np.mean(t.Y[test] ** 2))
                evaluated += 1
    if evaluated == 0:
        raise ValueError("no source task has enough rows to split")
    mean_losses = losses / evaluated
    # exact fits leave every candidate at rounding-noise level; break such
    # ties toward the heaviest pull instead of by grid position
    cutoff = mean_losses.min() + 1e-9 * max(scale / evaluated, 1e-300)
    return float(lams[int(np.flatnonzero(mean_losses <= cutoff)[-1])])


# =========================
# Subspace methods
# =========================


def mom_estimator(source_tasks, s):
    """Method-of-moments representation: top eigenpairs of the pooled
    y² x xᵀ moment matrix, columns scaled by their singular values."""
    s = int(s)
    if s < 1:
        raise ValueError(f"s must be at least 1, got {s}")
    d = source_tasks.d if isinstance(source_tasks, Dataset) else source_tasks[0].d
    if s > d:
        raise ValueError(f"s must be at most d={d}, got {s}")
    moment = np.zeros((d, d))
    total = 0
    for t in source_tasks:
        if t.m == 0:
            continue
        moment += np.einsum("m,mi,mj->ij", t.Y**2, t.X, t.X)
        total += t.m
    if total == 0:
        raise ValueError("no samples in source tasks")
    moment /= total
    if not np.any(moment):
        raise ValueError("moment matrix is zero: degenerate data")
    w, U = np.linalg.eigh(0.5 * (moment + moment.T))
    w, U = np.clip(w[::-1], 0.0, None), U[:, ::-1]
    return RepresentationBasis(B=U[:, :s] * w[:s], s=s)


def oracle_representation(task, basis):
    """Least squares on features projected through the basis; the returned
    coefficient vector lives in the basis span."""
    if basis.d != task.d:
        raise ValueError(f"basis dimension {basis.d} does not match task d={task.d}")
    w, *_ = np.linalg.lstsq(task.X @ basis.B, task.Y, rcond=None)
    return basis.B @ w


def max_correlation(A, B):
    """Subspace alignment: sqrt(1 - cos²) with cos the largest correlation
    between unit vectors of the two column spans. 0 for identical spans,
    1 for orthogonal ones."""
    A = _as_array(A, "A", 2)
    B = _as_array(B, "B", 2)
    if A.shape[0] != B.shape[0]:
        raise ValueError(f"ambient dimensions differ: {A.shape[0]} vs {B.shape[0]}")
    if not np.any(A) or not np.any(B):
        raise ValueError("zero matrix has no span")
    Qa, Qb = scipy.linalg.orth(A), scipy.linalg.orth(B)
    svals = np.linalg.svd(Qa.T @ Qb, compute_uv=False)
    cos = min(float(svals[0]) if svals.size else 0.0, 1.0)
    return float(np.sqrt(max(0.0, 1.0 - cos**2)))
