# Expectation-maximization for the task-level Gaussian when the mean, the
# covariance, and the noise level are all unknown. Tasks are grouped by sample
# size so each E-step runs as one stacked batch of d x d solves.

from dataclasses import dataclass, field

import numpy as np

from .core import Dataset, Environment, PosteriorParams, sym


@dataclass(frozen=True)
class EmConfig:
    """init: optional Environment used as the starting point; when None the
    start is pooled least squares for the mean, the identity for the
    covariance, and the pooled per-task residual variance for the noise."""

    init: Environment = None
    rel_tol: float = 1e-6
    max_iter: int = 1000

    def __post_init__(self):
        if self.init is not None and not isinstance(self.init, Environment):
            raise TypeError("init must be an Environment or None")
        if not float(self.rel_tol) > 0.0:
            raise ValueError("rel_tol must be positive")
        if int(self.max_iter) < 1:
            raise ValueError("max_iter must be at least 1")


@dataclass
class EmTrace:
    iterations: int = 0
    log_likelihoods: list = field(default_factory=list)
    converged: bool = False


# =========================
# Batched task groups
# =========================


class _Group:
    # all tasks of one sample size, stacked; indices map back into the dataset
    def __init__(self, indices, tasks):
        self.indices = list(indices)
        self.X = np.stack([t.X for t in tasks])            # (k, m, d)
        self.Y = np.stack([t.Y for t in tasks])            # (k, m)
        self.S = np.einsum("kmi,kmj->kij", self.X, self.X)
        self.b = np.einsum("kmi,km->ki", self.X, self.Y)
        self.yy = np.einsum("km,km->k", self.Y, self.Y)
        self.k, self.m, self.d = self.X.shape


def _group_by_size(dataset):
    by_m = {}
    for i, t in enumerate(dataset):
        by_m.setdefault(t.m, []).append(i)
    return [_Group(idx, [dataset.tasks[i] for i in idx]) for m, idx in sorted(by_m.items())]


def _posterior_batch(g, alpha, sigma2, Sigma):
    # mu = alpha + C^{-1} Sigma (b - S alpha), Tau = Sigma - C^{-1} Sigma S Sigma,
    # with C = sigma2 I + Sigma S; one batched solve for both right-hand sides.
    d = g.d
    eye = np.eye(d)
    SigS = Sigma @ g.S                                     # (k, d, d)
    C = sigma2 * eye + SigS
    rhs = np.concatenate([SigS @ Sigma, (Sigma @ (g.b - g.S @ alpha)[..., None])], axis=2)
    sol = np.linalg.solve(C, rhs)
    mu = alpha + sol[..., d]
    Tau = Sigma - sol[..., :d]
    Tau = 0.5 * (Tau + np.transpose(Tau, (0, 2, 1)))
    return mu, Tau, C


def _batch_log_likelihood(g, alpha, sigma2, Sigma, C):
    # marginal log-density of the stacked observations for this group
    r = g.Y - g.X @ alpha                                  # (k, m)
    Xtr = np.einsum("kmi,km->ki", g.X, r)
    w = np.linalg.solve(C, np.einsum("ij,kj->ki", Sigma, Xtr)[..., None])[..., 0]
    quad = (np.einsum("km,km->k", r, r) - np.einsum("ki,ki->k", Xtr, w)) / sigma2
    sign, absdet = np.linalg.slogdet(C)
    if np.any(sign <= 0):
        raise np.linalg.LinAlgError("marginal covariance block is not positive definite")
    logdet = (g.m - g.d) * np.log(sigma2) + absdet
    return -0.5 * float(np.sum(quad + logdet + g.m * np.log(2.0 * np.pi)))


def e_step(dataset, env):
    """Posterior mean and covariance of every task's coefficient vector under
    the current parameters. Returns a list aligned with the dataset order."""
    out = [None] * dataset.n
    for g in _group_by_size(dataset):
        if g.m == 0:
            for i in g.indices:
                out[i] = PosteriorParams(mu=env.alpha.copy(), Tau=env.Sigma.copy())
            continue
        mu, Tau, _ = _posterior_batch(g, env.alpha, env.sigma2, env.Sigma)
        for j, i in enumerate(g.indices):
            out[i] = PosteriorParams(mu=mu[j], Tau=Tau[j])
    return out


def _reject_empty(dataset):
    for i, t in enumerate(dataset):
        if t.m == 0:
            raise ValueError(f"task {i} is empty: the noise update is undefined")


def _clip_spectrum(Sigma):
    # the exact covariance update is PSD, so negative eigenvalues are solver
    # noise (large near the sigma2 -> 0 boundary); project them away and leave
    # anything beyond percent scale for validation to reject
    w, V = np.linalg.eigh(Sigma)
    lo = float(w[0])
    if lo < 0.0 and lo > -1e-2 * max(float(w[-1]), 1e-300):
        Sigma = sym((V * np.clip(w, 0.0, None)) @ V.T)
    return Sigma


def _noise_floor(scale):
    # the noise update is nonnegative in exact arithmetic but can dip below
    # zero numerically once a fit heads for the degenerate boundary
    return max(1e-10 * scale, 1e-300)


def m_step(dataset, posteriors):
    """Closed-form parameter update from the task posteriors.

    The noise update pools the expected squared residuals
    ||Y_i - X_i mu_i||^2 + tr(Tau_i S_i) over every sample of every task.
    Averaging per task first looks natural but is not the maximizer of the
    expected complete-data likelihood once task sizes differ, and it breaks
    the ascent property. Every task must have at least one row.
    """
    if len(posteriors) != dataset.n:
        raise ValueError(f"expected {dataset.n} posteriors, got {len(posteriors)}")
    _reject_empty(dataset)
    d = dataset.d
    mus = np.stack([p.mu for p in posteriors])
    alpha = mus.mean(axis=0)
    Sigma = np.zeros((d, d))
    for p in posteriors:
        dev = p.mu - alpha
        Sigma += p.Tau + np.outer(dev, dev)
    Sigma = _clip_spectrum(sym(Sigma / dataset.n))
    num = 0.0
    for t, p in zip(dataset, posteriors):
        r = t.Y - t.X @ p.mu
        S = t.X.T @ t.X
        num += float(r @ r) + float(np.einsum("ij,ji->", p.Tau, S))
    rows = sum(t.m for t in dataset)
    scale = sum(float(t.Y @ t.Y) for t in dataset) / rows
    sigma2 = max(num / rows, _noise_floor(scale))
    return Environment(alpha=alpha, sigma2=sigma2, Sigma=Sigma)


def _default_init(dataset):
    d = dataset.d
    Xs = [t.X for t in dataset if t.m > 0]
    Ys = [t.Y for t in dataset if t.m > 0]
    alpha = np.zeros(d)
    if Xs:
        Xp, Yp = np.vstack(Xs), np.concatenate(Ys)
        if np.linalg.matrix_rank(Xp) == d:
            alpha, *_ = np.linalg.lstsq(Xp, Yp, rcond=None)
    rss, dof = 0.0, 0
    for t in dataset:
        if t.m > t.d:
            theta, *_ = np.linalg.lstsq(t.X, t.Y, rcond=None)
            r = t.Y - t.X @ theta
            rss += float(r @ r)
            dof += t.m - t.d
    sigma2 = rss / dof if dof > 0 else 1.0
    # near-interpolated data would start the noise at rounding-error level
    # and make the first conditioning step wildly ill-posed
    scale = float(np.mean(Yp**2)) if Xs else 1.0
    sigma2 = max(sigma2, 1e-8 * scale, 1e-12)
    return Environment(alpha=alpha, sigma2=sigma2, Sigma=np.eye(d))


def _rel_change(new, old):
    eps = 1e-12
    return max(
        np.linalg.norm(new.alpha - old.alpha) / (np.linalg.norm(old.alpha) + eps),
        np.linalg.norm(new.Sigma - old.Sigma) / (np.linalg.norm(old.Sigma) + eps),
        abs(new.sigma2 - old.sigma2) / (old.sigma2 + eps),
    )


def _em_sweep(groups, n, d, env):
    # one E-step plus M-step over the grouped data; returns the new parameters
    mus = np.empty((n, d))
    Taus = np.empty((n, d, d))
    num = 0.0
    for g in groups:
        mu, Tau, _ = _posterior_batch(g, env.alpha, env.sigma2, env.Sigma)
        mus[g.indices] = mu
        Taus[g.indices] = Tau
        resid = g.Y - np.einsum("kmi,ki->km", g.X, mu)
        rss = np.einsum("km,km->k", resid, resid)
        tr = np.einsum("kij,kji->k", Tau, g.S)
        num += float(np.sum(rss + tr))
    alpha = mus.mean(axis=0)
    dev = mus - alpha
    Sigma = _clip_spectrum(sym((Taus.sum(axis=0) + dev.T @ dev) / n))
    rows = sum(g.k * g.m for g in groups)
    scale = sum(float(g.yy.sum()) for g in groups) / rows
    sigma2 = max(num / rows, _noise_floor(scale))
    return Environment(alpha=alpha, sigma2=sigma2, Sigma=Sigma)


def em_fit(dataset, cfg=EmConfig()):
    """Run EM to a relative-change tolerance; returns the fitted Environment
    and a trace with per-iteration marginal log-likelihoods."""
    if dataset.n < 1:
        raise ValueError("need at least one task")
    _reject_empty(dataset)
    env = cfg.init if cfg.init is not None else _default_init(dataset)
    if env.d != dataset.d:
        raise ValueError(f"init dimension {env.d} does not match data dimension {dataset.d}")
    groups = _group_by_size(dataset)
    trace = EmTrace()
    for it in range(1, cfg.max_iter + 1):
        try:
            new = _em_sweep(groups, dataset.n, dataset.d, env)
            ll = 0.0
            for g in groups:
                C = new.sigma2 * np.eye(g.d) + new.Sigma @ g.S
                ll += _batch_log_likelihood(g, new.alpha, new.sigma2, new.Sigma, C)
        except (ValueError, np.linalg.LinAlgError) as e:
            raise RuntimeError(f"iteration {it}: {e}") from e
        trace.iterations = it
        trace.log_likelihoods.append(ll)
        if _rel_change(new, env) < cfg.rel_tol:
            env = new
            trace.converged = True
            break
        env = new
    return env, trace


def rank_clip(Sigma, s):
    """Keep the top-s eigenpairs of a covariance estimate.

    Returns the clipped matrix and a d x s basis whose columns are the kept
    eigenvectors scaled by the square roots of their eigenvalues.
    """
    Sigma = np.asarray(Sigma, dtype=float)
    d = Sigma.shape[0]
    if not 1 <= int(s) <= d:
        raise ValueError(f"s must be in [1, {d}], got {s}")
    s = int(s)
    w, V = np.linalg.eigh(sym(Sigma))
    w, V = w[::-1], V[:, ::-1]
    w = np.clip(w, 0.0, None)
    w[s:] = 0.0
    clipped = sym((V * w) @ V.T)
    basis = V[:, :s] * np.sqrt(w[:s])
    return clipped, basis
