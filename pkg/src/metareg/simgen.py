# Synthetic data generators: Fourier and unit-sphere input designs, full and
# low-rank task covariances, the isotropic-input setup used for subspace
# recovery, and a CSV round trip for generated datasets.

import csv
from dataclasses import dataclass

import numpy as np

from .core import Dataset, Environment, TaskData

KINDS = ("fourier", "spherical", "lowrank_fourier", "mom_setup")
_DEFAULT_D = {"fourier": 11, "spherical": 42, "lowrank_fourier": 11, "mom_setup": 100}
FOURIER_D = 11


@dataclass(frozen=True)
class GenSpec:
    """What to generate: input family, problem sizes, and the seed.

    m_per_task may be a single size or one size per training task; test-task
    adaptation splits use the last (or only) value. It defaults to 10, or 5
    for mom_setup. rank is the covariance rank for lowrank_fourier and the
    subspace dimension for mom_setup; defaults are d // 2 and 5 respectively.
    """

    kind: str
    d: int = None
    n_tasks: int = 10
    m_per_task: object = None
    n_test_tasks: int = 100
    m_test: int = 100
    seed: int = 0
    rank: int = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        d = _DEFAULT_D[self.kind] if self.d is None else int(self.d)
        if self.kind in ("fourier", "lowrank_fourier") and d != FOURIER_D:
            raise ValueError(f"{self.kind} designs have d={FOURIER_D}, got {d}")
        if d < 1:
            raise ValueError(f"d must be positive, got {d}")
        if int(self.n_tasks) < 1 or int(self.n_test_tasks) < 0:
            raise ValueError("n_tasks must be positive and n_test_tasks nonnegative")
        m = self.m_per_task
        if m is None:
            m = 5 if self.kind == "mom_setup" else 10
        m = (int(m),) * int(self.n_tasks) if np.isscalar(m) else tuple(int(v) for v in m)
        if len(m) != int(self.n_tasks) or any(v < 0 for v in m):
            raise ValueError(f"m_per_task must give {self.n_tasks} nonnegative sizes")
        if int(self.m_test) < 1:
            raise ValueError("m_test must be positive")
        rank = self.rank
        if rank is None:
            rank = 5 if self.kind == "mom_setup" else d // 2
        if not 1 <= int(rank) <= d:
            raise ValueError(f"rank must be in [1, {d}], got {rank}")
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "n_tasks", int(self.n_tasks))
        object.__setattr__(self, "m_per_task", m)
        object.__setattr__(self, "n_test_tasks", int(self.n_test_tasks))
        object.__setattr__(self, "m_test", int(self.m_test))
        object.__setattr__(self, "seed", int(self.seed))
        object.__setattr__(self, "rank", int(rank))

    @property
    def m_adapt(self):
        return self.m_per_task[-1]


def fourier_features(u):
    """Evaluate the 11 Fourier basis functions: five sines sin((j/5) pi u),
    five cosines cos((j/5) pi u), and a constant. Accepts a scalar or a
    vector of evaluation points."""
    u = np.asarray(u, dtype=float)
    scalar = u.ndim == 0
    u = np.atleast_1d(u)
    j = np.arange(1, 6) / 5.0
    arg = np.pi * np.outer(u, j)
    x = np.concatenate([np.sin(arg), np.cos(arg), np.ones((len(u), 1))], axis=1)
    return x[0] if scalar else x


def gen_sigma_full(d, rng):
    """Full-rank covariance LLᵀ + |eta| I with lower-triangular standard
    normal L; eta's sign is flipped when negative to keep the matrix PSD."""
    L = np.tril(rng.standard_normal((d, d)))
    eta = rng.standard_normal()
    return L @ L.T + abs(eta) * np.eye(d)


def gen_sigma_lowrank(d, r, rng):
    """Rank-r covariance LLᵀ with L a d x r standard normal matrix."""
    if not 1 <= r <= d:
        raise ValueError(f"r must be in [1, {d}], got {r}")
    L = rng.standard_normal((d, r))
    return L @ L.T


def sphere_columns(d, s, rng):
    """d x s matrix with columns drawn uniformly from the unit sphere."""
    B = rng.standard_normal((d, s))
    return B / np.linalg.norm(B, axis=0)


def mom_environment(d, s, rng):
    """Subspace-recovery setup: alpha = 0, sigma2 = 1, Sigma = (1/s) B Bᵀ with
    uniform-sphere columns B. Returns the environment and the true basis."""
    B = sphere_columns(d, s, rng)
    env = Environment(alpha=np.zeros(d), sigma2=1.0, Sigma=B @ B.T / s)
    return env, B


def gen_environment(spec, rng):
    """Draw a task distribution matching the generator kind, with alpha = 0
    and sigma2 = 1."""
    if spec.kind == "lowrank_fourier":
        Sigma = gen_sigma_lowrank(spec.d, spec.rank, rng)
    elif spec.kind == "mom_setup":
        return mom_environment(spec.d, spec.rank, rng)[0]
    else:
        Sigma = gen_sigma_full(spec.d, rng)
    return Environment(alpha=np.zeros(spec.d), sigma2=1.0, Sigma=Sigma)


def _inputs(kind, d, m, rng):
    if kind in ("fourier", "lowrank_fourier"):
        return fourier_features(rng.uniform(-5.0, 5.0, size=m))
    X = rng.standard_normal((m, d))
    if kind == "spherical":
        norms = np.linalg.norm(X, axis=1, keepdims=True)
        X = X / np.where(norms > 0.0, norms, 1.0)
    return X


def _sigma_factor(Sigma):
    w, V = np.linalg.eigh(Sigma)
    return V * np.sqrt(np.clip(w, 0.0, None))


def _draw_task(kind, d, m, env, factor, rng):
    theta = env.alpha + factor @ rng.standard_normal(d)
    X = _inputs(kind, d, m, rng)
    Y = X @ theta + np.sqrt(env.sigma2) * rng.standard_normal(m)
    return TaskData(X=X, Y=Y), theta


def gen_dataset(spec, env):
    """Sample training tasks and test tasks from the environment.

    Each task draws its own coefficient vector from N(alpha, Sigma) and adds
    N(0, sigma2) noise. Test tasks share one coefficient vector across their
    disjoint adaptation and evaluation splits. Every task uses its own RNG
    substream, so output is seed-deterministic regardless of generation order.
    """
    if env.d != spec.d:
        raise ValueError(f"environment dimension {env.d} does not match spec d={spec.d}")
    factor = _sigma_factor(env.Sigma)
    streams = np.random.SeedSequence(spec.seed).spawn(spec.n_tasks + spec.n_test_tasks)
    train = []
    for i in range(spec.n_tasks):
        rng = np.random.default_rng(streams[i])
        task, _ = _draw_task(spec.kind, spec.d, spec.m_per_task[i], env, factor, rng)
        train.append(task)
    test = []
    for i in range(spec.n_test_tasks):
        rng = np.random.default_rng(streams[spec.n_tasks + i])
        theta = env.alpha + factor @ rng.standard_normal(spec.d)
        X = _inputs(spec.kind, spec.d, spec.m_adapt + spec.m_test, rng)
        Y = X @ theta + np.sqrt(env.sigma2) * rng.standard_normal(len(X))
        adapt = TaskData(X=X[: spec.m_adapt], Y=Y[: spec.m_adapt])
        evalu = TaskData(X=X[spec.m_adapt :], Y=Y[spec.m_adapt :])
        test.append((adapt, evalu))
    return Dataset(train), test


# =========================
# CSV round trip
# =========================


def write_dataset_csv(path, dataset):
    """One row per observation: task_id, row_id, x_1..x_d, y."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["task_id", "row_id"] + [f"x_{j}" for j in range(1, dataset.d + 1)] + ["y"])
        for i, t in enumerate(dataset):
            for j in range(t.m):
                vals = [float(v) for v in t.X[j]] + [float(t.Y[j])]
                writer.writerow([i, j] + [repr(v) for v in vals])


def read_dataset_csv(path):
    """Inverse of write_dataset_csv; tasks ordered by their task_id."""
    rows = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:2] != ["task_id", "row_id"] or header[-1] != "y":
            raise ValueError(f"{path}: expected header task_id,row_id,x_1..x_d,y")
        d = len(header) - 3
        for lineno, row in enumerate(reader, start=2):
            if len(row) != d + 3:
                raise ValueError(f"{path}: line {lineno}: expected {d + 3} fields, got {len(row)}")
            try:
                tid = int(row[0])
                vals = [float(v) for v in row[1:]]
            except ValueError as exc:
                raise ValueError(f"{path}: line {lineno}: {exc}") from None
            rows.setdefault(tid, []).append(vals)
    tasks = []
    for tid in sorted(rows):
        block = np.array(sorted(rows[tid], key=lambda r: r[0]))
        tasks.append(TaskData(X=block[:, 1:-1], Y=block[:, -1]))
    return Dataset(tasks)
