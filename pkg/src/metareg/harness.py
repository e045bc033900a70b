# Experiment runner: sweep one generator parameter, fit every requested
# method per repetition, score on held-out test tasks, and emit a raw CSV,
# an aggregated summary, and a rendered figure next to the output file.
#
# Every cell (sweep value x repetition) gets its own seed substreams, spawned
# upfront in a fixed order, so results are byte-identical for a given
# (config, seed) no matter how many worker processes run the cells.

import csv
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib

from . import em
from .baselines import (
    CvConfig,
    RepresentationBasis,
    biased_regression,
    max_correlation,
    mom_estimator,
    ols,
    oracle_representation,
    pooled_bias,
    select_lambda,
)
from .bounds import matrix_M, pooled_information
from .core import Dataset
from .estimators import alpha_normal_equations, plug_in_theta, posterior_params, solve_alpha
from .ingest import SchoolConfig, load_school
from .simgen import GenSpec, gen_dataset, gen_environment, mom_environment

METHODS = (
    "lr_all",
    "lr_task",
    "biased_regression",
    "em_learner",
    "oracle_wbrls",
    "oracle_representation",
    "mom",
    "known_cov_lower_bound",
)
SUBSPACE_METHODS = ("em_clip", "mom")
SWEEP_PARAMS = ("n_tasks", "m_per_task")
# methods that read the true environment (and, for the subspace ones, its rank)
_NEEDS_ENV = frozenset({"oracle_wbrls", "oracle_representation", "known_cov_lower_bound"})
_NEEDS_RANK = frozenset({"oracle_representation", "mom"})


@dataclass(frozen=True)
class ExperimentConfig:
    """generator: GenSpec (synthetic) or SchoolConfig (real data).
    sweep: (parameter, increasing values) over n_tasks or m_per_task, or None
    for a single run. cv configures the biased-regression lambda search."""

    generator: object
    methods: tuple
    sweep: tuple = None
    n_repetitions: int = 30
    seed: int = 0
    output_path: str = None
    cv: CvConfig = CvConfig()

    def __post_init__(self):
        if not isinstance(self.generator, (GenSpec, SchoolConfig)):
            raise TypeError("generator must be a GenSpec or a SchoolConfig")
        methods = tuple(dict.fromkeys(self.methods))
        if not methods:
            raise ValueError("methods must be non-empty")
        known = set(METHODS) | set(SUBSPACE_METHODS)
        bad = [m for m in methods if m not in known]
        if bad:
            raise ValueError(f"unknown methods {bad}; choose from {sorted(known)}")
        school = isinstance(self.generator, SchoolConfig)
        if school:
            need = [m for m in methods if m in _NEEDS_ENV | _NEEDS_RANK]
            if need:
                raise ValueError(f"{need} need a synthetic generator with a known environment")
        sweep = self.sweep
        if sweep is not None:
            if school:
                raise ValueError("sweeps apply to synthetic generators only")
            param, values = sweep
            if param not in SWEEP_PARAMS:
                raise ValueError(f"sweep parameter must be one of {SWEEP_PARAMS}, got {param!r}")
            values = tuple(int(v) for v in values)
            if not values or any(v < 1 for v in values):
                raise ValueError("sweep values must be positive")
            if any(a >= b for a, b in zip(values, values[1:])):
                raise ValueError(f"sweep values must be strictly increasing, got {values}")
            if param == "n_tasks" and len(set(self.generator.m_per_task)) > 1:
                raise ValueError("an n_tasks sweep needs a uniform m_per_task")
            sweep = (param, values)
        if int(self.n_repetitions) < 1:
            raise ValueError("n_repetitions must be positive")
        object.__setattr__(self, "methods", methods)
        object.__setattr__(self, "sweep", sweep)
        object.__setattr__(self, "n_repetitions", int(self.n_repetitions))
        object.__setattr__(self, "seed", int(self.seed))


def aggregate(raw):
    """Per (method, sweep_value) mean and sample standard deviation of the
    non-failed raw rows, with the surviving repetition count."""
    groups = {}
    for method, value, _rep, val, err in raw:
        if err:
            continue
        groups.setdefault((method, value), []).append(val)
    out = []
    for (method, value), vals in groups.items():
        mean = float(np.mean(vals))
        std = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
        out.append((method, value, mean, std, len(vals)))
    return out


@dataclass
class ResultTable:
    """raw: (method, sweep_value, repetition, value, error) tuples; error is
    the empty string for successful cells. aggregated: per (method,
    sweep_value) mean, standard deviation, and count over repetitions."""

    raw: list
    aggregated: list
    sweep_param: str = "sweep"
    value_name: str = "mean_test_error"

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["method", "sweep_value", "repetition", self.value_name, "error"])
            for method, value, rep, val, err in self.raw:
                writer.writerow([method, value, rep, repr(float(val)), err])

    def write_summary_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["method", "sweep_value", "mean", "std", "count"])
            for method, value, mean, std, count in self.aggregated:
                writer.writerow([method, value, repr(mean), repr(std), count])

    def means(self, method):
        """(sweep_values, means) for one method, ordered by sweep value."""
        rows = sorted((v, m) for meth, v, m, _s, _c in self.aggregated if meth == method)
        return [v for v, _ in rows], [m for _, m in rows]


# =========================
# Per-cell evaluation
# =========================


def _mse(theta, evalu):
    r = evalu.X @ theta - evalu.Y
    return float(r @ r) / evalu.m


def _mean_over_tests(tests, fit_one):
    return float(np.mean([_mse(fit_one(a), e) for a, e in tests]))


def _m_lr_task(ctx):
    return _mean_over_tests(ctx["tests"], ols)


def _m_lr_all(ctx):
    theta = pooled_bias(ctx["train"])
    return _mean_over_tests(ctx["tests"], lambda a: theta)


def _m_biased_regression(ctx):
    target_m = int(np.median([a.m for a, _ in ctx["tests"]]))
    lam = select_lambda(ctx["train"], ctx["cv"], target_m)
    bias = pooled_bias(ctx["train"])
    return _mean_over_tests(ctx["tests"], lambda a: biased_regression(a, bias, lam))


def _m_em_learner(ctx):
    fit, _ = em.em_fit(ctx["train"])
    return _mean_over_tests(ctx["tests"], lambda a: plug_in_theta(fit.alpha, a, fit.sigma2, fit.Sigma))


def _m_oracle_wbrls(ctx):
    env = ctx["env"]
    A0, r0 = alpha_normal_equations(ctx["train"], env.sigma2, env.Sigma)

    def fit_one(a):
        A1, r1 = alpha_normal_equations(Dataset([a]), env.sigma2, env.Sigma)
        alpha_hat = solve_alpha(A0 + A1, r0 + r1)
        return plug_in_theta(alpha_hat, a, env.sigma2, env.Sigma)

    return _mean_over_tests(ctx["tests"], fit_one)


def _true_basis(ctx):
    if ctx["true_basis"] is not None:
        return ctx["true_basis"]
    return em.rank_clip(ctx["env"].Sigma, ctx["rank"])[1]


def _m_oracle_representation(ctx):
    B = _true_basis(ctx)
    basis = RepresentationBasis(B=B, s=B.shape[1])
    return _mean_over_tests(ctx["tests"], lambda a: oracle_representation(a, basis))


def _m_mom(ctx):
    basis = mom_estimator(ctx["train"], ctx["rank"])
    return _mean_over_tests(ctx["tests"], lambda a: oracle_representation(a, basis))


def _m_known_cov_lower_bound(ctx):
    # risk identity value averaged over the evaluation inputs, true parameters
    env = ctx["env"]
    A0 = pooled_information([t.X for t in ctx["train"]], env.sigma2, env.Sigma)
    zero = np.zeros(env.d)
    vals = []
    for a, e in ctx["tests"]:
        A = A0 + pooled_information([a.X], env.sigma2, env.Sigma)
        M = matrix_M([a.X], env.sigma2, env.Sigma, information=A)
        Tau = posterior_params(a, zero, env.sigma2, env.Sigma).Tau
        quad = np.einsum("mi,ij,mj->m", e.X, M + Tau, e.X)
        vals.append(float(np.mean(quad)) + env.sigma2)
    return float(np.mean(vals))


_METHOD_FUNCS = {
    "lr_all": _m_lr_all,
    "lr_task": _m_lr_task,
    "biased_regression": _m_biased_regression,
    "em_learner": _m_em_learner,
    "oracle_wbrls": _m_oracle_wbrls,
    "oracle_representation": _m_oracle_representation,
    "mom": _m_mom,
    "known_cov_lower_bound": _m_known_cov_lower_bound,
}


def _seed_int(ss):
    return int(ss.generate_state(1, np.uint64)[0])


def _cell_generator(gen, sweep, value, data_seed):
    if isinstance(gen, SchoolConfig) or sweep is None:
        return replace(gen, seed=data_seed)
    param = sweep[0]
    kwargs = {"seed": data_seed, param: value}
    if param == "n_tasks":
        kwargs["m_per_task"] = gen.m_per_task[0]
    return replace(gen, **kwargs)


def _cell_data(cfg, value, env_ss, data_ss):
    gen = cfg.generator
    spec = _cell_generator(gen, cfg.sweep, value, _seed_int(data_ss))
    if isinstance(gen, SchoolConfig):
        train, tests = load_school(spec)
        return train, tests, None, None
    rng_env = np.random.default_rng(env_ss)
    if gen.kind == "mom_setup":
        env, true_basis = mom_environment(gen.d, gen.rank, rng_env)
    else:
        env, true_basis = gen_environment(gen, rng_env), None
    train, tests = gen_dataset(spec, env)
    return train, tests, env, true_basis


def _run_cell(cfg, value, rep, env_ss, data_ss, cv_ss):
    rows = []
    try:
        train, tests, env, true_basis = _cell_data(cfg, value, env_ss, data_ss)
    except Exception as e:
        return [(name, value, rep, float("nan"), f"{type(e).__name__}: {e}") for name in cfg.methods]
    ctx = {
        "train": train,
        "tests": tests,
        "env": env,
        "true_basis": true_basis,
        "rank": getattr(cfg.generator, "rank", None),
        "cv": replace(cfg.cv, seed=_seed_int(cv_ss)),
    }
    for name in cfg.methods:
        try:
            rows.append((name, value, rep, float(_METHOD_FUNCS[name](ctx)), ""))
        except Exception as e:
            rows.append((name, value, rep, float("nan"), f"{type(e).__name__}: {e}"))
    return rows


def _run_subspace_cell(cfg, value, rep, env_ss, data_ss, cv_ss):
    gen = cfg.generator
    rows = []
    try:
        env, B = mom_environment(gen.d, gen.rank, np.random.default_rng(env_ss))
        spec = replace(
            _cell_generator(gen, cfg.sweep, value, _seed_int(data_ss)), n_test_tasks=0
        )
        train, _ = gen_dataset(spec, env)
    except Exception as e:
        return [(name, value, rep, float("nan"), f"{type(e).__name__}: {e}") for name in cfg.methods]
    for name in cfg.methods:
        try:
            if name == "em_clip":
                fit, _ = em.em_fit(train)
                basis = em.rank_clip(fit.Sigma, gen.rank)[1]
            else:
                basis = mom_estimator(train, gen.rank).B
            rows.append((name, value, rep, max_correlation(basis, B), ""))
        except Exception as e:
            rows.append((name, value, rep, float("nan"), f"{type(e).__name__}: {e}"))
    return rows


# =========================
# Runners
# =========================


def _sweep_values(cfg):
    if cfg.sweep is not None:
        return cfg.sweep[1]
    gen = cfg.generator
    return (gen.n_env_schools,) if isinstance(gen, SchoolConfig) else (gen.n_tasks,)


def _jobs(cfg):
    values = _sweep_values(cfg)
    reps = np.random.SeedSequence(cfg.seed).spawn(cfg.n_repetitions)
    streams = {}
    for r, rep_ss in enumerate(reps):
        children = rep_ss.spawn(1 + 2 * len(values))
        for k in range(len(values)):
            streams[(k, r)] = (children[0], children[1 + 2 * k], children[2 + 2 * k])
    return [
        (cfg, values[k], r) + streams[(k, r)]
        for k in range(len(values))
        for r in range(cfg.n_repetitions)
    ]


def _star_cell(args):
    return _run_cell(*args)


def _star_subspace(args):
    return _run_subspace_cell(*args)


def _dispatch(jobs, worker, star, threads):
    if threads <= 1:
        cells = [worker(*j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=threads) as ex:
            cells = list(ex.map(star, jobs))
    return [row for cell in cells for row in cell]


def run_experiment(cfg, threads=1):
    """Run the sweep and return a ResultTable; when cfg.output_path is set,
    also write the raw CSV, the _summary CSV, and a PNG figure beside it."""
    if "em_clip" in cfg.methods:
        raise ValueError("em_clip only runs in run_subspace_experiment")
    raw = _dispatch(_jobs(cfg), _run_cell, _star_cell, threads)
    table = ResultTable(
        raw=raw,
        aggregated=aggregate(raw),
        sweep_param=cfg.sweep[0] if cfg.sweep else "sweep",
        value_name="mean_test_error",
    )
    if cfg.output_path:
        emit(table, cfg.output_path)
    return table


def run_subspace_experiment(cfg, threads=1):
    """Subspace-recovery comparison on the mom_setup generator: rows hold the
    max-correlation between each method's basis and the true one."""
    gen = cfg.generator
    if not (isinstance(gen, GenSpec) and gen.kind == "mom_setup"):
        raise ValueError("subspace runs need a mom_setup generator")
    bad = [m for m in cfg.methods if m not in SUBSPACE_METHODS]
    if bad:
        raise ValueError(f"subspace methods are {SUBSPACE_METHODS}, got {bad}")
    if cfg.sweep is None or cfg.sweep[0] != "n_tasks":
        raise ValueError("subspace runs sweep n_tasks")
    raw = _dispatch(_jobs(cfg), _run_subspace_cell, _star_subspace, threads)
    table = ResultTable(
        raw=raw, aggregated=aggregate(raw), sweep_param="n_tasks", value_name="max_correlation"
    )
    if cfg.output_path:
        emit(table, cfg.output_path)
    return table


# =========================
# Artifacts
# =========================


def emit(table, output_path):
    """Write the raw CSV at output_path, the summary CSV at *_summary.csv,
    and the figure at *.png."""
    path = Path(output_path)
    if path.parent != Path(""):
        path.parent.mkdir(parents=True, exist_ok=True)
    table.write_csv(path)
    suffix = path.suffix or ".csv"
    table.write_summary_csv(path.with_name(path.stem + "_summary" + suffix))
    render_figure(table, path.with_suffix(".png"))
    return path


def render_figure(table, png_path):
    """Mean with a standard-deviation band per method, against the sweep."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6.4, 4.2), constrained_layout=True)
    by_method = {}
    for method, value, mean, std, _count in table.aggregated:
        by_method.setdefault(method, []).append((value, mean, std))
    for method, rows in sorted(by_method.items()):
        rows.sort()
        xs = [r[0] for r in rows]
        means = np.array([r[1] for r in rows])
        stds = np.array([r[2] for r in rows])
        (line,) = ax.plot(xs, means, marker="o", label=method)
        ax.fill_between(xs, means - stds, means + stds, alpha=0.2, color=line.get_color())
    ax.set_xlabel(table.sweep_param)
    ax.set_ylabel(table.value_name.replace("_", " "))
    ax.legend()
    fig.savefig(png_path, dpi=150)
    plt.close(fig)


def load_config(path):
    """Build an ExperimentConfig from a TOML file.

    Tables: [generator] (with 'kind' for synthetic or 'path' for the school
    data), [experiment] (methods, sweep_param + sweep_values, n_repetitions,
    seed, output_path), optional [cv] overrides for the lambda search.
    """
    with open(path, "rb") as fh:
        doc = tomllib.load(fh)
    gen_tbl = doc.get("generator")
    if not isinstance(gen_tbl, dict):
        raise ValueError(f"{path}: missing [generator] table")
    if "kind" in gen_tbl:
        generator = GenSpec(**gen_tbl)
    elif "path" in gen_tbl:
        generator = SchoolConfig(**gen_tbl)
    else:
        raise ValueError(f"{path}: [generator] needs 'kind' (synthetic) or 'path' (school data)")
    exp = doc.get("experiment", {})
    allowed = {"methods", "sweep_param", "sweep_values", "n_repetitions", "seed", "output_path"}
    unknown = set(exp) - allowed
    if unknown:
        raise ValueError(f"{path}: unknown [experiment] keys {sorted(unknown)}")
    sweep = None
    if "sweep_param" in exp or "sweep_values" in exp:
        if "sweep_param" not in exp or "sweep_values" not in exp:
            raise ValueError(f"{path}: sweep_param and sweep_values must appear together")
        sweep = (exp["sweep_param"], tuple(exp["sweep_values"]))
    cv_tbl = dict(doc.get("cv", {}))
    if "lambda_range" in cv_tbl:
        cv_tbl["lambda_range"] = tuple(cv_tbl["lambda_range"])
    kwargs = {k: exp[k] for k in ("n_repetitions", "seed", "output_path") if k in exp}
    return ExperimentConfig(
        generator=generator,
        methods=tuple(exp.get("methods", ())),
        sweep=sweep,
        cv=CvConfig(**cv_tbl),
        **kwargs,
    )
