# Command-line front end: dataset simulation, EM fitting, bound reports, and
# the experiment/subspace runners. Commands exit 0 on success and print a
# single "error: ..." line to stderr on failure.

import json
import sys
from dataclasses import replace

import click
import numpy as np

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib

from .bounds import bound_report
from .core import Environment
from .em import EmConfig, em_fit
from .harness import load_config, run_experiment, run_subspace_experiment
from .simgen import GenSpec, gen_dataset, gen_environment, read_dataset_csv, write_dataset_csv


def _fail(message):
    click.echo(f"error: {message}", err=True)
    sys.exit(1)


def _load_toml(path):
    with open(path, "rb") as fh:
        return tomllib.load(fh)


@click.group()
def main():
    """Gaussian meta-learning for linear regression: simulate datasets, fit
    the task distribution by EM, evaluate transfer-risk bounds, and run
    experiment sweeps."""


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--seed", type=int, default=None, help="Override the generator seed.")
@click.option("--out", "out_path", required=True, type=click.Path())
def simulate(config_path, seed, out_path):
    """Generate a synthetic training dataset and write it as CSV."""
    try:
        doc = _load_toml(config_path)
        gen_tbl = doc.get("generator")
        if not isinstance(gen_tbl, dict) or "kind" not in gen_tbl:
            raise ValueError(f"{config_path}: needs a [generator] table with 'kind'")
        spec = GenSpec(**gen_tbl)
        if seed is not None:
            spec = replace(spec, seed=seed)
        env = gen_environment(spec, np.random.default_rng(np.random.SeedSequence(spec.seed)))
        train, _ = gen_dataset(spec, env)
        write_dataset_csv(out_path, train)
    except Exception as e:
        _fail(e)
    click.echo(f"wrote {out_path}: {train.n} tasks, d={train.d}, {train.M} rows")


@main.command("fit-em")
@click.argument("data", type=click.Path(exists=True))
@click.option("--config", "config_path", type=click.Path(exists=True), default=None,
              help="TOML file with an optional [em] table (rel_tol, max_iter).")
@click.option("--out", "out_path", type=click.Path(), default=None,
              help="Write the JSON result here instead of stdout.")
def fit_em(data, config_path, out_path):
    """Fit the task distribution to a dataset CSV by EM; emit JSON with the
    estimate and the iteration trace."""
    try:
        em_tbl = _load_toml(config_path).get("em", {}) if config_path else {}
        dataset = read_dataset_csv(data)
        fit, trace = em_fit(dataset, EmConfig(**em_tbl))
        out = {
            "alpha": fit.alpha.tolist(),
            "sigma2": fit.sigma2,
            "Sigma": fit.Sigma.tolist(),
            "converged": trace.converged,
            "iterations": trace.iterations,
            "log_likelihoods": trace.log_likelihoods,
        }
        text = json.dumps(out, indent=2)
        if out_path:
            with open(out_path, "w") as fh:
                fh.write(text + "\n")
        else:
            click.echo(text)
    except Exception as e:
        _fail(e)


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--data", "data_path", type=click.Path(exists=True), default=None,
              help="Dataset CSV supplying the designs (last task is the target).")
@click.option("--out", "out_path", type=click.Path(), default=None)
def bounds(config_path, data_path, out_path):
    """Evaluate the transfer-risk bound report for an environment, a set of
    task designs, and a query point; emit JSON."""
    try:
        doc = _load_toml(config_path)
        env_tbl = doc.get("environment")
        if not isinstance(env_tbl, dict):
            raise ValueError(f"{config_path}: missing [environment] table")
        env = Environment(
            alpha=np.asarray(env_tbl["alpha"], dtype=float),
            sigma2=env_tbl["sigma2"],
            Sigma=np.asarray(env_tbl["Sigma"], dtype=float),
        )
        query = doc.get("query", {})
        if "x" not in query:
            raise ValueError(f"{config_path}: missing x in [query] table")
        x = np.asarray(query["x"], dtype=float)
        deltas = [float(v) for v in query.get("deltas", [])]
        designs_tbl = doc.get("designs", [])
        if data_path is not None:
            if designs_tbl:
                raise ValueError("give designs either in the config or via --data, not both")
            designs = [t.X for t in read_dataset_csv(data_path)]
        else:
            designs = [np.asarray(tbl["X"], dtype=float) for tbl in designs_tbl]
        if not designs:
            raise ValueError("no designs given: add [[designs]] tables or pass --data")
        report = bound_report(designs, env.sigma2, env.Sigma, x, deltas)
        out = {
            "xMx": report.xMx,
            "xTx": report.xTx,
            "sigma2": report.sigma2,
            "expected_risk_mle": report.expected_risk_mle,
            "lower_unbiased": report.lower_unbiased,
            "lower_all": report.lower_all,
            "lower_highprob": {str(k): v for k, v in report.lower_highprob.items()},
            "upper_highprob": {str(k): v for k, v in report.upper_highprob.items()},
        }
        text = json.dumps(out, indent=2)
        if out_path:
            with open(out_path, "w") as fh:
                fh.write(text + "\n")
        else:
            click.echo(text)
    except Exception as e:
        _fail(e)


def _run_command(config_path, seed, threads, out_path, runner):
    try:
        cfg = load_config(config_path)
        if seed is not None:
            cfg = replace(cfg, seed=seed)
        if out_path is not None:
            cfg = replace(cfg, output_path=out_path)
        if not cfg.output_path:
            raise ValueError("no output path: set experiment.output_path or pass --out")
        table = runner(cfg, threads=threads)
    except Exception as e:
        _fail(e)
    for method, value, mean, std, count in table.aggregated:
        click.echo(f"{method} {table.sweep_param}={value}: {mean:.6g} +/- {std:.6g} ({count} reps)")
    click.echo(f"wrote {cfg.output_path}")


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--seed", type=int, default=None, help="Override the config seed.")
@click.option("--threads", type=int, default=1, show_default=True)
@click.option("--out", "out_path", type=click.Path(), default=None,
              help="Override the config output_path.")
def run(config_path, seed, threads, out_path):
    """Run an experiment sweep from a TOML config; write CSV, summary, figure."""
    _run_command(config_path, seed, threads, out_path, run_experiment)


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--seed", type=int, default=None, help="Override the config seed.")
@click.option("--threads", type=int, default=1, show_default=True)
@click.option("--out", "out_path", type=click.Path(), default=None,
              help="Override the config output_path.")
def subspace(config_path, seed, threads, out_path):
    """Compare subspace recovery (EM with rank clipping vs method of moments)
    over a task-count sweep."""
    _run_command(config_path, seed, threads, out_path, run_subspace_experiment)


if __name__ == "__main__":
    main()
