# Loader for the school exam-score dataset: CSV rows plus a sidecar schema
# naming the task, target, numeric, and categorical columns. Each school
# becomes one task; schools are split into environment and target groups and
# each target school into adaptation and evaluation rows.

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import Dataset, TaskData

SCHEMA_SUFFIX = ".schema.json"
_SCHEMA_KEYS = ("task_column", "target_column", "numeric", "categorical")


@dataclass(frozen=True)
class SchoolConfig:
    """expected_features pins the encoded width (27 for the full dataset);
    standardize z-scores features with statistics fit on the environment
    schools only."""

    path: str
    n_env_schools: int = 100
    train_fraction: float = 0.8
    seed: int = 0
    expected_features: int = 27
    standardize: bool = False

    def __post_init__(self):
        if not 0.0 < float(self.train_fraction) < 1.0:
            raise ValueError(f"train_fraction must be in (0, 1), got {self.train_fraction}")
        if int(self.n_env_schools) < 1:
            raise ValueError("n_env_schools must be positive")
        if int(self.expected_features) < 1:
            raise ValueError("expected_features must be positive")


def _school_key(sid):
    # numeric ids sort numerically, everything else lexically after them
    try:
        return (0, float(sid), sid)
    except ValueError:
        return (1, 0.0, sid)


def _read_schema(path):
    schema_path = Path(str(path) + SCHEMA_SUFFIX)
    if not schema_path.exists():
        raise FileNotFoundError(f"schema sidecar not found: {schema_path}")
    schema = json.loads(schema_path.read_text())
    missing = [k for k in _SCHEMA_KEYS if k not in schema]
    if missing:
        raise ValueError(f"{schema_path}: missing keys {missing}")
    return schema


def load_school(cfg):
    """Parse the CSV named by cfg.path, one-hot encode the categorical
    columns (sorted category values, one indicator each), and return
    (environment tasks, [(adaptation, evaluation), ...]) for the target
    schools. All randomness comes from cfg.seed."""
    path = Path(cfg.path)
    if not path.exists():
        raise FileNotFoundError(f"dataset not found: {path}")
    schema = _read_schema(path)
    task_col, target_col = schema["task_column"], schema["target_column"]
    numeric, categorical = list(schema["numeric"]), list(schema["categorical"])

    records = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        columns = reader.fieldnames or []
        for col in [task_col, target_col] + numeric + categorical:
            if col not in columns:
                raise ValueError(f"{path}: column {col!r} not in header {columns}")
        for lineno, row in enumerate(reader, start=2):
            try:
                rec = {
                    "school": row[task_col],
                    "y": float(row[target_col]),
                    "num": [float(row[c]) for c in numeric],
                    "cat": [row[c] for c in categorical],
                }
            except (TypeError, ValueError):
                raise ValueError(f"{path}: line {lineno}: could not parse row") from None
            records.append(rec)
    if not records:
        raise ValueError(f"{path}: no data rows")

    levels = {c: sorted({r["cat"][k] for r in records}) for k, c in enumerate(categorical)}
    feature_names = list(numeric)
    for c in categorical:
        feature_names += [f"{c}={v}" for v in levels[c]]
    if len(feature_names) != cfg.expected_features:
        raise ValueError(
            f"encoded feature count {len(feature_names)} != expected {cfg.expected_features}; "
            f"columns: {feature_names}"
        )

    def encode(rec):
        x = list(rec["num"])
        for k, c in enumerate(categorical):
            x += [1.0 if rec["cat"][k] == v else 0.0 for v in levels[c]]
        return x

    by_school = {}
    for rec in records:
        by_school.setdefault(rec["school"], []).append(rec)
    school_ids = sorted(by_school, key=_school_key)
    if cfg.n_env_schools >= len(school_ids):
        raise ValueError(
            f"n_env_schools={cfg.n_env_schools} leaves no target school out of {len(school_ids)}"
        )

    X = {sid: np.array([encode(r) for r in by_school[sid]]) for sid in school_ids}
    Y = {sid: np.array([r["y"] for r in by_school[sid]]) for sid in school_ids}

    rng = np.random.default_rng(cfg.seed)
    perm = rng.permutation(len(school_ids))
    env_ids = [school_ids[i] for i in perm[: cfg.n_env_schools]]
    target_ids = [school_ids[i] for i in perm[cfg.n_env_schools :]]

    if cfg.standardize:
        pooled = np.vstack([X[sid] for sid in env_ids])
        mean = pooled.mean(axis=0)
        std = pooled.std(axis=0)
        std = np.where(std > 0.0, std, 1.0)
        X = {sid: (x - mean) / std for sid, x in X.items()}

    env_tasks = Dataset([TaskData(X=X[sid], Y=Y[sid]) for sid in env_ids])
    targets = []
    for sid in target_ids:
        m = len(Y[sid])
        if m < 2:
            raise ValueError(f"school {sid}: {m} row(s), too few to split")
        n_adapt = min(max(int(m * cfg.train_fraction), 1), m - 1)
        rows = rng.permutation(m)
        a, e = rows[:n_adapt], rows[n_adapt:]
        targets.append((TaskData(X=X[sid][a], Y=Y[sid][a]), TaskData(X=X[sid][e], Y=Y[sid][e])))
    return env_tasks, targets
