"""Experiment configuration: INI-style sections with per-dataset defaults.

Sections and keys (unknown ones are rejected)::

    [experiment]  dataset, data_dir, out_dir, seed, resize
    [teacher]     arch, epochs, batch_size, lr, eval_every
    [student_ce]  arch, epochs, batch_size, lr, eval_every
    [student_kd]  arch, epochs, batch_size, lr, tau, lam, eval_every
    [prior]       eps_floor
    [di]          betas, tau, iterations, sizes
    [di.<size>]   batch_size, lr, iterations
    [ci]          max_iterations, confidence_low, confidence_high, batch_size
    [ci.<size>]   lr, student_lr, batch_size
    [zskd]        arch, tau, batch_size, epochs, eval_every
    [zskd.<size>] lr, epochs
    [real_kd]     epochs, eval_every
    [finetune]    size, lr, epochs, batch_size, eval_every
    [sweep]       fractions, methods

``<size>`` is a transfer-set size in percent of the training set (1 means
600 MNIST images). Any key left out takes the dataset default below.
"""
from __future__ import annotations

import configparser
import copy
import hashlib
import json
from io import StringIO
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError
from .models import BUILDERS

TRAIN_SIZE = 60000


def _floats(s: str) -> list:
    return [float(v) for v in s.replace(",", " ").split()]


_SCHEMA = {
    "experiment": {"dataset": str, "data_dir": str, "out_dir": str, "seed": int, "resize": str},
    "teacher": {"arch": str, "epochs": int, "batch_size": int, "lr": float, "eval_every": int},
    "student_ce": {"arch": str, "epochs": int, "batch_size": int, "lr": float, "eval_every": int},
    "student_kd": {"arch": str, "epochs": int, "batch_size": int, "lr": float, "tau": float, "lam": float,
                   "eval_every": int},
    "prior": {"eps_floor": float},
    "di": {"betas": _floats, "tau": float, "iterations": int, "sizes": _floats},
    "di.*": {"batch_size": int, "lr": float, "iterations": int},
    "ci": {"max_iterations": int, "confidence_low": float, "confidence_high": float, "batch_size": int},
    "ci.*": {"lr": float, "student_lr": float, "batch_size": int},
    "zskd": {"arch": str, "tau": float, "batch_size": int, "epochs": int, "eval_every": int},
    "zskd.*": {"lr": float, "epochs": int},
    "real_kd": {"epochs": int, "eval_every": int},
    "finetune": {"size": float, "lr": float, "epochs": int, "batch_size": int, "eval_every": int},
    "sweep": {"fractions": _floats, "methods": lambda s: s.replace(",", " ").split()},
}

_COMMON = {
    "experiment": {"dataset": "mnist", "data_dir": "data/mnist", "out_dir": "runs/mnist", "seed": 0,
                   "resize": "pad"},
    "teacher": {"arch": "lenet5", "epochs": 200, "batch_size": 512, "lr": 0.001, "eval_every": 1},
    "student_ce": {"arch": "lenet5_half", "epochs": 200, "batch_size": 512, "lr": 0.001, "eval_every": 1},
    "student_kd": {"arch": "lenet5_half", "epochs": 200, "batch_size": 512, "lr": 0.01, "tau": 20.0, "lam": 0.3,
                   "eval_every": 1},
    "prior": {"eps_floor": 1e-2},
    "ci": {"max_iterations": 5000, "confidence_low": 0.55, "confidence_high": 0.70, "batch_size": 100},
    "zskd": {"arch": "lenet5_half", "tau": 20.0, "batch_size": 512, "epochs": 2000, "eval_every": 10},
    "real_kd": {"epochs": 2000, "eval_every": 10},
    "sweep": {"methods": ["DI", "CI", "real"]},
}

DEFAULTS = {
    "mnist": {
        **_COMMON,
        "di": {"betas": [1.0, 0.1], "tau": 20.0, "iterations": 1500, "sizes": [1, 5, 10, 20, 40]},
        "di.1": {"batch_size": 10, "lr": 0.1}, "di.5": {"batch_size": 10, "lr": 0.1},
        "di.10": {"batch_size": 100, "lr": 1.0}, "di.20": {"batch_size": 100, "lr": 2.0},
        "di.40": {"batch_size": 100, "lr": 3.0},
        "ci.1": {"lr": 2.0, "student_lr": 0.01}, "ci.5": {"lr": 0.01, "student_lr": 0.01},
        "ci.10": {"lr": 0.1, "student_lr": 0.01}, "ci.20": {"lr": 0.01, "student_lr": 0.01},
        "ci.40": {"lr": 0.1, "student_lr": 0.001},
        **{f"zskd.{s}": {"lr": 0.01} for s in (1, 5, 10, 20, 40)},
        "finetune": {"size": 40, "lr": 0.001, "epochs": 100, "batch_size": 512, "eval_every": 1},
        "sweep": {"fractions": [1, 5, 10, 20, 40], "methods": ["DI", "CI", "real"]},
    },
    "fmnist": {
        **_COMMON,
        "experiment": dict(_COMMON["experiment"], dataset="fmnist", data_dir="data/fmnist", out_dir="runs/fmnist"),
        "di": {"betas": [1.0, 0.1], "tau": 20.0, "iterations": 1500, "sizes": [1, 5, 10, 20, 40, 80]},
        "di.1": {"batch_size": 10, "lr": 3.0}, "di.5": {"batch_size": 10, "lr": 3.0},
        "di.10": {"batch_size": 100, "lr": 1.0}, "di.20": {"batch_size": 100, "lr": 1.0},
        "di.40": {"batch_size": 10, "lr": 1.0}, "di.80": {"batch_size": 100, "lr": 3.0},
        "ci.1": {"lr": 0.01, "student_lr": 0.001}, "ci.5": {"lr": 0.1, "student_lr": 0.001},
        "ci.10": {"lr": 2.0, "student_lr": 0.001}, "ci.20": {"lr": 1.0, "student_lr": 0.001},
        "ci.40": {"lr": 0.01, "student_lr": 0.01}, "ci.80": {"lr": 0.5, "student_lr": 0.001},
        "zskd.1": {"lr": 0.01}, "zskd.5": {"lr": 0.001}, "zskd.10": {"lr": 0.0001},
        "zskd.20": {"lr": 0.01}, "zskd.40": {"lr": 0.01}, "zskd.80": {"lr": 0.01},
        "finetune": {"size": 80, "lr": 0.001, "epochs": 100, "batch_size": 512, "eval_every": 1},
        "sweep": {"fractions": [1, 5, 10, 20, 40, 80], "methods": ["DI", "CI", "real"]},
    },
}


def size_key(size: float) -> str:
    return f"{float(size):g}"


def n_samples(size: float) -> int:
    return int(round(float(size) / 100 * TRAIN_SIZE))


@dataclass
class ExperimentConfig:
    blocks: dict
    source: str = "<defaults>"

    def __getitem__(self, section: str) -> dict:
        return self.blocks[section]

    @property
    def seed(self) -> int:
        return self.blocks["experiment"]["seed"]

    @property
    def out_dir(self) -> Path:
        return Path(self.blocks["experiment"]["out_dir"])

    def sized(self, prefix: str, size: float) -> dict:
        """Merge ``[prefix]`` with its per-size block ``[prefix.<size>]``."""
        base = dict(self.blocks.get(prefix, {}))
        base.update(self.blocks.get(f"{prefix}.{size_key(size)}", {}))
        return base

    def block_hash(self, *sections: str) -> str:
        """Hash of the named blocks plus dataset, seed and resize mode."""
        exp = self.blocks["experiment"]
        payload = {"dataset": exp["dataset"], "seed": exp["seed"], "resize": exp["resize"],
                   **{s: self.blocks.get(s, {}) for s in sections}}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        for sec, kv in self.blocks.items():
            cp[sec] = {k: " ".join(f"{x:g}" if isinstance(x, float) else str(x) for x in v)
                       if isinstance(v, list) else str(v) for k, v in kv.items()}
        buf = StringIO()
        cp.write(buf)
        return buf.getvalue()


def _schema_for(section: str):
    if section in _SCHEMA:
        return _SCHEMA[section]
    head, _, size = section.partition(".")
    if size and f"{head}.*" in _SCHEMA:
        try:
            float(size)
        except ValueError:
            return None
        return _SCHEMA[f"{head}.*"]
    return None


def parse_config(text: str, source: str = "<string>", overrides: dict | None = None) -> ExperimentConfig:
    """Parse INI text on top of the dataset defaults; collect every problem before failing."""
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    problems = []
    dataset = cp.get("experiment", "dataset", fallback="mnist").strip()
    if dataset not in DEFAULTS:
        problems.append(f"[experiment] dataset: unknown dataset {dataset!r} (expected one of {sorted(DEFAULTS)})")
        dataset = "mnist"
    blocks = copy.deepcopy(DEFAULTS[dataset])
    for sec in cp.sections():
        schema = _schema_for(sec)
        if schema is None:
            problems.append(f"[{sec}]: unknown section")
            continue
        target = blocks.setdefault(sec, {})
        for key, raw in cp.items(sec):
            if key not in schema:
                problems.append(f"[{sec}] {key}: unknown key")
                continue
            try:
                target[key] = schema[key](raw.strip())
            except ValueError:
                problems.append(f"[{sec}] {key}: cannot parse {raw!r}")
    for (sec, key), val in (overrides or {}).items():
        blocks.setdefault(sec, {})[key] = val
    cfg = ExperimentConfig(blocks, source)
    problems += validate(cfg)
    if problems:
        raise ConfigError(problems)
    return cfg


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    if path is None:
        return parse_config("", "<defaults>", overrides)
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    cfg = parse_config(text, str(path), overrides)
    # relative paths in a config file are relative to that file
    exp = cfg.blocks["experiment"]
    for key in ("data_dir", "out_dir"):
        if ("experiment", key) not in (overrides or {}) and not Path(exp[key]).is_absolute():
            exp[key] = str((path.parent / exp[key]).resolve())
    return cfg


def validate(cfg: ExperimentConfig) -> list:
    """Every violated precondition, as ``[section] key: reason`` strings."""
    problems = []

    def need(cond, sec, key, msg):
        if not cond:
            problems.append(f"[{sec}] {key}: {msg}")

    b = cfg.blocks
    need(b["experiment"]["resize"] in ("pad", "bilinear"), "experiment", "resize", "must be pad or bilinear")
    for sec in ("teacher", "student_ce", "student_kd", "zskd"):
        if "arch" in b[sec]:
            need(b[sec]["arch"] in BUILDERS, sec, "arch", f"must be one of {sorted(BUILDERS)}")
    for sec, kv in b.items():
        for key, val in kv.items():
            if key in ("lr", "student_lr", "tau"):
                need(val > 0, sec, key, "must be > 0")
            elif key in ("batch_size", "iterations", "max_iterations", "eval_every"):
                need(val >= 1, sec, key, "must be >= 1")
            elif key == "epochs":
                need(val >= 0, sec, key, "must be >= 0")
            elif key == "lam":
                need(val >= 0, sec, key, "must be >= 0")
            elif key == "betas":
                need(len(val) >= 1 and all(v > 0 for v in val), sec, key, "needs one or more positive values")
            elif key in ("sizes", "fractions", "size"):
                vals = val if isinstance(val, list) else [val]
                need(all(0 < v <= 100 for v in vals), sec, key, "sizes are percentages in (0, 100]")
    lo, hi = b["ci"]["confidence_low"], b["ci"]["confidence_high"]
    need(0 < lo <= hi < 1, "ci", "confidence_low", "need 0 < low <= high < 1")
    need(0 < b["prior"]["eps_floor"] < 1, "prior", "eps_floor", "must lie in (0, 1)")
    for m in b["sweep"]["methods"]:
        need(m in ("DI", "CI", "real"), "sweep", "methods", f"unknown method {m!r}")
    K = 10
    nb = len(b["di"]["betas"])
    for s in set(b["di"]["sizes"]) | set(b["sweep"]["fractions"]):
        need(n_samples(s) >= K * nb, "di", "sizes", f"size {s:g}% gives fewer than K*B={K * nb} impressions")
        for prefix, key in (("di", "lr"), ("di", "batch_size"), ("zskd", "lr")):
            need(key in cfg.sized(prefix, s), f"{prefix}.{size_key(s)}", key, "no value for this size")
    return problems
