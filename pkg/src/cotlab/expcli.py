"""Command-line experiment runner.

Experiments are described by small TOML files and write deterministic
artifacts: one CSV per experiment plus a JSON manifest echoing the full
resolved configuration.  Identical config and seeds reproduce the CSV
byte for byte; floats are printed with 17 significant digits.

Seed discipline: every sampled quantity draws from a stream keyed by
``(master seed, experiment id, point key..., chunk index)``, where the
point key encodes the grid coordinates themselves (D, method, scaled
sigma2), so editing a sweep never shifts the streams of existing points.

Subcommands: ``run <config.toml>``, ``prop3``, ``theory <d> <sigma2> <D>``,
``roots <d>``.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import time
from dataclasses import dataclass, fields, replace
from enum import Enum
from pathlib import Path
from typing import IO, Sequence

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from . import __version__
from .attention import CoherentParams, FullAttentionParams, StepwisePair, StepwiseParams, save_params
from .montecarlo import (
    DivergenceError,
    ModelFamily,
    OptimizerKind,
    Parameterization,
    RejectionOverflow,
    TrainConfig,
    evaluate,
    grid_search,
    train,
)
from .synthdata import PerturbSpec, PerturbTarget, TaskConfig
from .theory import (
    cot_optimal,
    cot_optimal_loss,
    icl_optimal_loss,
    perturbed_loss,
    prop3_cubic,
    prop3_roots,
    ratios_to_params,
)

__all__ = [
    "Experiment",
    "Preset",
    "ExperimentConfig",
    "ResultRow",
    "ConfigError",
    "load_config",
    "config_from_manifest",
    "parse_result_csv",
    "run_experiment",
    "main",
]


class Experiment(Enum):
    FIG1 = "FIG1"
    FIG2 = "FIG2"
    THEORY_TABLE = "THEORY_TABLE"
    PROP3_SCAN = "PROP3_SCAN"
    GRID_SEARCH = "GRID_SEARCH"
    TRAIN = "TRAIN"


class Preset(Enum):
    DESK = "DESK"
    PAPER = "PAPER"


_EXP_ID = {
    Experiment.FIG1: 1,
    Experiment.FIG2: 2,
    Experiment.THEORY_TABLE: 3,
    Experiment.PROP3_SCAN: 4,
    Experiment.GRID_SEARCH: 5,
    Experiment.TRAIN: 6,
}

_METHOD_ID = {
    "coherent_theory": 0,
    "stepwise_theory": 1,
    "coherent_mc": 2,
    "stepwise_mc": 3,
    "coherent_trained": 4,
    "stepwise_trained": 5,
    "theory": 6,
    "trained": 7,
    "coherent_opt": 8,
    "stepwise": 9,
}

FIG1_METHODS = (
    "coherent_theory",
    "stepwise_theory",
    "coherent_mc",
    "stepwise_mc",
    "coherent_trained",
    "stepwise_trained",
)

RESULT_COLUMNS = (
    "experiment",
    "d",
    "D",
    "sigma2",
    "sigma_eps2",
    "method",
    "target",
    "mean",
    "stderr",
    "lo90",
    "hi90",
    "theory",
    "seed",
    "n",
)

PROP3_COLUMNS = (
    "d",
    "D",
    "sigma2",
    "sigma_eps2",
    "delta_theorem",
    "delta_appendix",
    "mc_delta",
    "mc_stderr",
    "predicted_sign",
    "root_a",
    "root_b",
    "seed",
    "n",
)

GRID_COLUMNS = (
    "d",
    "D",
    "sigma2",
    "sigma_eps2",
    "a",
    "b",
    "mean",
    "stderr",
    "best",
    "seed",
    "n",
)

TRAIN_COLUMNS = ("d", "D", "sigma2", "family", "stage", "seed", "step", "loss")


class ConfigError(ValueError):
    """Invalid experiment configuration; message lists field-level problems."""


@dataclass(frozen=True)
class TrainSettings:
    """TRAIN experiment target plus optional preset overrides."""

    family: str = "coherent"
    parameterization: str = "dense"
    steps: int | None = None
    batch_size: int | None = None
    learning_rate: float | None = None
    optimizer: str | None = None


@dataclass(frozen=True)
class GridWindow:
    a_min: float = -3.0
    a_max: float = 3.0
    b_min: float = -3.0
    b_max: float = 3.0
    step: float = 0.05

    def axes(self) -> tuple[np.ndarray, np.ndarray]:
        a = np.arange(self.a_min, self.a_max + 1e-9, self.step)
        b = np.arange(self.b_min, self.b_max + 1e-9, self.step)
        return a, b


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: Experiment
    d: int
    sigma2: float
    D_sweep: tuple[int, ...]
    output: str
    sigma_eps2: float = 1.0
    n: int = 100_000
    seeds: tuple[int, ...] = (0,)
    preset: Preset = Preset.DESK
    methods: tuple[str, ...] | None = None
    grid: GridWindow = GridWindow()
    train: TrainSettings = TrainSettings()


@dataclass(frozen=True)
class ResultRow:
    """One line of the unified result CSV.

    Theory rows carry ``n=0``, ``stderr=0`` and repeat their value in both
    ``mean`` and ``theory``; Monte Carlo rows carry the closed-form
    counterpart in ``theory`` when one is defined.
    """

    experiment: str
    d: int
    D: int
    sigma2: float
    sigma_eps2: float
    method: str
    target: str
    mean: float
    stderr: float
    lo90: float
    hi90: float
    theory: float | None
    seed: int
    n: int


def _fmt(value: object) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return format(value, ".17g")
    return str(value)


def _parse_opt_float(text: str) -> float | None:
    return None if text == "" else float(text)


class _CsvWriter:
    """Streaming CSV writer so aborted runs leave their completed rows."""

    def __init__(self, path: Path, columns: Sequence[str]) -> None:
        self.path = path
        self.columns = tuple(columns)
        self._fp: IO[str] = open(path, "w", newline="")
        self._writer = csv.writer(self._fp, lineterminator="\n")
        self._writer.writerow(self.columns)

    def write(self, values: Sequence[object]) -> None:
        if len(values) != len(self.columns):
            raise ValueError(f"expected {len(self.columns)} fields, got {len(values)}")
        self._writer.writerow([_fmt(v) for v in values])

    def close(self) -> None:
        self._fp.close()


def parse_result_csv(fp: IO[str]) -> list[ResultRow]:
    """Read a unified result CSV back into typed rows."""
    reader = csv.DictReader(fp)
    missing = [c for c in RESULT_COLUMNS if c not in (reader.fieldnames or ())]
    if missing:
        raise ValueError(f"result CSV is missing columns: {', '.join(missing)}")
    rows = []
    for rec in reader:
        rows.append(
            ResultRow(
                experiment=rec["experiment"],
                d=int(rec["d"]),
                D=int(rec["D"]),
                sigma2=float(rec["sigma2"]),
                sigma_eps2=float(rec["sigma_eps2"]),
                method=rec["method"],
                target=rec["target"],
                mean=float(rec["mean"]),
                stderr=float(rec["stderr"]),
                lo90=float(rec["lo90"]),
                hi90=float(rec["hi90"]),
                theory=_parse_opt_float(rec["theory"]),
                seed=int(rec["seed"]),
                n=int(rec["n"]),
            )
        )
    return rows


# Configuration loading


def _type_name(value: object) -> str:
    return type(value).__name__


class _Validator:
    def __init__(self) -> None:
        self.errors: list[str] = []

    def fail(self, field: str, message: str) -> None:
        self.errors.append(f"{field}: {message}")

    def integer(self, table: dict, field: str, minimum: int | None = None) -> int | None:
        raw = table.get(field.split(".")[-1])
        if raw is None:
            return None
        if isinstance(raw, bool) or not isinstance(raw, int):
            self.fail(field, f"must be an integer, got {_type_name(raw)}")
            return None
        if minimum is not None and raw < minimum:
            self.fail(field, f"must be >= {minimum}, got {raw}")
            return None
        return raw

    def number(self, table: dict, field: str, minimum: float | None = None) -> float | None:
        raw = table.get(field.split(".")[-1])
        if raw is None:
            return None
        if isinstance(raw, bool) or not isinstance(raw, (int, float)):
            self.fail(field, f"must be a number, got {_type_name(raw)}")
            return None
        if minimum is not None and raw < minimum:
            self.fail(field, f"must be >= {minimum}, got {raw}")
            return None
        return float(raw)

    def int_list(self, table: dict, field: str, minimum: int) -> tuple[int, ...] | None:
        raw = table.get(field.split(".")[-1])
        if raw is None:
            return None
        if not isinstance(raw, list) or not raw:
            self.fail(field, "must be a nonempty list of integers")
            return None
        out = []
        for v in raw:
            if isinstance(v, bool) or not isinstance(v, int) or v < minimum:
                self.fail(field, f"entries must be integers >= {minimum}, got {v!r}")
                return None
            out.append(v)
        return tuple(out)

    def choice(self, table: dict, field: str, allowed: Sequence[str]) -> str | None:
        raw = table.get(field.split(".")[-1])
        if raw is None:
            return None
        if not isinstance(raw, str) or raw not in allowed:
            self.fail(field, f"must be one of {', '.join(allowed)}, got {raw!r}")
            return None
        return raw


def parse_config(doc: dict) -> ExperimentConfig:
    """Validate a parsed TOML document; raise ConfigError listing every problem."""
    v = _Validator()
    exp_table = doc.get("experiment")
    task_table = doc.get("task")
    if not isinstance(exp_table, dict):
        v.fail("experiment", "missing [experiment] table")
        exp_table = {}
    if not isinstance(task_table, dict):
        v.fail("task", "missing [task] table")
        task_table = {}

    kind = v.choice(exp_table, "experiment.kind", [e.value for e in Experiment])
    if "kind" not in exp_table:
        v.fail("experiment.kind", "is required")
    output = exp_table.get("output")
    if not isinstance(output, str) or not output:
        v.fail("experiment.output", "must be a nonempty path string")
        output = ""
    preset = v.choice(exp_table, "experiment.preset", [p.value for p in Preset]) or "DESK"
    seeds = v.int_list(exp_table, "experiment.seeds", minimum=0) or (0,)
    n = v.integer(exp_table, "experiment.n", minimum=2)
    sigma_eps2 = v.number(exp_table, "experiment.sigma_eps2", minimum=0.0)

    methods = exp_table.get("methods")
    if methods is not None:
        if not isinstance(methods, list) or not methods:
            v.fail("experiment.methods", "must be a nonempty list of method names")
            methods = None
        else:
            bad = [m for m in methods if m not in FIG1_METHODS]
            if bad:
                v.fail(
                    "experiment.methods",
                    f"unknown methods {bad}; valid: {', '.join(FIG1_METHODS)}",
                )
                methods = None
            else:
                methods = tuple(methods)

    d = v.integer(task_table, "task.d", minimum=1)
    if "d" not in task_table:
        v.fail("task.d", "is required")
    sigma2 = v.number(task_table, "task.sigma2", minimum=0.0)
    if "sigma2" not in task_table:
        v.fail("task.sigma2", "is required")
    D_sweep = v.int_list(task_table, "task.D_sweep", minimum=1)
    if "D_sweep" not in task_table:
        v.fail("task.D_sweep", "is required")

    grid = GridWindow()
    grid_table = doc.get("grid")
    if grid_table is not None:
        if not isinstance(grid_table, dict):
            v.fail("grid", "must be a table")
        else:
            vals = {}
            for name in ("a_min", "a_max", "b_min", "b_max"):
                got = v.number(grid_table, f"grid.{name}")
                if got is not None:
                    vals[name] = got
            step = v.number(grid_table, "grid.step")
            if step is not None:
                if step <= 0:
                    v.fail("grid.step", f"must be positive, got {step}")
                else:
                    vals["step"] = step
            grid = replace(grid, **vals)
            if grid.a_max < grid.a_min:
                v.fail("grid.a_max", "must be >= grid.a_min")
            if grid.b_max < grid.b_min:
                v.fail("grid.b_max", "must be >= grid.b_min")

    train_settings = TrainSettings()
    train_table = doc.get("train")
    if train_table is not None:
        if not isinstance(train_table, dict):
            v.fail("train", "must be a table")
        else:
            vals = {}
            family = v.choice(train_table, "train.family", ["coherent", "stepwise_pair"])
            if family is not None:
                vals["family"] = family
            parameterization = v.choice(
                train_table, "train.parameterization", ["dense", "structured"]
            )
            if parameterization is not None:
                vals["parameterization"] = parameterization
            steps = v.integer(train_table, "train.steps", minimum=1)
            if steps is not None:
                vals["steps"] = steps
            batch = v.integer(train_table, "train.batch_size", minimum=1)
            if batch is not None:
                vals["batch_size"] = batch
            lr = v.number(train_table, "train.learning_rate", minimum=0.0)
            if lr is not None:
                vals["learning_rate"] = lr
            optimizer = v.choice(train_table, "train.optimizer", ["SGD", "ADAM"])
            if optimizer is not None:
                vals["optimizer"] = optimizer
            train_settings = replace(train_settings, **vals)

    if v.errors:
        raise ConfigError("\n".join(v.errors))

    kwargs = dict(
        experiment=Experiment(kind),
        d=d,
        sigma2=sigma2,
        D_sweep=D_sweep,
        output=output,
        seeds=tuple(seeds),
        preset=Preset(preset),
        methods=methods,
        grid=grid,
        train=train_settings,
    )
    if n is not None:
        kwargs["n"] = n
    if sigma_eps2 is not None:
        kwargs["sigma_eps2"] = sigma_eps2
    return ExperimentConfig(**kwargs)


def load_config(path: str | Path) -> ExperimentConfig:
    with open(path, "rb") as fp:
        try:
            doc = tomllib.load(fp)
        except tomllib.TOMLDecodeError as err:
            raise ConfigError(f"config: not valid TOML ({err})") from err
    return parse_config(doc)


def _config_echo(cfg: ExperimentConfig) -> dict:
    return {
        "experiment": {
            "kind": cfg.experiment.value,
            "output": cfg.output,
            "preset": cfg.preset.value,
            "seeds": list(cfg.seeds),
            "n": cfg.n,
            "sigma_eps2": cfg.sigma_eps2,
            **({"methods": list(cfg.methods)} if cfg.methods is not None else {}),
        },
        "task": {
            "d": cfg.d,
            "sigma2": cfg.sigma2,
            "D_sweep": list(cfg.D_sweep),
        },
        "grid": {f.name: getattr(cfg.grid, f.name) for f in fields(GridWindow)},
        "train": {
            f.name: getattr(cfg.train, f.name)
            for f in fields(TrainSettings)
            if getattr(cfg.train, f.name) is not None
        },
    }


def config_from_manifest(manifest: dict) -> ExperimentConfig:
    """Rebuild the exact configuration a manifest records."""
    return parse_config(manifest["config"])


# Experiment execution


def _theory_row(
    cfg: ExperimentConfig, D: int, method: str, target: str, value: float
) -> ResultRow:
    return ResultRow(
        experiment=cfg.experiment.value,
        d=cfg.d,
        D=D,
        sigma2=cfg.sigma2,
        sigma_eps2=cfg.sigma_eps2 if target != "NONE" else 0.0,
        method=method,
        target=target,
        mean=value,
        stderr=0.0,
        lo90=value,
        hi90=value,
        theory=value,
        seed=0,
        n=0,
    )


def _mc_row(
    cfg: ExperimentConfig,
    D: int,
    method: str,
    target: str,
    est,
    theory: float | None,
    seed: int,
    sigma_eps2: float = 0.0,
) -> ResultRow:
    return ResultRow(
        experiment=cfg.experiment.value,
        d=cfg.d,
        D=D,
        sigma2=cfg.sigma2,
        sigma_eps2=sigma_eps2,
        method=method,
        target=target,
        mean=est.mean,
        stderr=est.stderr,
        lo90=est.lo90,
        hi90=est.hi90,
        theory=theory,
        seed=seed,
        n=est.n,
    )


def _train_config(cfg: ExperimentConfig, family: ModelFamily, seed: int) -> TrainConfig:
    if cfg.preset is Preset.PAPER:
        base = TrainConfig.paper(seed=seed)
    elif cfg.train.parameterization == "structured":
        base = TrainConfig.desk_structured(seed=seed)
    else:
        base = TrainConfig.desk(family, seed=seed)
    overrides = {}
    if cfg.train.steps is not None:
        overrides["steps"] = cfg.train.steps
    if cfg.train.batch_size is not None:
        overrides["batch_size"] = cfg.train.batch_size
    if cfg.train.learning_rate is not None:
        overrides["learning_rate"] = cfg.train.learning_rate
    if cfg.train.optimizer is not None:
        overrides["optimizer"] = OptimizerKind(cfg.train.optimizer)
    if cfg.train.parameterization == "structured":
        overrides["parameterization"] = Parameterization.STRUCTURED
    return replace(base, **overrides) if overrides else base


def _point_entropy(cfg: ExperimentConfig, seed: int, D: int, method: str) -> list[int]:
    return [seed, _EXP_ID[cfg.experiment], D, _METHOD_ID[method]]


def _train_seed(cfg: ExperimentConfig, seed: int, D: int, method: str) -> int:
    entropy = _point_entropy(cfg, seed, D, method) + [1]
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])


def _trained_model(cfg: ExperimentConfig, family: ModelFamily, seed: int, D: int, method: str):
    task = TaskConfig(d=cfg.d, D=D, sigma2=cfg.sigma2)
    tcfg = _train_config(cfg, family, _train_seed(cfg, seed, D, method))
    return train(tcfg, task, family).params


def _run_fig1(cfg: ExperimentConfig, out: _CsvWriter) -> None:
    methods = cfg.methods or FIG1_METHODS
    for D in cfg.D_sweep:
        task = TaskConfig(d=cfg.d, D=D, sigma2=cfg.sigma2)
        cot = cot_optimal_loss(cfg.d, cfg.sigma2, D).total
        icl = icl_optimal_loss(cfg.d, cfg.sigma2, D).total
        optimal = ratios_to_params(cot_optimal(cfg.d, cfg.sigma2))
        if "coherent_theory" in methods:
            out.write(_row_values(_theory_row(cfg, D, "coherent_theory", "NONE", cot)))
        if "stepwise_theory" in methods:
            out.write(_row_values(_theory_row(cfg, D, "stepwise_theory", "NONE", icl)))
        for seed in cfg.seeds:
            if "coherent_mc" in methods:
                est = evaluate(
                    optimal, task, n=cfg.n,
                    rng=_point_entropy(cfg, seed, D, "coherent_mc"),
                )
                out.write(_row_values(_mc_row(cfg, D, "coherent_mc", "NONE", est, cot, seed)))
            if "stepwise_mc" in methods:
                est = evaluate(
                    StepwiseParams(), task, n=cfg.n,
                    rng=_point_entropy(cfg, seed, D, "stepwise_mc"),
                )
                out.write(_row_values(_mc_row(cfg, D, "stepwise_mc", "NONE", est, icl, seed)))
            if "coherent_trained" in methods:
                model = _trained_model(cfg, ModelFamily.COHERENT, seed, D, "coherent_trained")
                est = evaluate(
                    model, task, n=cfg.n,
                    rng=_point_entropy(cfg, seed, D, "coherent_trained"),
                )
                out.write(_row_values(_mc_row(cfg, D, "coherent_trained", "NONE", est, None, seed)))
            if "stepwise_trained" in methods:
                model = _trained_model(
                    cfg, ModelFamily.STEPWISE_PAIR, seed, D, "stepwise_trained"
                )
                est = evaluate(
                    model, task, n=cfg.n,
                    rng=_point_entropy(cfg, seed, D, "stepwise_trained"),
                )
                out.write(_row_values(_mc_row(cfg, D, "stepwise_trained", "NONE", est, None, seed)))


def _run_fig2(cfg: ExperimentConfig, out: _CsvWriter) -> None:
    targets = (PerturbTarget.NONE, PerturbTarget.X, PerturbTarget.Z, PerturbTarget.Y)
    for D in cfg.D_sweep:
        task = TaskConfig(d=cfg.d, D=D, sigma2=cfg.sigma2)
        optimal = ratios_to_params(cot_optimal(cfg.d, cfg.sigma2))
        for target in targets:
            value = perturbed_loss(
                cfg.d, cfg.sigma2, cfg.sigma_eps2, D, optimal, target, "theorem"
            ).total
            out.write(_row_values(_theory_row(cfg, D, "theory", target.value, value)))
        for seed in cfg.seeds:
            model = _trained_model(cfg, ModelFamily.COHERENT, seed, D, "trained")
            for target in targets:
                spec = PerturbSpec(target, cfg.sigma_eps2 if target is not PerturbTarget.NONE else 0.0)
                est = evaluate(
                    model, task, spec, n=cfg.n,
                    rng=_point_entropy(cfg, seed, D, "trained"),
                )
                out.write(
                    _row_values(
                        _mc_row(
                            cfg, D, "trained", target.value, est, None, seed,
                            sigma_eps2=spec.sigma_eps2,
                        )
                    )
                )


def _run_theory_table(cfg: ExperimentConfig, out: _CsvWriter) -> None:
    for D in cfg.D_sweep:
        task = TaskConfig(d=cfg.d, D=D, sigma2=cfg.sigma2)
        cot = cot_optimal_loss(cfg.d, cfg.sigma2, D).total
        icl = icl_optimal_loss(cfg.d, cfg.sigma2, D).total
        optimal = ratios_to_params(cot_optimal(cfg.d, cfg.sigma2))
        out.write(_row_values(_theory_row(cfg, D, "coherent_opt", "NONE", cot)))
        out.write(_row_values(_theory_row(cfg, D, "stepwise", "NONE", icl)))
        for seed in cfg.seeds:
            est = evaluate(
                optimal, task, n=cfg.n, rng=_point_entropy(cfg, seed, D, "coherent_opt")
            )
            out.write(_row_values(_mc_row(cfg, D, "coherent_opt", "NONE", est, cot, seed)))
            est = evaluate(
                StepwiseParams(), task, n=cfg.n,
                rng=_point_entropy(cfg, seed, D, "stepwise"),
            )
            out.write(_row_values(_mc_row(cfg, D, "stepwise", "NONE", est, icl, seed)))


def _sigma2_key(sigma2: float) -> int:
    # stable integer encoding so streams survive sweep edits
    return int(round(sigma2 * 10**9))


def prop3_scan(
    d: int,
    sigma2_values: Sequence[float],
    sigma_eps2: float,
    D_values: Sequence[int],
    n: int,
    seeds: Sequence[int] = (0,),
) -> tuple[list[dict], list[dict]]:
    """Theory and Monte Carlo X-vs-Z comparison rows plus agreement verdicts.

    Each row reports the Z-minus-X loss difference three ways: the
    theorem-literal convention, the appendix convention, and an estimate
    under common random numbers, together with the sign the crossover
    cubic predicts and its positive roots.
    """
    if d < 2:
        raise ConfigError(f"prop3.d: must be >= 2, got {d}")
    try:
        roots = prop3_roots(d)
    except ArithmeticError:
        roots = None
    rows = []
    verdicts = []
    for D in D_values:
        for sigma2 in sigma2_values:
            task = TaskConfig(d=d, D=D, sigma2=sigma2)
            params = ratios_to_params(cot_optimal(d, sigma2))
            per_conv = {}
            for conv in ("theorem", "appendix"):
                z = perturbed_loss(d, sigma2, sigma_eps2, D, params, "Z", conv).total
                x = perturbed_loss(d, sigma2, sigma_eps2, D, params, "X", conv).total
                per_conv[conv] = z - x
            cubic = prop3_cubic(d, sigma2)
            predicted = 0 if cubic == 0 else (1 if cubic > 0 else -1)
            for seed in seeds:
                entropy = [seed, _EXP_ID[Experiment.PROP3_SCAN], D, _sigma2_key(sigma2)]
                est_z = evaluate(
                    params, task, PerturbSpec(PerturbTarget.Z, sigma_eps2), n=n, rng=entropy
                )
                est_x = evaluate(
                    params, task, PerturbSpec(PerturbTarget.X, sigma_eps2), n=n, rng=entropy
                )
                mc_delta = est_z.mean - est_x.mean
                # conservative under common random numbers
                mc_stderr = math.hypot(est_z.stderr, est_x.stderr)
                rows.append(
                    {
                        "d": d,
                        "D": D,
                        "sigma2": sigma2,
                        "sigma_eps2": sigma_eps2,
                        "delta_theorem": per_conv["theorem"],
                        "delta_appendix": per_conv["appendix"],
                        "mc_delta": mc_delta,
                        "mc_stderr": mc_stderr,
                        "predicted_sign": predicted,
                        "root_a": None if roots is None else roots[0],
                        "root_b": None if roots is None else roots[1],
                        "seed": seed,
                        "n": n,
                    }
                )
                mc_sign = 0 if mc_delta == 0 else (1 if mc_delta > 0 else -1)
                resolved = abs(mc_delta) > 3 * mc_stderr
                verdicts.append(
                    {
                        "d": d,
                        "D": D,
                        "sigma2": sigma2,
                        "seed": seed,
                        "mc_delta": mc_delta,
                        "mc_stderr": mc_stderr,
                        "mc_sign": mc_sign,
                        "resolved": resolved,
                        "predicted_sign": predicted,
                        "sign_theorem": _sign(per_conv["theorem"]),
                        "sign_appendix": _sign(per_conv["appendix"]),
                        "matches_theorem": resolved and mc_sign == _sign(per_conv["theorem"]),
                        "matches_appendix": resolved and mc_sign == _sign(per_conv["appendix"]),
                    }
                )
    return rows, verdicts


def _sign(x: float) -> int:
    return 0 if x == 0 else (1 if x > 0 else -1)


def _run_prop3(cfg: ExperimentConfig, out: _CsvWriter) -> list[dict]:
    rows, verdicts = prop3_scan(
        cfg.d, [cfg.sigma2], cfg.sigma_eps2, cfg.D_sweep, cfg.n, cfg.seeds
    )
    for row in rows:
        out.write([row[c] for c in PROP3_COLUMNS])
    return verdicts


def _run_grid(cfg: ExperimentConfig, out: _CsvWriter) -> None:
    a_vals, b_vals = cfg.grid.axes()
    spec = PerturbSpec()
    for D in cfg.D_sweep:
        task = TaskConfig(d=cfg.d, D=D, sigma2=cfg.sigma2)
        for seed in cfg.seeds:
            entropy = [seed, _EXP_ID[Experiment.GRID_SEARCH], D]
            res = grid_search(task, a_vals, b_vals, spec, n=cfg.n, rng=entropy)
            for i, a in enumerate(res.a_values):
                for j, b in enumerate(res.b_values):
                    best = 1 if (float(a), float(b)) == res.best else 0
                    out.write(
                        [
                            cfg.d,
                            D,
                            cfg.sigma2,
                            0.0,
                            float(a),
                            float(b),
                            res.surface[i, j],
                            res.stderr[i, j],
                            best,
                            seed,
                            cfg.n,
                        ]
                    )


def _run_train(cfg: ExperimentConfig, out: _CsvWriter, out_dir: Path) -> list[str]:
    family = ModelFamily(cfg.train.family)
    extra_outputs = []
    for D in cfg.D_sweep:
        task = TaskConfig(d=cfg.d, D=D, sigma2=cfg.sigma2)
        for seed in cfg.seeds:
            tcfg = _train_config(cfg, family, _train_seed(cfg, seed, D, "trained"))
            result = train(tcfg, task, family)
            for stage, curve in sorted(result.curves.items()):
                for step, loss in curve:
                    out.write(
                        [cfg.d, D, cfg.sigma2, family.value, stage, seed, int(step), loss]
                    )
            name = f"checkpoint_{family.value}_D{D}_seed{seed}.json"
            _save_checkpoint(result.params, out_dir / name)
            extra_outputs.append(name)
    return extra_outputs


def _save_checkpoint(
    params: FullAttentionParams | StepwisePair | CoherentParams, path: Path
) -> None:
    with open(path, "w") as fp:
        if isinstance(params, FullAttentionParams):
            save_params(params, fp)
        elif isinstance(params, StepwisePair):
            fp.write('{"f1": ')
            save_params(params.f1, fp)
            fp.write(', "f2": ')
            save_params(params.f2, fp)
            fp.write("}")
        else:
            json.dump({"v_x": params.v_x, "v_z": params.v_z, "v_y": params.v_y}, fp)


def _row_values(row: ResultRow) -> list[object]:
    return [getattr(row, c) for c in RESULT_COLUMNS]


def run_experiment(cfg: ExperimentConfig, output_dir: str | Path | None = None) -> Path:
    """Execute one experiment; returns the output directory.

    Writes ``<experiment>.csv`` and ``manifest.json``; an aborted run still
    leaves its manifest (marked aborted) and completed CSV rows behind.
    """
    out_dir = Path(output_dir if output_dir is not None else cfg.output)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_name = f"{cfg.experiment.value.lower()}.csv"
    columns = {
        Experiment.PROP3_SCAN: PROP3_COLUMNS,
        Experiment.GRID_SEARCH: GRID_COLUMNS,
        Experiment.TRAIN: TRAIN_COLUMNS,
    }.get(cfg.experiment, RESULT_COLUMNS)
    writer = _CsvWriter(out_dir / csv_name, columns)
    outputs = [csv_name]
    verdicts = None
    started = time.perf_counter()
    aborted = False
    reason = None
    try:
        if cfg.experiment is Experiment.FIG1:
            _run_fig1(cfg, writer)
        elif cfg.experiment is Experiment.FIG2:
            _run_fig2(cfg, writer)
        elif cfg.experiment is Experiment.THEORY_TABLE:
            _run_theory_table(cfg, writer)
        elif cfg.experiment is Experiment.PROP3_SCAN:
            verdicts = _run_prop3(cfg, writer)
        elif cfg.experiment is Experiment.GRID_SEARCH:
            _run_grid(cfg, writer)
        else:
            outputs.extend(_run_train(cfg, writer, out_dir))
    except (DivergenceError, RejectionOverflow) as err:
        aborted = True
        reason = f"{type(err).__name__}: {err}"
    finally:
        writer.close()
    manifest = {
        "experiment": cfg.experiment.value,
        "config": _config_echo(cfg),
        "seeds": list(cfg.seeds),
        "version": __version__,
        "wall_time_s": time.perf_counter() - started,
        "outputs": outputs,
        "aborted": aborted,
    }
    if reason is not None:
        manifest["abort_reason"] = reason
    if verdicts is not None:
        manifest["prop3_agreement"] = verdicts
    with open(out_dir / "manifest.json", "w") as fp:
        json.dump(manifest, fp, indent=2)
        fp.write("\n")
    if aborted:
        raise RuntimeError(reason)
    return out_dir


# Command-line interface


def _cmd_run(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    run_experiment(cfg, args.output)
    return 0


def _cmd_prop3(args: argparse.Namespace) -> int:
    out_dir = Path(args.output)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows, verdicts = prop3_scan(
        args.d, args.sigma2, args.sigma_eps2, args.D, args.n, args.seed
    )
    writer = _CsvWriter(out_dir / "prop3_scan.csv", PROP3_COLUMNS)
    for row in rows:
        writer.write([row[c] for c in PROP3_COLUMNS])
    writer.close()
    manifest = {
        "experiment": Experiment.PROP3_SCAN.value,
        "config": {
            "d": args.d,
            "sigma2": args.sigma2,
            "sigma_eps2": args.sigma_eps2,
            "D": args.D,
            "n": args.n,
            "seeds": args.seed,
        },
        "seeds": args.seed,
        "version": __version__,
        "outputs": ["prop3_scan.csv"],
        "aborted": False,
        "prop3_agreement": verdicts,
    }
    with open(out_dir / "manifest.json", "w") as fp:
        json.dump(manifest, fp, indent=2)
        fp.write("\n")
    return 0


def _cmd_theory(args: argparse.Namespace) -> int:
    icl = icl_optimal_loss(args.d, args.sigma2, args.D).total
    cot = cot_optimal_loss(args.d, args.sigma2, args.D).total
    ratios = cot_optimal(args.d, args.sigma2)
    print(f"icl_optimal_loss = {icl:.17g}")
    print(f"cot_optimal_loss = {cot:.17g}")
    print(f"optimal_vx_over_vy = {ratios.vx_over_vy:.17g}")
    print(f"optimal_vz_over_vy = {ratios.vz_over_vy:.17g}")
    print(f"gap = {icl - cot:.17g}")
    return 0


def _cmd_roots(args: argparse.Namespace) -> int:
    root_a, root_b = prop3_roots(args.d)
    print(f"root_a = {root_a:.17g}")
    print(f"root_b = {root_b:.17g}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cotlab",
        description="Run chain-of-thought linear-attention experiments.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run an experiment described by a TOML config")
    p_run.add_argument("config", help="path to the experiment TOML file")
    p_run.add_argument("--output", default=None, help="override the output directory")
    p_run.set_defaults(func=_cmd_run)

    p_prop3 = sub.add_parser("prop3", help="X-vs-Z perturbation crossover scan")
    p_prop3.add_argument("--d", type=int, required=True)
    p_prop3.add_argument("--sigma2", type=float, nargs="+", required=True)
    p_prop3.add_argument("--sigma-eps2", dest="sigma_eps2", type=float, default=1.0)
    p_prop3.add_argument("--D", type=int, nargs="+", default=[200])
    p_prop3.add_argument("--n", type=int, default=100_000)
    p_prop3.add_argument("--seed", type=int, nargs="+", default=[0])
    p_prop3.add_argument("--output", required=True)
    p_prop3.set_defaults(func=_cmd_prop3)

    p_theory = sub.add_parser("theory", help="print the closed-form optimal losses")
    p_theory.add_argument("d", type=int)
    p_theory.add_argument("sigma2", type=float)
    p_theory.add_argument("D", type=int)
    p_theory.set_defaults(func=_cmd_theory)

    p_roots = sub.add_parser("roots", help="print the crossover cubic's positive roots")
    p_roots.add_argument("d", type=int)
    p_roots.set_defaults(func=_cmd_roots)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"invalid configuration:\n{err}", file=sys.stderr)
        return 2
    except (ValueError, ArithmeticError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except RuntimeError as err:
        print(f"aborted: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
