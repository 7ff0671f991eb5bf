"""Render experiment CSVs to figures.

Consumes only the documented CSV schema of the experiment harness (columns,
not its code): the shared result schema for loss-vs-D figures and the
crossover-scan schema for the sign chart. Series values are plotted exactly
as parsed; bands come straight from the lo90/hi90 columns (mean +- 1.645
stderr upstream). Output is deterministic for identical inputs: fixed hash
salt, no date metadata.
"""

import csv
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import matplotlib
import numpy as np

matplotlib.use("Agg")
matplotlib.rcParams["svg.hashsalt"] = "cotplots"

import matplotlib.pyplot as plt


class FigureKind(Enum):
    FIG1 = "FIG1"
    FIG2 = "FIG2"
    PROP3 = "PROP3"


class SchemaError(ValueError):
    """The CSV does not match the documented schema for the figure kind."""


RESULT_COLUMNS = {
    "experiment", "d", "D", "sigma2", "sigma_eps2", "method", "target",
    "mean", "stderr", "lo90", "hi90", "theory", "seed", "n",
}
PROP3_COLUMNS = {
    "d", "D", "sigma2", "sigma_eps2", "delta_theorem", "delta_appendix",
    "mc_delta", "mc_stderr", "predicted_sign", "root_a", "root_b", "seed", "n",
}

_FIG1_ORDER = (
    "coherent_theory", "stepwise_theory", "coherent_mc",
    "stepwise_mc", "coherent_trained", "stepwise_trained",
)
_FIG2_TARGET_ORDER = ("NONE", "X", "Y", "Z")

_PALETTE = {
    "coherent": "#1a7f37", "stepwise": "#c0392b",
    "NONE": "#1a7f37", "X": "#2563eb", "Y": "#c0392b", "Z": "#b45309",
}


@dataclass(frozen=True)
class PlotSpec:
    """One figure: which CSV, which layout, where the image goes."""

    input: Path
    kind: FigureKind
    output: Path
    log_x: bool = False
    band_alpha: float = 0.25

    def __post_init__(self) -> None:
        if not 0.0 <= self.band_alpha <= 1.0:
            raise ValueError(f"band_alpha must be in [0, 1], got {self.band_alpha}")


@dataclass(frozen=True)
class Series:
    """One plotted line, values exactly as parsed from the CSV."""

    label: str
    x: np.ndarray
    y: np.ndarray
    lo: np.ndarray | None = None
    hi: np.ndarray | None = None
    color: str = "#333333"
    dashed: bool = False
    band: bool = field(default=False)


def _read_rows(path: Path, required: set[str], kind: FigureKind) -> list[dict]:
    with open(path, newline="") as fp:
        reader = csv.DictReader(fp)
        header = set(reader.fieldnames or ())
        missing = sorted(required - header)
        if missing:
            raise SchemaError(
                f"{path} does not match the {kind.value} schema: "
                f"missing columns: {', '.join(missing)}"
            )
        rows = list(reader)
    if not rows:
        raise SchemaError(f"{path} has zero data rows")
    return rows


def _col(rows: list[dict], name: str) -> np.ndarray:
    return np.array([float(r[name]) for r in rows])


def _fig1_series(rows: list[dict]) -> list[Series]:
    out = []
    methods = [m for m in _FIG1_ORDER if any(r["method"] == m for r in rows)]
    methods += sorted({r["method"] for r in rows} - set(methods))
    for method in methods:
        seeds = sorted({r["seed"] for r in rows if r["method"] == method}, key=float)
        for seed in seeds:
            sub = [r for r in rows if r["method"] == method and r["seed"] == seed]
            sub.sort(key=lambda r: float(r["D"]))
            theory = all(float(r["n"]) == 0 for r in sub)
            label = method if len(seeds) == 1 or theory else f"{method} s{seed}"
            out.append(Series(
                label=label,
                x=_col(sub, "D"),
                y=_col(sub, "mean"),
                lo=None if theory else _col(sub, "lo90"),
                hi=None if theory else _col(sub, "hi90"),
                color=_PALETTE["coherent" if method.startswith("coherent") else "stepwise"],
                dashed=theory,
                band=not theory,
            ))
            if theory:
                break
    return out


def _fig2_series(rows: list[dict]) -> list[Series]:
    out = []
    targets = [t for t in _FIG2_TARGET_ORDER if any(r["target"] == t for r in rows)]
    targets += sorted({r["target"] for r in rows} - set(targets))
    for method in ("theory", "trained"):
        for target in targets:
            seeds = sorted(
                {r["seed"] for r in rows if r["method"] == method and r["target"] == target},
                key=float,
            )
            for seed in seeds:
                sub = [r for r in rows
                       if r["method"] == method and r["target"] == target and r["seed"] == seed]
                if not sub:
                    continue
                sub.sort(key=lambda r: float(r["D"]))
                theory = method == "theory"
                label = f"{method} {target}"
                if len(seeds) > 1 and not theory:
                    label += f" s{seed}"
                out.append(Series(
                    label=label,
                    x=_col(sub, "D"),
                    y=_col(sub, "mean"),
                    lo=None if theory else _col(sub, "lo90"),
                    hi=None if theory else _col(sub, "hi90"),
                    color=_PALETTE[target],
                    dashed=theory,
                    band=not theory,
                ))
                if theory:
                    break
    return out


def _prop3_series(rows: list[dict]) -> list[Series]:
    rows = sorted(rows, key=lambda r: (float(r["sigma2"]), float(r["seed"])))
    x = _col(rows, "sigma2")
    mc_lo = _col(rows, "mc_delta") - 1.645 * _col(rows, "mc_stderr")
    mc_hi = _col(rows, "mc_delta") + 1.645 * _col(rows, "mc_stderr")
    return [
        Series("theorem convention", x, _col(rows, "delta_theorem"),
               color="#6b7280", dashed=True),
        Series("appendix convention", x, _col(rows, "delta_appendix"),
               color="#1a7f37", dashed=True),
        Series("Monte Carlo", x, _col(rows, "mc_delta"),
               lo=mc_lo, hi=mc_hi, color="#2563eb", band=True),
    ]


def build_series(spec: PlotSpec) -> list[Series]:
    """Parse the CSV and lay out the figure's lines without drawing anything."""
    required = PROP3_COLUMNS if spec.kind is FigureKind.PROP3 else RESULT_COLUMNS
    rows = _read_rows(Path(spec.input), required, spec.kind)
    if spec.kind is FigureKind.FIG1:
        return _fig1_series(rows)
    if spec.kind is FigureKind.FIG2:
        return _fig2_series(rows)
    return _prop3_series(rows)


def render(spec: PlotSpec) -> list[Series]:
    """Draw the figure to ``spec.output`` and return the plotted series.

    SVG by default (diffable); a .png suffix switches formats. The returned
    series are the exact arrays drawn, for callers that want to assert on
    plotted values.
    """
    series = build_series(spec)
    fig, ax = plt.subplots(figsize=(6.4, 4.2), dpi=100)
    try:
        for s in series:
            ax.plot(s.x, s.y, label=s.label, color=s.color,
                    linestyle="--" if s.dashed else "-",
                    marker="" if s.dashed else "o", markersize=3)
            if s.band and s.lo is not None and s.hi is not None:
                ax.fill_between(s.x, s.lo, s.hi, color=s.color,
                                alpha=spec.band_alpha, linewidth=0)
        if spec.kind is FigureKind.PROP3:
            rows = _read_rows(Path(spec.input), PROP3_COLUMNS, spec.kind)
            roots = {r["root_a"] for r in rows} | {r["root_b"] for r in rows}
            for root in sorted(float(v) for v in roots if v not in ("", None)):
                ax.axvline(root, color="#9ca3af", linestyle=":", linewidth=1)
            ax.axhline(0.0, color="#d1d5db", linewidth=0.8)
            ax.set_xlabel("sigma2")
            ax.set_ylabel("z-noise minus x-noise loss delta")
        else:
            ax.set_xlabel("D")
            ax.set_ylabel("final-answer MSE")
        if spec.log_x:
            ax.set_xscale("log")
        ax.legend(fontsize=8)
        fig.tight_layout()
        out = Path(spec.output)
        out.parent.mkdir(parents=True, exist_ok=True)
        fmt = "png" if out.suffix.lower() == ".png" else "svg"
        fig.savefig(out, format=fmt, metadata=None if fmt == "png" else {"Date": None})
    finally:
        plt.close(fig)
    return series
