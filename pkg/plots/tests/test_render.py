"""Rendering: schema enforcement, exact series passthrough, golden SVG files."""

import csv
from pathlib import Path

import numpy as np
import pytest

from cotplots import FigureKind, PlotSpec, SchemaError, build_series, render
from cotplots.cli import load_spec, main

HERE = Path(__file__).parent
FIXTURES = HERE / "fixtures"
GOLDEN = HERE / "golden"

KINDS = {
    "FIG1": FIXTURES / "fig1.csv",
    "FIG2": FIXTURES / "fig2.csv",
    "PROP3": FIXTURES / "prop3_scan.csv",
}


def _spec(kind, out, **kwargs):
    defaults = dict(log_x=kind != "PROP3")
    defaults.update(kwargs)
    return PlotSpec(input=KINDS[kind], kind=FigureKind(kind), output=out, **defaults)


def _rows(path):
    with open(path, newline="") as fp:
        return list(csv.DictReader(fp))


# Schema and error handling


def test_missing_column_is_named(tmp_path):
    rows = _rows(KINDS["FIG1"])
    clipped = tmp_path / "clipped.csv"
    keep = [c for c in rows[0] if c not in ("stderr", "lo90")]
    with open(clipped, "w", newline="") as fp:
        writer = csv.DictWriter(fp, fieldnames=keep, extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rows)
    spec = PlotSpec(input=clipped, kind=FigureKind.FIG1, output=tmp_path / "x.svg")
    with pytest.raises(SchemaError) as err:
        render(spec)
    assert "lo90, stderr" in str(err.value)


def test_empty_csv_names_zero_rows(tmp_path):
    empty = tmp_path / "empty.csv"
    with open(KINDS["FIG1"]) as fp:
        empty.write_text(fp.readline())
    spec = PlotSpec(input=empty, kind=FigureKind.FIG1, output=tmp_path / "x.svg")
    with pytest.raises(SchemaError, match="zero data rows"):
        render(spec)


def test_band_alpha_bounds():
    with pytest.raises(ValueError, match="band_alpha"):
        PlotSpec(input=KINDS["FIG1"], kind=FigureKind.FIG1, output=Path("x.svg"), band_alpha=1.5)


# Exact passthrough of CSV values


@pytest.mark.parametrize("kind", sorted(KINDS))
def test_plotted_values_equal_csv(kind, tmp_path):
    series = render(_spec(kind, tmp_path / "fig.svg"))
    assert series
    rows = _rows(KINDS[kind])
    plotted = {}
    for s in series:
        for x, y in zip(s.x, s.y):
            plotted.setdefault(s.label.split(" s", 1)[0], set()).add((x, y))
    if kind == "PROP3":
        csv_points = {(float(r["sigma2"]), float(r["mc_delta"])) for r in rows}
        assert plotted["Monte Carlo"] == csv_points
    else:
        for label, points in plotted.items():
            method = label.split(" ", 1)[0] if kind == "FIG2" else label
            sub = {
                (float(r["D"]), float(r["mean"]))
                for r in rows
                if r["method"] == method
            }
            assert points <= sub


def test_fig1_series_cover_every_method(tmp_path):
    series = render(_spec("FIG1", tmp_path / "fig.svg"))
    labels = {s.label.split(" s", 1)[0] for s in series}
    methods = {r["method"] for r in _rows(KINDS["FIG1"])}
    assert labels == methods


def test_fig2_theory_none_and_y_lines_coincide(tmp_path):
    series = {s.label: s for s in render(_spec("FIG2", tmp_path / "fig.svg"))}
    none_line, y_line = series["theory NONE"], series["theory Y"]
    assert np.array_equal(none_line.x, y_line.x)
    assert np.array_equal(none_line.y, y_line.y)
    # while the perturbed X and Z theory lines sit strictly above
    assert np.all(series["theory X"].y > none_line.y)
    assert np.all(series["theory Z"].y > none_line.y)


def test_mc_bands_come_from_the_interval_columns(tmp_path):
    rows = _rows(KINDS["FIG1"])
    series = render(_spec("FIG1", tmp_path / "fig.svg"))
    banded = [s for s in series if s.band]
    assert banded
    csv_bands = {
        (float(r["D"]), float(r["lo90"]), float(r["hi90"]))
        for r in rows if float(r["n"]) > 0
    }
    for s in banded:
        for x, lo, hi in zip(s.x, s.lo, s.hi):
            assert (x, lo, hi) in csv_bands


def test_prop3_draws_both_conventions_and_mc():
    series = build_series(_spec("PROP3", Path("unused.svg")))
    assert [s.label for s in series] == [
        "theorem convention", "appendix convention", "Monte Carlo",
    ]
    mc = series[-1]
    assert np.allclose(mc.hi - mc.y, mc.y - mc.lo)


# Deterministic output and golden files


def test_render_is_deterministic(tmp_path):
    a = tmp_path / "a.svg"
    b = tmp_path / "b.svg"
    render(_spec("FIG1", a))
    render(_spec("FIG1", b))
    assert a.read_bytes() == b.read_bytes()


@pytest.mark.parametrize("kind", sorted(KINDS))
def test_golden_svg(kind, tmp_path):
    out = tmp_path / f"{kind.lower()}.svg"
    render(_spec(kind, out))
    golden = GOLDEN / f"{kind.lower()}.svg"
    assert out.read_bytes() == golden.read_bytes(), (
        f"{out} differs from {golden}; regenerate goldens with "
        f"python tests/make_golden.py if the change is intended"
    )


def test_fig1_svg_carries_series_labels(tmp_path):
    out = tmp_path / "fig1.svg"
    render(_spec("FIG1", out))
    text = out.read_text()
    for label in ("coherent_theory", "stepwise_theory", "coherent_trained"):
        assert label in text


def test_png_output(tmp_path):
    out = tmp_path / "fig1.png"
    render(_spec("FIG1", out))
    assert out.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


# CLI


def test_cli_renders_from_spec(tmp_path, capsys):
    spec = tmp_path / "fig.toml"
    spec.write_text(
        f'input = "{KINDS["FIG1"]}"\nkind = "FIG1"\noutput = "out/fig1.svg"\nlog_x = true\n'
    )
    assert main([str(spec)]) == 0
    assert (tmp_path / "out" / "fig1.svg").exists()
    assert "series" in capsys.readouterr().out


def test_cli_rejects_bad_spec(tmp_path, capsys):
    spec = tmp_path / "bad.toml"
    spec.write_text('input = "x.csv"\nkind = "FIG9"\noutput = ""\nextra = 1\n')
    assert main([str(spec)]) == 2
    err = capsys.readouterr().err
    assert "kind" in err and "output" in err and "extra" in err


def test_cli_schema_mismatch_exits_nonzero(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("a,b\n1,2\n")
    spec = tmp_path / "fig.toml"
    spec.write_text(f'input = "{bad}"\nkind = "PROP3"\noutput = "x.svg"\n')
    assert main([str(spec)]) == 1
    assert "mc_delta" in capsys.readouterr().err


def test_spec_paths_resolve_relative_to_the_toml(tmp_path):
    spec = tmp_path / "fig.toml"
    spec.write_text('input = "data/fig1.csv"\nkind = "FIG1"\noutput = "fig1.svg"\n')
    parsed = load_spec(spec)
    assert parsed.input == tmp_path / "data" / "fig1.csv"
    assert parsed.output == tmp_path / "fig1.svg"
