"""Regenerate the golden SVGs from the fixture CSVs.

Run from this directory after an intentional rendering change, then review
the diffs like any other code change.
"""

from pathlib import Path

from cotplots import FigureKind, PlotSpec, render

HERE = Path(__file__).parent

if __name__ == "__main__":
    for kind, csv_name in (
        (FigureKind.FIG1, "fig1.csv"),
        (FigureKind.FIG2, "fig2.csv"),
        (FigureKind.PROP3, "prop3_scan.csv"),
    ):
        spec = PlotSpec(
            input=HERE / "fixtures" / csv_name,
            kind=kind,
            output=HERE / "golden" / f"{kind.value.lower()}.svg",
            log_x=kind is not FigureKind.PROP3,
        )
        series = render(spec)
        print(f"{spec.output.name}: {len(series)} series")
