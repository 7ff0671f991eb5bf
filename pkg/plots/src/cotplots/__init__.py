"""Figure rendering for experiment CSVs."""

from .figures import FigureKind, PlotSpec, SchemaError, Series, build_series, render

__all__ = [
    "FigureKind",
    "PlotSpec",
    "SchemaError",
    "Series",
    "build_series",
    "render",
]
