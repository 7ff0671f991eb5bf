"""``render <spec.toml>``: one figure per invocation.

The TOML file names the CSV, the figure kind, the output path, and the two
style knobs:

    input = "runs/fig1/fig1.csv"
    kind = "FIG1"            # FIG1 | FIG2 | PROP3
    output = "fig1.svg"      # .png switches format
    log_x = true
    band_alpha = 0.25
"""

import argparse
import sys
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib

from .figures import FigureKind, PlotSpec, SchemaError, render


def load_spec(path: str | Path) -> PlotSpec:
    with open(path, "rb") as fp:
        try:
            doc = tomllib.load(fp)
        except tomllib.TOMLDecodeError as err:
            raise ValueError(f"{path}: not valid TOML: {err}") from err
    problems = []
    for name in ("input", "kind", "output"):
        if not isinstance(doc.get(name), str) or not doc.get(name):
            problems.append(f"{name}: required string")
    kind = None
    if isinstance(doc.get("kind"), str):
        try:
            kind = FigureKind(doc["kind"])
        except ValueError:
            problems.append(
                f"kind: must be one of {[k.value for k in FigureKind]}, got {doc['kind']!r}"
            )
    if not isinstance(doc.get("log_x", False), bool):
        problems.append("log_x: must be a boolean")
    if not isinstance(doc.get("band_alpha", 0.25), (int, float)):
        problems.append("band_alpha: must be a number")
    unknown = set(doc) - {"input", "kind", "output", "log_x", "band_alpha"}
    problems.extend(f"{name}: unknown field" for name in sorted(unknown))
    if problems:
        raise ValueError("\n".join(problems))
    base = Path(path).parent
    return PlotSpec(
        input=base / doc["input"],
        kind=kind,
        output=base / doc["output"],
        log_x=doc.get("log_x", False),
        band_alpha=float(doc.get("band_alpha", 0.25)),
    )


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="render", description="render an experiment CSV to a figure"
    )
    parser.add_argument("spec", help="path to the figure spec TOML")
    args = parser.parse_args(argv)
    try:
        spec = load_spec(args.spec)
    except (OSError, ValueError) as err:
        print(f"invalid figure spec:\n{err}", file=sys.stderr)
        return 2
    try:
        series = render(spec)
    except (OSError, SchemaError) as err:
        print(str(err), file=sys.stderr)
        return 1
    print(f"wrote {spec.output} ({len(series)} series)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
