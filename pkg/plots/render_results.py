#!/usr/bin/env python3
"""Render two-panel metric figures from a simulation results CSV.

Reads the pipeline results schema
(`feature_grouping,kernel,num_pcs,reps,abs_rel_bias,rel_rmse,ess_mean,failures`)
and plots the chosen metric against the number of principal components:
kernel-only groupings on the left panel, kernel-plus-raw groupings on the
right, with a black dashed reference line at the raw-covariates value.
Writes both PNG and SVG next to the requested output path.

Usage:
    render_results.py --csv results.csv --metric rel_rmse --out fig.png
"""

from __future__ import annotations

import argparse
import csv
import sys
import warnings
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

EXPECTED_HEADER = [
    "feature_grouping",
    "kernel",
    "num_pcs",
    "reps",
    "abs_rel_bias",
    "rel_rmse",
    "ess_mean",
    "failures",
]

METRICS = ("abs_rel_bias", "rel_rmse", "ess_mean")

METRIC_LABELS = {
    "abs_rel_bias": "absolute relative bias",
    "rel_rmse": "relative RMSE",
    "ess_mean": "effective sample size",
}

# fixed per-kernel colors so every figure reads the same way
KERNEL_COLORS = {"rf": "tab:blue", "bart": "tab:orange", "kbal": "tab:red"}

FIGSIZE = (9.0, 4.0)


class SchemaError(ValueError):
    """The CSV does not match the documented results schema."""


@dataclass
class ResultRow:
    feature_grouping: str
    kernel: str
    num_pcs: int
    value: float


def load_results(csv_path: str, metric: str) -> list[ResultRow]:
    if metric not in METRICS:
        raise SchemaError(f"unknown metric {metric!r}; choose from {METRICS}")
    with open(csv_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{csv_path}: empty file") from None
        if header != EXPECTED_HEADER:
            raise SchemaError(
                f"{csv_path}: header {header} does not match the results schema"
            )
        col = EXPECTED_HEADER.index(metric)
        rows = []
        for line_no, rec in enumerate(reader, start=2):
            if len(rec) != len(EXPECTED_HEADER):
                raise SchemaError(f"{csv_path}: line {line_no} has {len(rec)} fields")
            try:
                rows.append(
                    ResultRow(
                        feature_grouping=rec[0],
                        kernel=rec[1],
                        num_pcs=int(rec[2]),
                        value=float(rec[col]),
                    )
                )
            except ValueError as exc:
                raise SchemaError(f"{csv_path}: line {line_no}: {exc}") from None
    if not rows:
        raise SchemaError(f"{csv_path}: no data rows")
    return rows


def render_metric_figure(csv_path: str, metric: str, out_image_path: str):
    """Draw the two-panel figure and write `<out>.png` and `<out>.svg`.

    Returns the matplotlib Figure (useful for tests and notebooks).
    """
    rows = load_results(csv_path, metric)
    raw_rows = [r for r in rows if r.feature_grouping == "raw"]
    raw_value = raw_rows[0].value if raw_rows else None
    if raw_value is None:
        warnings.warn("no 'raw' row found: rendering without the reference line")

    fig, axes = plt.subplots(1, 2, figsize=FIGSIZE, sharey=True)
    panels = (("_only", "kernel features only"), ("_plus", "kernel + raw features"))
    for ax, (suffix, title) in zip(axes, panels):
        for kernel in ("rf", "bart", "kbal"):
            pts = sorted(
                (r.num_pcs, r.value)
                for r in rows
                if r.feature_grouping == f"{kernel}{suffix}"
            )
            if pts:
                xs, ys = zip(*pts)
                ax.plot(xs, ys, marker="o", color=KERNEL_COLORS[kernel], label=kernel)
        if raw_value is not None:
            ax.axhline(raw_value, color="black", linestyle="--", label="raw")
        ax.set_title(title)
        ax.set_xlabel("number of principal components")
    axes[0].set_ylabel(METRIC_LABELS[metric])
    axes[0].legend()
    fig.tight_layout()

    out = Path(out_image_path)
    png = out if out.suffix == ".png" else out.with_suffix(".png")
    svg = out.with_suffix(".svg")
    fig.savefig(png, dpi=150)
    fig.savefig(svg)
    return fig


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--csv", required=True)
    parser.add_argument("--metric", default="rel_rmse", choices=METRICS)
    parser.add_argument("--out", required=True)
    args = parser.parse_args(argv)
    try:
        render_metric_figure(args.csv, args.metric, args.out)
    except (SchemaError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
