"""Static SVG charts over one or more metrics CSVs."""
from __future__ import annotations

import csv
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .trainer import METRICS_HEADER, read_metrics  # noqa: E402

# keep text as text so labels stay searchable in the SVG
matplotlib.rcParams["svg.fonttype"] = "none"
matplotlib.rcParams["svg.hashsalt"] = "ctkd"


def _series(rows, key):
    return [r["epoch"] for r in rows], [r[key] for r in rows]


def plot_runs(runs: Mapping[str, str | Path], out_dir, tau_refs: Sequence[float] = ()) -> dict:
    """Write ``loss.svg``, ``tau.svg``, ``lambda.svg`` and ``merged.csv``.

    Runs whose temperature never changes are drawn as dashed reference lines
    on the temperature chart rather than as curves. Returns the written paths,
    the legend labels of each chart, and the plotted lambda series.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = {name: read_metrics(path) for name, path in runs.items()}
    legends: dict[str, list[str]] = {}
    series = {"lambda": {name: _series(rows, "lambda") for name, rows in data.items()}}

    fig, ax = plt.subplots(figsize=(6, 4))
    for name, rows in data.items():
        ax.plot(*_series(rows, "kd_loss"), label=name)
    ax.set_xlabel("epoch")
    ax.set_ylabel("distillation loss")
    ax.legend()
    legends["loss"] = [t.get_text() for t in ax.get_legend().get_texts()]
    fig.savefig(out / "loss.svg")
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(6, 4))
    for name, rows in data.items():
        taus = [r["tau_mean"] for r in rows]
        if rows and min(taus) == max(taus):
            ax.axhline(taus[0], linestyle="--", linewidth=1, label=f"{name} (fixed)")
        else:
            ax.plot(*_series(rows, "tau_mean"), label=name)
    for t in tau_refs:
        ax.axhline(t, linestyle=":", color="grey", linewidth=1, label=f"tau={t:g}")
    ax.set_xlabel("epoch")
    ax.set_ylabel("temperature")
    ax.legend()
    legends["tau"] = [t.get_text() for t in ax.get_legend().get_texts()]
    fig.savefig(out / "tau.svg")
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(6, 4))
    for name, rows in data.items():
        ax.plot(*_series(rows, "lambda"), marker=".", label=name)
    ax.set_xlabel("epoch")
    ax.set_ylabel("lambda")
    ax.legend()
    legends["lambda"] = [t.get_text() for t in ax.get_legend().get_texts()]
    fig.savefig(out / "lambda.svg")
    plt.close(fig)

    merged = out / "merged.csv"
    with open(merged, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run", *METRICS_HEADER])
        for name, rows in data.items():
            for r in rows:
                w.writerow([name, int(r["epoch"]), *(repr(r[c]) for c in METRICS_HEADER[1:])])

    return {
        "charts": [out / "loss.svg", out / "tau.svg", out / "lambda.svg"],
        "merged": merged,
        "legends": legends,
        "series": series,
    }
