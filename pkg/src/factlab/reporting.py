"""CSV persistence and SVG plots for experiment records and fits."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .errors import DegenerateInputError
from .harness import ResultRecord
from .scaling import CapacityPoint, FitResult

_RECORD_FIELDS = ["spec_hash", "kind", "group", "seed", "cell_id", "metrics", "wall_clock", "status"]


def write_records_csv(records: Sequence[ResultRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=_RECORD_FIELDS)
        w.writeheader()
        for r in records:
            w.writerow(r.as_row())


def read_records_csv(path) -> list[ResultRecord]:
    with open(path, newline="") as fh:
        return [ResultRecord.from_row(row) for row in csv.DictReader(fh)]


def _finish(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", bbox_inches="tight")
    plt.close(fig)
    return path


def plot_mr_curve(sizes, mrs, path, label="MR") -> Path:
    """Memorization rate against training-set size."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(sizes, mrs, "o-", label=label)
    ax.set_xscale("log")
    ax.set_xlabel("training facts |D|")
    ax.set_ylabel("memorization rate")
    ax.set_ylim(0, 1.05)
    ax.grid(alpha=0.3)
    ax.legend()
    return _finish(fig, path)


def plot_capacity_fit(points: Sequence[CapacityPoint], fit: FitResult, path,
                      x_axis: str = "non_embed") -> Path:
    """Capacity scatter with the fitted law overlaid."""
    if not points:
        raise DegenerateInputError("no capacity points to plot")
    xs = np.array([getattr(p, x_axis) for p in points], dtype=float)
    ys = np.array([p.effective_capacity for p in points], dtype=float)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.scatter(xs, ys, zorder=3, label="measured")
    grid = np.linspace(xs.min(), xs.max(), 200)
    ax.plot(grid, [fit.predict(x) for x in grid], "r-",
            label=f"{fit.law} fit (r2={fit.r_squared:.3f})")
    ax.set_xlabel("non-embed parameters" if x_axis == "non_embed" else "training epochs")
    ax.set_ylabel("fact capacity |D|*MR")
    ax.grid(alpha=0.3)
    ax.legend()
    return _finish(fig, path)


def plot_loss_powerlaw(sizes, losses, fit: FitResult, path) -> Path:
    """Held-out loss against |D| in log-log with the power-law line."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.loglog(sizes, losses, "o", label="measured")
    grid = np.geomspace(min(sizes), max(sizes), 200)
    ax.loglog(grid, [fit.predict(x) for x in grid], "r-",
              label=f"power law (r2={fit.r_squared:.3f})")
    ax.set_xlabel("training facts |D|")
    ax.set_ylabel("held-out loss")
    ax.grid(alpha=0.3, which="both")
    ax.legend()
    return _finish(fig, path)


def plot_group_bars(rows: dict[str, dict], path, ylabel: str = "memorization rate") -> Path:
    """Per-group mean with seed-spread whiskers."""
    if not rows:
        raise DegenerateInputError("no groups to plot")
    names = list(rows)
    means = [rows[g]["mean"] for g in names]
    spreads = [rows[g]["spread"] / 2 for g in names]
    fig, ax = plt.subplots(figsize=(max(4, 1.1 * len(names)), 3.5))
    ax.bar(range(len(names)), means, yerr=spreads, capsize=4)
    ax.set_xticks(range(len(names)), names, rotation=20, ha="right")
    ax.set_ylabel(ylabel)
    ax.grid(alpha=0.3, axis="y")
    return _finish(fig, path)


def report(records: Sequence[ResultRecord], out_dir, formats: Sequence[str] = ("csv", "svg")) -> list[Path]:
    """Emit per-kind tables and plots for a batch of records."""
    if not records:
        raise DegenerateInputError("no records to report")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    if "csv" in formats:
        path = out_dir / "records.csv"
        write_records_csv(list(records), path)
        written.append(path)
    if "svg" not in formats:
        return written

    kind = records[0].kind
    done = [r for r in records if r.status == "done"]
    plots = out_dir / "plots"
    if kind == "capacity_size":
        from .harness import fit_capacity_records
        points = [CapacityPoint(
            non_embed=int(r.metrics["non_embed"]), epochs=int(r.metrics["epochs"]),
            dataset_size=int(r.metrics["dataset_size"]), mr=float(r.metrics["mr"]),
        ) for r in done]
        fit = fit_capacity_records(done, "linear")
        written.append(plot_capacity_fit(points, fit, plots / "capacity_vs_size.svg"))
    elif kind == "capacity_epochs":
        from .harness import fit_capacity_records
        points = [CapacityPoint(
            non_embed=int(r.metrics["non_embed"]), epochs=int(r.metrics["epochs"]),
            dataset_size=int(r.metrics["dataset_size"]), mr=float(r.metrics["mr"]),
        ) for r in done if "non_embed" in r.metrics]
        if len(points) >= 4:
            fit = fit_capacity_records(done, "negexp")
            written.append(plot_capacity_fit(points, fit, plots / "capacity_vs_epochs.svg",
                                             x_axis="epochs"))
    elif kind == "generalization":
        from .harness import fit_generalization_records
        sizes = [r.metrics["dataset_size"] for r in done]
        losses = [r.metrics["heldout_loss"] for r in done]
        fit = fit_generalization_records(done)
        written.append(plot_loss_powerlaw(sizes, losses, fit, plots / "loss_vs_size.svg"))
    else:
        from .harness import compare_groups
        try:
            table = compare_groups(list(done), kind=kind)
            written.append(plot_group_bars(table.rows, plots / f"{kind}_groups.svg"))
        except Exception:
            pass  # single-group or metricless batches have no bar chart
    return written
