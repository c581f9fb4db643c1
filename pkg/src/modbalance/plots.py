"""Plot and table emission from run logs and evaluation reports.

Pure transformations of the logged data: identical inputs yield identical
output bytes, so re-running is idempotent.
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Dict, List, Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


class PlotError(RuntimeError):
    pass


def read_runlog(path) -> Dict[str, List[str]]:
    """Column name -> list of raw string values."""
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header:
            raise PlotError(f"empty run log {path}")
        columns: Dict[str, List[str]] = {name: [] for name in header}
        for row in reader:
            for name, value in zip(header, row):
                columns[name].append(value)
    return columns


def _require(columns: Dict[str, List[str]], names: List[str], path) -> None:
    missing = [n for n in names if n not in columns]
    if missing:
        raise PlotError(f"run log {path} lacks columns: {missing}")


def _floats(values: List[str]) -> List[float]:
    return [float(v) if v else float("nan") for v in values]


def _modality_count(columns: Dict[str, List[str]]) -> int:
    m = 0
    while f"w_m{m}" in columns:
        m += 1
    return m


def _save(fig, path: Path) -> None:
    fig.savefig(path, dpi=120, metadata={"Software": ""})
    plt.close(fig)


def plot_runlog(runlog_path, out_dir) -> List[str]:
    """Loss curves and per-modality controller trajectories from runlog.csv."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    columns = read_runlog(runlog_path)
    _require(columns, ["step", "loss_total", "loss_fuse", "loss_sep", "loss_rel", "loss_proto"],
             runlog_path)
    n_mod = _modality_count(columns)
    steps = _floats(columns["step"])
    written = []

    fig, ax = plt.subplots(figsize=(7, 4))
    for name in ("loss_total", "loss_fuse", "loss_sep", "loss_rel", "loss_proto"):
        ax.plot(steps, _floats(columns[name]), label=name.replace("loss_", ""))
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend()
    ax.set_title("objective components")
    path = out / "loss_curves.png"
    _save(fig, path)
    written.append(str(path))

    if n_mod:
        fig, axes = plt.subplots(3, 1, figsize=(7, 8), sharex=True)
        for m in range(n_mod):
            _require(columns, [f"w_m{m}", f"gamma_m{m}", f"gap_total_m{m}"], runlog_path)
            axes[0].plot(steps, _floats(columns[f"w_m{m}"]), label=f"m{m}")
            axes[1].plot(steps, _floats(columns[f"gamma_m{m}"]), label=f"m{m}")
            axes[2].plot(steps, _floats(columns[f"gap_total_m{m}"]), label=f"m{m}")
        axes[0].set_ylabel("loss weight")
        axes[1].set_ylabel("gradient scale")
        axes[2].set_ylabel("total gap")
        axes[2].set_xlabel("step")
        for ax in axes:
            ax.legend(loc="upper right")
        axes[0].set_title("controller trajectories")
        path = out / "rebalance_trajectories.png"
        _save(fig, path)
        written.append(str(path))

    # Flat CSV of the trajectories for downstream tooling.
    traj_path = out / "trajectories.csv"
    names = ["step", "loss_total", "loss_fuse", "loss_sep", "loss_rel", "loss_proto"]
    for m in range(n_mod):
        names += [f"w_m{m}", f"gamma_m{m}", f"gap_total_m{m}"]
    with traj_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(names)
        for i in range(len(steps)):
            writer.writerow([columns[n][i] for n in names])
    written.append(str(traj_path))
    return written


def plot_report(report_dir, out_dir) -> List[str]:
    """Bar chart plus a sorted echo of the combination table."""
    combo_path = Path(report_dir) / "combinations.csv"
    if not combo_path.exists():
        raise PlotError(f"no combinations.csv under {report_dir}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with combo_path.open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or "dsc_macro" not in rows[0]:
        raise PlotError(f"{combo_path} lacks a dsc_macro column")
    labels = [r["combination"] for r in rows]
    dscs = [float(r["dsc_macro"]) for r in rows]

    fig, ax = plt.subplots(figsize=(max(6, 0.6 * len(labels)), 4))
    ax.bar(range(len(labels)), dscs)
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=45, ha="right")
    ax.set_ylabel("macro DSC")
    ax.set_title("modality combinations")
    fig.tight_layout()
    png = out / "combination_dsc.png"
    _save(fig, png)

    echo = out / "combination_table.csv"
    with echo.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        for r in sorted(rows, key=lambda r: (len(r["combination"].split("+")), r["combination"])):
            writer.writerow(r)
    return [str(png), str(echo)]
