"""SVG plots for evaluation reports and sweep diagnostics.

Works from the CSV files a report directory contains rather than from
in-memory objects, so plotting can run long after the evaluation, on any
machine. Known files: roc.csv, histogram_z.csv, histogram_zbar.csv,
sweep.csv; whichever exist get a matching .svg next to them.
"""

from __future__ import annotations

import csv
import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

import numpy as np  # noqa: E402

from .errors import ConfigError

log = logging.getLogger(__name__)


def _read_csv(path: Path) -> dict[str, list[str]]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        columns: dict[str, list[str]] = {name: [] for name in reader.fieldnames or []}
        for row in reader:
            for name, value in row.items():
                columns[name].append(value)
    return columns


def _floats(columns: dict[str, list[str]], name: str) -> np.ndarray:
    return np.array([float(v) for v in columns[name]])


def plot_roc(csv_path: Path, out_path: Path) -> None:
    cols = _read_csv(csv_path)
    far = _floats(cols, "far")
    gar = _floats(cols, "gar")
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(far, gar, marker=".", lw=1)
    ax.set_xscale("symlog", linthresh=1e-3)
    ax.set_xlabel("false acceptance rate")
    ax.set_ylabel("genuine acceptance rate")
    ax.set_title("ROC")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, format="svg")
    plt.close(fig)


def plot_histogram(csv_path: Path, out_path: Path, title: str) -> None:
    cols = _read_csv(csv_path)
    lo = _floats(cols, "bin_lo")
    hi = _floats(cols, "bin_hi")
    centers = 0.5 * (lo + hi)
    width = (hi - lo).mean()
    m = _floats(cols, "matching")
    n = _floats(cols, "non_matching")
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(centers, m, width=width, alpha=0.6, label="matching")
    ax.bar(centers, n, width=width, alpha=0.6, label="non-matching")
    ax.set_xlabel("metric value")
    ax.set_ylabel("pairs")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, format="svg")
    plt.close(fig)


def plot_sweep(csv_path: Path, out_path: Path) -> None:
    cols = _read_csv(csv_path)
    w = _floats(cols, "w")
    ok = np.array([s.startswith(("ok", "partial")) for s in cols["status"]])
    acc = _floats(cols, "accuracy")
    fig, axes = plt.subplots(3, 1, figsize=(6, 8), sharex=True)
    axes[0].plot(w[ok], acc[ok], marker="o")
    axes[0].set_ylabel("accuracy")
    for ax, stat, label in (
        (axes[1], "skewness", "skewness"),
        (axes[2], "kurtosis", "kurtosis"),
    ):
        for cls in ("matching", "non_matching"):
            vals = _floats(cols, f"{stat}_{cls}")
            ax.plot(w[ok], vals[ok], marker="o", label=cls.replace("_", "-"))
        ax.set_ylabel(label)
        ax.legend()
    axes[2].axhline(3.0, color="gray", ls=":", lw=1)  # Gaussian reference
    axes[1].axhline(0.0, color="gray", ls=":", lw=1)
    axes[2].set_xlabel("non-matching target mean w")
    failed = np.flatnonzero(~ok)
    if failed.size:
        for i in failed:
            axes[0].axvline(w[i], color="red", ls="--", alpha=0.4)
    fig.tight_layout()
    fig.savefig(out_path, format="svg")
    plt.close(fig)


_KNOWN = {
    "roc.csv": ("roc.svg", plot_roc),
    "histogram_z.csv": ("histogram_z.svg", None),
    "histogram_zbar.csv": ("histogram_zbar.svg", None),
    "sweep.csv": ("sweep.svg", plot_sweep),
}


def plot_report_dir(report_dir, out_dir=None) -> list[Path]:
    """Render every recognized CSV in ``report_dir`` to SVG."""
    report = Path(report_dir)
    out = Path(out_dir) if out_dir is not None else report
    out.mkdir(parents=True, exist_ok=True)
    produced = []
    for name, (svg_name, fn) in _KNOWN.items():
        src = report / name
        if not src.exists():
            continue
        dst = out / svg_name
        if fn is not None:
            fn(src, dst)
        else:
            title = "aggregated metric" if "zbar" in name else "single-orientation metric"
            plot_histogram(src, dst, title)
        log.info("wrote %s", dst)
        produced.append(dst)
    if not produced:
        raise ConfigError(
            f"no plottable CSVs found in {report} "
            f"(looked for {', '.join(sorted(_KNOWN))})"
        )
    return produced
