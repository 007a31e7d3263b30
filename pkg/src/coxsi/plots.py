"""Static SVG views of a summary CSV.

Plots only draw numbers that are already in the summary; nothing is
recomputed here.
"""

from __future__ import annotations

import logging
import warnings
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

log = logging.getLogger(__name__)

_SVG_META = {"Date": None, "Creator": None}


def _save(fig, path: Path) -> Path:
    with matplotlib.rc_context({"svg.hashsalt": "coxsi", "svg.fonttype": "none"}):
        fig.savefig(path, format="svg", metadata=_SVG_META)
    plt.close(fig)
    return path


def _label(row) -> str:
    if row["tuning"] == "none":
        return row["method"]
    flavor = "" if row["lasso_flavor"] == "standard" else f"/{row['lasso_flavor']}"
    return f"{row['method']} ({row['tuning']}{flavor})"


def _load(summary_csv) -> pd.DataFrame:
    df = pd.read_csv(summary_csv, dtype={"coef_index": str, "scenario_id": str})
    pooled = df[df["coef_index"] == "pooled"].copy()
    if pooled.empty:
        return pooled
    pooled["n"] = pooled["scenario_id"].str.extract(r"_n(\d+)", expand=False).astype(float)
    pooled["design"] = pooled["scenario_id"].str.replace(r"_n\d+", "", regex=True)
    pooled["label"] = pooled.apply(_label, axis=1)
    return pooled.sort_values(["design", "label", "n"], kind="mergesort")


def coverage_plot(df: pd.DataFrame, path: Path, alpha: float = 0.1) -> Path:
    designs = sorted(df["design"].unique())
    fig, axes = plt.subplots(len(designs), 1, figsize=(7, 3.2 * len(designs)), squeeze=False)
    for ax, design in zip(axes[:, 0], designs):
        sub = df[(df["design"] == design) & df["coverage"].notna()]
        for label, g in sub.groupby("label", sort=True):
            ax.errorbar(g["n"], g["coverage"], yerr=g["coverage_se"], marker="o", capsize=2, label=label)
        ax.axhline(1 - alpha, color="grey", ls="--", lw=1)
        ax.set_ylim(0, 1.02)
        ax.set_xlabel("n")
        ax.set_ylabel("selective coverage")
        ax.set_title(design, fontsize=8)
        ax.legend(fontsize=6, loc="lower right")
    fig.tight_layout()
    return _save(fig, path)


def width_plot(df: pd.DataFrame, path: Path) -> Path:
    sub = df[df["median_width"].notna()]
    labels = sorted(sub["label"].unique())
    fig, ax = plt.subplots(figsize=(7, 0.4 * len(labels) + 1.5))
    for k, label in enumerate(labels):
        g = sub[sub["label"] == label]
        med = g["median_width"].to_numpy()
        lo = med - 0.5 * g["iqr_width"].to_numpy()
        ax.scatter(med, [k] * len(med), s=14)
        ax.hlines([k] * len(med), lo.clip(min=med * 1e-3), med + 0.5 * g["iqr_width"].to_numpy(), lw=1)
    ax.set_yticks(range(len(labels)), labels, fontsize=7)
    ax.set_xscale("log")
    ax.set_xlabel("interval width (median, +/- IQR/2; log scale)")
    fig.tight_layout()
    return _save(fig, path)


def power_plot(df: pd.DataFrame, path: Path, alpha: float = 0.1) -> Path:
    agg = df.groupby("label", sort=True)[["power", "type1"]].mean()
    fig, axes = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
    x = range(len(agg))
    axes[0].bar(x, agg["power"].fillna(0))
    axes[0].set_ylabel("selective power")
    axes[1].bar(x, agg["type1"].fillna(0))
    axes[1].axhline(alpha, color="grey", ls="--", lw=1)
    axes[1].set_ylabel("selective type I error")
    axes[1].set_xticks(list(x), agg.index, rotation=45, ha="right", fontsize=7)
    fig.tight_layout()
    return _save(fig, path)


def emit_plots(summary_csv, out_dir, alpha: float = 0.1) -> list:
    """Write coverage, width and power/type I SVGs; nothing is written for an empty summary."""
    out = Path(out_dir)
    df = _load(summary_csv)
    if df.empty:
        warnings.warn("summary has no pooled rows; no plots written", stacklevel=2)
        return []
    out.mkdir(parents=True, exist_ok=True)
    return [
        coverage_plot(df, out / "coverage.svg", alpha),
        width_plot(df, out / "widths.svg"),
        power_plot(df, out / "power_type1.svg", alpha),
    ]
