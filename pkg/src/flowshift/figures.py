"""Matplotlib renderers for run reports, config comparisons, and sweeps.

All functions write a file and return its path; nothing is shown
interactively.  The Agg backend is forced so rendering works headless.
"""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .engine import RunReport

_DPI = 120


def render_run_figure(report: RunReport, path: str) -> str:
    """Two stacked panels: packet rates on top, selection and drops below."""
    secs = report.seconds
    t = [s.t for s in secs]
    offered = [s.offered for s in secs]
    processed = [s.processed for s in secs]
    dropped = [s.dropped for s in secs]
    accuracy = [s.accuracy for s in secs]

    fig, (ax_rate, ax_sel) = plt.subplots(
        2, 1, figsize=(10, 6), sharex=True,
        gridspec_kw={"height_ratios": [2, 1]},
    )
    ax_rate.plot(t, offered, label="offered", color="tab:blue", linewidth=1.0)
    ax_rate.plot(t, processed, label="processed", color="tab:green",
                 linewidth=1.0, alpha=0.8)
    ax_rate.plot(t, dropped, label="dropped", color="tab:red", linewidth=1.0)
    ax_rate.set_ylabel("packets / s")
    ax_rate.legend(loc="upper right", fontsize=8)
    ax_rate.set_title(f"mode={report.config['mode']}  "
                      f"loss={report.loss_pct:.2f}%")

    ax_sel.step(t, accuracy, where="post", color="tab:purple", linewidth=1.2)
    ax_sel.set_ylabel("selected accuracy")
    ax_sel.set_xlabel("time (s)")
    for sw in report.switches:
        ax_sel.axvline(sw.time_s, color="0.85", linewidth=0.5, zorder=0)

    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
    return path


def render_tradeoff_figure(rows: list[dict], path: str) -> str:
    """Loss vs accuracy scatter, one point per config, IQR whiskers on accuracy."""
    fig, ax = plt.subplots(figsize=(8, 5))
    for row in rows:
        med = row["acc_median"]
        lo = med - row["acc_q1"]
        hi = row["acc_q3"] - med
        adaptive = row["config_label"] == "adaptive"
        ax.errorbar(
            row["loss_pct"], med,
            yerr=[[max(lo, 0.0)], [max(hi, 0.0)]],
            fmt="o" if adaptive else "s",
            color="tab:red" if adaptive else "tab:blue",
            markersize=7 if adaptive else 5,
            capsize=3,
        )
        ax.annotate(row["config_label"], (row["loss_pct"], med),
                    textcoords="offset points", xytext=(6, 4), fontsize=8)
    ax.set_xlabel("packet loss (%)")
    ax.set_ylabel("median selected accuracy")
    ax.set_title("loss vs accuracy by configuration")
    ax.grid(True, linewidth=0.3, alpha=0.5)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
    return path


def render_sweep_figure(rows: list[dict], path: str,
                        x_key: str = "mon_window",
                        y_key: str = "loss_pct") -> str:
    """Line plot of one summary column against the swept parameter."""
    xs = [row[x_key] for row in rows]
    ys = [row[y_key] for row in rows]
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.plot(xs, ys, marker="o", color="tab:blue")
    ax.set_xlabel(x_key)
    ax.set_ylabel(y_key)
    ax.set_title(f"{y_key} vs {x_key}")
    ax.grid(True, linewidth=0.3, alpha=0.5)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
    return path
