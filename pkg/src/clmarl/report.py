"""Figure rendering for run, replay, and sweep outputs.

Every delimited output the tooling writes has a figure twin: training runs
get a four-panel learning-dynamics board, scheduler replays a decision
trace, sweeps a grouped bar summary. All figures render headlessly to PNG.
"""

from __future__ import annotations

import csv
import math
from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _read_csv(path: str) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _floats(rows, key):
    out = []
    for row in rows:
        value = row.get(key, "")
        out.append(float(value) if value not in ("", None) else math.nan)
    return out


def metrics_figure(metrics_csv: str, out_png: str) -> None:
    """Four panels: win rates, difficulty trace, momentum vs band, losses."""
    rows = _read_csv(metrics_csv)
    if not rows:
        return
    steps = _floats(rows, "env_step")
    fig, axes = plt.subplots(2, 2, figsize=(11, 7), sharex=True)

    ax = axes[0, 0]
    ax.plot(steps, _floats(rows, "eval_win_rate"), label="target difficulty", lw=1.6)
    ax.plot(steps, _floats(rows, "active_win_rate"), label="active difficulty",
            lw=1.0, alpha=0.7)
    ax.set_ylabel("eval win rate")
    ax.set_ylim(-0.02, 1.02)
    ax.legend(fontsize=8)

    ax = axes[0, 1]
    ax.step(steps, _floats(rows, "train_difficulty"), where="post", color="tab:red")
    ax.set_ylabel("training difficulty")
    ax.set_ylim(0.5, 10.5)

    ax = axes[1, 0]
    ax.plot(steps, _floats(rows, "momentum"), label="momentum", color="tab:purple")
    ax.plot(steps, _floats(rows, "mu_w"), label="window mean win", alpha=0.6)
    ax.plot(steps, _floats(rows, "tau_h"), "--", label="promote threshold", alpha=0.6)
    ax.plot(steps, _floats(rows, "tau_l"), "--", label="demote threshold", alpha=0.6)
    ax.set_ylabel("scheduler signals")
    ax.set_xlabel("environment steps")
    ax.legend(fontsize=7)

    ax = axes[1, 1]
    ax.plot(steps, _floats(rows, "td_loss"), label="td")
    ax.plot(steps, _floats(rows, "kl_loss"), label="kl")
    ax.plot(steps, _floats(rows, "policy_loss"), label="policy")
    ax.set_yscale("symlog", linthresh=1e-3)
    ax.set_ylabel("loss components")
    ax.set_xlabel("environment steps")
    ax.legend(fontsize=8)

    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)


def trace_figure(trace_csv: str, out_png: str) -> None:
    """Scheduler replay: inputs, momentum against its gates, difficulty."""
    rows = _read_csv(trace_csv)
    if not rows:
        return
    cycles = _floats(rows, "cycle")
    fig, axes = plt.subplots(3, 1, figsize=(9, 7), sharex=True)

    axes[0].plot(cycles, _floats(rows, "win_rate"), label="win rate", lw=1.0)
    axes[0].plot(cycles, _floats(rows, "mu_w"), label="window mean", lw=1.6)
    axes[0].plot(cycles, _floats(rows, "tau_h"), "--", label="promote", alpha=0.7)
    axes[0].plot(cycles, _floats(rows, "tau_l"), "--", label="demote", alpha=0.7)
    axes[0].set_ylabel("win-rate channel")
    axes[0].legend(fontsize=8)

    axes[1].plot(cycles, _floats(rows, "momentum"), color="tab:purple")
    axes[1].axhline(0.0, color="gray", lw=0.5)
    axes[1].set_ylabel("momentum")

    axes[2].step(cycles, _floats(rows, "difficulty"), where="post", color="tab:red")
    axes[2].set_ylabel("difficulty")
    axes[2].set_xlabel("evaluation cycle")

    for row, cycle in zip(rows, cycles):
        if row.get("branch") == "promote":
            axes[2].axvline(cycle, color="tab:green", alpha=0.25, lw=0.8)
        elif row.get("branch") == "demote":
            axes[2].axvline(cycle, color="tab:orange", alpha=0.25, lw=0.8)

    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)


def sweep_figure(summary_csv: str, out_png: str) -> None:
    """Mean and spread of the top-k normalized win rate per grid point."""
    rows = _read_csv(summary_csv)
    groups: dict[str, list[float]] = defaultdict(list)
    for row in rows:
        if row.get("status") == "ok" and row.get("top_k_win_rate"):
            groups[row["grid_point"]].append(float(row["top_k_win_rate"]))
    if not groups:
        return
    labels = sorted(groups)
    means = [sum(groups[k]) / len(groups[k]) for k in labels]
    spreads = [(max(groups[k]) - min(groups[k])) / 2 for k in labels]
    fig, ax = plt.subplots(figsize=(max(6, 1.1 * len(labels)), 4.5))
    ax.bar(range(len(labels)), means, yerr=spreads, capsize=4,
           color="tab:blue", alpha=0.85)
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=7)
    ax.set_ylabel("top-k normalized win rate")
    ax.set_ylim(0, 1)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
