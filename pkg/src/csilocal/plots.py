"""Figure rendering for the report outputs (PNG files next to the CSVs)."""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .metrics import MetricsRow
from .pipeline import BACKWARD, PipelineSchedule


def _eval_points(rows: Sequence[MetricsRow]):
    pts = [(r.exchanged_scalars, r.iteration, r.test_nmse) for r in rows if r.test_nmse is not None]
    return pts


def save_training_figure(rows: Sequence[MetricsRow], path, title: str = "") -> Path:
    """Test NMSE vs exchanged scalars plus train NMSE vs iteration."""
    path = Path(path)
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    pts = _eval_points(rows)
    if pts:
        xs, _, ys = zip(*pts)
        ax1.plot(xs, ys, marker="o", ms=3)
    ax1.set_xlabel("exchanged scalars")
    ax1.set_ylabel("test NMSE")
    ax1.set_yscale("log")
    iters = [r.iteration for r in rows if r.train_nmse is not None]
    train = [r.train_nmse for r in rows if r.train_nmse is not None]
    if iters:
        ax2.plot(iters, train, lw=0.8)
    ax2.set_xlabel("iteration")
    ax2.set_ylabel("train NMSE")
    ax2.set_yscale("log")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_comparison_figure(named_rows: dict[str, Sequence[MetricsRow]], path,
                           target: Optional[float] = None) -> Path:
    """Overlay of test-NMSE-vs-communication curves for several runs."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(6.5, 4.5))
    for label, rows in named_rows.items():
        pts = _eval_points(rows)
        if pts:
            xs, _, ys = zip(*pts)
            ax.plot(xs, ys, marker="o", ms=3, label=label)
    if target is not None:
        ax.axhline(target, color="gray", ls="--", lw=0.8, label=f"target {target:g}")
    ax.set_xlabel("exchanged scalars")
    ax.set_ylabel("test NMSE")
    ax.set_yscale("log")
    if any(_eval_points(r) for r in named_rows.values()):
        ax.set_xscale("log")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_bench_figure(bench_rows: Sequence[dict], path) -> Path:
    """Speedup per (stages, micro-batches) combination."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(6, 4))
    labels = [f"P={r['stages']},Q={r['micro_batches']}" for r in bench_rows]
    speedups = [r["speedup"] for r in bench_rows]
    ax.bar(range(len(labels)), speedups, color="#4878cf")
    ax.axhline(1.0, color="gray", lw=0.8)
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=45, ha="right", fontsize=8)
    ax.set_ylabel("speedup vs no pipeline")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_gantt_figure(schedule: PipelineSchedule, path) -> Path:
    """Unit-time Gantt chart of one fill-drain schedule."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(8, 1.2 + 0.5 * schedule.stages))
    cmap = plt.get_cmap("tab10")
    for slot in schedule.slots:
        color = cmap(slot.micro_batch % 10)
        hatch = "//" if slot.direction == BACKWARD else None
        ax.barh(slot.stage, 1.0, left=slot.time - 1, height=0.8, color=color,
                edgecolor="black", hatch=hatch, lw=0.5)
        ax.text(slot.time - 0.5, slot.stage, str(slot.micro_batch), ha="center",
                va="center", fontsize=7)
    ax.set_yticks(range(schedule.stages))
    ax.set_yticklabels([f"stage {p}" for p in range(schedule.stages)])
    ax.invert_yaxis()
    ax.set_xlabel("time slot (hatched = backward)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_delay_profile_figure(samples_by_env: dict[str, np.ndarray], path) -> Path:
    """Mean per-delay-bin energy of the generated angular-delay samples."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(6, 4))
    for env, samples in samples_by_env.items():
        if samples.shape[0] == 0:
            continue
        energy = (samples.astype(np.float64) ** 2).sum(axis=(1, 2))   # (N, n_c)
        profile = energy.mean(axis=0)
        profile /= profile.sum()
        ax.plot(profile, marker=".", label=env)
    ax.set_xlabel("delay bin")
    ax.set_ylabel("mean energy fraction")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
