"""Experiment orchestration: dataset wiring, training dispatch, report files."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import data as D
from . import plots
from .baselines import BaselineSpec, baseline_comm_closed_form, train_baseline
from .config import ExperimentConfig, serialize_config
from .metrics import MetricsError, MetricsRow, read_metrics_csv, write_metrics_csv
from .pipeline import (StageCostModel, bubble_fraction, make_schedule,
                       no_pipeline_makespan, simulate_makespan)
from .protocol import csilocal_comm_closed_form, train_csilocal


class RunnerError(Exception):
    pass


@dataclass
class RunArtifacts:
    run_dir: Path
    metrics_path: Path
    metrics: list[MetricsRow]
    ledger_total: int
    closed_form: int
    final_test_nmse: Optional[float]


def load_experiment_data(cfg: ExperimentConfig):
    """Train/test shard arrays per UE, either generated or read from file."""
    dims = cfg.csi_dims()
    n = cfg.fleet.n_ues
    if cfg.data.source == "generate":
        gen = D.generate_dataset(cfg.data.environment, dims, n, cfg.fleet.samples_per_ue,
                                 cfg.data.test_samples_per_ue, cfg.seed)
        train = [s.data for s in gen.train_shards]
        test = [s.data for s in gen.test_shards]
        return train, test
    shards, _ = D.read_dataset(cfg.data.path)
    train = [s.data for s in shards if s.split == "train"]
    test = [s.data for s in shards if s.split == "test"]
    if len(train) != n:
        raise RunnerError(f"{cfg.data.path} holds {len(train)} train shards, config has {n} UEs")
    if test and len(test) != n:
        raise RunnerError(f"{cfg.data.path} holds {len(test)} test shards, config has {n} UEs")
    for s in train + test:
        if s.shape[1:] != dims.sample_shape:
            raise RunnerError(f"file sample shape {s.shape[1:]} != configured {dims.sample_shape}")
    return train, (test or None)


def run_experiment(cfg: ExperimentConfig, out_dir, *, figures: Optional[bool] = None,
                   message_tap: Optional[list] = None) -> RunArtifacts:
    """Train per the config and write metrics.csv, ledger.json, model.npz,
    the normalized config, and (by default) the report figures."""
    run_dir = Path(out_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    figures = cfg.output.figures if figures is None else figures

    train_shards, test_shards = load_experiment_data(cfg)
    fleet = cfg.fleet_config()
    dims = cfg.csi_dims()
    adam = cfg.adam_config()

    if cfg.algorithm == "csilocal":
        result = train_csilocal(fleet, dims, adam, train_shards, test_shards,
                                cfg.pipeline_config(), eval_every=cfg.eval.cadence,
                                message_tap=message_tap)
        ledger = result.ledger
        closed = csilocal_comm_closed_form(fleet)
        model_arrays = {}
        for ue in result.ues:
            for name, t in ue.encoder.params.items():
                model_arrays[f"ue{ue.ue_id}/encoder/{name}"] = t.data
            for name, t in ue.head.params.items():
                model_arrays[f"ue{ue.ue_id}/head/{name}"] = t.data
        for name, t in result.bts.tail.params.items():
            model_arrays[f"tail/{name}"] = t.data
    else:
        spec = BaselineSpec.from_name(cfg.algorithm, cfg.baseline.mu, cfg.baseline.local_steps)
        result = train_baseline(spec, fleet, dims, adam, train_shards, test_shards,
                                eval_every=cfg.eval.cadence)
        ledger = result.ledger
        gm = result.global_model
        closed = baseline_comm_closed_form(spec, gm.encoder.params.count,
                                           gm.tail.params.count, gm.head.params.count,
                                           fleet.n_ues, fleet.iterations)
        model_arrays = {}
        for part in ("encoder", "tail", "head"):
            for name, t in getattr(gm, part).params.items():
                model_arrays[f"global/{part}/{name}"] = t.data
        if spec.personalized:
            for ue_id, rep in enumerate(result.replicas):
                for name, t in rep.encoder.params.items():
                    model_arrays[f"ue{ue_id}/encoder/{name}"] = t.data

    metrics_path = run_dir / "metrics.csv"
    write_metrics_csv(metrics_path, result.metrics)
    (run_dir / "config.toml").write_text(serialize_config(cfg))
    np.savez(run_dir / "model.npz", **model_arrays)
    sample_size = 2 * cfg.model.n_t * cfg.model.n_c
    ledger_summary = {
        "algorithm": cfg.algorithm,
        "iterations": fleet.iterations,
        "uplink_per_ue": ledger.uplink,
        "downlink_per_ue": ledger.downlink,
        "total_exchanged_scalars": ledger.total,
        "closed_form": closed,
        "matches_closed_form": ledger.total == closed,
        # both readings of "compression ratio" are reported; interpretation is
        # left to the reader
        "boundary_width_c1": cfg.boundary.c1,
        "sample_size_over_c1": sample_size / cfg.boundary.c1,
    }
    (run_dir / "ledger.json").write_text(json.dumps(ledger_summary, indent=1))

    evals = [r.test_nmse for r in result.metrics if r.test_nmse is not None]
    if figures:
        plots.save_training_figure(result.metrics, run_dir / "training.png",
                                   title=cfg.algorithm)
    return RunArtifacts(run_dir, metrics_path, result.metrics, ledger.total, closed,
                        evals[-1] if evals else None)


# ---------------------------------------------------------------------------
# run comparison
# ---------------------------------------------------------------------------

def _run_label(csv_path: Path) -> str:
    cfg_path = csv_path.parent / "config.toml"
    if cfg_path.exists():
        for line in cfg_path.read_text().splitlines():
            if line.startswith("algorithm"):
                return f"{line.split('=')[1].strip().strip(chr(34))} ({csv_path.parent.name})"
    return str(csv_path)


def scalars_to_target(rows: Sequence[MetricsRow], target: float) -> Optional[int]:
    """Cumulative exchanged scalars at the first evaluation reaching target."""
    for r in rows:
        if r.test_nmse is not None and r.test_nmse <= target:
            return r.exchanged_scalars
    return None


def compare_runs(csv_paths: Sequence, target: float) -> list[dict]:
    """Per run: communication spent to first reach the target test loss.

    Runs that reach the target sort first, cheapest first.
    """
    if len(csv_paths) < 2:
        raise RunnerError("compare needs at least two metrics files")
    rows_out = []
    for p in csv_paths:
        p = Path(p)
        try:
            rows = read_metrics_csv(p)
        except (OSError, ValueError, MetricsError) as exc:
            raise RunnerError(f"unreadable metrics file {p}: {exc}") from exc
        evals = [r.test_nmse for r in rows if r.test_nmse is not None]
        rows_out.append({
            "run": str(p),
            "label": _run_label(p),
            "scalars_to_target": scalars_to_target(rows, target),
            "final_test_nmse": evals[-1] if evals else None,
            "rows": rows,
        })
    rows_out.sort(key=lambda r: (r["scalars_to_target"] is None,
                                 r["scalars_to_target"] if r["scalars_to_target"] is not None else 0))
    return rows_out


def write_comparison(rows_out: Sequence[dict], target: float, out_dir,
                     figures: bool = True) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    table = out_dir / "comparison.csv"
    with open(table, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label", "target_test_nmse", "scalars_to_target", "final_test_nmse"])
        for r in rows_out:
            w.writerow([r["label"], repr(float(target)),
                        "not reached" if r["scalars_to_target"] is None else r["scalars_to_target"],
                        "" if r["final_test_nmse"] is None else repr(float(r["final_test_nmse"]))])
    if figures:
        plots.save_comparison_figure({r["label"]: r["rows"] for r in rows_out},
                                     out_dir / "comparison.png", target)
    return table


# ---------------------------------------------------------------------------
# pipeline benchmarking
# ---------------------------------------------------------------------------

def pipeline_bench(stage_list: Sequence[int], q_list: Sequence[int],
                   cost: StageCostModel) -> list[dict]:
    """Simulated makespan, serial baseline, speedup and bubble fraction per (P, Q)."""
    rows = []
    for p in stage_list:
        for q in q_list:
            sched = make_schedule(p, q)
            span = simulate_makespan(sched, cost)
            base = no_pipeline_makespan(p, q, cost)
            rows.append({
                "stages": p,
                "micro_batches": q,
                "makespan": span,
                "no_pipeline_makespan": base,
                "speedup": base / span,
                "bubble_fraction": bubble_fraction(p, q),
            })
    return rows


def write_bench(rows: Sequence[dict], out_dir, figures: bool = True,
                trace_schedule=None) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    table = out_dir / "pipeline_bench.csv"
    with open(table, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["stages", "micro_batches", "makespan", "no_pipeline_makespan",
                    "speedup", "bubble_fraction"])
        for r in rows:
            w.writerow([r["stages"], r["micro_batches"], repr(r["makespan"]),
                        repr(r["no_pipeline_makespan"]), repr(r["speedup"]),
                        repr(r["bubble_fraction"])])
    if figures:
        plots.save_bench_figure(rows, out_dir / "speedup.png")
    if trace_schedule is not None:
        trace = out_dir / "schedule_trace.csv"
        with open(trace, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["time", "stage", "micro_batch", "direction"])
            for slot in trace_schedule.slots:
                w.writerow([slot.time, slot.stage, slot.micro_batch, slot.direction])
        if figures:
            plots.save_gantt_figure(trace_schedule, out_dir / "gantt.png")
    return table
