"""Command-line interface: gen-data, train, compare, pipeline-bench."""

from __future__ import annotations

import sys
from pathlib import Path

import click

from . import data as D
from . import plots, runner
from .config import ConfigError, parse_config
from .pipeline import StageCostModel, make_schedule


def _parse_int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise click.BadParameter(f"expected comma-separated integers, got '{text}'")


def _config_from(config, preset, seed, extra=None):
    overrides = dict(extra or {})
    if seed is not None:
        overrides["seed"] = seed
    try:
        return parse_config(config, preset, overrides)
    except ConfigError as exc:
        raise click.ClickException(str(exc))


@click.group()
def main():
    """Desk-scale split federated training for CSI feedback autoencoders."""


@main.command("gen-data")
@click.option("--config", type=click.Path(), default=None, help="TOML config file.")
@click.option("--preset", default=None, help="Named preset (paper, desk-small, ...).")
@click.option("--seed", type=int, default=None, help="Experiment seed.")
@click.option("--out", "out_path", type=click.Path(), required=True,
              help="Output dataset file (binary; sidecar .meta written next to it).")
@click.option("--figures/--no-figures", default=True, show_default=True)
def gen_data(config, preset, seed, out_path, figures):
    """Generate and write the experiment dataset."""
    cfg = _config_from(config, preset, seed)
    gen = D.generate_dataset(cfg.data.environment, cfg.csi_dims(), cfg.fleet.n_ues,
                             cfg.fleet.samples_per_ue, cfg.data.test_samples_per_ue, cfg.seed)
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    D.write_dataset(out, gen.train_shards + gen.test_shards, gen.normalization)
    total = sum(s.count for s in gen.train_shards + gen.test_shards)
    click.echo(f"wrote {total} samples to {out} (+{out}.meta)")
    if figures:
        by_env = {}
        for env in ("indoor", "outdoor"):
            arrs = [s.data[[i for i, t in enumerate(s.env_tags) if t == env]]
                    for s in gen.train_shards]
            stacked = [a for a in arrs if a.shape[0]]
            if stacked:
                import numpy as np
                by_env[env] = np.concatenate(stacked, axis=0)
        if by_env:
            fig = plots.save_delay_profile_figure(by_env, out.with_suffix(".delay_profile.png"))
            click.echo(f"wrote {fig}")


@main.command("train")
@click.option("--config", type=click.Path(), default=None, help="TOML config file.")
@click.option("--preset", default=None, help="Named preset (paper, desk-small, ...).")
@click.option("--seed", type=int, default=None, help="Experiment seed.")
@click.option("--out", "out_dir", type=click.Path(), default=None,
              help="Run directory (default: <output.directory>/<algorithm>-seed<seed>).")
@click.option("--algorithm", default=None,
              help="csilocal, fedavg, fedavgper, fedprox, fedproxper, fedgrad, fedgradper.")
@click.option("--figures/--no-figures", default=None)
def train(config, preset, seed, out_dir, algorithm, figures):
    """Run one training experiment and write its report."""
    extra = {"algorithm": algorithm} if algorithm else {}
    cfg = _config_from(config, preset, seed, extra)
    if out_dir is None:
        out_dir = Path(cfg.output.directory) / f"{cfg.algorithm}-seed{cfg.seed}"
    art = runner.run_experiment(cfg, out_dir, figures=figures)
    click.echo(f"run directory: {art.run_dir}")
    click.echo(f"exchanged scalars: {art.ledger_total} (closed form {art.closed_form}, "
               f"{'match' if art.ledger_total == art.closed_form else 'MISMATCH'})")
    if art.final_test_nmse is not None:
        click.echo(f"final test NMSE: {art.final_test_nmse:.6g}")
    if art.ledger_total != art.closed_form:
        sys.exit(1)


@main.command("compare")
@click.argument("metrics_files", nargs=-1, required=True, type=click.Path(exists=True))
@click.option("--target", type=float, required=True, help="Target test NMSE.")
@click.option("--out", "out_dir", type=click.Path(), default="comparison",
              help="Directory for comparison.csv and comparison.png.")
@click.option("--figures/--no-figures", default=True, show_default=True)
def compare(metrics_files, target, out_dir, figures):
    """Rank runs by communication spent to reach a target test loss."""
    try:
        rows = runner.compare_runs(list(metrics_files), target)
    except runner.RunnerError as exc:
        raise click.ClickException(str(exc))
    table = runner.write_comparison(rows, target, out_dir, figures)
    for r in rows:
        reach = "not reached" if r["scalars_to_target"] is None else f"{r['scalars_to_target']} scalars"
        click.echo(f"{r['label']}: {reach}")
    click.echo(f"wrote {table}")


@main.command("pipeline-bench")
@click.option("--stages", default="1,2,4", show_default=True, help="Comma-separated stage counts.")
@click.option("--micro-batches", default="1,2,4", show_default=True,
              help="Comma-separated micro-batch counts.")
@click.option("--forward-cost", type=float, default=1.0, show_default=True)
@click.option("--backward-cost", type=float, default=1.0, show_default=True)
@click.option("--transfer-cost", type=float, default=0.0, show_default=True)
@click.option("--out", "out_dir", type=click.Path(), default="bench",
              help="Directory for pipeline_bench.csv and figures.")
@click.option("--trace", is_flag=True, help="Also export the schedule trace and Gantt chart "
                                            "for the largest (stages, micro-batches) pair.")
@click.option("--figures/--no-figures", default=True, show_default=True)
def pipeline_bench(stages, micro_batches, forward_cost, backward_cost, transfer_cost,
                   out_dir, trace, figures):
    """Simulate pipeline makespans and speedups over a (P, Q) grid."""
    p_list = _parse_int_list(stages)
    q_list = _parse_int_list(micro_batches)
    if not p_list or not q_list:
        raise click.ClickException("need at least one stage count and one micro-batch count")
    cost = StageCostModel(forward_cost, backward_cost, transfer_cost)
    rows = runner.pipeline_bench(p_list, q_list, cost)
    sched = make_schedule(max(p_list), max(q_list)) if trace else None
    table = runner.write_bench(rows, out_dir, figures, trace_schedule=sched)
    for r in rows:
        click.echo(f"P={r['stages']} Q={r['micro_batches']}: makespan {r['makespan']:g}, "
                   f"serial {r['no_pipeline_makespan']:g}, speedup {r['speedup']:.3f}, "
                   f"bubble {r['bubble_fraction']:.3f}")
    click.echo(f"wrote {table}")


if __name__ == "__main__":
    main()
