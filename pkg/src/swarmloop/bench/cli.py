"""Command line interface.

Exit codes: 0 success, 2 configuration error, 3 solver failure.
All run parameters can come from a YAML config file; explicit flags win
over config-file values.
"""

from __future__ import annotations

import sys
from pathlib import Path

import click

from ..optimize import GaugeError
from .ate import compute_ate
from .io import load_graph, load_trajectory, save_graph
from .plots import plot_metric_bars, plot_sparsification, plot_trajectories
from .runner import (
    ConfigError,
    ExperimentConfig,
    formulation_sweep,
    metrics_csv,
    run_experiment,
    scale_init_sweep,
    sparsification_sweep,
)

EXIT_CONFIG = 2
EXIT_SOLVER = 3


def _load_config(config_path, overrides) -> ExperimentConfig:
    try:
        cfg = ExperimentConfig.from_yaml(config_path) if config_path else ExperimentConfig()
        clean = {k: v for k, v in overrides.items() if v is not None}
        if clean:
            cfg = cfg.replace(**clean)
            cfg.validate()
        return cfg
    except (ConfigError, OSError, ValueError) as e:
        click.echo(f"config error: {e}", err=True)
        sys.exit(EXIT_CONFIG)


def _echo_rows(rows):
    click.echo(metrics_csv(rows), nl=False)


common_options = [
    click.option("--config", "config_path", type=click.Path(exists=True),
                 help="YAML experiment config."),
    click.option("--seed", type=int, default=None),
    click.option("--formulation", type=str, default=None),
    click.option("--solver", type=click.Choice(["lm", "gnc"]), default=None),
    click.option("--scale-init", "scale_init", type=str, default=None),
    click.option("--outlier-rate", "outlier_rate", type=float, default=None),
    click.option("--n-keyframes", "n_keyframes", type=int, default=None),
    click.option("--include-timing", "include_timing", is_flag=True, default=None,
                 help="Record real solver wall time (breaks byte determinism)."),
]


def add_options(opts):
    def wrap(fn):
        for opt in reversed(opts):
            fn = opt(fn)
        return fn
    return wrap


@click.group()
def main():
    """Multi-robot loop closing and scale-aware pose graph benchmarks."""


@main.command()
@add_options(common_options)
@click.option("-o", "--outdir", type=click.Path(), default="out/run")
@click.option("--plot/--no-plot", default=True, show_default=True)
def run(config_path, outdir, plot, **overrides):
    """Run one experiment end to end and write its artifacts."""
    cfg = _load_config(config_path, overrides)
    try:
        row = run_experiment(cfg, outdir)
    except GaugeError as e:
        click.echo(f"solver failure: {e}", err=True)
        sys.exit(EXIT_SOLVER)
    if plot:
        sim = row["_sim"]
        est = {r: [(float(i), p) for i, p in enumerate(t)]
               for r, t in sim.trajectory_estimates().items()}
        truth = {r: [(float(i), p) for i, p in enumerate(sim.world.true_poses[r])]
                 for r in sorted(sim.world.true_poses)}
        plot_trajectories(est, truth, Path(outdir) / "trajectories.png")
    _echo_rows([row])


@main.command()
@add_options(common_options)
@click.option("--axis", type=click.Choice(["formulation", "scale-init", "spacing"]),
              default="formulation", show_default=True)
@click.option("--strides", type=str, default="1,2,4",
              help="Comma-separated keyframe strides for the spacing axis.")
@click.option("-o", "--outdir", type=click.Path(), default="out/sweep")
@click.option("--plot/--no-plot", default=True, show_default=True)
def sweep(config_path, axis, strides, outdir, plot, **overrides):
    """Sweep one ablation axis; writes a combined metrics CSV and a figure."""
    cfg = _load_config(config_path, overrides)
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    try:
        if axis == "formulation":
            rows = formulation_sweep(cfg, outdir=outdir)
            fig_key = "formulation"
        elif axis == "scale-init":
            rows = scale_init_sweep(cfg, outdir=outdir)
            fig_key = "scale_init"
        else:
            stride_list = [int(s) for s in strides.split(",")]
            rows = sparsification_sweep(cfg, stride_list, outdir=outdir)
            fig_key = None
    except ConfigError as e:
        click.echo(f"config error: {e}", err=True)
        sys.exit(EXIT_CONFIG)
    except GaugeError as e:
        click.echo(f"solver failure: {e}", err=True)
        sys.exit(EXIT_SOLVER)
    csv_text = metrics_csv(rows)
    (outdir / "metrics.csv").write_text(csv_text)
    if plot:
        if fig_key is not None:
            plot_metric_bars(rows, fig_key, outdir / "sweep.png")
        else:
            plot_sparsification(rows, outdir / "sweep.png")
    click.echo(csv_text, nl=False)


@main.command()
@click.argument("estimates", nargs=-1, required=True, type=click.Path(exists=True))
@click.option("--truth", "truths", multiple=True, required=True,
              type=click.Path(exists=True))
@click.option("--align", type=click.Choice(["none", "se3"]), default="se3",
              show_default=True)
@click.option("--max-gap", type=float, default=0.05, show_default=True)
def ate(estimates, truths, align, max_gap):
    """Translation RMSE of estimated vs ground-truth TUM trajectories.

    Files pair up positionally; each position is one robot."""
    if len(estimates) != len(truths):
        click.echo("config error: need one --truth per estimate file", err=True)
        sys.exit(EXIT_CONFIG)
    est = {i: load_trajectory(p) for i, p in enumerate(estimates)}
    tru = {i: load_trajectory(p) for i, p in enumerate(truths)}
    try:
        rmse, errors = compute_ate(est, tru, align=align, max_gap=max_gap)
    except ValueError as e:
        click.echo(f"config error: {e}", err=True)
        sys.exit(EXIT_CONFIG)
    click.echo(f"ate_rmse_m,{rmse:.9f}")
    click.echo(f"matched_poses,{len(errors)}")
    click.echo(f"max_error_m,{errors.max():.9f}")


@main.group()
def graph():
    """Inspect or canonicalize graph files."""


@graph.command()
@click.argument("path", type=click.Path(exists=True))
def inspect(path):
    """Print a summary of a graph file."""
    try:
        g = load_graph(path)
    except ValueError as e:
        click.echo(f"config error: {e}", err=True)
        sys.exit(EXIT_CONFIG)
    n_pose = sum(1 for k in g.variables if k.kind == "pose")
    n_scale = sum(1 for k in g.variables if k.kind == "scale")
    by_type = {}
    for f in g.factors:
        by_type[type(f).__name__] = by_type.get(type(f).__name__, 0) + 1
    click.echo(f"pose variables: {n_pose}")
    click.echo(f"scale variables: {n_scale}")
    for name in sorted(by_type):
        click.echo(f"{name}: {by_type[name]}")
    click.echo(f"total cost at stored estimates: {g.total_cost():.6g}")


@graph.command()
@click.argument("src", type=click.Path(exists=True))
@click.argument("dst", type=click.Path())
def convert(src, dst):
    """Re-serialize a graph file in canonical form."""
    try:
        save_graph(load_graph(src), dst)
    except ValueError as e:
        click.echo(f"config error: {e}", err=True)
        sys.exit(EXIT_CONFIG)
    click.echo(f"wrote {dst}")


@main.command(name="oracle-replay")
@add_options(common_options)
@click.option("--registrations", type=click.Path(exists=True), required=True,
              help="CSV table of precomputed registrations.")
@click.option("-o", "--outdir", type=click.Path(), default="out/replay")
@click.option("--plot/--no-plot", default=True, show_default=True)
def oracle_replay(config_path, registrations, outdir, plot, **overrides):
    """Run the pipeline with registrations replayed from a file."""
    cfg = _load_config(config_path, overrides).replace(oracle_file=registrations)
    try:
        row = run_experiment(cfg, outdir)
    except GaugeError as e:
        click.echo(f"solver failure: {e}", err=True)
        sys.exit(EXIT_SOLVER)
    if plot:
        sim = row["_sim"]
        est = {r: [(float(i), p) for i, p in enumerate(t)]
               for r, t in sim.trajectory_estimates().items()}
        truth = {r: [(float(i), p) for i, p in enumerate(sim.world.true_poses[r])]
                 for r in sorted(sim.world.true_poses)}
        plot_trajectories(est, truth, Path(outdir) / "trajectories.png")
    _echo_rows([row])


if __name__ == "__main__":
    main()
