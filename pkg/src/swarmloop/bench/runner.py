"""Experiment runner: end-to-end swarm simulation, metrics, artifacts.

One run writes, into its output directory: per-robot estimated and
ground-truth trajectories (TUM text), the final merged factor graph
(extended g2o text), the bandwidth ledger CSV and a metrics CSV with the
stable schema (formulation, solver, scale_init, seed, ate_m, n_loops,
solve_ms, bytes_total).

Runs are deterministic per seed.  Wall-clock solver timing is inherently
non-reproducible, so the solve_ms column is written as 0 unless
include_timing is set; measured times are always available on the report.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import yaml

from .. import se3
from ..frontend import (
    ConfidenceParams,
    FileRegistrationOracle,
    OracleNoise,
    cluster_loops,
    confidence,
)
from ..graph import Formulation, build_graph, scale_key
from ..optimize import SolverConfig, solve_gnc, solve_lm
from ..swarm import SwarmConfig, SwarmSimulation
from ..types import Keyframe, LoopClosure
from ..world import SyntheticWorld, WorldConfig
from .ate import compute_ate
from .io import save_graph, save_trajectory

METRICS_FIELDS = [
    "formulation", "solver", "scale_init", "seed",
    "ate_m", "n_loops", "solve_ms", "bytes_total",
]


class ConfigError(Exception):
    pass


@dataclass
class ExperimentConfig:
    seed: int = 0
    formulation: str = "independent_scales"
    solver: str = "lm"                      # lm | gnc
    scale_init: str = "odometry_ratio"      # odometry_ratio | raw_oracle | ground_truth

    n_robots: int = 3
    n_keyframes: int = 110
    keyframe_spacing: float = 1.0
    keyframe_stride: int = 1
    odom_sigma_rot: float = 0.0
    odom_sigma_trans: float = 0.0
    oracle_sigma_rot: float = 0.0
    oracle_sigma_trans: float = 0.0
    outlier_rate: float = 0.0
    scale_range: Tuple[float, float] = (0.2, 5.0)
    fixed_scale: Optional[float] = None

    k: float = 2.0
    ratio_threshold: float = 0.3
    similarity_threshold: float = 0.1

    comm_range: float = 12.0
    max_iterations: int = 100
    include_timing: bool = False
    oracle_file: Optional[str] = None
    corrupt_one_per_cluster: bool = False

    @classmethod
    def from_yaml(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
        return cls.from_dict(data)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**data)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.solver not in ("lm", "gnc"):
            raise ConfigError(f"unknown solver {self.solver!r}")
        try:
            Formulation(self.formulation)
        except ValueError:
            raise ConfigError(f"unknown formulation {self.formulation!r}") from None
        if self.scale_init not in ("odometry_ratio", "raw_oracle", "ground_truth"):
            raise ConfigError(f"unknown scale init {self.scale_init!r}")
        if self.keyframe_stride < 1:
            raise ConfigError("keyframe_stride must be >= 1")

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def world_config(self) -> WorldConfig:
        if isinstance(self.scale_range, list):
            self.scale_range = tuple(self.scale_range)
        return WorldConfig(
            n_robots=self.n_robots,
            n_keyframes=self.n_keyframes,
            keyframe_spacing=self.keyframe_spacing,
            keyframe_stride=self.keyframe_stride,
            odom_sigma_rot=self.odom_sigma_rot,
            odom_sigma_trans=self.odom_sigma_trans,
            scale_range=tuple(self.scale_range),
            fixed_scale=self.fixed_scale,
            oracle_noise=OracleNoise(
                sigma_rot=self.oracle_sigma_rot,
                sigma_trans=self.oracle_sigma_trans,
                outlier_rate=self.outlier_rate,
            ),
            seed=self.seed,
        )

    def swarm_config(self, merge_enabled: bool = True) -> SwarmConfig:
        return SwarmConfig(
            frontend=ConfidenceParams(
                k=self.k,
                ratio_threshold=self.ratio_threshold,
                similarity_threshold=self.similarity_threshold,
            ),
            solver=SolverConfig(max_iterations=self.max_iterations),
            formulation=Formulation(self.formulation),
            scale_init_mode=self.scale_init,
            use_gnc=self.solver == "gnc",
            comm_range=self.comm_range,
            merge_enabled=merge_enabled,
        )


def _fmtg(x: float) -> str:
    return format(float(x), ".17g")


def metrics_csv(rows: Sequence[dict]) -> str:
    lines = [",".join(METRICS_FIELDS)]
    for row in rows:
        lines.append(",".join([
            row["formulation"], row["solver"], row["scale_init"], str(row["seed"]),
            _fmtg(row["ate_m"]), str(row["n_loops"]),
            _fmtg(row["solve_ms"]), str(row["bytes_total"]),
        ]))
    return "\n".join(lines) + "\n"


def _truth_trajectories(world) -> Dict[int, list]:
    return {
        r: [(float(i), p) for i, p in enumerate(world.true_poses[r])]
        for r in sorted(world.true_poses)
    }


def _stamped(trajs: Dict[int, list]) -> Dict[int, list]:
    return {r: [(float(i), p) for i, p in enumerate(poses)] for r, poses in trajs.items()}


def make_simulation(cfg: ExperimentConfig, merge_enabled: bool = True) -> SwarmSimulation:
    world = SyntheticWorld(cfg.world_config())
    oracle = FileRegistrationOracle(cfg.oracle_file) if cfg.oracle_file else None
    return SwarmSimulation(world, cfg.swarm_config(merge_enabled), oracle=oracle)


def run_experiment(cfg: ExperimentConfig, outdir=None) -> dict:
    """Execute one configuration end to end; returns the metrics row."""
    cfg.validate()
    sim = make_simulation(cfg)
    sim.run()
    world = sim.world

    estimates = _stamped(sim.trajectory_estimates())
    truth = _truth_trajectories(world)
    ate, _ = compute_ate(estimates, truth, align="se3")

    solve_ms = 0.0
    if cfg.include_timing:
        solve_ms = sim.solver_time_total * 1e3
    row = {
        "formulation": cfg.formulation,
        "solver": cfg.solver,
        "scale_init": cfg.scale_init,
        "seed": cfg.seed,
        "ate_m": ate,
        "n_loops": len(sim.loops),
        "solve_ms": solve_ms,
        "bytes_total": sim.ledger.total_bytes(),
    }

    if outdir is not None:
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        for r in sorted(estimates):
            save_trajectory(estimates[r], outdir / f"est_robot{r}.tum")
            save_trajectory(truth[r], outdir / f"truth_robot{r}.tum")
        graph = final_graph(sim)
        save_graph(graph, outdir / "graph.g2o")
        with open(outdir / "ledger.csv", "w") as fh:
            fh.write("sender,recipient,type,count,bytes\n")
            for rec in sim.ledger.rows():
                fh.write(",".join(str(v) for v in rec) + "\n")
        with open(outdir / "metrics.csv", "w") as fh:
            fh.write(metrics_csv([row]))
    row["_sim"] = sim
    return row


def final_graph(sim: SwarmSimulation):
    """Global audit graph over full trajectories and all accepted loops."""
    world = sim.world
    keyframes = {r: world.keyframes(r) for r in sorted(world.true_poses)}
    odometry = {r: list(world.odom_measurements[r]) for r in sorted(world.true_poses)}
    loops = [l.copy() for l in sim.loops]
    cluster_loops(loops)
    return build_graph(keyframes, odometry, loops, Formulation(sim.cfg.formulation))


# ---------------------------------------------------------------------------
# offline solve (shared-world ablations: corruption, formulation comparisons)


def collect_loops(cfg: ExperimentConfig) -> SwarmSimulation:
    """Run the swarm front-end without any merging; loops only."""
    sim = make_simulation(cfg, merge_enabled=False)
    sim.run()
    return sim


def corrupt_cluster_representatives(loops: List[LoopClosure], cfg: ExperimentConfig,
                                    seed: int) -> List[LoopClosure]:
    """Model one poor registration per cluster: halve its correspondence
    count (dropping its confidence) and perturb its translation magnitude.
    The loop stays in the graph; only its weight signals the damage."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, 0xC0)))
    loops = sorted(loops, key=lambda l: (l.from_robot, l.from_index,
                                         l.to_robot, l.to_index))
    cluster_loops(loops)
    seen = set()
    out = []
    for loop in loops:
        if loop.cluster_id not in seen:
            seen.add(loop.cluster_id)
            count = max(1, loop.loop_correspondences // 2)
            ratio = count / loop.odom_correspondences
            mag = float(np.exp(rng.normal(0.0, 0.25)))
            out.append(loop.copy(
                loop_correspondences=count,
                ratio=ratio,
                confidence=float(confidence(ratio, cfg.k)),
                direction=loop.direction * mag,
            ))
        else:
            out.append(loop.copy())
    return out


def solve_offline(cfg: ExperimentConfig, sim: SwarmSimulation,
                  loops: Optional[List[LoopClosure]] = None,
                  formulation: Optional[str] = None) -> dict:
    """Centralized solve over full trajectories; returns estimates, report,
    ATE and (for scaled formulations) the per-loop scale errors."""
    world = sim.world
    form = Formulation(formulation or cfg.formulation)
    keyframes = {r: world.keyframes(r) for r in sorted(world.true_poses)}
    odometry = {r: list(world.odom_measurements[r]) for r in sorted(world.true_poses)}
    loops = [l.copy() for l in (loops if loops is not None else sim.loops)]
    cluster_loops(loops)
    graph = build_graph(keyframes, odometry, loops, form)
    solver = solve_gnc if cfg.solver == "gnc" else solve_lm
    est, report = solver(graph, SolverConfig(max_iterations=cfg.max_iterations))

    trajs = {}
    for r in sorted(world.true_poses):
        trajs[r] = [
            (float(i), est[k]) for i, k in enumerate(sorted(
                (k for k in est if k.kind == "pose" and k.robot == r),
                key=lambda k: k.index))
        ]
    ate, _ = compute_ate(trajs, _truth_trajectories(world), align="se3")

    scale_errors = []
    if form in (Formulation.INDEPENDENT_SCALES, Formulation.SMOOTHED_SCALES):
        ordered = sorted(loops, key=lambda l: (l.from_robot, l.from_index,
                                               l.to_robot, l.to_index))
        for ordinal, loop in enumerate(ordered):
            sk = scale_key(loop.from_robot, ordinal)
            true_s = world.scale_for_pair(loop.from_robot, loop.from_index,
                                          loop.to_robot, loop.to_index)
            scale_errors.append(float(est[sk]) - true_s)
    return {
        "estimates": est,
        "report": report,
        "graph": graph,
        "ate_m": ate,
        "scale_errors": np.array(scale_errors),
        "loops": loops,
    }


# ---------------------------------------------------------------------------
# sweeps


def formulation_sweep(cfg: ExperimentConfig, formulations=None, outdir=None) -> List[dict]:
    formulations = formulations or ["base", "independent_scales",
                                    "smoothed_scales", "shared_scale"]
    rows = []
    for form in formulations:
        sub = None if outdir is None else Path(outdir) / form
        rows.append(run_experiment(cfg.replace(formulation=form), sub))
    return rows


def scale_init_sweep(cfg: ExperimentConfig, modes=None, outdir=None) -> List[dict]:
    modes = modes or ["ground_truth", "raw_oracle", "odometry_ratio"]
    rows = []
    for mode in modes:
        sub = None if outdir is None else Path(outdir) / mode
        rows.append(run_experiment(cfg.replace(scale_init=mode), sub))
    return rows


def sparsification_sweep(cfg: ExperimentConfig, strides: Sequence[int],
                         outdir=None) -> List[dict]:
    """One run per keyframe stride on the same world seed; returns rows with
    a `stride` field added (plot-ready)."""
    if any(s <= 0 for s in strides) or list(strides) != sorted(strides):
        raise ConfigError("strides must be positive and increasing")
    rows = []
    for stride in strides:
        sub = None if outdir is None else Path(outdir) / f"stride{stride}"
        row = run_experiment(cfg.replace(keyframe_stride=int(stride)), sub)
        row["stride"] = int(stride)
        rows.append(row)
    return rows
