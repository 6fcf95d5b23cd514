"""Decentralized multi-robot simulation.

Agents interact only through SwarmMessage values; every cross-agent byte is
recorded in the bandwidth ledger.  The protocol per contact:

1. exchange descriptor batches (and odometry shares) for new keyframes;
2. each side matches received descriptors against its own;
3. the lower-id robot of each candidate performs registration; the other
   side ships one latent handle per involved keyframe, at most once ever;
4. accepted loops (ratio filter) are announced to the contact component.

Whenever a rendezvous added at least one loop, the connected component
elects its lowest-id robot, which merges the graphs it knows about, solves,
and broadcasts the estimates.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Set, Tuple

import numpy as np

from . import se3
from .frontend import (
    CandidateMatch,
    ConfidenceParams,
    RegistrationOracle,
    cluster_loops,
    confidence,
    match_descriptors,
    scale_init,
)
from .graph import Formulation, build_graph
from .optimize import SolverConfig, solve_gnc, solve_lm
from .se3 import Pose
from .types import Keyframe, LoopClosure

MESSAGE_HEADER_BYTES = 16
DESCRIPTOR_ENTRY_HEADER_BYTES = 12
POSE_BYTES = 7 * 8
POSE_ENTRY_BYTES = 4 + POSE_BYTES
DEFAULT_LATENT_BYTES = 197_376  # nominal ViT latent for a 512x384 frame, 16-bit
LOOP_ANNOUNCE_BYTES = MESSAGE_HEADER_BYTES + 12 + POSE_BYTES + 8 + 8 + 8 + 8


# ---------------------------------------------------------------------------
# messages


@dataclass(frozen=True)
class DescriptorBatch:
    robot: int
    entries: tuple  # ((index, descriptor), ...)

    def size_bytes(self) -> int:
        dim = len(self.entries[0][1]) if self.entries else 0
        return MESSAGE_HEADER_BYTES + len(self.entries) * (
            dim * 4 + DESCRIPTOR_ENTRY_HEADER_BYTES
        )


@dataclass(frozen=True)
class OdometryShare:
    robot: int
    entries: tuple  # ((index, Pose), ...)

    def size_bytes(self) -> int:
        return MESSAGE_HEADER_BYTES + len(self.entries) * POSE_ENTRY_BYTES


@dataclass(frozen=True)
class LatentShare:
    robot: int
    index: int
    handle: object
    latent_bytes: int = DEFAULT_LATENT_BYTES

    def size_bytes(self) -> int:
        return MESSAGE_HEADER_BYTES + self.latent_bytes


@dataclass(frozen=True)
class LoopAnnounce:
    loop: LoopClosure

    def size_bytes(self) -> int:
        return LOOP_ANNOUNCE_BYTES


@dataclass(frozen=True)
class EstimateBroadcast:
    estimates: tuple  # ((robot, (Pose, ...)), ...)

    def size_bytes(self) -> int:
        total = MESSAGE_HEADER_BYTES
        for _robot, poses in self.estimates:
            total += 4 + len(poses) * POSE_ENTRY_BYTES
        return total


# ---------------------------------------------------------------------------
# ledger


class BandwidthLedger:
    """Per (sender, recipient, message type): message count and total bytes."""

    def __init__(self):
        self.records: Dict[Tuple[int, int, str], List[int]] = {}
        self.failures: int = 0

    def record(self, sender: int, recipient: int, msg) -> None:
        key = (sender, recipient, type(msg).__name__)
        entry = self.records.setdefault(key, [0, 0])
        entry[0] += 1
        entry[1] += msg.size_bytes()

    def count(self, msg_type: str) -> int:
        return sum(v[0] for k, v in self.records.items() if k[2] == msg_type)

    def bytes_of(self, msg_type: str) -> int:
        return sum(v[1] for k, v in self.records.items() if k[2] == msg_type)

    def total_bytes(self) -> int:
        return sum(v[1] for v in self.records.values())

    def rows(self):
        for key in sorted(self.records):
            count, nbytes = self.records[key]
            yield (*key, count, nbytes)


# ---------------------------------------------------------------------------
# communication schedules


class CommSchedule:
    def contacts(self, t: int) -> List[Tuple[int, int]]:
        raise NotImplementedError


class GeometricSchedule(CommSchedule):
    """Robots are in contact when their ground-truth positions at the current
    keyframe are within range rho."""

    def __init__(self, world, rho: float):
        self.world = world
        self.rho = rho

    def contacts(self, t: int) -> List[Tuple[int, int]]:
        n_robots = self.world.cfg.n_robots
        out = []
        for a in range(n_robots):
            na = len(self.world.true_poses[a])
            pa = self.world.true_poses[a][min(t, na - 1)].t
            for b in range(a + 1, n_robots):
                nb = len(self.world.true_poses[b])
                pb = self.world.true_poses[b][min(t, nb - 1)].t
                if np.linalg.norm(pa - pb) <= self.rho:
                    out.append((a, b))
        return out


class ExplicitSchedule(CommSchedule):
    def __init__(self, contact_list: Sequence[Tuple[int, int, int]]):
        # (time, robot_a, robot_b); stored symmetric
        self.by_time: Dict[int, List[Tuple[int, int]]] = {}
        for t, a, b in contact_list:
            self.by_time.setdefault(t, []).append((min(a, b), max(a, b)))

    def contacts(self, t: int) -> List[Tuple[int, int]]:
        return sorted(set(self.by_time.get(t, [])))


# ---------------------------------------------------------------------------
# agents


@dataclass
class RobotAgent:
    robot_id: int
    keyframes: List[Keyframe] = field(default_factory=list)
    received_descriptors: Dict[int, Dict[int, np.ndarray]] = field(default_factory=dict)
    received_odometry: Dict[int, Dict[int, Pose]] = field(default_factory=dict)
    known_loops: List[LoopClosure] = field(default_factory=list)
    latents_shared: Set[int] = field(default_factory=set)  # own keyframe indices
    sent_watermark: Dict[int, int] = field(default_factory=dict)  # per neighbor
    processed_pairs: Set[tuple] = field(default_factory=set)
    merged_estimate: Optional[Dict[int, List[Pose]]] = None
    loops_at_last_merge: int = 0

    def add_keyframe(self, kf: Keyframe) -> None:
        self.keyframes.append(kf)

    def new_entries_for(self, neighbor: int):
        start = self.sent_watermark.get(neighbor, 0)
        fresh = self.keyframes[start:]
        self.sent_watermark[neighbor] = len(self.keyframes)
        return fresh

    def receive(self, msg) -> None:
        if isinstance(msg, DescriptorBatch):
            store = self.received_descriptors.setdefault(msg.robot, {})
            for index, desc in msg.entries:
                store[index] = desc
        elif isinstance(msg, OdometryShare):
            store = self.received_odometry.setdefault(msg.robot, {})
            for index, pose in msg.entries:
                store[index] = pose
        elif isinstance(msg, LoopAnnounce):
            self.known_loops.append(msg.loop)
        elif isinstance(msg, EstimateBroadcast):
            self.merged_estimate = {r: list(poses) for r, poses in msg.estimates}
        elif isinstance(msg, LatentShare):
            pass  # the handle is consumed by the registration oracle
        else:
            raise TypeError(f"unknown message {type(msg)}")

    def peer_keyframes(self, robot: int) -> List[Keyframe]:
        descs = self.received_descriptors.get(robot, {})
        return [
            Keyframe(robot=robot, index=i, odom_pose=None, descriptor=d, handle=(robot, i))
            for i, d in sorted(descs.items())
        ]

    def trajectory_estimate(self) -> List[Pose]:
        """Own trajectory in the merged frame, extended by odometry beyond
        the merged prefix."""
        odo = [kf.odom_pose for kf in self.keyframes]
        if not self.merged_estimate or self.robot_id not in self.merged_estimate:
            return odo
        merged = self.merged_estimate[self.robot_id]
        if len(merged) >= len(odo):
            return merged[: len(odo)]
        out = list(merged)
        anchor = merged[-1]
        base = odo[len(merged) - 1]
        for pose in odo[len(merged):]:
            out.append(anchor.compose(se3.between(base, pose)))
        return out


def elect_optimizer(robot_ids) -> int:
    """Deterministic election: the lowest robot id of the connected set."""
    ids = sorted(set(robot_ids))
    if not ids:
        raise ValueError("cannot elect from an empty robot set")
    return ids[0]


# ---------------------------------------------------------------------------
# simulation driver


@dataclass
class SwarmConfig:
    frontend: ConfidenceParams = field(default_factory=ConfidenceParams)
    solver: SolverConfig = field(default_factory=SolverConfig)
    formulation: Formulation = Formulation.INDEPENDENT_SCALES
    scale_init_mode: str = "odometry_ratio"  # odometry_ratio | raw_oracle | ground_truth
    use_gnc: bool = False
    comm_range: float = 12.0
    latent_bytes: int = DEFAULT_LATENT_BYTES
    merge_enabled: bool = True  # disable to collect loops without solving


class SwarmSimulation:
    """Discrete-time driver: one keyframe per robot per tick by default.

    Deterministic given the world seed and configuration; all message
    delivery within a tick is sorted by (sender, recipient, type).
    """

    def __init__(self, world, cfg: SwarmConfig = None, oracle: RegistrationOracle = None,
                 schedule: CommSchedule = None):
        self.world = world
        self.cfg = cfg or SwarmConfig()
        self.oracle = oracle if oracle is not None else world.make_oracle()
        self.schedule = schedule or GeometricSchedule(world, self.cfg.comm_range)
        self.agents = {r: RobotAgent(r) for r in range(world.cfg.n_robots)}
        self.ledger = BandwidthLedger()
        self.loops: List[LoopClosure] = []  # audit view of all accepted loops
        self.last_solve_report = None
        self.solver_time_total = 0.0

    # -- message passing ----------------------------------------------------

    def _send(self, sender: int, recipient: int, msg) -> None:
        self.ledger.record(sender, recipient, msg)
        self.agents[recipient].receive(msg)

    # -- protocol -----------------------------------------------------------

    def exchange_protocol(self, a: int, b: int, component: Sequence[int]) -> List[LoopClosure]:
        """Run the full exchange between two agents in contact; returns the
        newly accepted loops."""
        agent_a, agent_b = self.agents[a], self.agents[b]
        for sender, receiver in ((a, b), (b, a)):
            fresh = self.agents[sender].new_entries_for(receiver)
            if fresh:
                batch = DescriptorBatch(
                    sender, tuple((kf.index, kf.descriptor) for kf in fresh)
                )
                self._send(sender, receiver, batch)
                odo = OdometryShare(
                    sender, tuple((kf.index, kf.odom_pose) for kf in fresh)
                )
                self._send(sender, receiver, odo)

        params = self.cfg.frontend
        candidates: List[CandidateMatch] = []
        candidates += match_descriptors(agent_a.keyframes, agent_a.peer_keyframes(b), params)
        candidates += match_descriptors(agent_b.keyframes, agent_b.peer_keyframes(a), params)

        new_loops: List[LoopClosure] = []
        seen = set()
        for cand in sorted(candidates, key=lambda c: (c.from_robot, c.from_index,
                                                      c.to_robot, c.to_index)):
            pair = tuple(sorted((cand.from_key, cand.to_key)))
            if pair in seen:
                continue
            seen.add(pair)
            registrar = min(cand.from_robot, cand.to_robot)
            other = max(cand.from_robot, cand.to_robot)
            if self.agents[registrar].processed_pairs.__contains__(pair):
                continue
            self.agents[registrar].processed_pairs.add(pair)
            own_key, other_key = (pair[0], pair[1]) if pair[0][0] == registrar else (pair[1], pair[0])

            # the non-registering robot ships its latent at most once ever
            other_agent = self.agents[other]
            if other_key[1] not in other_agent.latents_shared:
                other_agent.latents_shared.add(other_key[1])
                self._send(other, registrar, LatentShare(
                    other, other_key[1], other_key, self.cfg.latent_bytes))

            loop = self._register(registrar, own_key, other_key)
            if loop is None:
                continue
            new_loops.append(loop)
            self.loops.append(loop)
            self.agents[registrar].known_loops.append(loop)
            announce = LoopAnnounce(loop)
            for member in sorted(component):
                if member != registrar:
                    self._send(registrar, member, announce)
        return new_loops

    def _register(self, registrar: int, own_key, other_key) -> Optional[LoopClosure]:
        kf_a = self.agents[registrar].keyframes[own_key[1]]
        kf_b = Keyframe(robot=other_key[0], index=other_key[1], odom_pose=None,
                        handle=other_key)
        result = self.oracle.register(kf_a, kf_b)
        if result is None:
            self.ledger.failures += 1
            return None
        if result.odom_correspondences <= 0:
            self.ledger.failures += 1
            return None
        ratio = result.loop_correspondences / result.odom_correspondences
        if ratio < self.cfg.frontend.ratio_threshold:
            return None
        p = float(confidence(ratio, self.cfg.frontend.k))
        s0 = self._scale_init(result, own_key, other_key)
        return LoopClosure(
            from_robot=own_key[0], from_index=own_key[1],
            to_robot=other_key[0], to_index=other_key[1],
            rotation=result.rotation, direction=result.translation,
            loop_correspondences=result.loop_correspondences,
            odom_correspondences=result.odom_correspondences,
            ratio=ratio, confidence=p, scale_init=s0,
        )

    def _scale_init(self, result, own_key, other_key) -> float:
        mode = self.cfg.scale_init_mode
        if mode == "raw_oracle":
            return 1.0
        if mode == "ground_truth":
            return self.world.scale_for_pair(own_key[0], own_key[1],
                                             other_key[0], other_key[1])
        if mode == "odometry_ratio":
            if result.odom_metric_translation is None:
                return 1.0
            si = scale_init(result.odom_metric_translation,
                            result.odom_oracle_translation,
                            result.translation)
            return si.s0
        raise ValueError(f"unknown scale init mode {mode!r}")

    # -- merge and broadcast --------------------------------------------------

    def merge_and_broadcast(self, elected: int, component: Sequence[int]):
        """Build, solve and broadcast from the elected robot's knowledge."""
        agent = self.agents[elected]
        robots = [elected] + [
            r for r in sorted(component)
            if r != elected and agent.received_odometry.get(r)
        ]
        keyframes = {}
        odometry = {}
        for r in robots:
            if r == elected:
                kfs = agent.keyframes
                poses = [kf.odom_pose for kf in kfs]
                keyframes[r] = kfs
            else:
                shared = agent.received_odometry[r]
                poses = [shared[i] for i in sorted(shared)]
                keyframes[r] = [
                    Keyframe(robot=r, index=i, odom_pose=p)
                    for i, p in enumerate(poses)
                ]
            odometry[r] = [se3.between(poses[i], poses[i + 1])
                           for i in range(len(poses) - 1)]

        loops = [
            l for l in agent.known_loops
            if l.from_robot in robots and l.to_robot in robots
            and l.from_index < len(keyframes[l.from_robot])
            and l.to_index < len(keyframes[l.to_robot])
        ]
        cluster_loops(loops)
        graph = build_graph(keyframes, odometry, loops, self.cfg.formulation)
        solver = solve_gnc if self.cfg.use_gnc else solve_lm
        try:
            est, report = solver(graph, self.cfg.solver)
        except Exception:
            return None  # broadcast suppressed; agents keep prior estimates
        self.last_solve_report = report
        self.solver_time_total += report.wall_time
        agent.loops_at_last_merge = len(agent.known_loops)

        estimates = {}
        for r in robots:
            estimates[r] = [est[k] for k in sorted(
                (k for k in est if k.kind == "pose" and k.robot == r),
                key=lambda k: k.index)]
        msg = EstimateBroadcast(tuple(
            (r, tuple(estimates[r])) for r in sorted(estimates)
        ))
        agent.merged_estimate = {r: list(p) for r, p in msg.estimates}
        for member in sorted(component):
            if member != elected:
                self._send(elected, member, msg)
        return est, report, graph

    # -- driver ---------------------------------------------------------------

    def step(self, t: int) -> dict:
        events = {"contacts": [], "new_loops": 0, "merged": []}
        for r in sorted(self.agents):
            traj = self.world.true_poses[r]
            if t < len(traj):
                self.agents[r].add_keyframe(self.world.keyframe(r, t))

        contacts = self.schedule.contacts(t)
        events["contacts"] = contacts
        component_of = _components(sorted(self.agents), contacts)
        for a, b in sorted(contacts):
            comp = component_of[a]
            new = self.exchange_protocol(a, b, comp)
            events["new_loops"] += len(new)

        # re-optimize in every component whose elected robot saw new loops
        if not self.cfg.merge_enabled:
            return events
        done = set()
        for r in sorted(self.agents):
            comp = tuple(component_of[r])
            if comp in done or len(comp) < 2:
                continue
            done.add(comp)
            elected = elect_optimizer(comp)
            agent = self.agents[elected]
            if len(agent.known_loops) > agent.loops_at_last_merge:
                out = self.merge_and_broadcast(elected, comp)
                if out is not None:
                    events["merged"].append(comp)
        return events

    def run(self, n_ticks: Optional[int] = None) -> None:
        if n_ticks is None:
            n_ticks = max(len(p) for p in self.world.true_poses.values())
        for t in range(n_ticks):
            self.step(t)

    def trajectory_estimates(self) -> Dict[int, List[Pose]]:
        return {r: self.agents[r].trajectory_estimate() for r in sorted(self.agents)}


def _components(robots, contacts):
    parent = {r: r for r in robots}

    def find(r):
        while parent[r] != r:
            parent[r] = parent[parent[r]]
            r = parent[r]
        return r

    for a, b in contacts:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)
    comps: Dict[int, List[int]] = {}
    for r in robots:
        comps.setdefault(find(r), []).append(r)
    return {r: tuple(sorted(comps[find(r)])) for r in robots}
