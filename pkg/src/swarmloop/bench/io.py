"""Text formats: TUM trajectories and the extended g2o-style graph file.

Graph file grammar (one record per line, floats printed with 17 significant
digits; `<info>` is the 21-entry upper triangle of the 6x6 information
matrix, row major, in the package's [rotation; translation] tangent order):

    VERTEX_SE3:QUAT  <id> tx ty tz qx qy qz qw
    VERTEX_SCALE     <id> value
    FIX              <id> tx ty tz qx qy qz qw <info>
    EDGE_SE3:QUAT    <from> <to> tx ty tz qx qy qz qw <info> [confidence]
    EDGE_SE3_SCALED  <from> <to> <scale> tx ty tz qx qy qz qw <info> confidence
    EDGE_SCALE_SMOOTH <si> <sj> info

The trailing confidence on EDGE_SE3:QUAT is present for inter-robot loop
edges and absent for odometry edges.  Variable ids encode (robot, index):
pose id = robot * 1e6 + index, scale id = 1e9 + robot * 1e6 + index.

Round-trip is exact at the text level: serialize(parse(text)) == text for
any canonically serialized file.
"""

from __future__ import annotations

from typing import Dict, List, Tuple

import numpy as np

from .. import se3
from ..frontend import quaternion_to_rotation, rotation_to_quaternion
from ..graph import (
    FactorGraph,
    LoopFactor,
    OdometryFactor,
    PriorFactor,
    ScaledLoopFactor,
    ScaleSmoothFactor,
    VariableKey,
)
from ..se3 import Pose

_ROBOT_STRIDE = 1_000_000
_SCALE_BASE = 1_000_000_000


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def key_to_id(key: VariableKey) -> int:
    base = _SCALE_BASE if key.kind == "scale" else 0
    return base + key.robot * _ROBOT_STRIDE + key.index


def id_to_key(vid: int) -> VariableKey:
    kind = "pose"
    if vid >= _SCALE_BASE:
        kind = "scale"
        vid -= _SCALE_BASE
    return VariableKey(kind, vid // _ROBOT_STRIDE, vid % _ROBOT_STRIDE)


class _QuatArray(np.ndarray):
    """Rotation matrix that remembers the quaternion it was parsed from, so
    re-serialization reproduces the original tokens bit for bit."""

    quat = None


def _matrix_with_quat(q: np.ndarray) -> np.ndarray:
    R = quaternion_to_rotation(q).view(_QuatArray)
    R.quat = q
    return R


def _rotation_quat(R: np.ndarray) -> np.ndarray:
    q = getattr(R, "quat", None)
    return q if q is not None else rotation_to_quaternion(R)


def _pose_tokens(p: Pose) -> List[str]:
    q = p._quat if p._quat is not None else rotation_to_quaternion(p.R)
    return [_fmt(v) for v in (*p.t, *q)]


def _tokens_to_pose(tokens) -> Pose:
    vals = [float(v) for v in tokens]
    t = np.array(vals[:3])
    q = np.array(vals[3:7])
    p = Pose(quaternion_to_rotation(q), t)
    object.__setattr__(p, "_quat", q)
    return p


def _info_tokens(info: np.ndarray) -> List[str]:
    out = []
    for i in range(6):
        for j in range(i, 6):
            out.append(_fmt(info[i, j]))
    return out


def _tokens_to_info(tokens) -> np.ndarray:
    vals = [float(v) for v in tokens]
    info = np.zeros((6, 6))
    k = 0
    for i in range(6):
        for j in range(i, 6):
            info[i, j] = info[j, i] = vals[k]
            k += 1
    return info


def serialize_graph(g: FactorGraph) -> str:
    lines = []
    for key in g.sorted_keys():
        vid = key_to_id(key)
        if key.kind == "pose":
            lines.append(" ".join(["VERTEX_SE3:QUAT", str(vid),
                                   *_pose_tokens(g.variables[key])]))
        else:
            lines.append(" ".join(["VERTEX_SCALE", str(vid), _fmt(g.variables[key])]))
    for f in g.factors:
        if isinstance(f, PriorFactor):
            lines.append(" ".join(["FIX", str(key_to_id(f.key)),
                                   *_pose_tokens(f.value), *_info_tokens(f.info)]))
    for f in g.factors:
        if isinstance(f, OdometryFactor):
            lines.append(" ".join([
                "EDGE_SE3:QUAT", str(key_to_id(f.from_key)), str(key_to_id(f.to_key)),
                *_pose_tokens(f.measurement), *_info_tokens(f.info)]))
        elif isinstance(f, LoopFactor):
            lines.append(" ".join([
                "EDGE_SE3:QUAT", str(key_to_id(f.from_key)), str(key_to_id(f.to_key)),
                *_pose_tokens(f.measurement), *_info_tokens(f.info),
                _fmt(f.confidence)]))
        elif isinstance(f, ScaledLoopFactor):
            q = _rotation_quat(f.rotation)
            lines.append(" ".join([
                "EDGE_SE3_SCALED", str(key_to_id(f.from_key)), str(key_to_id(f.to_key)),
                str(key_to_id(f.scale)),
                *(_fmt(v) for v in f.direction), *(_fmt(v) for v in q),
                *_info_tokens(f.info), _fmt(f.confidence)]))
        elif isinstance(f, ScaleSmoothFactor):
            lines.append(" ".join([
                "EDGE_SCALE_SMOOTH", str(key_to_id(f.si)), str(key_to_id(f.sj)),
                _fmt(f.info)]))
    return "\n".join(lines) + "\n"


def parse_graph(text: str) -> FactorGraph:
    g = FactorGraph()
    priors, odoms, loops, scaled, smooth = [], [], [], [], []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        tokens = line.split()
        tag = tokens[0]
        try:
            if tag == "VERTEX_SE3:QUAT":
                g.variables[id_to_key(int(tokens[1]))] = _tokens_to_pose(tokens[2:9])
            elif tag == "VERTEX_SCALE":
                g.variables[id_to_key(int(tokens[1]))] = float(tokens[2])
            elif tag == "FIX":
                priors.append(PriorFactor(
                    id_to_key(int(tokens[1])),
                    _tokens_to_pose(tokens[2:9]),
                    _tokens_to_info(tokens[9:30])))
            elif tag == "EDGE_SE3:QUAT":
                fk, tk = id_to_key(int(tokens[1])), id_to_key(int(tokens[2]))
                pose = _tokens_to_pose(tokens[3:10])
                info = _tokens_to_info(tokens[10:31])
                if len(tokens) > 31:
                    loops.append(LoopFactor(fk, tk, pose, info, float(tokens[31])))
                else:
                    odoms.append(OdometryFactor(fk, tk, pose, info))
            elif tag == "EDGE_SE3_SCALED":
                fk, tk = id_to_key(int(tokens[1])), id_to_key(int(tokens[2]))
                sk = id_to_key(int(tokens[3]))
                direction = np.array([float(v) for v in tokens[4:7]])
                R = _matrix_with_quat(np.array([float(v) for v in tokens[7:11]]))
                info = _tokens_to_info(tokens[11:32])
                scaled.append(ScaledLoopFactor(fk, tk, sk, R, direction, info,
                                               float(tokens[32])))
            elif tag == "EDGE_SCALE_SMOOTH":
                smooth.append(ScaleSmoothFactor(
                    id_to_key(int(tokens[1])), id_to_key(int(tokens[2])),
                    float(tokens[3])))
            else:
                raise ValueError(f"unknown record tag {tag!r}")
        except (IndexError, ValueError) as e:
            raise ValueError(f"graph file line {lineno}: {e}") from e
    g.factors = priors + odoms + loops + scaled + smooth
    for r in sorted({k.robot for k in g.variables if k.kind == "pose"}):
        g.trajectory_lengths[r] = sum(
            1 for k in g.variables if k.kind == "pose" and k.robot == r
        )
    return g


def save_graph(g: FactorGraph, path) -> None:
    with open(path, "w") as fh:
        fh.write(serialize_graph(g))


def load_graph(path) -> FactorGraph:
    with open(path) as fh:
        return parse_graph(fh.read())


# ---------------------------------------------------------------------------
# TUM trajectories


def serialize_trajectory(traj: List[Tuple[float, Pose]]) -> str:
    """TUM text: `timestamp tx ty tz qx qy qz qw`, timestamps increasing."""
    lines = []
    last = None
    for ts, pose in traj:
        if last is not None and ts <= last:
            raise ValueError("timestamps must be strictly increasing")
        last = ts
        lines.append(" ".join([_fmt(ts), *_pose_tokens(pose)]))
    return "\n".join(lines) + "\n"


def parse_trajectory(text: str) -> List[Tuple[float, Pose]]:
    out = []
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        tokens = line.split()
        out.append((float(tokens[0]), _tokens_to_pose(tokens[1:8])))
    return out


def save_trajectory(traj, path) -> None:
    with open(path, "w") as fh:
        fh.write(serialize_trajectory(traj))


def load_trajectory(path):
    with open(path) as fh:
        return parse_trajectory(fh.read())
