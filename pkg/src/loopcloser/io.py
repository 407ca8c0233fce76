"""World JSON and g2o-style pose-graph text."""

from __future__ import annotations

import json

import numpy as np

from .geometry import CameraIntrinsics, SE3Pose, Sim3Transform
from .mapcore import KeyFrame, MapPoint
from .posegraph import PoseGraphEdge, PoseGraphVertex
from .world import SyntheticWorld, SyntheticWorldConfig

WORLD_SCHEMA = "loopcloser-world"
WORLD_VERSION = 1

# ---------------------------------------------------------------------------
# world JSON
# ---------------------------------------------------------------------------
# Floats go through json's repr, the shortest text that parses back to the
# same double, so a save/load round trip is exact.


def _pose(T: SE3Pose) -> list[float]:
    return [float(x) for x in T.rotation] + [float(x) for x in T.translation]


def _unpose(v) -> SE3Pose:
    return SE3Pose(np.array(v[:4], dtype=float), np.array(v[4:7], dtype=float))


def _hex_rows(d: np.ndarray) -> list[str]:
    return [bytes(row).hex() for row in np.asarray(d, dtype=np.uint8)]


def _unhex_rows(rows, width: int) -> np.ndarray:
    if not rows:
        return np.zeros((0, width), dtype=np.uint8)
    return np.array([np.frombuffer(bytes.fromhex(r), dtype=np.uint8) for r in rows]).reshape(-1, width)


def world_to_dict(world: SyntheticWorld) -> dict:
    kfs = []
    for kf in world.keyframes:
        kfs.append({
            "id": kf.id,
            "pose": _pose(kf.pose),
            "uv": kf.uv.tolist(),
            "octaves": kf.octaves.tolist(),
            "descriptors": _hex_rows(kf.descriptors),
            "associations": kf.associations.tolist(),
            "angles": kf.angles.tolist(),
            "word_ids": sorted(kf.word_ids),
        })
    pts = []
    for p in world.map_points:
        pts.append({
            "id": p.id,
            "position": p.position.tolist(),
            "normal": p.normal.tolist(),
            "d_min": p.d_min,
            "d_max": p.d_max,
            "descriptor": bytes(p.descriptor).hex(),
            "landmark": world.point_landmark.get(p.id),
        })
    return {
        "schema": WORLD_SCHEMA,
        "version": WORLD_VERSION,
        "config": world.config.to_dict(),
        "intrinsics": world.intrinsics.to_dict(),
        "keyframes": kfs,
        "map_points": pts,
        "ground_truth": [_pose(T) for T in world.ground_truth],
        "drifted": [_pose(T) for T in world.drifted],
        "landmarks": world.landmarks.tolist(),
        "loop_labels": [list(ab) for ab in world.loop_labels],
    }


def world_from_dict(d: dict) -> SyntheticWorld:
    if d.get("schema") != WORLD_SCHEMA:
        raise ValueError(f"not a world file (schema {d.get('schema')!r})")
    if d.get("version") != WORLD_VERSION:
        raise ValueError(f"unsupported world version {d.get('version')!r}")
    cfg_d = dict(d["config"])
    cfg_d["lateral"] = tuple(cfg_d["lateral"])
    cfg = SyntheticWorldConfig(**cfg_d)
    K = CameraIntrinsics(**d["intrinsics"])
    kfs = []
    for k in d["keyframes"]:
        desc = _unhex_rows(k["descriptors"], 32)
        kfs.append(KeyFrame(
            k["id"], _unpose(k["pose"]), K, np.array(k["uv"], dtype=float).reshape(-1, 2), k["octaves"], desc,
            k["associations"], k["angles"], frozenset(k["word_ids"]),
        ))
    pts, lm = [], {}
    for p in d["map_points"]:
        pts.append(MapPoint(p["id"], p["position"], p["normal"], p["d_min"], p["d_max"],
                            np.frombuffer(bytes.fromhex(p["descriptor"]), dtype=np.uint8)))
        if p.get("landmark") is not None:
            lm[p["id"]] = p["landmark"]
    return SyntheticWorld(
        config=cfg,
        intrinsics=K,
        ground_truth=[_unpose(v) for v in d["ground_truth"]],
        drifted=[_unpose(v) for v in d["drifted"]],
        keyframes=kfs,
        map_points=pts,
        landmarks=np.array(d["landmarks"], dtype=float).reshape(-1, 3),
        point_landmark=lm,
        loop_labels=[tuple(ab) for ab in d["loop_labels"]],
    )


def save_world(world: SyntheticWorld, path):
    with open(path, "w") as fh:
        json.dump(world_to_dict(world), fh, separators=(",", ":"))


def load_world(path) -> SyntheticWorld:
    with open(path) as fh:
        return world_from_dict(json.load(fh))


# ---------------------------------------------------------------------------
# g2o text
# ---------------------------------------------------------------------------
# VERTEX_SIM3:EXPMAP id s qx qy qz qw tx ty tz
# EDGE_SIM3 i j s qx qy qz qw tx ty tz <28 upper-triangular information entries>
# FIX id


def _sim3_fields(S: Sim3Transform) -> list[float]:
    q = S.rotation
    return [S.scale, q[1], q[2], q[3], q[0], *S.translation]


def _sim3_parse(v) -> Sim3Transform:
    s, qx, qy, qz, qw, tx, ty, tz = (float(x) for x in v)
    return Sim3Transform(s, np.array([qw, qx, qy, qz]), np.array([tx, ty, tz]))


def _fmt(vals) -> str:
    return " ".join(repr(float(v)) for v in vals)


def write_g2o(path, vertices, edges):
    if isinstance(vertices, dict):
        vertices = list(vertices.values())
    iu = np.triu_indices(7)
    with open(path, "w") as fh:
        for v in sorted(vertices, key=lambda v: v.id):
            fh.write(f"VERTEX_SIM3:EXPMAP {v.id} {_fmt(_sim3_fields(v.estimate))}\n")
        for v in sorted(vertices, key=lambda v: v.id):
            if v.fixed:
                fh.write(f"FIX {v.id}\n")
        for e in edges:
            info = np.eye(7) if e.information is None else np.asarray(e.information, float)
            fh.write(f"EDGE_SIM3 {e.i} {e.j} {_fmt(_sim3_fields(e.S_ij))} {_fmt(info[iu])}\n")


def read_g2o(path) -> tuple[dict[int, PoseGraphVertex], list[PoseGraphEdge]]:
    """Vertices and edges; edge kinds are not stored and come back as ``"loop"``
    unless the endpoints are consecutive ids (``"tree"``)."""
    vertices: dict[int, PoseGraphVertex] = {}
    edges: list[PoseGraphEdge] = []
    fixed: set[int] = set()
    iu = np.triu_indices(7)
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            tag = parts[0]
            if tag == "VERTEX_SIM3:EXPMAP":
                vid = int(parts[1])
                vertices[vid] = PoseGraphVertex(vid, _sim3_parse(parts[2:10]))
            elif tag == "EDGE_SIM3":
                i, j = int(parts[1]), int(parts[2])
                vals = [float(x) for x in parts[11:]]
                if len(vals) != 28:
                    raise ValueError(f"{path}:{ln}: expected 28 information entries")
                info = np.zeros((7, 7))
                info[iu] = vals
                info = info + np.triu(info, 1).T
                kind = "tree" if abs(i - j) == 1 else "loop"
                edges.append(PoseGraphEdge(i, j, _sim3_parse(parts[3:11]), kind,
                                           None if np.array_equal(info, np.eye(7)) else info))
            elif tag == "FIX":
                fixed.update(int(x) for x in parts[1:])
            else:
                raise ValueError(f"{path}:{ln}: unknown record {tag!r}")
    for vid in fixed:
        vertices[vid].fixed = True
    return vertices, edges
