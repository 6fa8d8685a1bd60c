"""Dense non-rigid mapping from node correspondences, plus trajectory
transfer and the waypoint-generation protocol.

Each node gets a local rigid transform fitted over its geodesically
nearest correspondences; a cloud point is mapped by blending the
transforms of its nearest nodes with normalized weights. Waypoints are
transferred through a local rigid fit over the cloud points inside a
sphere around the waypoint, which tolerates mapping noise far better
than blending at a single point.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .core import (
    ALL_BRANCH_LABELS,
    LABEL_STERNUM,
    PointCloud,
    RigidTransform,
    branch_side_level,
    kabsch_fit,
    kmeans_cluster,
)
from .errors import DegenerateGeometryError, InsufficientSupportError, ParseError
from .graph import CorrespondenceSet, SkeletonGraph, geodesic_distances

COINCIDENCE_EPS = 1e-6  # mm; below this a point is "on" a node

# protocol cluster counts per cartilage level 2..5
PROTOCOL_CLUSTERS = (3, 3, 4, 4)


@dataclass
class LocalTransformSet:
    """Per-node rigid transforms and the fitted ct-node positions used to
    look up which transforms a query point blends."""

    transforms: list[RigidTransform]
    neighbor_lists: list[np.ndarray]  # node indices used per fit, self first
    ct_nodes: np.ndarray              # (N, 3) fitted template node positions

    def __len__(self) -> int:
        return len(self.transforms)


def local_transforms(pairs: CorrespondenceSet, graph: SkeletonGraph,
                     n_reg: int = 3) -> LocalTransformSet:
    """Fit one rigid transform per node over its n_reg geodesically
    nearest correspondences (itself included).

    Geodesic ties break by Euclidean distance, then node index. A
    collinear neighborhood grows one node at a time (up to n_reg + 3)
    until the fit is well posed.
    """
    if n_reg < 3:
        raise ValueError("n_reg must be at least 3 (rigid fit needs 3 points)")
    if len(pairs) != graph.n_nodes:
        raise ValueError("correspondence set does not match the graph")
    geo = geodesic_distances(graph, respect_directions=False)
    ct, us = pairs.ct_nodes, pairs.us_nodes
    transforms: list[RigidTransform] = []
    neighbors: list[np.ndarray] = []
    for i in range(graph.n_nodes):
        eu = np.linalg.norm(ct - ct[i], axis=1)
        order = np.lexsort((np.arange(graph.n_nodes), eu, geo[i]))
        fit = None
        for take in range(n_reg, n_reg + 4):
            sel = order[:take]
            try:
                fit = kabsch_fit(ct[sel], us[sel])
                break
            except DegenerateGeometryError:
                continue
        if fit is None:
            raise DegenerateGeometryError(
                f"node {i}: neighborhood stayed collinear up to {n_reg + 3} nodes")
        transforms.append(fit)
        neighbors.append(sel)
    return LocalTransformSet(transforms, neighbors, ct.copy())


def _blend_weights(dists: np.ndarray, weighting: str) -> np.ndarray:
    """Normalized blend weights for one point's node distances."""
    if weighting == "inverse":
        inv = 1.0 / np.maximum(dists, COINCIDENCE_EPS)
        return inv / inv.sum()
    if weighting == "literal":
        total = dists.sum()
        if total <= 0.0:
            out = np.zeros_like(dists)
            out[0] = 1.0
            return out
        return dists / total
    raise ValueError(f"unknown weighting '{weighting}' (expected 'inverse' or 'literal')")


def map_point(p: np.ndarray, transforms: LocalTransformSet, n_blend: int = 3,
              weighting: str = "inverse") -> np.ndarray:
    """Map one point through the blended local transforms of its n_blend
    Euclidean-nearest nodes; a point sitting on a node maps exactly
    through that node's transform."""
    p = np.asarray(p, dtype=np.float64).reshape(3)
    d = np.linalg.norm(transforms.ct_nodes - p, axis=1)
    idx = np.lexsort((np.arange(len(d)), d))[:max(n_blend, 1)]
    if d[idx[0]] < COINCIDENCE_EPS:
        return transforms.transforms[int(idx[0])].apply(p)
    w = _blend_weights(d[idx], weighting)
    out = np.zeros(3)
    for wi, ni in zip(w, idx):
        out += wi * transforms.transforms[int(ni)].apply(p)
    return out


def map_cloud(cloud: PointCloud, transforms: LocalTransformSet, n_blend: int = 3,
              weighting: str = "inverse") -> PointCloud:
    """map_point applied to every point (vectorized); labels ride along."""
    pts = cloud.points
    k = max(min(n_blend, len(transforms.ct_nodes)), 1)
    dists, idx = cKDTree(transforms.ct_nodes).query(pts, k=k)
    dists = dists.reshape(len(pts), k)
    idx = idx.reshape(len(pts), k)

    rot = np.stack([t.rotation for t in transforms.transforms])
    tra = np.stack([t.translation for t in transforms.transforms])
    per_node = np.einsum("nkij,nj->nki", rot[idx], pts) + tra[idx]  # (N, k, 3)

    if weighting == "inverse":
        w = 1.0 / np.maximum(dists, COINCIDENCE_EPS)
        w /= w.sum(axis=1, keepdims=True)
    elif weighting == "literal":
        totals = dists.sum(axis=1, keepdims=True)
        with np.errstate(invalid="ignore"):
            w = np.where(totals > 0, dists / np.where(totals > 0, totals, 1.0), 0.0)
        w[(totals <= 0).ravel(), 0] = 1.0
    else:
        raise ValueError(f"unknown weighting '{weighting}'")
    mapped = (w[:, :, None] * per_node).sum(axis=1)

    on_node = dists[:, 0] < COINCIDENCE_EPS
    mapped[on_node] = per_node[on_node, 0]
    labels = None if cloud.labels is None else cloud.labels.copy()
    return PointCloud(mapped, labels)


def transfer_waypoint(w: np.ndarray, ct_cloud: PointCloud, mapped_cloud: PointCloud,
                      radius: float = 20.0) -> np.ndarray:
    """Carry one waypoint across by the rigid fit over the index-paired
    (source, mapped) points inside a sphere around it."""
    w = np.asarray(w, dtype=np.float64).reshape(3)
    if len(ct_cloud) != len(mapped_cloud):
        raise ValueError("source and mapped clouds must be index-paired")
    inside = np.linalg.norm(ct_cloud.points - w, axis=1) <= radius
    count = int(inside.sum())
    if count < 3:
        raise InsufficientSupportError(
            f"only {count} points within {radius:.0f} mm of waypoint {w.round(1).tolist()}", count)
    fit = kabsch_fit(ct_cloud.points[inside], mapped_cloud.points[inside])
    return fit.apply(w)


def waypoint_support(w: np.ndarray, ct_cloud: PointCloud, radius: float = 20.0) -> int:
    """Number of cloud points inside the waypoint's sphere region."""
    w = np.asarray(w, dtype=np.float64).reshape(3)
    return int((np.linalg.norm(ct_cloud.points - w, axis=1) <= radius).sum())


@dataclass
class Trajectory:
    """Ordered scan waypoints with side / intercostal-space metadata."""

    waypoints: np.ndarray  # (M, 3) mm
    sides: np.ndarray      # (M,) side code 1/2
    spaces: np.ndarray     # (M,) intercostal space index, 1-based

    def __post_init__(self) -> None:
        self.waypoints = np.asarray(self.waypoints, dtype=np.float64).reshape(-1, 3)
        self.sides = np.asarray(self.sides, dtype=np.int64)
        self.spaces = np.asarray(self.spaces, dtype=np.int64)
        if not (len(self.waypoints) == len(self.sides) == len(self.spaces)):
            raise ValueError("waypoints and metadata lengths differ")

    def __len__(self) -> int:
        return len(self.waypoints)

    def with_waypoints(self, waypoints: np.ndarray) -> "Trajectory":
        return Trajectory(waypoints, self.sides.copy(), self.spaces.copy())

    def to_dict(self) -> dict:
        return {"waypoints": [
            {"xyz": [float(v) for v in w], "side": int(s), "space": int(sp)}
            for w, s, sp in zip(self.waypoints, self.sides, self.spaces)]}


def generate_protocol_waypoints(cloud: PointCloud) -> Trajectory:
    """Waypoints from the labeled branches of one cloud.

    Each branch is clustered into 3/3/4/4 segments (levels 2..5) with
    centers ordered from the sternum outward; midpoints between
    index-matched centers of consecutive levels give 3+3+4 waypoints per
    side, 20 in total.
    """
    if cloud.labels is None:
        raise ValueError("cloud carries no labels")
    sternum_pts = cloud.points[cloud.labels == LABEL_STERNUM]
    if len(sternum_pts) == 0:
        raise ValueError("cloud has no sternum points to order branches from")
    sternum_tree = cKDTree(sternum_pts)

    centers: dict[int, np.ndarray] = {}
    for code in ALL_BRANCH_LABELS:
        pts = cloud.points[cloud.labels == code]
        if len(pts) == 0:
            raise ValueError(f"missing branch label {code} (side {code // 10}, level {code % 10})")
        _, level = branch_side_level(code)
        k = PROTOCOL_CLUSTERS[level - 2]
        d_root = sternum_tree.query(pts)[0]
        order = np.argsort(d_root, kind="stable")
        seed_pos = np.round((np.arange(k) + 0.5) / k * (len(pts) - 1)).astype(int)
        seeds = pts[order[seed_pos]]
        _, fitted = kmeans_cluster(pts, k, seeds)
        fitted = fitted[np.argsort(sternum_tree.query(fitted)[0], kind="stable")]
        centers[code] = fitted

    waypoints, sides, spaces = [], [], []
    for side in (1, 2):
        for space, (lo, hi) in enumerate(((2, 3), (3, 4), (4, 5)), start=1):
            a = centers[10 * side + lo]
            b = centers[10 * side + hi]
            for i in range(min(len(a), len(b))):
                waypoints.append((a[i] + b[i]) / 2.0)
                sides.append(side)
                spaces.append(space)
    return Trajectory(np.asarray(waypoints), sides, spaces)


# --- trajectory files --------------------------------------------------------

def save_trajectory(traj: Trajectory, path, format: str | None = None) -> None:
    fmt = (format or str(path).rsplit(".", 1)[-1]).lower()
    if fmt == "json":
        with open(path, "w", encoding="ascii") as fh:
            json.dump(traj.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")
    elif fmt == "csv":
        lines = ["x,y,z,side,space"]
        lines += [f"{repr(float(w[0]))},{repr(float(w[1]))},{repr(float(w[2]))},{int(s)},{int(sp)}"
                  for w, s, sp in zip(traj.waypoints, traj.sides, traj.spaces)]
        with open(path, "w", encoding="ascii") as fh:
            fh.write("\n".join(lines) + "\n")
    else:
        raise ValueError(f"unsupported trajectory format '{fmt}'")


def load_trajectory(path, format: str | None = None) -> Trajectory:
    fmt = (format or str(path).rsplit(".", 1)[-1]).lower()
    try:
        with open(path, "r", encoding="ascii") as fh:
            text = fh.read()
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from exc
    if fmt == "json":
        try:
            data = json.loads(text)
            rows = data["waypoints"]
            return Trajectory(np.array([r["xyz"] for r in rows], dtype=np.float64).reshape(-1, 3),
                              [r.get("side", 0) for r in rows],
                              [r.get("space", 0) for r in rows])
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"{path}: malformed trajectory JSON ({exc})") from exc
    if fmt != "csv":
        raise ValueError(f"unsupported trajectory format '{fmt}'")
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ParseError(f"{path}: empty trajectory file")
    header = [h.strip().lower() for h in lines[0].split(",")]
    if header[:3] != ["x", "y", "z"]:
        raise ParseError(f"{path}:1: expected header starting 'x,y,z'")
    pts, sides, spaces = [], [], []
    for ln, raw in enumerate(lines[1:], start=2):
        tok = [t.strip() for t in raw.split(",")]
        try:
            pts.append([float(tok[0]), float(tok[1]), float(tok[2])])
            sides.append(int(tok[3]) if len(tok) > 3 else 0)
            spaces.append(int(tok[4]) if len(tok) > 4 else 0)
        except (ValueError, IndexError):
            raise ParseError(f"{path}:{ln}: malformed waypoint row '{raw}'") from None
    if not pts:
        raise ParseError(f"{path}: trajectory file contains no waypoints")
    return Trajectory(np.asarray(pts), sides, spaces)
