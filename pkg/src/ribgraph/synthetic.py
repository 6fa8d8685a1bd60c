"""Parametric rib-cage-like point clouds with exact ground truth.

The generated shape is a flat sternum strip plus four cartilage branches
per side (levels 2..5). Each branch is the front half of a curved tube;
curvature grows with the level number so the level-identification logic
downstream has the same cue real anatomy provides. Everything is
deterministic given the seed, and the generator also returns ideal
skeleton polylines and intercostal waypoints so every pipeline stage can
be scored against known truth.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .core import (
    LABEL_STERNUM,
    LEVELS,
    PointCloud,
    RigidTransform,
    branch_label,
)
from .errors import ParseError

# Number of protocol clusters per cartilage level; midpoints between
# consecutive levels give 3+3+4 waypoints per side.
PROTOCOL_CLUSTERS = {2: 3, 3: 3, 4: 4, 5: 4}


@dataclass(frozen=True)
class RibcageParams:
    """Geometry and sampling knobs for the synthetic rib cage."""

    sternum_width: float = 30.0
    sternum_height: float = 90.0
    branch_count_per_side: int = 4
    branch_lengths: tuple[float, float, float, float] = (55.0, 68.0, 80.0, 90.0)
    branch_curvatures: tuple[float, float, float, float] = (1 / 260.0, 1 / 150.0, 1 / 95.0, 1 / 65.0)
    point_density: float = 1.0          # points per mm^2
    surface_thickness: float = 1.0      # jitter normal to the surface, mm
    rng_seed: int = 0

    # secondary shape knobs
    corner_radius: float = 6.0
    tube_radius: float = 3.0
    attach_gap: float = 2.0             # cartilage-sternum junction gap, mm
    attach_fractions: tuple[float, float, float, float] = (0.37, 0.13, -0.13, -0.37)
    droop_deg: float = 12.0             # initial downward tilt of each branch
    depth_sag: float = 14.0             # backward sweep of branch tips, mm

    def __post_init__(self) -> None:
        if self.branch_count_per_side != 4:
            raise ValueError("generator supports exactly 4 cartilage levels per side")
        for name in ("sternum_width", "sternum_height", "point_density",
                     "surface_thickness", "tube_radius"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if len(self.branch_lengths) != 4 or any(v <= 0 for v in self.branch_lengths):
            raise ValueError("branch_lengths must be 4 positive values (levels 2..5)")
        if len(self.branch_curvatures) != 4 or any(v <= 0 for v in self.branch_curvatures):
            raise ValueError("branch_curvatures must be 4 positive values (levels 2..5)")
        if not self.branch_curvatures[-1] > self.branch_curvatures[0]:
            raise ValueError("curvature must increase from level 2 to level 5")


@dataclass
class GroundTruth:
    """Everything the generator knows about a cloud.

    Correspondence ids are stable under deformation and subsetting, so a
    point can always be traced back to its original counterpart.
    """

    labels: np.ndarray          # (N,) part codes
    corr_ids: np.ndarray        # (N,) unique int64
    skeleton: np.ndarray        # (S, 3) ideal skeleton sample positions
    skeleton_parts: np.ndarray  # (S,) part code per skeleton sample
    waypoints: np.ndarray       # (20, 3) ideal intercostal midpoints
    waypoint_sides: np.ndarray  # (20,) side code 1/2
    waypoint_spaces: np.ndarray  # (20,) intercostal space index 1..3
    normals: np.ndarray         # (N, 3) outward surface normal at generation time

    def __post_init__(self) -> None:
        if len(np.unique(self.corr_ids)) != len(self.corr_ids):
            raise ValueError("correspondence ids must be unique")

    def select(self, mask_or_index) -> "GroundTruth":
        return replace(
            self,
            labels=self.labels[mask_or_index],
            corr_ids=self.corr_ids[mask_or_index],
            normals=self.normals[mask_or_index],
        )


def _rounded_rect_contains(xy: np.ndarray, width: float, height: float, radius: float) -> np.ndarray:
    """Membership test for an axis-aligned rounded rectangle centred at 0."""
    hw, hh = width / 2.0, height / 2.0
    x = np.abs(xy[:, 0])
    y = np.abs(xy[:, 1])
    inside_core = (x <= hw) & (y <= hh - radius)
    inside_band = (x <= hw - radius) & (y <= hh)
    cx = np.maximum(x - (hw - radius), 0.0)
    cy = np.maximum(y - (hh - radius), 0.0)
    inside_corner = cx**2 + cy**2 <= radius**2
    return inside_core | inside_band | inside_corner


def _branch_centerline(params: RibcageParams, level: int, t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Right-side centerline points and unit tangents at arc lengths t.

    The in-plane part is a circular arc that starts at the sternum edge
    heading outward with a slight droop and turns downward; the depth
    part sweeps backward quadratically toward the tip.
    """
    idx = LEVELS.index(level)
    length = params.branch_lengths[idx]
    kappa = params.branch_curvatures[idx]
    y0 = params.attach_fractions[idx] * params.sternum_height
    x0 = params.sternum_width / 2.0 + params.attach_gap
    a0 = -np.radians(params.droop_deg)
    a = a0 - kappa * t
    x = x0 + (np.sin(a0) - np.sin(a)) / kappa
    y = y0 + (np.cos(a) - np.cos(a0)) / kappa
    z = -params.depth_sag * (t / length) ** 2
    dz = -2.0 * params.depth_sag * t / length**2
    tangent = np.stack([np.cos(a), np.sin(a), dz], axis=1)
    tangent /= np.linalg.norm(tangent, axis=1, keepdims=True)
    return np.stack([x, y, z], axis=1), tangent


def _tube_frames(tangent: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """In-plane normal and front direction for each tangent."""
    z_axis = np.array([0.0, 0.0, 1.0])
    side = np.cross(z_axis, tangent)
    side /= np.linalg.norm(side, axis=1, keepdims=True)
    front = np.cross(tangent, side)
    return side, front


def generate_ribcage(params: RibcageParams) -> tuple[PointCloud, GroundTruth]:
    """Sample a full front-surface ("CT-like") rib cage.

    Point count per part is density times part area; positions, labels,
    correspondence ids, skeleton polylines and ideal waypoints are all
    deterministic given params.rng_seed.
    """
    rng = np.random.default_rng(params.rng_seed)
    pts_parts: list[np.ndarray] = []
    lbl_parts: list[np.ndarray] = []
    nrm_parts: list[np.ndarray] = []

    # sternum: rounded rectangle strip in the x-y plane
    w, h, r = params.sternum_width, params.sternum_height, params.corner_radius
    area = w * h - (4.0 - np.pi) * r**2
    n_sternum = max(int(round(params.point_density * area)), 1)
    accepted: list[np.ndarray] = []
    need = n_sternum
    while need > 0:
        cand = rng.uniform([-w / 2, -h / 2], [w / 2, h / 2], size=(max(2 * need, 32), 2))
        cand = cand[_rounded_rect_contains(cand, w, h, r)]
        accepted.append(cand[:need])
        need -= len(cand[:need])
    xy = np.vstack(accepted)
    z = rng.uniform(-params.surface_thickness / 2, params.surface_thickness / 2, size=n_sternum)
    pts_parts.append(np.column_stack([xy, z]))
    lbl_parts.append(np.full(n_sternum, LABEL_STERNUM, dtype=np.int64))
    nrm_parts.append(np.tile([0.0, 0.0, 1.0], (n_sternum, 1)))

    # branches: front half of a curved tube, right side then mirrored
    for side_code, mirror in ((1, 1.0), (2, -1.0)):
        for idx, level in enumerate(LEVELS):
            length = params.branch_lengths[idx]
            n_branch = max(int(round(params.point_density * length * np.pi * params.tube_radius)), 1)
            t = rng.uniform(0.0, length, size=n_branch)
            psi = rng.uniform(-np.pi / 2, np.pi / 2, size=n_branch)
            radial = params.tube_radius + rng.uniform(
                -params.surface_thickness / 2, params.surface_thickness / 2, size=n_branch)
            center, tangent = _branch_centerline(params, level, t)
            side_dir, front_dir = _tube_frames(tangent)
            normal = np.sin(psi)[:, None] * side_dir + np.cos(psi)[:, None] * front_dir
            pts = center + radial[:, None] * normal
            pts[:, 0] *= mirror
            normal = normal.copy()
            normal[:, 0] *= mirror
            pts_parts.append(pts)
            lbl_parts.append(np.full(n_branch, branch_label(side_code, level), dtype=np.int64))
            nrm_parts.append(normal)

    points = np.vstack(pts_parts)
    labels = np.concatenate(lbl_parts)
    normals = np.vstack(nrm_parts)

    skeleton, skeleton_parts = _ideal_skeleton(params)
    waypoints, wp_sides, wp_spaces = _ideal_waypoints(params)
    truth = GroundTruth(
        labels=labels,
        corr_ids=np.arange(len(points), dtype=np.int64),
        skeleton=skeleton,
        skeleton_parts=skeleton_parts,
        waypoints=waypoints,
        waypoint_sides=wp_sides,
        waypoint_spaces=wp_spaces,
        normals=normals,
    )
    return PointCloud(points, labels.copy()), truth


def _ideal_skeleton(params: RibcageParams, spacing: float = 2.0) -> tuple[np.ndarray, np.ndarray]:
    """Ideal node positions: the visible surface ridge of each part.

    Branch samples run along the front crest of the tube (what a graph
    fitted to the surface cloud can actually reach), not the buried tube
    axis; the sternum contributes its mid-surface grid. The free tip end
    carries a 4% margin: fitted nodes are catchment means, so they never
    sit on the extreme tip itself.
    """
    samples: list[np.ndarray] = []
    parts: list[np.ndarray] = []
    w, h = params.sternum_width, params.sternum_height
    gx, gy = np.meshgrid(np.linspace(-w / 2 + 3, w / 2 - 3, 5),
                         np.linspace(-h / 2 + 3.5, h / 2 - 3.5, 13))
    grid = np.column_stack([gx.ravel(), gy.ravel(), np.zeros(gx.size)])
    samples.append(grid)
    parts.append(np.full(len(grid), LABEL_STERNUM, dtype=np.int64))
    for side_code, mirror in ((1, 1.0), (2, -1.0)):
        for idx, level in enumerate(LEVELS):
            length = params.branch_lengths[idx]
            t = np.linspace(0.0, 0.96, max(int(length / spacing), 2)) * length
            center, tangent = _branch_centerline(params, level, t)
            _, front = _tube_frames(tangent)
            ridge = center + params.tube_radius * front
            ridge[:, 0] *= mirror
            samples.append(ridge)
            parts.append(np.full(len(ridge), branch_label(side_code, level), dtype=np.int64))
    return np.vstack(samples), np.concatenate(parts)


def _ideal_waypoints(params: RibcageParams) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Midpoints between protocol cluster centers of consecutive levels."""
    centers: dict[tuple[int, int], np.ndarray] = {}
    for side_code, mirror in ((1, 1.0), (2, -1.0)):
        for idx, level in enumerate(LEVELS):
            k = PROTOCOL_CLUSTERS[level]
            length = params.branch_lengths[idx]
            t = (np.arange(k) + 0.5) / k * length
            c, _ = _branch_centerline(params, level, t)
            c = c.copy()
            c[:, 0] *= mirror
            centers[(side_code, level)] = c
    waypoints: list[np.ndarray] = []
    sides: list[int] = []
    spaces: list[int] = []
    for side_code in (1, 2):
        for space, (lo, hi) in enumerate(((2, 3), (3, 4), (4, 5)), start=1):
            a, b = centers[(side_code, lo)], centers[(side_code, hi)]
            m = min(len(a), len(b))
            for i in range(m):
                waypoints.append((a[i] + b[i]) / 2.0)
                sides.append(side_code)
                spaces.append(space)
    return np.vstack(waypoints), np.asarray(sides, dtype=np.int64), np.asarray(spaces, dtype=np.int64)


def us_like(cloud: PointCloud, truth: GroundTruth, rng_seed: int,
            max_facing_deg: float = 60.0, noise_std: float = 0.5) -> tuple[PointCloud, GroundTruth]:
    """Derive an "US-like" cloud: keep only points whose surface normal
    faces the probe (within max_facing_deg of +z) and add isotropic noise.

    Correspondence ids are preserved, so the result stays traceable to
    the source cloud.
    """
    keep = truth.normals[:, 2] >= np.cos(np.radians(max_facing_deg))
    rng = np.random.default_rng(rng_seed)
    sub_truth = truth.select(keep)
    pts = cloud.points[keep] + rng.normal(scale=noise_std, size=(int(keep.sum()), 3))
    labels = None if cloud.labels is None else cloud.labels[keep]
    return PointCloud(pts, labels), sub_truth


# --- deformation fields ----------------------------------------------------

@dataclass(frozen=True)
class RigidField:
    """Whole-cloud rigid motion; apply() is exactly R p + t."""

    transform: RigidTransform

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.transform.apply(points)

    def displace(self, points: np.ndarray) -> np.ndarray:
        return self.apply(points) - np.asarray(points, dtype=np.float64)


@dataclass(frozen=True)
class AffineShearField:
    """Mild affine distortion p -> (I + S) p + offset."""

    shear: np.ndarray   # (3, 3), added to the identity
    offset: np.ndarray  # (3,)

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ (np.eye(3) + np.asarray(self.shear, dtype=np.float64)).T + np.asarray(self.offset, dtype=np.float64)

    def displace(self, points: np.ndarray) -> np.ndarray:
        return self.apply(points) - np.asarray(points, dtype=np.float64)


@dataclass(frozen=True)
class SmoothBumpField:
    """Sum of Gaussian displacement bumps; C1 and bounded by construction.

    The per-bump amplitude vectors satisfy sum(|a_k|) == amplitude, so the
    total displacement can never exceed the declared amplitude.
    """

    centers: np.ndarray        # (K, 3)
    amplitudes: np.ndarray     # (K, 3) displacement vectors
    length_scales: np.ndarray  # (K,) Gaussian sigma, mm
    amplitude: float           # declared bound on |displacement|

    def __post_init__(self) -> None:
        total = float(np.linalg.norm(self.amplitudes, axis=1).sum())
        if total > self.amplitude + 1e-9:
            raise ValueError("bump amplitudes exceed the declared bound")

    def displace(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        disp = np.zeros_like(pts)
        for c, a, s in zip(self.centers, self.amplitudes, self.length_scales):
            d2 = ((pts - c) ** 2).sum(axis=1)
            disp += np.exp(-d2 / (2.0 * s**2))[:, None] * a
        return disp.reshape(np.shape(points))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) + self.displace(points)


DeformationField = RigidField | AffineShearField | SmoothBumpField


def random_bump_field(bbox_lo: np.ndarray, bbox_hi: np.ndarray, amplitude: float,
                      rng_seed: int, n_bumps: int = 4,
                      scale_range: tuple[float, float] = (18.0, 35.0)) -> SmoothBumpField:
    """Random smooth-bump field over a bounding box, bound = amplitude.

    Length scales are kept well below the box extent so the field is
    genuinely non-rigid: nearby regions move differently instead of the
    whole cloud translating together.
    """
    rng = np.random.default_rng(rng_seed)
    centers = rng.uniform(bbox_lo, bbox_hi, size=(n_bumps, 3))
    dirs = rng.normal(size=(n_bumps, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    weights = rng.uniform(0.5, 1.0, size=n_bumps)
    weights *= amplitude / weights.sum()
    return SmoothBumpField(
        centers=centers,
        amplitudes=dirs * weights[:, None],
        length_scales=rng.uniform(*scale_range, size=n_bumps),
        amplitude=amplitude,
    )


def apply_deformation(cloud: PointCloud, truth: GroundTruth,
                      field: DeformationField) -> tuple[PointCloud, GroundTruth]:
    """Deform a cloud and its ground truth together.

    Labels and correspondence ids are untouched; skeleton samples and
    ideal waypoints move with the field so they remain valid oracles.
    """
    new_points = field.apply(cloud.points)
    if isinstance(field, SmoothBumpField):
        moved = np.linalg.norm(new_points - cloud.points, axis=1)
        assert moved.max() <= field.amplitude + 1e-9, "bump displacement exceeded declared bound"
    normals = truth.normals
    if isinstance(field, RigidField):
        normals = normals @ field.transform.rotation.T
    new_truth = replace(
        truth,
        skeleton=field.apply(truth.skeleton),
        waypoints=field.apply(truth.waypoints),
        normals=normals,
        labels=truth.labels.copy(),
        corr_ids=truth.corr_ids.copy(),
    )
    labels = None if cloud.labels is None else cloud.labels.copy()
    return PointCloud(new_points, labels), new_truth


# --- ground-truth sidecar --------------------------------------------------

def save_ground_truth(truth: GroundTruth, path) -> None:
    """Sidecar CSV: one row per point with index, correspondence id, label."""
    lines = ["index,corr_id,label"]
    lines += [f"{i},{int(c)},{int(l)}" for i, (c, l) in enumerate(zip(truth.corr_ids, truth.labels))]
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def load_ground_truth(path) -> tuple[np.ndarray, np.ndarray]:
    """Read a sidecar; returns (corr_ids, labels) ordered by point index."""
    with open(path, "r", encoding="ascii") as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if not lines or lines[0].strip().lower() != "index,corr_id,label":
        raise ParseError(f"{path}: expected header 'index,corr_id,label'")
    corr = np.empty(len(lines) - 1, dtype=np.int64)
    labels = np.empty(len(lines) - 1, dtype=np.int64)
    for ln, raw in enumerate(lines[1:], start=2):
        try:
            idx_s, corr_s, lbl_s = raw.split(",")
            idx = int(idx_s)
            corr[idx] = int(corr_s)
            labels[idx] = int(lbl_s)
        except (ValueError, IndexError):
            raise ParseError(f"{path}:{ln}: malformed ground-truth row '{raw}'") from None
    return corr, labels
