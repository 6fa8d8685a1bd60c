"""Foundational geometry types and numerics shared by every pipeline stage.

All coordinates are millimetres. Point clouds are (N, 3) float64 arrays
wrapped together with optional integer part labels; rigid transforms are
kept as an explicit rotation/translation pair so properness (det = +1)
can be validated once at construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateGeometryError

# Part label codes (also the on-disk encoding, see io module):
#   0 = sternum, 10*side + level for cartilage (side 1/2, level 2..5),
#   255 = unassigned.
LABEL_STERNUM = 0
LABEL_UNASSIGNED = 255
SIDES = (1, 2)
LEVELS = (2, 3, 4, 5)


def branch_label(side: int, level: int) -> int:
    """Label code for a cartilage branch."""
    if side not in SIDES or level not in LEVELS:
        raise ValueError(f"invalid branch (side={side}, level={level})")
    return 10 * side + level


def is_branch_label(code: int) -> bool:
    return code != LABEL_STERNUM and code != LABEL_UNASSIGNED and (code // 10) in SIDES and (code % 10) in LEVELS


def branch_side_level(code: int) -> tuple[int, int]:
    """Inverse of branch_label."""
    if not is_branch_label(code):
        raise ValueError(f"label {code} is not a cartilage branch code")
    return code // 10, code % 10


ALL_BRANCH_LABELS = tuple(branch_label(s, lv) for s in SIDES for lv in LEVELS)


def _as_points(points, name: str = "points") -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"{name} must have shape (N, 3), got {pts.shape}")
    return pts


@dataclass
class PointCloud:
    """Labeled 3D point set.

    points: (N, 3) float64, mm. labels: optional (N,) int array of part
    codes. Construction allows N = 0 so degenerate inputs can be handed
    to operations that reject them explicitly.
    """

    points: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.points = _as_points(self.points)
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point coordinates must be finite")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.points),):
                raise ValueError(
                    f"labels must have one entry per point: {self.labels.shape} vs {len(self.points)} points"
                )

    def __len__(self) -> int:
        return len(self.points)

    def select(self, mask_or_index) -> "PointCloud":
        """Sub-cloud by boolean mask or index array; labels follow."""
        labels = None if self.labels is None else self.labels[mask_or_index]
        return PointCloud(self.points[mask_or_index], labels)

    def transformed(self, transform: "RigidTransform") -> "PointCloud":
        return PointCloud(transform.apply(self.points), None if self.labels is None else self.labels.copy())


@dataclass(frozen=True)
class RigidTransform:
    """Proper rigid transform p -> rotation @ p + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    _ORTHO_TOL = 1e-9

    def __post_init__(self) -> None:
        rot = np.asarray(self.rotation, dtype=np.float64)
        tra = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if rot.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {rot.shape}")
        if np.max(np.abs(rot.T @ rot - np.eye(3))) > self._ORTHO_TOL:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(rot) - 1.0) > self._ORTHO_TOL:
            raise ValueError("rotation must be proper (det +1)")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", tra)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Apply to one point (3,) or a stack (N, 3)."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def compose(self, inner: "RigidTransform") -> "RigidTransform":
        """self ∘ inner: apply `inner` first, then self."""
        return RigidTransform(self.rotation @ inner.rotation,
                              self.rotation @ inner.translation + self.translation)

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.rotation.T, -(self.rotation.T @ self.translation))

    def matrix(self) -> np.ndarray:
        """4x4 homogeneous form."""
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def rotation_angle_deg(self) -> float:
        """Geodesic rotation angle."""
        c = (np.trace(self.rotation) - 1.0) / 2.0
        return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


@dataclass(frozen=True)
class Basis3:
    """Orthonormal frame: origin plus three axes (rows) ordered by
    descending explained variance."""

    origin: np.ndarray
    axes: np.ndarray

    def __post_init__(self) -> None:
        origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        axes = np.asarray(self.axes, dtype=np.float64)
        if axes.shape != (3, 3):
            raise ValueError(f"axes must be 3x3, got {axes.shape}")
        gram = axes @ axes.T
        if np.max(np.abs(gram - np.eye(3))) > 1e-9:
            raise ValueError("axes must be orthonormal")
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "axes", axes)

    def to_local(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.origin) @ self.axes.T

    def to_world(self, local: np.ndarray) -> np.ndarray:
        return np.asarray(local, dtype=np.float64) @ self.axes + self.origin


def pca_axes(cloud: PointCloud) -> Basis3:
    """Principal axes of a cloud, ordered by descending eigenvalue.

    Each axis is sign-fixed so its largest-magnitude component is
    positive, which makes the output deterministic. Raises
    DegenerateGeometryError when the two smallest eigenvalues coincide
    (relative to the largest) and the third direction is ambiguous.
    """
    pts = cloud.points
    if len(pts) < 2:
        raise DegenerateGeometryError("need at least 2 points for principal axes")
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    cov = centered.T @ centered / len(pts)
    evals, evecs = np.linalg.eigh(cov)  # ascending
    evals = evals[::-1]
    axes = evecs[:, ::-1].T  # rows, descending variance
    if evals[1] - evals[2] <= 1e-12 * max(evals[0], 1e-300):
        raise DegenerateGeometryError(
            f"two smallest covariance eigenvalues coincide ({evals[1]:.3e}, {evals[2]:.3e}); "
            "third principal direction is ambiguous"
        )
    for i in range(3):
        k = int(np.argmax(np.abs(axes[i])))
        if axes[i, k] < 0:
            axes[i] = -axes[i]
    return Basis3(centroid, axes)


def kmeans_cluster(points: np.ndarray, k: int, seeds: np.ndarray,
                   max_iter: int = 100, tol: float = 1e-9) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd's k-means from explicit seed centers; fully deterministic.

    Ties in point-to-center distance go to the lowest center index. An
    empty cluster is re-seeded to the point farthest from its currently
    assigned center (processed in ascending cluster index; each point is
    used for at most one re-seed per iteration). The total within-cluster
    squared distance is asserted non-increasing across iterations.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or len(pts) == 0:
        raise ValueError("points must be a non-empty (N, D) array")
    centers = np.array(seeds, dtype=np.float64, copy=True)
    if k < 1 or centers.shape != (k, pts.shape[1]):
        raise ValueError(f"seeds must have shape ({k}, {pts.shape[1]})")

    prev_sse = np.inf
    labels = np.zeros(len(pts), dtype=np.int64)
    for _ in range(max_iter):
        d2 = ((pts[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        labels = np.argmin(d2, axis=1)  # argmin takes the lowest index on ties

        counts = np.bincount(labels, minlength=k)
        if np.any(counts == 0):
            assigned_d2 = d2[np.arange(len(pts)), labels]
            taken: set[int] = set()
            for ci in np.flatnonzero(counts == 0):
                order = np.argsort(-assigned_d2, kind="stable")
                far = next(int(i) for i in order if int(i) not in taken)
                taken.add(far)
                centers[ci] = pts[far]
                labels[far] = ci
                assigned_d2[far] = 0.0
            counts = np.bincount(labels, minlength=k)

        new_centers = np.vstack([
            pts[labels == ci].mean(axis=0) if counts[ci] else centers[ci] for ci in range(k)
        ])
        sse = float(((pts - new_centers[labels]) ** 2).sum())
        assert sse <= prev_sse * (1 + 1e-12) + 1e-12, "k-means objective increased"
        prev_sse = sse
        shift = float(np.max(np.linalg.norm(new_centers - centers, axis=1)))
        centers = new_centers
        if shift < tol:
            break
    return labels, centers


def hausdorff(a: PointCloud, b: PointCloud) -> float:
    """Symmetric Hausdorff distance between two clouds, exact.

    max(max_x min_y |x-y|, max_y min_x |x-y|) over all points; nearest
    neighbours are found with a KD-tree, whose distances are bit-identical
    to the naive double loop.
    """
    if len(a) == 0 or len(b) == 0:
        raise ValueError("hausdorff requires two non-empty clouds")
    d_ab, _ = cKDTree(b.points).query(a.points)
    d_ba, _ = cKDTree(a.points).query(b.points)
    return float(max(d_ab.max(), d_ba.max()))


def kabsch_fit(source: np.ndarray, target: np.ndarray) -> RigidTransform:
    """Least-squares rigid transform mapping paired source points onto
    target points (SVD solution, reflection corrected to det +1).

    Raises DegenerateGeometryError when the source points are collinear
    or coincident, which leaves the rotation underdetermined.
    """
    src = _as_points(source, "source")
    dst = _as_points(target, "target")
    if src.shape != dst.shape:
        raise ValueError(f"paired point lists must match: {src.shape} vs {dst.shape}")
    if len(src) < 3:
        raise ValueError("need at least 3 point pairs")

    c_src = src.mean(axis=0)
    c_dst = dst.mean(axis=0)
    src_c = src - c_src

    spread = np.linalg.svd(src_c, compute_uv=False)
    if spread[1] <= 1e-9 * max(spread[0], 1e-300) or spread[0] == 0.0:
        raise DegenerateGeometryError("source points are collinear or coincident")

    u, _, vt = np.linalg.svd(src_c.T @ (dst - c_dst))
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidTransform(rot, c_dst - rot @ c_src)


def pair_rmsd(transform: RigidTransform, source: np.ndarray, target: np.ndarray) -> float:
    """Root-mean-square paired distance after applying the transform."""
    moved = transform.apply(np.asarray(source, dtype=np.float64))
    return float(np.sqrt(np.mean(np.sum((moved - np.asarray(target)) ** 2, axis=1))))
