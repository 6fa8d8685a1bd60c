"""Coarse alignment: find the sternum in a 2D front-view raster, segment
the cartilage branches beside it, and derive the initial rigid transform
between two clouds.

The front view is the plane normal to the third principal axis. The
sternum is located by exhaustively matching rotated rectangle masks over
the binary raster, first at a coarse pixel size and then refined twice at
finer scales over narrower rotation ranges. Branches are segmented by
clustering the set pixels just outside the sternum boundaries and flood
filling from the cluster centers with the sternum masked out.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np
from scipy.signal import correlate2d

from .core import Basis3, PointCloud, RigidTransform, LABEL_STERNUM, LABEL_UNASSIGNED, branch_label, pca_axes
from .errors import BoundaryNotFoundError, OrientationError, SegmentationError

DEFAULT_RECT = (30.0, 90.0)  # sternum template, mm (width, height)


def template_diagonal(rect: tuple[float, float] = DEFAULT_RECT) -> float:
    return float(np.hypot(*rect))


def normalize_angle_deg(angle: float) -> float:
    """Fold an angle into [-90, 90); rectangle masks repeat every 180 deg."""
    return float((angle + 90.0) % 180.0 - 90.0)


@dataclass(frozen=True)
class FeaturePlane:
    """2D front-view coordinates plus signed depth for every point.

    The basis is right-handed with the third axis pointing toward the
    viewer (the majority of depths is non-negative), so transfers between
    two planes stay proper rigid.
    """

    basis: Basis3
    points2d: np.ndarray  # (N, 2) mm
    depths: np.ndarray    # (N,) mm

    def reconstruct(self) -> np.ndarray:
        local = np.column_stack([self.points2d, self.depths])
        return self.basis.to_world(local)


def project_to_feature_plane(cloud: PointCloud) -> FeaturePlane:
    """Project a cloud onto its first two principal axes.

    The third-axis sign is chosen so most depths are positive ("front"
    faces the +normal); the second axis is flipped if needed to keep the
    basis right-handed.
    """
    basis = pca_axes(cloud)
    axes = basis.axes.copy()
    centered = cloud.points - basis.origin
    depths = centered @ axes[2]
    if np.sum(depths > 0) < np.sum(depths < 0):
        axes[2] = -axes[2]
        depths = -depths
    if np.linalg.det(axes) < 0:
        axes[1] = -axes[1]
    points2d = centered @ axes[:2].T
    return FeaturePlane(Basis3(basis.origin, axes), points2d, depths)


@dataclass(frozen=True)
class BinaryImage:
    """Occupancy raster of a feature plane: a pixel is set iff at least
    one projected point falls inside it."""

    bits: np.ndarray      # (H, W) bool
    scale: float          # mm per pixel
    origin2d: np.ndarray  # (2,) mm position of pixel (0, 0)'s corner

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    def pixel_of(self, uv: np.ndarray) -> np.ndarray:
        """(col, row) indices of the pixels containing the given mm coords."""
        return np.floor((np.atleast_2d(uv) - self.origin2d) / self.scale).astype(np.int64)

    def set_pixel_centers(self) -> np.ndarray:
        """(K, 2) mm coordinates of the centers of all set pixels."""
        rows, cols = np.nonzero(self.bits)
        return self.origin2d + (np.column_stack([cols, rows]) + 0.5) * self.scale


def rasterize(plane: FeaturePlane, scale: float, pad_mm: float | None = None) -> BinaryImage:
    """Raster the 2D projection at the given pixel size.

    The bounding box is padded on every side by one template diagonal so
    a mask can slide fully past the anatomy.
    """
    if scale <= 0:
        raise ValueError("scale must be positive")
    pad = template_diagonal() if pad_mm is None else pad_mm
    lo = plane.points2d.min(axis=0) - pad
    hi = plane.points2d.max(axis=0) + pad
    origin = lo
    size = np.floor((hi - origin) / scale).astype(np.int64) + 1
    bits = np.zeros((int(size[1]), int(size[0])), dtype=bool)
    idx = np.floor((plane.points2d - origin) / scale).astype(np.int64)
    bits[idx[:, 1], idx[:, 0]] = True
    return BinaryImage(bits, float(scale), origin.astype(np.float64))


@dataclass(frozen=True)
class RotatedMask:
    """Square 0/1 kernel containing a rectangle rotated by angle_deg."""

    angle_deg: float
    bits: np.ndarray  # (m, m) uint8


def make_rotated_masks(rect: tuple[float, float], scale: float,
                       angles_deg) -> list[RotatedMask]:
    """Rectangle kernels at the requested rotations.

    The kernel edge is m = ceil(max(w, h) / scale) pixels; a kernel pixel
    is set iff its center lies inside the rectangle rotated CCW about the
    kernel center.
    """
    w, h = rect
    m = int(np.ceil(max(w, h) / scale))
    centers = (np.arange(m) + 0.5) * scale - m * scale / 2.0
    du, dv = np.meshgrid(centers, centers)  # dv varies along rows
    masks = []
    for angle in angles_deg:
        rad = np.radians(angle)
        local_u = np.cos(rad) * du + np.sin(rad) * dv
        local_v = -np.sin(rad) * du + np.cos(rad) * dv
        inside = (np.abs(local_u) <= w / 2.0) & (np.abs(local_v) <= h / 2.0)
        masks.append(RotatedMask(float(angle), inside.astype(np.uint8)))
    return masks


@dataclass(frozen=True)
class SternumPose:
    """Detected sternum rectangle on the feature plane."""

    center2d: np.ndarray  # (2,) mm
    angle_deg: float      # CCW, normalized to [-90, 90)
    score: int            # matched set-pixel count
    rect: tuple[float, float]

    def short_axis(self) -> np.ndarray:
        rad = np.radians(self.angle_deg)
        return np.array([np.cos(rad), np.sin(rad)])

    def long_axis(self) -> np.ndarray:
        rad = np.radians(self.angle_deg)
        return np.array([-np.sin(rad), np.cos(rad)])

    def to_dict(self) -> dict:
        return {"center2d": [float(v) for v in self.center2d],
                "angle_deg": self.angle_deg, "score": self.score,
                "rect": list(self.rect)}


def _mask_sort_key(mask: RotatedMask) -> tuple[float, float]:
    a = normalize_angle_deg(mask.angle_deg)
    return (abs(a), a)


def _best_placement(score_map: np.ndarray, col0: int, row0: int) -> tuple[int, int, int]:
    """Max score and its placement, ties to lowest column then lowest row."""
    best = int(score_map.max())
    rows, cols = np.nonzero(score_map == best)
    order = np.lexsort((rows, cols))
    return best, col0 + int(cols[order[0]]), row0 + int(rows[order[0]])


def match_template(image: BinaryImage, masks: list[RotatedMask],
                   rect: tuple[float, float] = DEFAULT_RECT) -> SternumPose:
    """Exhaustive overlap search over every placement of every mask.

    Ties are broken by lower angle magnitude, then lower x (column), then
    lower y (row) of the kernel's top-left corner.
    """
    if not image.bits.any():
        raise ValueError("cannot match template on an all-zero image")
    img = image.bits.astype(np.int64)
    best: tuple[int, int, int, RotatedMask] | None = None
    for mask in sorted(masks, key=_mask_sort_key):
        score_map = correlate2d(img, mask.bits.astype(np.int64), mode="valid")
        score, col, row = _best_placement(score_map, 0, 0)
        if best is None or score > best[0]:
            best = (score, col, row, mask)
    score, col, row, mask = best
    m = mask.bits.shape[0]
    center = image.origin2d + (np.array([col, row]) + m / 2.0) * image.scale
    return SternumPose(center, normalize_angle_deg(mask.angle_deg), score, rect)


def _windowed_match(image: BinaryImage, masks: list[RotatedMask], center: np.ndarray,
                    window_mm: float, rect: tuple[float, float]) -> SternumPose:
    """Same search restricted to placements whose center lies within a
    square window; scores come from direct patch sums."""
    img = image.bits.astype(np.int64)
    best: tuple[int, int, int, RotatedMask] | None = None
    for mask in sorted(masks, key=_mask_sort_key):
        kernel = mask.bits.astype(np.int64)
        m = kernel.shape[0]
        lo = np.ceil((center - window_mm - image.origin2d) / image.scale - m / 2.0).astype(int)
        hi = np.floor((center + window_mm - image.origin2d) / image.scale - m / 2.0).astype(int)
        col_lo, row_lo = np.maximum(lo, 0)
        col_hi = min(int(hi[0]), image.width - m)
        row_hi = min(int(hi[1]), image.height - m)
        if col_hi < col_lo or row_hi < row_lo:
            continue
        score_map = np.empty((row_hi - row_lo + 1, col_hi - col_lo + 1), dtype=np.int64)
        for r in range(row_lo, row_hi + 1):
            for c in range(col_lo, col_hi + 1):
                score_map[r - row_lo, c - col_lo] = int(np.sum(kernel * img[r:r + m, c:c + m]))
        score, col, row = _best_placement(score_map, col_lo, row_lo)
        if best is None or score > best[0]:
            best = (score, col, row, mask)
    if best is None:
        raise ValueError("refinement window does not intersect the image")
    score, col, row, mask = best
    m = mask.bits.shape[0]
    new_center = image.origin2d + (np.array([col, row]) + m / 2.0) * image.scale
    return SternumPose(new_center, normalize_angle_deg(mask.angle_deg), score, rect)


REFINEMENT_PASSES = ((3.0, 15.0, 2.0), (2.0, 7.0, 1.0))  # (mm/px, range, step)


def refine_sternum(plane: FeaturePlane, initial: SternumPose,
                   passes=REFINEMENT_PASSES, window_px: float = 2.0,
                   pad_mm: float | None = None) -> SternumPose:
    """Multi-scale refinement of a coarse sternum pose.

    Each pass re-rasters at a finer pixel size, searches rotations in a
    band around the previous angle, and restricts placements to within
    window_px previous-scale pixels of the previous center.
    """
    pose = initial
    prev_scale = 5.0
    for scale, ang_range, ang_step in passes:
        image = rasterize(plane, scale, pad_mm)
        offsets = np.arange(-ang_range, ang_range + ang_step / 2, ang_step)
        masks = make_rotated_masks(pose.rect, scale, [pose.angle_deg + off for off in offsets])
        pose = _windowed_match(image, masks, pose.center2d, window_px * prev_scale, pose.rect)
        prev_scale = scale
    return pose


def _line_overlap(image: BinaryImage, pose: SternumPose, offset_mm: float) -> int:
    """Set pixels crossed by the long-axis centerline shifted sideways."""
    t = np.arange(-pose.rect[1] / 2, pose.rect[1] / 2 + 1e-9, image.scale / 4.0)
    pts = (pose.center2d + offset_mm * pose.short_axis()) + t[:, None] * pose.long_axis()
    idx = np.unique(image.pixel_of(pts), axis=0)
    inside = (idx[:, 0] >= 0) & (idx[:, 0] < image.width) & (idx[:, 1] >= 0) & (idx[:, 1] < image.height)
    idx = idx[inside]
    return int(image.bits[idx[:, 1], idx[:, 0]].sum())


def find_sternum_boundaries(image: BinaryImage, pose: SternumPose,
                            drop_ratio: float = 0.5) -> tuple[float, float]:
    """Sweep the centerline sideways until its overlap with the raster
    collapses; returns (left, right) signed offsets in mm.

    The drop is detected at whole-pixel steps; the boundary is reported
    half a step back from the first low-overlap line, which keeps the
    result within one pixel of the true edge regardless of how the pixel
    grid is phased against the rectangle.
    """
    center_overlap = _line_overlap(image, pose, 0.0)
    if center_overlap == 0:
        raise BoundaryNotFoundError("centerline does not intersect any set pixels")
    limit = 1.5 * pose.rect[0]
    offsets: list[float] = []
    for direction in (-1.0, 1.0):
        found = None
        step = 1
        while step * image.scale <= limit:
            off = direction * step * image.scale
            if _line_overlap(image, pose, off) < drop_ratio * center_overlap:
                found = off - direction * image.scale / 2.0
                break
            step += 1
        if found is None:
            raise BoundaryNotFoundError(
                f"no overlap drop within {limit:.0f} mm on the "
                f"{'left' if direction < 0 else 'right'} side")
        offsets.append(found)
    return offsets[0], offsets[1]


def flood_fill(bits: np.ndarray, blocked: np.ndarray, seed: tuple[int, int]) -> np.ndarray:
    """4-connected flood fill over set, unblocked pixels.

    seed is (col, row). Raises SegmentationError when the seed is not a
    fillable pixel (unset, or inside the blocked region).
    """
    h, w = bits.shape
    col, row = seed
    if not (0 <= col < w and 0 <= row < h) or not bits[row, col] or blocked[row, col]:
        raise SegmentationError(f"flood-fill seed ({col}, {row}) is not a fillable pixel")
    visited = np.zeros_like(bits)
    visited[row, col] = True
    queue = deque([(col, row)])
    out = []
    while queue:
        c, r = queue.popleft()
        out.append((c, r))
        for dc, dr in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            nc, nr = c + dc, r + dr
            if 0 <= nc < w and 0 <= nr < h and bits[nr, nc] and not blocked[nr, nc] and not visited[nr, nc]:
                visited[nr, nc] = True
                queue.append((nc, nr))
    return np.asarray(out, dtype=np.int64)


@dataclass
class SegmentationResult:
    """Per-point part labels plus the sternum boundary geometry."""

    labels: np.ndarray            # (N,) label codes, aligned with the cloud
    boundary_left: float          # signed mm offset from the sternum center
    boundary_right: float
    pose: SternumPose
    branch_pixels: dict[int, np.ndarray]  # label -> (K, 2) set-pixel centers, mm
    levels_ascending: bool        # level number grows along +long-axis

    def to_dict(self) -> dict:
        counts = {int(code): int(np.sum(self.labels == code)) for code in np.unique(self.labels)}
        return {"boundary_left": self.boundary_left, "boundary_right": self.boundary_right,
                "pose": self.pose.to_dict(), "levels_ascending": self.levels_ascending,
                "label_counts": counts}


def _kasa_radius(xy: np.ndarray) -> float:
    a = np.column_stack([2 * xy[:, 0], 2 * xy[:, 1], np.ones(len(xy))])
    sol, *_ = np.linalg.lstsq(a, (xy ** 2).sum(axis=1), rcond=None)
    return float(np.sqrt(max(sol[2] + sol[0] ** 2 + sol[1] ** 2, 0.0)))


def branch_curvature_radius(pixels_mm: np.ndarray, n_bins: int = 10) -> float:
    """Circle-fit radius of a branch from its pixel centers.

    Fitting raw pixels is biased by the band width, so the fit goes
    through centroids of bins taken along the branch's dominant axis.
    """
    c = pixels_mm - pixels_mm.mean(axis=0)
    _, vecs = np.linalg.eigh(c.T @ c)
    order = np.argsort(c @ vecs[:, -1], kind="stable")
    chunks = [chunk for chunk in np.array_split(order, n_bins) if len(chunk)]
    centroids = np.vstack([pixels_mm[chunk].mean(axis=0) for chunk in chunks])
    return _kasa_radius(centroids)


def segment_cartilage(plane: FeaturePlane, image: BinaryImage, pose: SternumPose,
                      boundaries: tuple[float, float], band_mm: float = 10.0) -> SegmentationResult:
    """Segment the eight cartilage branches around a located sternum.

    Pixels within band_mm outside each boundary are k-means clustered
    into four groups seeded uniformly along the boundary; each cluster
    center seeds a flood fill with the sternum region blocked. Levels are
    numbered along the sternum axis, oriented by the circle-fit curvature
    of the extreme branches (the most curved end is level 5).
    """
    from .core import kmeans_cluster

    left_off, right_off = boundaries
    e_short, e_long = pose.short_axis(), pose.long_axis()
    h = pose.rect[1]

    centers_mm = image.set_pixel_centers()
    rel = centers_mm - pose.center2d
    s_all = rel @ e_short
    t_all = rel @ e_long
    rows, cols = np.nonzero(image.bits)

    # the mask reaches one pixel past each boundary: the drop column can
    # still hold sternum pixels, and a branch fill must never claim them
    sternum_mask = np.zeros_like(image.bits)
    in_sternum = (s_all >= left_off - image.scale) & (s_all <= right_off + image.scale) \
        & (np.abs(t_all) <= h / 2 + image.scale)
    sternum_mask[rows[in_sternum], cols[in_sternum]] = True

    region_pixels: dict[int, np.ndarray] = {}
    side_assign: dict[int, list[tuple[float, np.ndarray]]] = {}
    for boundary, sign, side_name in ((left_off, -1.0, "left"), (right_off, 1.0, "right")):
        band = ~in_sternum & (sign * s_all > sign * boundary) & (sign * s_all <= sign * boundary + band_mm)
        band_centers = centers_mm[band]
        if len(band_centers) < 4:
            raise SegmentationError(f"fewer than 4 cartilage roots on the {side_name} side")
        seeds = pose.center2d + boundary * e_short + \
            ((np.arange(4) + 0.5) / 4.0 * h - h / 2)[:, None] * e_long
        _, cluster_centers = kmeans_cluster(band_centers, 4, seeds)

        claimed = np.zeros_like(image.bits)
        regions: list[np.ndarray] = []
        for cc in cluster_centers:
            d = np.linalg.norm(band_centers - cc, axis=1)
            nearest = band_centers[np.lexsort((band_centers[:, 1], band_centers[:, 0], d))[0]]
            col, row = image.pixel_of(nearest)[0]
            if claimed[row, col]:
                continue
            region = flood_fill(image.bits, sternum_mask | claimed, (int(col), int(row)))
            claimed[region[:, 1], region[:, 0]] = True
            regions.append(region)
        if len(regions) != 4:
            raise SegmentationError(f"only {len(regions)} cartilage branches found on the {side_name} side")
        entries = []
        for region in regions:
            pix_mm = image.origin2d + (region + 0.5) * image.scale
            rel_r = pix_mm - pose.center2d
            s_r = rel_r @ e_short
            t_r = rel_r @ e_long
            near_root = np.abs(s_r - boundary) <= band_mm
            root_t = float(t_r[near_root].mean()) if near_root.any() else float(t_r.mean())
            entries.append((root_t, pix_mm))
        side_assign[int(sign)] = sorted(entries, key=lambda e: e[0])

    # orient levels: the flatter extreme of the root order is level 2
    vote = 0.0
    for entries in side_assign.values():
        vote += branch_curvature_radius(entries[0][1]) - branch_curvature_radius(entries[-1][1])
    levels_ascending = vote >= 0  # radius(first) > radius(last): level grows with t

    # side code 1 lies at +90 deg CCW from the direction of increasing level
    side_of_sign = {1: 2, -1: 1} if levels_ascending else {1: 1, -1: 2}

    for sign, entries in side_assign.items():
        order = entries if levels_ascending else entries[::-1]
        for level, (_, pix_mm) in zip((2, 3, 4, 5), order):
            region_pixels[branch_label(side_of_sign[sign], level)] = pix_mm

    # per-point labels through pixel membership
    label_grid = np.full(image.bits.shape, LABEL_UNASSIGNED, dtype=np.int64)
    for code, pix_mm in region_pixels.items():
        idx = np.floor((pix_mm - image.origin2d) / image.scale).astype(np.int64)
        label_grid[idx[:, 1], idx[:, 0]] = code
    label_grid[sternum_mask] = LABEL_STERNUM
    pt_idx = image.pixel_of(plane.points2d)
    labels = label_grid[pt_idx[:, 1], pt_idx[:, 0]]

    return SegmentationResult(labels, left_off, right_off, pose, region_pixels, levels_ascending)


@dataclass
class CoarseResult:
    """Everything the coarse stage learned about one cloud."""

    plane: FeaturePlane
    image: BinaryImage
    pose: SternumPose
    boundaries: tuple[float, float]
    seg: SegmentationResult

    def level_direction(self) -> np.ndarray:
        """In-plane unit vector along which the level number increases."""
        d = self.pose.long_axis()
        return d if self.seg.levels_ascending else -d


@dataclass(frozen=True)
class CoarseParams:
    rect: tuple[float, float] = DEFAULT_RECT
    coarse_scale: float = 5.0
    coarse_step_deg: float = 10.0
    refinement: tuple = REFINEMENT_PASSES
    window_px: float = 2.0
    drop_ratio: float = 0.5
    band_mm: float = 10.0

    def pad_mm(self) -> float:
        return template_diagonal(self.rect)


def analyze_cloud(cloud: PointCloud, params: CoarseParams = CoarseParams()) -> CoarseResult:
    """Run the full coarse stage on one cloud: project, detect, refine,
    find boundaries, segment."""
    plane = project_to_feature_plane(cloud)
    coarse_img = rasterize(plane, params.coarse_scale, params.pad_mm())
    angles = np.arange(-90.0, 90.0, params.coarse_step_deg)
    masks = make_rotated_masks(params.rect, params.coarse_scale, angles)
    pose = match_template(coarse_img, masks, params.rect)
    pose = refine_sternum(plane, pose, params.refinement, params.window_px, params.pad_mm())
    final_img = rasterize(plane, params.refinement[-1][0], params.pad_mm())
    boundaries = find_sternum_boundaries(final_img, pose, params.drop_ratio)
    seg = segment_cartilage(plane, final_img, pose, boundaries, params.band_mm)
    return CoarseResult(plane, final_img, pose, boundaries, seg)


def coarse_align(ct: CoarseResult, us: CoarseResult,
                 min_direction_agreement: float = 0.25) -> RigidTransform:
    """Initial 3D rigid transform mapping the CT cloud onto the US cloud.

    In-plane: a pure rotation + translation overlaying the sternum
    rectangles, with the 180-degree ambiguity resolved so the level
    directions agree. Depths ride along the plane normals, which keeps
    the composite a proper rigid transform.
    """
    delta = us.pose.angle_deg - ct.pose.angle_deg
    d_ct, d_us = ct.level_direction(), us.level_direction()
    rad = np.radians(delta)
    rot2 = np.array([[np.cos(rad), -np.sin(rad)], [np.sin(rad), np.cos(rad)]])
    agreement = float((rot2 @ d_ct) @ d_us)
    if abs(agreement) < min_direction_agreement:
        raise OrientationError(
            f"level directions are too inconsistent to orient the overlay (dot={agreement:.2f})")
    if agreement < 0:
        rad = np.radians(delta + 180.0)
        rot2 = np.array([[np.cos(rad), -np.sin(rad)], [np.sin(rad), np.cos(rad)]])

    t2 = us.pose.center2d - rot2 @ ct.pose.center2d
    lift = np.eye(3)
    lift[:2, :2] = rot2
    a_ct, a_us = ct.plane.basis.axes, us.plane.basis.axes
    rot3 = a_us.T @ lift @ a_ct
    t3 = us.plane.basis.origin + a_us.T @ np.array([t2[0], t2[1], 0.0]) - rot3 @ ct.plane.basis.origin
    return RigidTransform(rot3, t3)
