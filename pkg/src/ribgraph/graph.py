"""Skeleton graph template and its self-organizing-map fitting.

The template is a 245-node graph: a regular grid over the detected
sternum rectangle plus, per cartilage branch, two parallel rails of
chain nodes joined by rungs. Fitting moves nodes toward cloud samples;
the update neighbourhood is defined by geodesic hop distance on the
graph, so nodes of different branches never drag each other even when
they are close in space. Rungs of the two lowest branches are directed
(lower rail toward upper rail) during the first epochs, which lets the
strongly curved branches pull nodes down but never up.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components, shortest_path

from .coarse import CoarseResult
from .core import LABEL_STERNUM, branch_label, branch_side_level, is_branch_label
from .errors import ConfigError

NODE_TOTAL = 245
DIRECTED_RUNG_LEVELS = (4, 5)


@dataclass(frozen=True)
class TemplateLayout:
    """Node-count allocation; must total exactly 245.

    Chain lengths are per rail per level (2..5); each branch has two
    rails, each side has four branches.
    """

    sternum_rows: int = 13
    sternum_cols: int = 5
    chain_nodes: tuple[int, int, int, int] = (10, 11, 12, 12)

    def __post_init__(self) -> None:
        total = self.total()
        if total != NODE_TOTAL:
            raise ConfigError(
                f"node allocation must total {NODE_TOTAL}, got {total} "
                f"({self.sternum_rows}x{self.sternum_cols} grid + 2 sides x 2 rails x {self.chain_nodes})")
        if min(self.chain_nodes) < 2:
            raise ConfigError("each rail needs at least 2 chain nodes")

    def total(self) -> int:
        return self.sternum_rows * self.sternum_cols + 4 * sum(self.chain_nodes)


@dataclass
class SkeletonGraph:
    """Numbered nodes with positions, part codes and (optionally
    directed) edges. Node numbering is positional identity: fitting only
    ever rewrites positions."""

    positions: np.ndarray  # (N, 3) mm
    parts: np.ndarray      # (N,) part codes
    edges: np.ndarray      # (E, 3) int: from, to, directed flag
    geodesic_cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.parts = np.asarray(self.parts, dtype=np.int64)
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 3)

    @property
    def n_nodes(self) -> int:
        return len(self.positions)

    def with_positions(self, positions: np.ndarray) -> "SkeletonGraph":
        """Same topology (and shared geodesic cache), new node positions."""
        return replace(self, positions=np.asarray(positions, dtype=np.float64))

    def adjacency(self, respect_directions: bool) -> csr_matrix:
        a, b, directed = self.edges[:, 0], self.edges[:, 1], self.edges[:, 2].astype(bool)
        rows = np.concatenate([a, b[~directed] if respect_directions else b])
        cols = np.concatenate([b, a[~directed] if respect_directions else a])
        data = np.ones(len(rows), dtype=np.int8)
        return csr_matrix((data, (rows, cols)), shape=(self.n_nodes, self.n_nodes))

    def is_connected(self) -> bool:
        n, _ = connected_components(self.adjacency(respect_directions=False), directed=False)
        return n == 1


def geodesic_distances(graph: SkeletonGraph, respect_directions: bool) -> np.ndarray:
    """All-pairs shortest-path hop counts; +inf for unreachable pairs.

    Row i holds distances from node i following edge directions (when
    respected), i.e. entry [i, j] is the hop count from i out to j.
    """
    key = bool(respect_directions)
    if key not in graph.geodesic_cache:
        graph.geodesic_cache[key] = shortest_path(
            graph.adjacency(key), method="D", directed=key, unweighted=True)
    return graph.geodesic_cache[key]


def _branch_chain_bins(pixels_mm: np.ndarray, origin: np.ndarray, scale: float,
                       root_anchor: np.ndarray, n_bins: int) -> list[np.ndarray]:
    """Split branch pixels into bins ordered along the branch.

    Ordering comes from BFS hop distance over the branch's own pixel
    grid, started at the pixel nearest the sternum boundary, so it stays
    monotone along arbitrarily curved branches.
    """
    idx = np.floor((pixels_mm - origin) / scale).astype(np.int64)
    key_of = {(int(c), int(r)): k for k, (c, r) in enumerate(idx)}
    d_root = np.linalg.norm(pixels_mm - root_anchor, axis=1)
    start = int(np.lexsort((idx[:, 1], idx[:, 0], d_root))[0])
    hops = np.full(len(idx), np.inf)
    hops[start] = 0
    frontier = [start]
    level = 0
    while frontier:
        level += 1
        nxt = []
        for k in frontier:
            c, r = idx[k]
            for dc, dr in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                j = key_of.get((int(c + dc), int(r + dr)))
                if j is not None and hops[j] == np.inf:
                    hops[j] = level
                    nxt.append(j)
        frontier = nxt
    hops[np.isinf(hops)] = hops[np.isfinite(hops)].max() + 1  # stray pixels go to the tip
    order = np.lexsort((idx[:, 1], idx[:, 0], hops))
    return [chunk for chunk in np.array_split(order, n_bins) if len(chunk)]


def build_template_graph(coarse: CoarseResult,
                         layout: TemplateLayout = TemplateLayout()) -> SkeletonGraph:
    """Construct the generic template graph from a segmented cloud.

    Sternum nodes form a rows x cols grid inside the detected rectangle;
    each branch contributes two rails of chain nodes that follow its
    pixel band, joined by rungs. Rungs of levels 4 and 5 are directed
    from the lower rail to the upper one.
    """
    pose = coarse.seg.pose
    plane = coarse.plane
    e_short, e_long = pose.short_axis(), pose.long_axis()
    up2d = -coarse.level_direction()

    def lift(uv: np.ndarray, depth: float) -> np.ndarray:
        local = np.column_stack([uv, np.full(len(uv), depth)])
        return plane.basis.to_world(local)

    positions: list[np.ndarray] = []
    parts: list[int] = []
    edges: list[tuple[int, int, int]] = []

    # sternum grid, row-major; rows run along the long axis
    w, h = pose.rect
    sternum_depth = float(np.mean(plane.depths[coarse.seg.labels == LABEL_STERNUM])) \
        if np.any(coarse.seg.labels == LABEL_STERNUM) else 0.0
    # half-spacing inset: covers the plate out to its corners without
    # parking nodes exactly on the cartilage junction or the rounded rim
    ds = w / (2.0 * layout.sternum_cols)
    dt_ = h / (2.0 * layout.sternum_rows)
    s_vals = np.linspace(-w / 2 + ds, w / 2 - ds, layout.sternum_cols)
    t_vals = np.linspace(-h / 2 + dt_, h / 2 - dt_, layout.sternum_rows)
    grid_idx = {}
    for ri, t in enumerate(t_vals):
        for ci, s in enumerate(s_vals):
            grid_idx[(ri, ci)] = len(positions)
            uv = pose.center2d + s * e_short + t * e_long
            positions.append(lift(uv[None, :], sternum_depth)[0])
            parts.append(LABEL_STERNUM)
    for ri in range(layout.sternum_rows):
        for ci in range(layout.sternum_cols):
            if ci + 1 < layout.sternum_cols:
                edges.append((grid_idx[(ri, ci)], grid_idx[(ri, ci + 1)], 0))
            if ri + 1 < layout.sternum_rows:
                edges.append((grid_idx[(ri, ci)], grid_idx[(ri + 1, ci)], 0))

    grid_pos2d = np.array([pose.center2d + s * e_short + t * e_long
                           for t in t_vals for s in s_vals])
    grid_s = np.array([s for _ in t_vals for s in s_vals])

    point_pixels = coarse.image.pixel_of(plane.points2d)
    for code in sorted(coarse.seg.branch_pixels):
        side, level = branch_side_level(code)
        n_chain = layout.chain_nodes[level - 2]
        pix = coarse.seg.branch_pixels[code]
        rel = pix - pose.center2d
        s_mean = float(np.mean(rel @ e_short))
        boundary = coarse.seg.boundary_right if s_mean > 0 else coarse.seg.boundary_left
        root_anchor = pose.center2d + boundary * e_short + float(np.mean(rel @ e_long)) * e_long
        bins = _branch_chain_bins(pix, coarse.image.origin2d, coarse.image.scale,
                                  root_anchor, n_chain)

        # per-bin depth from the member points of this branch
        own_points = coarse.seg.labels == code
        own_px = point_pixels[own_points]
        own_depth = plane.depths[own_points]
        pix_depth = {}
        for (c, r), d in zip(own_px, own_depth):
            pix_depth.setdefault((int(c), int(r)), []).append(float(d))

        centroids = [pix[b].mean(axis=0) for b in bins]
        upper_nodes, lower_nodes = [], []
        for bi, b in enumerate(bins):
            members = pix[b]
            centroid = centroids[bi]
            tangent = centroids[min(bi + 1, len(bins) - 1)] - centroids[max(bi - 1, 0)]
            norm = np.linalg.norm(tangent)
            tangent = tangent / norm if norm > 0 else e_short
            perp = np.array([-tangent[1], tangent[0]])
            if perp @ up2d < 0:
                perp = -perp
            offsets = (members - centroid) @ perp
            spread = max(float(np.std(offsets)), 0.5)
            member_idx = np.floor((members - coarse.image.origin2d) / coarse.image.scale).astype(np.int64)
            depths = [d for c, r in member_idx for d in pix_depth.get((int(c), int(r)), [])]
            depth = float(np.mean(depths)) if depths else sternum_depth
            for rail, sign in ((upper_nodes, 1.0), (lower_nodes, -1.0)):
                half = members[sign * offsets > 0]
                uv = half.mean(axis=0) if len(half) else centroid + sign * spread * perp
                rail.append(len(positions))
                positions.append(lift(uv[None, :], depth)[0])
                parts.append(code)

        directed = 1 if level in DIRECTED_RUNG_LEVELS else 0
        for rail in (upper_nodes, lower_nodes):
            edges.extend((rail[i], rail[i + 1], 0) for i in range(len(rail) - 1))
        edges.extend((lo, up, directed) for lo, up in zip(lower_nodes, upper_nodes))

        # attach both rail roots to the nearest sternum-edge grid node
        edge_cols = grid_s == (s_vals[-1] if s_mean > 0 else s_vals[0])
        candidates = np.flatnonzero(edge_cols)
        for root in (upper_nodes[0], lower_nodes[0]):
            root2d = plane.basis.to_local(positions[root][None, :])[0, :2]
            d = np.linalg.norm(grid_pos2d[candidates] - root2d, axis=1)
            edges.append((int(candidates[np.argmin(d)]), root, 0))

    graph = SkeletonGraph(np.asarray(positions), np.asarray(parts), np.asarray(edges))
    if graph.n_nodes != layout.total():
        raise ConfigError(f"template produced {graph.n_nodes} nodes, layout promises {layout.total()}")
    if not graph.is_connected():
        raise ConfigError("template graph is not connected (ignoring directions)")
    return graph


# --- self-organizing map -----------------------------------------------------

@dataclass(frozen=True)
class SomSchedule:
    """Two learning phases: a gentle directed phase that drags the
    template roughly into place, then a faster bidirectional phase that
    captures the geometry."""

    phase1_epochs: int = 3
    phase1_lr: float = 0.02
    phase2_epochs: int = 10
    phase2_lr: float = 0.1
    neighborhood_radius: int = 2
    rng_seed: int = 0

    def __post_init__(self) -> None:
        for lr in (self.phase1_lr, self.phase2_lr):
            if not 0.0 < lr <= 1.0:
                raise ConfigError(f"learning rate {lr} outside (0, 1]")
        if self.phase1_epochs < 0 or self.phase2_epochs < 0 or self.neighborhood_radius < 0:
            raise ConfigError("epochs and neighborhood radius must be non-negative")

    @property
    def total_epochs(self) -> int:
        return self.phase1_epochs + self.phase2_epochs

    def radius_at(self, epoch: int) -> int:
        """Neighborhood radius for an epoch: linear decay to 1 by the end."""
        if self.total_epochs <= 1 or self.neighborhood_radius <= 1:
            return self.neighborhood_radius
        frac = epoch / (self.total_epochs - 1)
        return int(round(self.neighborhood_radius + (1 - self.neighborhood_radius) * frac))


def neighborhood_weight(hops: np.ndarray, radius: int) -> np.ndarray:
    """Gaussian restriction over geodesic hops; 1 at the winning node."""
    sigma = radius / 2.0 if radius > 0 else 1.0
    return np.exp(-np.square(hops) / (2.0 * sigma * sigma))


def _neighbor_table(graph: SkeletonGraph, radius: int, lr: float,
                    respect_directions: bool) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per-BMU update targets: node indices within the radius (following
    edge directions outward from the BMU) and their update coefficients."""
    geo = geodesic_distances(graph, respect_directions)
    table = []
    for bmu in range(graph.n_nodes):
        hops = geo[bmu]
        idx = np.flatnonzero(hops <= radius)
        table.append((idx, neighborhood_weight(hops[idx], radius) * lr))
    return table


def som_step(graph: SkeletonGraph, sample: np.ndarray, lr: float,
             radius: int, respect_directions: bool) -> SkeletonGraph:
    """One competitive-learning update toward a single sample point.

    The winning node is the Euclidean-nearest one (ties to the lowest
    index); every node within the geodesic radius moves toward the
    sample by weight(hops) * lr of its remaining distance.
    """
    sample = np.asarray(sample, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(sample)):
        raise ValueError("sample must be finite")
    d2 = np.sum(np.square(graph.positions - sample), axis=1)
    bmu = int(np.argmin(d2))
    geo = geodesic_distances(graph, respect_directions)
    hops = geo[bmu]
    idx = np.flatnonzero(hops <= radius)
    coef = neighborhood_weight(hops[idx], radius) * lr
    positions = graph.positions.copy()
    positions[idx] += coef[:, None] * (sample - positions[idx])
    return graph.with_positions(positions)


def som_fit(graph: SkeletonGraph, cloud, schedule: SomSchedule,
            step_callback=None) -> SkeletonGraph:
    """Fit the graph to a cloud: every epoch walks a seeded random
    permutation of the points and applies the competitive update.

    The first phase respects edge directions; afterwards the graph is
    treated as undirected. Deterministic given schedule.rng_seed.
    """
    points = cloud.points
    if len(points) == 0:
        raise ValueError("cannot fit a graph to an empty cloud")
    rng = np.random.default_rng(schedule.rng_seed)
    positions = graph.positions.copy()
    for epoch in range(schedule.total_epochs):
        phase1 = epoch < schedule.phase1_epochs
        lr = schedule.phase1_lr if phase1 else schedule.phase2_lr
        radius = schedule.radius_at(epoch)
        table = _neighbor_table(graph, radius, lr, respect_directions=phase1)
        order = rng.permutation(len(points))
        for k in order:
            sample = points[k]
            bmu = int(np.argmin(np.sum(np.square(positions - sample), axis=1)))
            idx, coef = table[bmu]
            positions[idx] += coef[:, None] * (sample - positions[idx])
            if step_callback is not None:
                step_callback(int(k), bmu, idx)
    return graph.with_positions(positions)


@dataclass(frozen=True)
class CorrespondenceSet:
    """Index-paired node positions of the two fitted graphs."""

    ct_nodes: np.ndarray  # (N, 3)
    us_nodes: np.ndarray  # (N, 3)

    def __post_init__(self) -> None:
        ct = np.asarray(self.ct_nodes, dtype=np.float64)
        us = np.asarray(self.us_nodes, dtype=np.float64)
        if ct.shape != us.shape or ct.ndim != 2 or ct.shape[1] != 3:
            raise ValueError("correspondence sets must be equal (N, 3) arrays")
        object.__setattr__(self, "ct_nodes", ct)
        object.__setattr__(self, "us_nodes", us)

    def __len__(self) -> int:
        return len(self.ct_nodes)


def fit_pair(template: SkeletonGraph, ct_cloud, us_cloud,
             schedule: SomSchedule) -> tuple[SkeletonGraph, SkeletonGraph, CorrespondenceSet]:
    """Fit the template to the CT cloud, then fit that result to the
    (already coarse-aligned) US cloud; node numbering pairs them up.

    The second fit uses rng_seed + 1 so the two sample orders differ.
    """
    g_ct = som_fit(template, ct_cloud, schedule)
    g_us = som_fit(g_ct, us_cloud, replace(schedule, rng_seed=schedule.rng_seed + 1))
    return g_ct, g_us, CorrespondenceSet(g_ct.positions, g_us.positions)


# --- serialization -----------------------------------------------------------

def graph_to_dict(graph: SkeletonGraph) -> dict:
    return {
        "nodes": [{"id": i, "part": int(p), "xyz": [float(v) for v in xyz]}
                  for i, (p, xyz) in enumerate(zip(graph.parts, graph.positions))],
        "edges": [{"from": int(a), "to": int(b), "directed": bool(d)} for a, b, d in graph.edges],
    }


def graph_from_dict(data: dict) -> SkeletonGraph:
    nodes = sorted(data["nodes"], key=lambda n: n["id"])
    positions = np.array([n["xyz"] for n in nodes])
    parts = np.array([n["part"] for n in nodes])
    edges = np.array([[e["from"], e["to"], 1 if e["directed"] else 0] for e in data["edges"]])
    return SkeletonGraph(positions, parts, edges)


def save_graph(graph: SkeletonGraph, path) -> None:
    with open(path, "w", encoding="ascii") as fh:
        json.dump(graph_to_dict(graph), fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_graph(path) -> SkeletonGraph:
    with open(path, "r", encoding="ascii") as fh:
        return graph_from_dict(json.load(fh))
