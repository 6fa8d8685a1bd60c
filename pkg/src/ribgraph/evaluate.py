"""Rigid ICP baseline and the method-comparison harness.

evaluate() runs each registered method end to end on one cloud pair,
scoring cloud agreement by Hausdorff distance and path transfer by
per-waypoint Euclidean error. A failing method is recorded in the
report without stopping the others.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .config import PipelineConfig
from .core import PointCloud, RigidTransform, hausdorff, kabsch_fit
from .errors import RibgraphError
from .mapping import Trajectory, transfer_waypoint
from .pipeline import register


@dataclass
class IcpResult:
    transform: RigidTransform
    iterations: int
    rms_history: list[float]


def icp_rigid(source: PointCloud, target: PointCloud,
              max_iter: int = 100, tol: float = 1e-6) -> IcpResult:
    """Classic rigid ICP: alternate exact nearest-neighbour matching with
    the least-squares rigid fit until the matched RMS distance settles.

    The matched RMS is asserted non-increasing across iterations.
    """
    if len(source) < 3 or len(target) < 3:
        raise ValueError("ICP needs at least 3 points in both clouds")
    tree = cKDTree(target.points)
    transform = RigidTransform.identity()
    history: list[float] = []
    prev = np.inf
    for it in range(1, max_iter + 1):
        moved = transform.apply(source.points)
        dists, idx = tree.query(moved)
        rms = float(np.sqrt(np.mean(np.square(dists))))
        assert rms <= prev * (1 + 1e-12) + 1e-12, "ICP objective increased"
        history.append(rms)
        if rms <= tol or abs(prev - rms) < tol:
            return IcpResult(transform, it, history)
        prev = rms
        delta = kabsch_fit(moved, target.points[idx])
        transform = delta.compose(transform)
    return IcpResult(transform, max_iter, history)


@dataclass
class MethodResult:
    """Outcome of one method on one cloud pair."""

    name: str
    hausdorff_mm: float | None = None
    waypoint_errors: list[float] | None = None
    error: str | None = None
    stage_ms: dict[str, float] = field(default_factory=dict)

    @property
    def waypoint_mean(self) -> float | None:
        return float(np.mean(self.waypoint_errors)) if self.waypoint_errors else None

    @property
    def waypoint_sd(self) -> float | None:
        return float(np.std(self.waypoint_errors)) if self.waypoint_errors else None

    @property
    def waypoint_max(self) -> float | None:
        return float(np.max(self.waypoint_errors)) if self.waypoint_errors else None

    def to_dict(self, include_runtimes: bool = False) -> dict:
        data = {
            "name": self.name,
            "hausdorff_mm": self.hausdorff_mm,
            "waypoint_errors": self.waypoint_errors,
            "waypoint_mean": self.waypoint_mean,
            "waypoint_sd": self.waypoint_sd,
            "waypoint_max": self.waypoint_max,
            "error": self.error,
        }
        if include_runtimes:
            data["stage_ms"] = self.stage_ms
        return data


@dataclass
class EvalReport:
    """Per-method metrics for one cloud pair plus the config echo."""

    methods: dict[str, MethodResult]
    config: dict

    def to_dict(self, include_runtimes: bool = False) -> dict:
        return {"methods": {k: v.to_dict(include_runtimes) for k, v in self.methods.items()},
                "config": self.config}

    def runtimes(self) -> dict:
        return {k: v.stage_ms for k, v in self.methods.items()}


def _run_icp(ct: PointCloud, us: PointCloud, config: PipelineConfig) -> tuple[PointCloud, dict]:
    t0 = time.perf_counter()
    result = icp_rigid(ct, us, config.icp_max_iter, config.icp_tol)
    ms = {"icp": (time.perf_counter() - t0) * 1e3, "iterations": float(result.iterations)}
    return ct.transformed(result.transform), ms


def _run_graph(ct: PointCloud, us: PointCloud, config: PipelineConfig) -> tuple[PointCloud, dict, object]:
    result = register(ct, us, config)
    return result.mapped_cloud, dict(result.stage_ms), result


METHODS = ("icp", "graph")


def evaluate(ct_cloud: PointCloud, us_cloud: PointCloud,
             ct_waypoints: Trajectory, us_waypoints_truth: Trajectory,
             methods=METHODS, config: PipelineConfig = PipelineConfig()) -> EvalReport:
    """Run each method end to end and score it.

    Waypoints are transferred the same way for every method: a rigid fit
    over the sphere region around each waypoint, between the source
    cloud and that method's mapped cloud.
    """
    if len(ct_waypoints) != len(us_waypoints_truth):
        raise ValueError("waypoint lists must be equal length and order")
    out: dict[str, MethodResult] = {}
    for name in methods:
        entry = MethodResult(name=name)
        out[name] = entry
        try:
            if name == "icp":
                mapped, stage_ms = _run_icp(ct_cloud, us_cloud, config)
                source = ct_cloud
            elif name == "graph":
                mapped, stage_ms, reg = _run_graph(ct_cloud, us_cloud, config)
                source = reg.ct_aligned
            else:
                entry.error = f"method '{name}' is not available in this build"
                continue
            entry.stage_ms = stage_ms

            t0 = time.perf_counter()
            entry.hausdorff_mm = hausdorff(mapped, us_cloud)
            errors = []
            for w, w_true in zip(ct_waypoints.waypoints, us_waypoints_truth.waypoints):
                w_src = w if name == "icp" else reg.coarse_transform.apply(w)
                moved = transfer_waypoint(w_src, source, mapped, config.sphere_radius_mm)
                errors.append(float(np.linalg.norm(moved - w_true)))
            entry.waypoint_errors = errors
            entry.stage_ms["scoring"] = (time.perf_counter() - t0) * 1e3
        except (RibgraphError, ValueError, AssertionError) as exc:
            entry.error = f"{type(exc).__name__}: {exc}"
    return EvalReport(out, config.to_dict())


def format_table(reports: dict[str, EvalReport], metric: str = "hausdorff") -> str:
    """Aligned plain-text table: methods as rows, one column per subject
    plus a Mean+-SD column."""
    subjects = list(reports)
    methods: list[str] = []
    for rep in reports.values():
        for name in rep.methods:
            if name not in methods:
                methods.append(name)

    def cell(rep: EvalReport, method: str) -> float | None:
        entry = rep.methods.get(method)
        if entry is None or entry.error:
            return None
        return entry.hausdorff_mm if metric == "hausdorff" else entry.waypoint_mean

    title = {"hausdorff": "Hausdorff distance (mm)",
             "waypoint": "Waypoint transfer error, mean (mm)"}[metric]
    header = ["Method"] + subjects + ["Mean+-SD"]
    rows = [header]
    for method in methods:
        values = [cell(reports[s], method) for s in subjects]
        present = [v for v in values if v is not None]
        stats = (f"{np.mean(present):.2f}+-{np.std(present):.2f}" if present else "failed")
        rows.append([method] + [f"{v:.2f}" if v is not None else "failed" for v in values] + [stats])
    widths = [max(len(r[c]) for r in rows) for c in range(len(header))]
    lines = [title]
    for i, row in enumerate(rows):
        lines.append("  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip())
        if i == 0:
            lines.append("-" * (sum(widths) + 2 * (len(widths) - 1)))
    return "\n".join(lines)
