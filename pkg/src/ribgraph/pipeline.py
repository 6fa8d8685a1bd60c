"""Stage-by-stage registration driver shared by the CLI and the
evaluation harness."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .coarse import CoarseResult, analyze_cloud, coarse_align
from .config import PipelineConfig
from .core import PointCloud, RigidTransform, hausdorff
from .graph import CorrespondenceSet, SkeletonGraph, build_template_graph, fit_pair
from .mapping import LocalTransformSet, local_transforms, map_cloud


@dataclass
class RegistrationResult:
    """All artifacts of one registration run, in target (US) space."""

    coarse_transform: RigidTransform
    ct_analysis: CoarseResult
    us_analysis: CoarseResult
    template: SkeletonGraph
    graph_ct: SkeletonGraph
    graph_us: SkeletonGraph
    correspondences: CorrespondenceSet
    transforms: LocalTransformSet
    ct_aligned: PointCloud
    mapped_cloud: PointCloud
    hausdorff_mm: float
    stage_ms: dict[str, float] = field(default_factory=dict)


def register(ct_cloud: PointCloud, us_cloud: PointCloud,
             config: PipelineConfig = PipelineConfig()) -> RegistrationResult:
    """Full graph-based registration of a template cloud onto a target.

    Coarse-aligns via the sternum overlay, fits the skeleton graph to
    both clouds, converts the node pairs into local rigid transforms and
    maps the whole template cloud into target space.
    """
    stage_ms: dict[str, float] = {}

    t0 = time.perf_counter()
    ct_analysis = analyze_cloud(ct_cloud, config.coarse_params())
    us_analysis = analyze_cloud(us_cloud, config.coarse_params())
    coarse_t = coarse_align(ct_analysis, us_analysis)
    stage_ms["coarse"] = (time.perf_counter() - t0) * 1e3

    t0 = time.perf_counter()
    template = build_template_graph(ct_analysis, config.layout())
    template = template.with_positions(coarse_t.apply(template.positions))
    ct_aligned = ct_cloud.transformed(coarse_t)
    stage_ms["template"] = (time.perf_counter() - t0) * 1e3

    t0 = time.perf_counter()
    graph_ct, graph_us, pairs = fit_pair(template, ct_aligned, us_cloud,
                                         config.schedule(config.seed))
    stage_ms["som"] = (time.perf_counter() - t0) * 1e3

    t0 = time.perf_counter()
    transforms = local_transforms(pairs, template, config.n_reg)
    mapped = map_cloud(ct_aligned, transforms, config.n_blend, config.weighting)
    stage_ms["map"] = (time.perf_counter() - t0) * 1e3

    t0 = time.perf_counter()
    hd = hausdorff(mapped, us_cloud)
    stage_ms["hausdorff"] = (time.perf_counter() - t0) * 1e3

    return RegistrationResult(
        coarse_transform=coarse_t,
        ct_analysis=ct_analysis,
        us_analysis=us_analysis,
        template=template,
        graph_ct=graph_ct,
        graph_us=graph_us,
        correspondences=pairs,
        transforms=transforms,
        ct_aligned=ct_aligned,
        mapped_cloud=mapped,
        hausdorff_mm=hd,
        stage_ms=stage_ms,
    )
