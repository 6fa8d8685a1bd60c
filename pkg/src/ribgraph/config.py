"""One structured config object holding every pipeline tunable.

The defaults are the working set of the whole toolkit; a config file is
a JSON object with any subset of the fields. Unknown keys are rejected
so typos fail loudly, and every value is validated on load.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

from .coarse import CoarseParams
from .errors import ConfigError
from .graph import SomSchedule, TemplateLayout


@dataclass
class PipelineConfig:
    # sternum template and coarse search
    rect_width: float = 30.0
    rect_height: float = 90.0
    coarse_scale_mm: float = 5.0
    coarse_step_deg: float = 10.0
    refinement: tuple = ((3.0, 15.0, 2.0), (2.0, 7.0, 1.0))  # (mm/px, range, step)
    window_px: float = 2.0
    boundary_drop_ratio: float = 0.5
    band_mm: float = 10.0

    # skeleton graph
    node_total: int = 245
    sternum_rows: int = 13
    sternum_cols: int = 5
    chain_nodes: tuple = (10, 11, 12, 12)

    # self-organizing map
    phase1_epochs: int = 3
    phase1_lr: float = 0.02
    phase2_epochs: int = 10
    phase2_lr: float = 0.1
    neighborhood_radius: int = 2

    # non-rigid mapping and path transfer
    n_reg: int = 3
    n_blend: int = 3
    weighting: str = "inverse"
    sphere_radius_mm: float = 20.0

    # baseline
    icp_max_iter: int = 100
    icp_tol: float = 1e-6

    # synthetic fixtures
    gen_density: float = 1.0
    deform_amplitude: float = 8.0
    us_noise: float = 0.5
    us_max_facing_deg: float = 60.0
    eval_seeds: int = 5

    seed: int = 0

    def __post_init__(self) -> None:
        self.refinement = tuple(tuple(float(v) for v in p) for p in self.refinement)
        self.chain_nodes = tuple(int(v) for v in self.chain_nodes)
        positive = ("rect_width", "rect_height", "coarse_scale_mm", "coarse_step_deg",
                    "band_mm", "sphere_radius_mm", "gen_density", "icp_tol")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not 0.0 < self.boundary_drop_ratio < 1.0:
            raise ConfigError("boundary_drop_ratio must lie in (0, 1)")
        if self.weighting not in ("inverse", "literal"):
            raise ConfigError("weighting must be 'inverse' or 'literal'")
        if self.n_reg < 3:
            raise ConfigError("n_reg must be at least 3")
        if self.n_blend < 1:
            raise ConfigError("n_blend must be at least 1")
        if self.icp_max_iter < 1 or self.eval_seeds < 1:
            raise ConfigError("icp_max_iter and eval_seeds must be at least 1")
        if any(len(p) != 3 or p[0] <= 0 or p[1] <= 0 or p[2] <= 0 for p in self.refinement):
            raise ConfigError("refinement passes must be (scale, range, step) triples of positives")
        layout = self.layout()  # validates the allocation itself
        if layout.total() != self.node_total:
            raise ConfigError(f"node allocation totals {layout.total()} but node_total says {self.node_total}")
        self.schedule(0)  # validates rates/epochs

    def layout(self) -> TemplateLayout:
        return TemplateLayout(self.sternum_rows, self.sternum_cols, self.chain_nodes)

    def schedule(self, rng_seed: int) -> SomSchedule:
        return SomSchedule(self.phase1_epochs, self.phase1_lr,
                           self.phase2_epochs, self.phase2_lr,
                           self.neighborhood_radius, rng_seed)

    def coarse_params(self) -> CoarseParams:
        return CoarseParams(rect=(self.rect_width, self.rect_height),
                            coarse_scale=self.coarse_scale_mm,
                            coarse_step_deg=self.coarse_step_deg,
                            refinement=self.refinement,
                            window_px=self.window_px,
                            drop_ratio=self.boundary_drop_ratio,
                            band_mm=self.band_mm)

    def to_dict(self) -> dict:
        data = asdict(self)
        data["refinement"] = [list(p) for p in self.refinement]
        data["chain_nodes"] = list(self.chain_nodes)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            with open(path, "r", encoding="ascii") as fh:
                data = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls.from_dict(data)

    def save(self, path) -> None:
        with open(path, "w", encoding="ascii") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")
