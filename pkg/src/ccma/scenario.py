from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional

from ccma.errors import ConfigError
from ccma.sim.types import STYLE_ORDER, RoadGeometry, WorldState
from ccma.sim.world import DENSITIES, spawn_scenario


@dataclass(frozen=True)
class ScenarioConfig:
    density: str = "medium"
    style_mix: tuple[float, float, float] = (0.0, 1.0, 0.0)  # aggressive, normal, conservative
    n_cavs: int = 2
    geometry: RoadGeometry = field(default_factory=RoadGeometry)
    hdv_compliance: float = 1.0
    hdv_per_lane: Optional[int] = None  # overrides the density table when set

    def __post_init__(self) -> None:
        if self.density not in DENSITIES:
            raise ConfigError(f"unknown density {self.density!r}")
        if len(self.style_mix) != 3 or any(x < 0 for x in self.style_mix) or sum(self.style_mix) <= 0:
            raise ConfigError("style_mix must be three nonnegative weights with positive sum")
        if self.n_cavs < 1:
            raise ConfigError("n_cavs must be >= 1")
        if not 0.0 <= self.hdv_compliance <= 1.0:
            raise ConfigError("hdv_compliance must lie in [0, 1]")
        if self.hdv_per_lane is not None and self.hdv_per_lane < 0:
            raise ConfigError("hdv_per_lane must be >= 0")

    def style_dict(self) -> dict[str, float]:
        total = sum(self.style_mix)
        return {k: x / total for k, x in zip(STYLE_ORDER, self.style_mix)}

    def spawn(self, seed: int) -> WorldState:
        table = None if self.hdv_per_lane is None else {self.density: self.hdv_per_lane}
        return spawn_scenario(self.geometry, self.density, self.style_dict(), self.n_cavs, seed,
                              hdv_per_lane=table, hdv_compliance=self.hdv_compliance)

    def to_dict(self) -> dict:
        return {
            "density": self.density,
            "style_mix": list(self.style_mix),
            "n_cavs": self.n_cavs,
            "geometry": self.geometry.to_dict(),
            "hdv_compliance": self.hdv_compliance,
            "hdv_per_lane": self.hdv_per_lane,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ScenarioConfig":
        geo = RoadGeometry(**d["geometry"]) if "geometry" in d else RoadGeometry()
        return cls(
            density=d.get("density", "medium"),
            style_mix=tuple(float(x) for x in d.get("style_mix", (0.0, 1.0, 0.0))),
            n_cavs=int(d.get("n_cavs", 2)),
            geometry=geo,
            hdv_compliance=float(d.get("hdv_compliance", 1.0)),
            hdv_per_lane=None if d.get("hdv_per_lane") is None else int(d["hdv_per_lane"]),
        )
