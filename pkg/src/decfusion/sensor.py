"""Occlusion-aware detection sensor and its exact observation likelihood."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Optional

import numpy as np

from .world import FOV_FULL, AgentPose, Cell, GridMap, _require_free, visible_cells


class MalformedMeasurement(ValueError):
    pass


@dataclass(frozen=True)
class SensorParams:
    p_detect: float = 0.9
    pos_noise: float = 0.05
    max_range: int = 3
    fov: str = FOV_FULL

    def __post_init__(self):
        if not 0.0 < self.p_detect <= 1.0:
            raise ValueError(f"p_detect must lie in (0, 1], got {self.p_detect}")
        if not 0.0 <= self.pos_noise < 1.0:
            raise ValueError(f"pos_noise must lie in [0, 1), got {self.pos_noise}")
        if self.max_range < 0:
            raise ValueError("max_range must be >= 0")


def measurement_id(agent: int, time: int) -> str:
    return f"{agent}@{time}"


@dataclass(frozen=True)
class Measurement:
    """One reading: the footprint an agent saw at ``time`` and what it reported."""

    id: str
    agent: int
    time: int
    visible: tuple  # sorted tuple of Cell
    detection: Optional[Cell] = None

    def __post_init__(self):
        object.__setattr__(self, "visible", tuple(sorted(Cell(*c) for c in self.visible)))
        if self.detection is not None:
            det = Cell(*self.detection)
            object.__setattr__(self, "detection", det)
            if det not in self._visible_set:
                raise MalformedMeasurement(f"detection {det} outside visible set of {self.id}")

    @cached_property
    def _visible_set(self) -> frozenset:
        return frozenset(self.visible)

    @cached_property
    def _mask(self):
        # dense footprint mask over its own bounding box
        if not self.visible:
            return 0, 0, np.zeros((0, 0), dtype=bool)
        xy = np.array(self.visible)
        x0, y0 = xy.min(axis=0)
        x1, y1 = xy.max(axis=0)
        mask = np.zeros((y1 - y0 + 1, x1 - x0 + 1), dtype=bool)
        mask[xy[:, 1] - y0, xy[:, 0] - x0] = True
        return int(x0), int(y0), mask

    def contains(self, xs, ys) -> np.ndarray:
        """Vectorised membership test of cells in the visible footprint."""
        x0, y0, mask = self._mask
        h, w = mask.shape
        xs = np.asarray(xs) - x0
        ys = np.asarray(ys) - y0
        inside = (xs >= 0) & (xs < w) & (ys >= 0) & (ys < h)
        out = np.zeros(np.shape(xs), dtype=bool)
        out[inside] = mask[ys[inside], xs[inside]]
        return out

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "agent": self.agent,
            "time": self.time,
            "visible": [list(c) for c in self.visible],
            "detection": None if self.detection is None else list(self.detection),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Measurement":
        det = rec.get("detection")
        return cls(
            id=rec["id"],
            agent=int(rec["agent"]),
            time=int(rec["time"]),
            visible=tuple(Cell(*c) for c in rec["visible"]),
            detection=None if det is None else Cell(*det),
        )


def sense(
    grid: GridMap,
    pose: AgentPose,
    params: SensorParams,
    target,
    time: int,
    agent: int,
    rng,
) -> Measurement:
    """Take one reading of ``target`` from ``pose``.

    Draw order: one uniform for detection and, when detected, one uniform for
    the noise test plus one integer for the displaced cell. Nothing is drawn
    when the target is out of view.
    """
    _require_free(grid, target)
    vis = visible_cells(grid, pose, params.max_range, params.fov)
    target = Cell(*target)
    detection = None
    if target in vis and rng.random() < params.p_detect:
        detection = target
        noisy = rng.random() < params.pos_noise
        pick = int(rng.integers(0, max(len(vis) - 1, 1)))
        if noisy and len(vis) > 1:
            others = sorted(c for c in vis if c != target)
            detection = others[pick]
    return Measurement(measurement_id(agent, time), agent, time, tuple(vis), detection)


def likelihood_xy(m: Measurement, xs, ys, params: SensorParams) -> np.ndarray:
    """p(m | target at (xs, ys)) for arrays of coordinates."""
    inside = m.contains(xs, ys)
    n_vis = len(m.visible)
    if m.detection is None:
        return np.where(inside, 1.0 - params.p_detect, 1.0)
    if n_vis == 1:
        hit_mass = params.p_detect
        other = 0.0
    else:
        hit_mass = params.p_detect * (1.0 - params.pos_noise)
        other = params.p_detect * params.pos_noise / (n_vis - 1)
    dx, dy = m.detection
    at_det = (np.asarray(xs) == dx) & (np.asarray(ys) == dy)
    return np.where(inside, np.where(at_det, hit_mass, other), 0.0)


def likelihood(m: Measurement, x, params: SensorParams) -> float:
    return float(likelihood_xy(m, np.array([x[0]]), np.array([x[1]]), params)[0])


def likelihood_table(m: Measurement, grid: GridMap, params: SensorParams) -> np.ndarray:
    """Likelihood of ``m`` for every free cell of ``grid`` (cached on the measurement)."""
    cache = m.__dict__.setdefault("_lik_tables", {})
    key = (id(grid), params)
    hit = cache.get(key)
    if hit is None or hit[0] is not grid:
        table = likelihood_xy(m, grid.coords[:, 0], grid.coords[:, 1], params)
        table.setflags(write=False)
        hit = (grid, table)
        cache[key] = hit
    return hit[1]
