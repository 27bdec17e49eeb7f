"""Scenario configuration: YAML schema, validation and bundled scenarios.

Schema (all keys optional unless noted)::

    name: ref-5x5
    map: ref-5x5.txt          # required; path relative to this file
    seed: 7
    horizon: 10               # T, number of steps after t = 0
    n_agents: 2               # defaults to len(agents)
    agents:                   # explicit poses ...
      - {cell: [0, 0], heading: E}
      - {cell: [4, 4], heading: W, path: [[4, 4], [4, 3]]}   # scripted mover
    placement_seed: 3         # ... or random free cells when agents is omitted
    target: {start: [2, 2]}   # or {region: [[x, y], ...]} or {region: uniform}
    prior: start              # start (default) | uniform
    motion: {p_stay: 0.2}
    sensor: {p_detect: 0.9, pos_noise: 0.05, max_range: 2, fov: full}
    filter: {n_particles: 1000, window: 20, weight_floor: 1.0e-6}
    comm: {strategy: selective, M: 10, rate: 1, k: 1, span: null}
    k_nbr: 1
    oracle: reference         # reference | exact | off
    parallel: false
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from .filter import FilterParams
from .sensor import SensorParams
from .world import FOV_FRONTAL, FOV_FULL, AgentPose, Cell, GridMap, Heading, MotionParams, load_map

STRATEGIES = ("selective", "baseline", "full", "none")
ORACLES = ("reference", "exact", "off")
BUNDLED = ("ref-5x5", "fig3-corridor", "arena-25x20", "sim-50")


class ConfigError(ValueError):
    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


@dataclass(frozen=True)
class CommParams:
    strategy: str = "none"
    M: int = 10
    rate: int = 1
    k: int = 1
    # steps of history carried per query sample; None means the full window
    span: Optional[int] = None


@dataclass
class ScenarioConfig:
    name: str
    grid: GridMap
    map_path: str
    n_agents: int
    poses: list  # per agent: list of AgentPose, indexed by time (last one repeats)
    target_region: list
    prior: object  # "uniform" or list of cells
    motion: MotionParams
    sensor: SensorParams
    filter: FilterParams
    comm: CommParams
    k_nbr: int
    horizon: int
    seed: int
    oracle: str = "reference"
    parallel: bool = False
    raw: dict = field(default_factory=dict, repr=False)

    def pose(self, agent: int, t: int) -> AgentPose:
        path = self.poses[agent]
        return path[min(t, len(path) - 1)]

    def with_overrides(self, **changes) -> "ScenarioConfig":
        return replace(self, **changes)

    def with_comm(self, **changes) -> "ScenarioConfig":
        return replace(self, comm=replace(self.comm, **changes))


def bundled_path(name: str) -> Path:
    return Path(str(resources.files("decfusion") / "scenarios" / f"{name}.yaml"))


def resolve_path(name_or_path: str) -> Path:
    """A filesystem path, or the name of a bundled scenario."""
    p = Path(name_or_path)
    if p.exists() or name_or_path not in BUNDLED:
        return p
    return bundled_path(name_or_path)


def _cell(v, where, errors):
    if not (isinstance(v, (list, tuple)) and len(v) == 2 and all(isinstance(a, int) for a in v)):
        errors.append(f"{where}: expected [x, y] integer pair, got {v!r}")
        return None
    return Cell(*v)


def _params(cls, raw, where, errors):
    raw = raw or {}
    if not isinstance(raw, dict):
        errors.append(f"{where}: expected a mapping")
        return None
    try:
        return cls(**raw)
    except TypeError as e:
        errors.append(f"{where}: {e}")
    except ValueError as e:
        errors.append(f"{where}: {e}")
    return None


def parse_config(raw: dict, base_dir: Path) -> tuple[Optional[ScenarioConfig], list]:
    """Build a config from a parsed YAML mapping. Returns (config or None, errors)."""
    errors: list[str] = []
    if not isinstance(raw, dict):
        return None, ["config: top level must be a mapping"]

    grid = None
    map_ref = raw.get("map")
    if not map_ref:
        errors.append("map: required")
    else:
        map_path = (base_dir / map_ref) if not Path(map_ref).is_absolute() else Path(map_ref)
        try:
            grid = load_map(map_path.read_text())
        except OSError as e:
            errors.append(f"map: cannot read {map_path}: {e.strerror}")
        except ValueError as e:
            errors.append(f"map: {e}")

    horizon = raw.get("horizon", 10)
    if not isinstance(horizon, int) or horizon < 1:
        errors.append(f"horizon: must be an integer >= 1, got {horizon!r}")
    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or not 0 <= seed < 2**64:
        errors.append(f"seed: must be a 64-bit unsigned integer, got {seed!r}")

    agents_raw = raw.get("agents")
    n_agents = raw.get("n_agents", len(agents_raw) if isinstance(agents_raw, list) else None)
    if not isinstance(n_agents, int) or n_agents < 1:
        errors.append(f"n_agents: must be an integer >= 1, got {n_agents!r}")
        n_agents = None
    elif isinstance(agents_raw, list) and len(agents_raw) != n_agents:
        errors.append(f"n_agents: {n_agents} does not match {len(agents_raw)} agents listed")

    poses = []
    if agents_raw is not None and n_agents is not None:
        for i, a in enumerate(agents_raw):
            where = f"agents[{i}]"
            if not isinstance(a, dict):
                errors.append(f"{where}: expected a mapping")
                continue
            try:
                heading = Heading(a.get("heading", "N"))
            except ValueError:
                errors.append(f"{where}.heading: must be one of N, E, S, W")
                continue
            cells = [a["cell"]] if "path" not in a else a["path"]
            path = []
            for c in cells:
                c = _cell(c, f"{where}.cell", errors)
                if c is None:
                    continue
                if grid is not None and not grid.is_free(c):
                    errors.append(f"{where}.cell: {tuple(c)} is not a free cell")
                path.append(AgentPose(c, heading))
            if path:
                poses.append(path)
    elif n_agents is not None and grid is not None:
        rng = np.random.default_rng(raw.get("placement_seed", 0))
        if n_agents > grid.n_free:
            errors.append("n_agents: more agents than free cells")
        else:
            picks = rng.choice(grid.n_free, size=n_agents, replace=False)
            headings = list(Heading)
            poses = [
                [AgentPose(grid.cell_of(int(i)), headings[int(rng.integers(0, 4))])] for i in picks
            ]

    target_raw = raw.get("target", {"region": "uniform"})
    region = []
    if not isinstance(target_raw, dict):
        errors.append("target: expected a mapping")
    elif "start" in target_raw:
        c = _cell(target_raw["start"], "target.start", errors)
        if c is not None:
            region = [c]
    elif target_raw.get("region", "uniform") == "uniform":
        region = grid.free_cells() if grid is not None else []
    else:
        for c in target_raw["region"]:
            c = _cell(c, "target.region", errors)
            if c is not None:
                region.append(c)
        if not region:
            errors.append("target.region: empty")
    if grid is not None:
        for c in region:
            if not grid.is_free(c):
                errors.append(f"target: {tuple(c)} is not a free cell")
                break

    prior_raw = raw.get("prior", "start")
    if prior_raw == "start":
        prior = region
    elif prior_raw == "uniform":
        prior = "uniform"
    else:
        errors.append(f"prior: must be 'start' or 'uniform', got {prior_raw!r}")
        prior = None

    motion = _params(MotionParams, raw.get("motion"), "motion", errors)
    sensor = _params(SensorParams, raw.get("sensor"), "sensor", errors)
    if sensor is not None and sensor.fov not in (FOV_FULL, FOV_FRONTAL):
        errors.append(f"sensor.fov: must be '{FOV_FULL}' or '{FOV_FRONTAL}'")
    fparams = _params(FilterParams, raw.get("filter"), "filter", errors)
    comm = _params(CommParams, raw.get("comm"), "comm", errors)
    if comm is not None:
        if comm.strategy not in STRATEGIES:
            errors.append(f"comm.strategy: must be one of {', '.join(STRATEGIES)}")
        if not isinstance(comm.rate, int) or comm.rate < 1:
            errors.append(f"comm.rate: must be an integer >= 1, got {comm.rate!r}")
        if not isinstance(comm.k, int) or comm.k < 1:
            errors.append(f"comm.k: must be an integer >= 1, got {comm.k!r}")
        if fparams is not None and not 1 <= comm.M <= fparams.n_particles:
            errors.append(f"comm.M: must lie in [1, n_particles], got {comm.M!r}")
        if comm.span is not None and (not isinstance(comm.span, int) or comm.span < 0):
            errors.append("comm.span: must be a non-negative integer or null")

    k_nbr = raw.get("k_nbr", 1)
    if not isinstance(k_nbr, int) or k_nbr < 0:
        errors.append(f"k_nbr: must be a non-negative integer, got {k_nbr!r}")
    elif n_agents is not None and k_nbr >= n_agents:
        errors.append(f"k_nbr: must be < n_agents ({k_nbr} >= {n_agents})")

    oracle = raw.get("oracle", "reference")
    if oracle not in ORACLES:
        errors.append(f"oracle: must be one of {', '.join(ORACLES)}")

    known = {
        "name", "map", "seed", "horizon", "n_agents", "agents", "placement_seed", "target",
        "prior", "motion", "sensor", "filter", "comm", "k_nbr", "oracle", "parallel",
    }
    for key in sorted(set(raw) - known):
        errors.append(f"{key}: unknown field")

    if errors:
        return None, errors
    cfg = ScenarioConfig(
        name=str(raw.get("name", "scenario")),
        grid=grid,
        map_path=str(map_ref),
        n_agents=n_agents,
        poses=poses,
        target_region=region,
        prior=prior,
        motion=motion,
        sensor=sensor,
        filter=fparams,
        comm=comm,
        k_nbr=k_nbr,
        horizon=horizon,
        seed=seed,
        oracle=oracle,
        parallel=bool(raw.get("parallel", False)),
        raw=copy.deepcopy(raw),
    )
    return cfg, []


def validate_config(path) -> list:
    """Every violated constraint of the config at ``path``; empty when valid.

    Raises OSError if the file cannot be read.
    """
    path = resolve_path(str(path))
    text = path.read_text()
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as e:
        return [f"config: YAML parse error: {e}"]
    _, errors = parse_config(raw, path.parent)
    return errors


def load_config(path) -> ScenarioConfig:
    path = resolve_path(str(path))
    raw = yaml.safe_load(path.read_text())
    cfg, errors = parse_config(raw, path.parent)
    if errors:
        raise ConfigError(errors)
    return cfg


def load_bundled(name: str) -> ScenarioConfig:
    if name not in BUNDLED:
        raise KeyError(f"no bundled scenario {name!r}; choose from {', '.join(BUNDLED)}")
    return load_config(bundled_path(name))
