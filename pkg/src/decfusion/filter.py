"""Per-agent trajectory particle filter over a sliding history window.

States are stored as free-cell indices of the map (see ``GridMap.index``).
A belief keeps, for every step in its window, the particle set as it stood
right after propagation into that step and before any evidence for it was
applied. Re-simulation restarts from one of those snapshots.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .sensor import Measurement, SensorParams, likelihood_table
from .world import GridMap, MotionParams, sample_moves


class StaleMeasurement(ValueError):
    pass


@dataclass(frozen=True)
class FilterParams:
    n_particles: int = 1000
    window: int = 20
    weight_floor: float = 1e-6

    def __post_init__(self):
        if self.n_particles < 2:
            raise ValueError("n_particles must be >= 2")
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if not 0.0 < self.weight_floor <= 1e-3:
            raise ValueError("weight_floor must lie in (0, 1e-3]")


@dataclass
class ParticleBelief:
    # states[i, k] is particle i's free-cell index at time window_start + k
    states: np.ndarray
    weights: np.ndarray
    window_start: int
    now: int
    window: int
    # time -> (states, weights) before evidence at that time
    snapshots: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.weights)

    def column(self, s: int) -> np.ndarray:
        if not self.window_start <= s <= self.now:
            raise StaleMeasurement(
                f"time {s} outside window [{self.window_start}, {self.now}]"
            )
        return self.states[:, s - self.window_start]

    def copy(self) -> "ParticleBelief":
        # arrays are never mutated in place, so sharing them is safe
        return ParticleBelief(
            self.states, self.weights, self.window_start, self.now, self.window, dict(self.snapshots)
        )


def init_belief(grid: GridMap, prior, params: FilterParams, rng) -> ParticleBelief:
    """Draw ``n_particles`` single-state trajectories from the prior.

    ``prior`` is ``"uniform"`` (all free cells) or an iterable of cells.
    """
    if isinstance(prior, str):
        if prior != "uniform":
            raise ValueError(f"unknown prior {prior!r}")
        support = np.arange(grid.n_free)
    else:
        cells = list(prior)
        if not cells:
            raise ValueError("prior region is empty")
        support = np.array(sorted({grid.index_of(c) for c in cells}))
    picks = support[rng.integers(0, len(support), size=params.n_particles)]
    states = picks.reshape(-1, 1)
    weights = np.full(params.n_particles, 1.0 / params.n_particles)
    b = ParticleBelief(states, weights, 0, 0, params.window)
    b.snapshots[0] = (states, weights)
    return b


def systematic_resample(weights: np.ndarray, rng) -> np.ndarray:
    """Ancestor indices from one uniform draw."""
    n = len(weights)
    positions = (rng.random() + np.arange(n)) / n
    cum = np.cumsum(weights)
    cum[-1] = 1.0
    return np.searchsorted(cum, positions, side="right")


def propagate(b: ParticleBelief, grid: GridMap, motion: MotionParams, rng) -> ParticleBelief:
    """Resample ancestors by weight, then extend each trajectory by one motion step."""
    anc = systematic_resample(b.weights, rng)
    hist = b.states[anc]
    new = sample_moves(grid, motion, hist[:, -1], rng)
    states = np.concatenate([hist, new[:, None]], axis=1)
    now = b.now + 1
    start = b.window_start
    if now - start > b.window:
        drop = now - start - b.window
        states = states[:, drop:]
        start += drop
    weights = np.full(b.n, 1.0 / b.n)
    snaps = {s: v for s, v in b.snapshots.items() if s >= start}
    snaps[now] = (states, weights)
    return ParticleBelief(states, weights, start, now, b.window, snaps)


def reweight(weights: np.ndarray, lik: np.ndarray, floor: float) -> np.ndarray:
    w = weights * np.maximum(lik, floor)
    return w / w.sum()


def incorporate(
    b: ParticleBelief,
    m: Measurement,
    grid: GridMap,
    params: SensorParams,
    floor: float,
) -> ParticleBelief:
    col = b.column(m.time)
    lik = likelihood_table(m, grid, params)[col]
    out = b.copy()
    out.weights = reweight(b.weights, lik, floor)
    return out


def replay_order(ms):
    return sorted(ms, key=lambda m: (m.time, m.agent, m.id))


def resimulate(
    b: ParticleBelief,
    db: "MeasurementDb",
    tau: int,
    grid: GridMap,
    motion: MotionParams,
    sensor: SensorParams,
    floor: float,
    rng,
) -> ParticleBelief:
    """Rewind to the snapshot at ``tau`` and replay forward with every db entry."""
    if not b.window_start <= tau <= b.now:
        raise StaleMeasurement(f"cannot resimulate from {tau}; window is [{b.window_start}, {b.now}]")
    by_time: dict[int, list] = {}
    for m in replay_order(db.entries.values()):
        if tau <= m.time <= b.now:
            by_time.setdefault(m.time, []).append(m)

    states, weights = b.snapshots[tau]
    start = tau - (states.shape[1] - 1)
    snaps = {s: v for s, v in b.snapshots.items() if s <= tau}
    cur = ParticleBelief(states, weights, start, tau, b.window, snaps)
    for m in by_time.get(tau, ()):
        cur = incorporate(cur, m, grid, sensor, floor)
    for s in range(tau + 1, b.now + 1):
        cur = propagate(cur, grid, motion, rng)
        for m in by_time.get(s, ()):
            cur = incorporate(cur, m, grid, sensor, floor)
    return cur


def marginal_at(b: ParticleBelief, grid: GridMap, s: int | None = None):
    from .evaluation import GridDist

    s = b.now if s is None else s
    if not b.window_start <= s <= b.now:
        raise IndexError(f"time {s} outside window [{b.window_start}, {b.now}]")
    col = b.states[:, s - b.window_start]
    mass = np.bincount(col, weights=b.weights, minlength=grid.n_free)
    return GridDist(grid, mass / mass.sum())


def effective_sample_size(b_or_weights) -> float:
    w = getattr(b_or_weights, "weights", b_or_weights)
    w = np.asarray(w, dtype=float)
    w = w / w.sum()
    return float(1.0 / np.sum(w * w))


class MeasurementDb:
    """Measurements an agent holds, keyed by id, within the freshness window."""

    def __init__(self):
        self.entries: dict[str, Measurement] = {}

    def __len__(self):
        return len(self.entries)

    def __contains__(self, mid):
        return mid in self.entries

    def __iter__(self):
        return iter(self.entries.values())

    def ids(self):
        return self.entries.keys()


def db_insert(db: MeasurementDb, m: Measurement, now: int, window: int) -> bool:
    """Insert ``m`` if unseen and fresh; evict stale entries. Mutates ``db``."""
    horizon = now - window
    for mid in [k for k, v in db.entries.items() if v.time < horizon]:
        del db.entries[mid]
    if m.id in db.entries or m.time < horizon:
        return False
    db.entries[m.id] = m
    return True


def dump_belief(b: ParticleBelief, grid: GridMap) -> str:
    """Flat text table: one row per particle, weight then (x y) per state."""
    lines = [f"# window_start={b.window_start} now={b.now} n={b.n}"]
    for w, row in zip(b.weights, b.states):
        cells = " ".join(f"{grid.coords[i][0]} {grid.coords[i][1]}" for i in row)
        lines.append(f"{w!r} {cells}")
    return "\n".join(lines) + "\n"
