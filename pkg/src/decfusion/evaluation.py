"""Ground truth: exact HMM forward pass, full-communication reference filter,
smoothed grid KL, and evidence-combination rules."""

from __future__ import annotations

import numpy as np

from .world import GridMap, MotionParams, transition_matrix


class CapacityError(RuntimeError):
    pass


class DegenerateEvidence(RuntimeError):
    pass


class GridDist:
    """Probability masses over the free cells of one map."""

    def __init__(self, grid: GridMap, mass):
        mass = np.asarray(mass, dtype=float)
        if mass.shape != (grid.n_free,):
            raise ValueError(f"expected {grid.n_free} masses, got shape {mass.shape}")
        self.grid = grid
        self.mass = mass

    def __getitem__(self, cell) -> float:
        return float(self.mass[self.grid.index_of(cell)])

    def __repr__(self):
        return f"GridDist({self.grid!r})"

    @classmethod
    def uniform(cls, grid: GridMap, cells=None) -> "GridDist":
        mass = np.zeros(grid.n_free)
        if cells is None:
            mass[:] = 1.0
        else:
            for c in cells:
                mass[grid.index_of(c)] = 1.0
        return cls(grid, mass / mass.sum())

    def to_csv(self) -> str:
        rows = ["x,y,mass"]
        for (x, y), p in zip(self.grid.coords, self.mass):
            rows.append(f"{x},{y},{p!r}")
        return "\n".join(rows) + "\n"


DEFAULT_BUDGET = 5_000_000


def brute_force_posterior(
    grid: GridMap,
    motion: MotionParams,
    sensor,
    prior: GridDist,
    measurements,
    T: int,
    budget: int = DEFAULT_BUDGET,
    return_all: bool = False,
):
    """Exact filtered marginal p(x_T | all measurements up to T).

    ``measurements`` maps time -> iterable of Measurement (or is a flat
    iterable, grouped here by ``m.time``). Time 0 carries the prior; for each
    later step the kernel is applied first, then every measurement at that
    step. With ``return_all`` the list of marginals for 0..T is returned.
    """
    from .sensor import likelihood_table

    if grid.n_free * grid.n_free + grid.n_free * (T + 1) > budget:
        raise CapacityError(
            f"{grid.n_free} free cells over {T} steps exceeds the oracle budget {budget}"
        )
    if not isinstance(measurements, dict):
        grouped: dict = {}
        for m in measurements:
            grouped.setdefault(m.time, []).append(m)
        measurements = grouped
    K = transition_matrix(grid, motion)
    belief = prior.mass.astype(float).copy()
    out = []
    for t in range(T + 1):
        if t > 0:
            belief = belief @ K
        for m in measurements.get(t, ()):
            belief = belief * likelihood_table(m, grid, sensor)
        total = belief.sum()
        if total <= 0.0:
            raise DegenerateEvidence(f"evidence at t={t} has zero probability")
        belief = belief / total
        if return_all:
            out.append(GridDist(grid, belief))
    return out if return_all else GridDist(grid, belief)


def _masses(d, grid=None):
    if isinstance(d, GridDist):
        return d.grid, d.mass
    return grid, np.asarray(d, dtype=float)


def kl_grid(p, q, alpha: float | None = None) -> float:
    """KL(p' || q') in nats after Laplace smoothing both sides.

    ``h'(c) = (h(c) + alpha) / (1 + alpha * n_free)``; alpha defaults to
    ``1 / n_free``.
    """
    gp, a = _masses(p)
    gq, b = _masses(q)
    if gp is not None and gq is not None and gp is not gq:
        raise ValueError("distributions are defined over different maps")
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    n = a.size
    if alpha is None:
        alpha = 1.0 / n
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    a = a / a.sum()
    b = b / b.sum()
    ps = (a + alpha) / (1.0 + alpha * n)
    qs = (b + alpha) / (1.0 + alpha * n)
    return float(max(np.sum(ps * np.log(ps / qs)), 0.0))


def combine_static_evidence(prior, locals_) -> np.ndarray:
    """Fuse local posteriors of a static state: prior * prod(local / prior), normalised."""
    prior = np.asarray(prior, dtype=float)
    locs = [np.asarray(l, dtype=float) for l in locals_]
    if np.any(prior < 0):
        raise ValueError("prior has negative mass")
    zero = prior == 0
    for l in locs:
        if l.shape != prior.shape:
            raise ValueError("local posterior support differs from the prior")
        if np.any(zero & (l > 0)):
            raise ValueError("local posterior puts mass where the prior is zero")
    safe = np.where(zero, 1.0, prior)
    post = prior.copy()
    for l in locs:
        post = post * l / safe
    total = post.sum()
    if total <= 0:
        raise ValueError("local posteriors have disjoint support")
    return post / total


def momentary_product(marginals, prior) -> GridDist:
    """The static fusion rule misapplied to time-t marginals of a moving target."""
    grid, pm = _masses(prior)
    if grid is None:
        grid = _masses(marginals[0])[0]
    fused = combine_static_evidence(pm, [_masses(m)[1] for m in marginals])
    return GridDist(grid, fused) if grid is not None else fused


def full_comm_filter(grid, motion, sensor, fparams, prior, measurements, T, rng):
    """Single particle filter fed every agent's measurement at its true step.

    Returns ``(marginals, ess)`` lists for steps 0..T.
    """
    from . import filter as pf

    grouped: dict = {}
    for m in measurements:
        grouped.setdefault(m.time, []).append(m)
    b = pf.init_belief(grid, prior, fparams, rng)
    margs, ess = [], []
    for t in range(T + 1):
        if t > 0:
            b = pf.propagate(b, grid, motion, rng)
        for m in pf.replay_order(grouped.get(t, ())):
            b = pf.incorporate(b, m, grid, sensor, fparams.weight_floor)
        margs.append(pf.marginal_at(b, grid))
        ess.append(pf.effective_sample_size(b))
    return margs, ess


def slipped_region(grid: GridMap, x_min: int) -> list:
    return [c for c in grid.free_cells() if c.x >= x_min]


def fig3_demo(cfg, x_min: int = 4) -> dict:
    """Guards report nothing for ``cfg.horizon`` steps; compare the exact
    posterior with the momentary product of each guard's exact local marginal
    on the cells at ``x >= x_min``."""
    from .sensor import Measurement, measurement_id
    from .world import visible_cells

    grid, T = cfg.grid, cfg.horizon
    prior = GridDist.uniform(grid, None if cfg.prior == "uniform" else cfg.prior)
    per_agent = []
    for a in range(cfg.n_agents):
        ms = []
        for t in range(1, T + 1):
            vis = visible_cells(grid, cfg.pose(a, t), cfg.sensor.max_range, cfg.sensor.fov)
            ms.append(Measurement(measurement_id(a, t), a, t, tuple(sorted(vis))))
        per_agent.append(ms)
    exact = brute_force_posterior(grid, cfg.motion, cfg.sensor, prior, [m for ms in per_agent for m in ms], T)
    locals_ = [brute_force_posterior(grid, cfg.motion, cfg.sensor, prior, ms, T) for ms in per_agent]
    # the product rule divides by the prior at time T: the prior pushed through the motion model
    moved = brute_force_posterior(grid, cfg.motion, cfg.sensor, prior, [], T)
    fused = momentary_product(locals_, moved)
    idx = [grid.index_of(c) for c in slipped_region(grid, x_min)]
    return {
        "exact_mass": float(exact.mass[idx].sum()),
        "product_mass": float(fused.mass[idx].sum()),
        "exact": exact,
        "product": fused,
    }
