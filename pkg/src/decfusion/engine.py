"""Scenario driver: true target, agents' sense-filter-communicate loop,
neighbour topology, metrics and rate sweeps.

Each step ``t = 1..T`` runs in barrier-separated phases:

1. the true target moves;
2. every agent propagates its belief to ``t``, senses, stores and applies
   its own measurement (agents are independent here and may run in
   parallel);
3. on communication rounds (``t % rate == 0``) agents exchange messages in
   ascending id order;
4. one metrics row per agent is recorded.

Random streams are spawned from the scenario seed in a fixed order: world,
reference filter, then (filter, sensing, comms) per agent. An agent's filter
stream is consumed by propagation and re-simulation only, so adding agents
never perturbs existing ones.
"""

from __future__ import annotations

import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import comms
from . import filter as pf
from .config import ScenarioConfig
from .evaluation import GridDist, brute_force_posterior, kl_grid
from .sensor import sense
from .world import step_target

METRICS_HEADER = ("time", "agent", "kl_to_oracle", "ess", "scalars_sent_cum", "msgs_sent_cum")
SWEEP_HEADER = ("strategy", "rate", "bandwidth", "kl_mean", "kl_std", "repeats")
ABSENT = "NA"


class NoPeer(LookupError):
    pass


def neighbors(poses, agent: int, k_nbr: int) -> list:
    """The ``k_nbr`` nearest other agents by cell-centre distance, ties to lower id."""
    n = len(poses)
    if k_nbr >= n:
        raise ValueError(f"k_nbr={k_nbr} must be smaller than the number of agents ({n})")
    me = poses[agent].cell
    others = [
        ((p.cell[0] - me[0]) ** 2 + (p.cell[1] - me[1]) ** 2, j)
        for j, p in enumerate(poses)
        if j != agent
    ]
    others.sort()
    return [j for _, j in others[:k_nbr]]


def pick_peer(nbrs, rng) -> int:
    if not nbrs:
        raise NoPeer("no neighbour to talk to")
    return nbrs[int(rng.integers(0, len(nbrs)))]


@dataclass
class Agent:
    id: int
    belief: pf.ParticleBelief
    db: pf.MeasurementDb
    own: list
    rng_filter: np.random.Generator
    rng_sense: np.random.Generator
    rng_comm: np.random.Generator
    resims: int = 0


@dataclass
class MetricsLog:
    rows: list = field(default_factory=list)
    n_agents: int = 0
    horizon: int = 0
    total_scalars: int = 0
    total_messages: int = 0
    messages_by_kind: dict = field(default_factory=dict)
    target_path: list = field(default_factory=list)
    measurements: list = field(default_factory=list)
    # per-step reference marginals (when an oracle ran) and agents' marginals
    reference: list = field(default_factory=list, repr=False)
    marginals: list = field(default_factory=list, repr=False)

    @property
    def mean_kl(self) -> float:
        vals = [r[2] for r in self.rows if r[2] is not None]
        return float(np.mean(vals)) if vals else math.nan

    @property
    def bandwidth_per_agent_step(self) -> float:
        return self.total_scalars / (self.n_agents * self.horizon)

    @property
    def messages_per_agent_step(self) -> float:
        return self.total_messages / (self.n_agents * self.horizon)

    def summary(self) -> dict:
        return {
            "mean_kl": self.mean_kl,
            "total_bandwidth": self.total_scalars,
            "bandwidth_per_agent_step": self.bandwidth_per_agent_step,
            "messages_per_agent_step": self.messages_per_agent_step,
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(",".join(METRICS_HEADER) + "\n")
        for t, a, kl, ess, sc, ms in self.rows:
            kl_s = ABSENT if kl is None else repr(kl)
            buf.write(f"{t},{a},{kl_s},{ess!r},{sc},{ms}\n")
        return buf.getvalue()

    def to_json(self) -> str:
        rows = [dict(zip(METRICS_HEADER, r)) for r in self.rows]
        return json.dumps({"summary": self.summary(), "rows": rows}, indent=1, sort_keys=True) + "\n"


def _spawn(seed: int, n_agents: int):
    ss = np.random.SeedSequence(seed)
    world, ref, *rest = ss.spawn(2 + 3 * n_agents)
    gens = [np.random.default_rng(s) for s in rest]
    per_agent = [gens[3 * i: 3 * i + 3] for i in range(n_agents)]
    return np.random.default_rng(world), np.random.default_rng(ref), per_agent


def _deliver(agent: Agent, m, t: int, cfg: ScenarioConfig) -> bool:
    """Store a received measurement and fold it into the belief."""
    fp = cfg.filter
    if not pf.db_insert(agent.db, m, t, fp.window):
        return False
    b = agent.belief
    if m.time < b.window_start:
        return False
    if m.time == b.now:
        agent.belief = pf.incorporate(b, m, cfg.grid, cfg.sensor, fp.weight_floor)
    else:
        agent.belief = pf.resimulate(
            b, agent.db, m.time, cfg.grid, cfg.motion, cfg.sensor, fp.weight_floor, agent.rng_filter
        )
        agent.resims += 1
    return True


def run(cfg: ScenarioConfig, parallel: bool | None = None, keep_marginals: bool = False) -> MetricsLog:
    """Simulate one scenario and return its metrics log."""
    parallel = cfg.parallel if parallel is None else parallel
    grid, fp = cfg.grid, cfg.filter
    N, T = cfg.n_agents, cfg.horizon
    rng_world, rng_ref, streams = _spawn(cfg.seed, N)

    region = cfg.target_region
    target = region[int(rng_world.integers(0, len(region)))]
    agents = []
    for i in range(N):
        rf, rs, rc = streams[i]
        b = pf.init_belief(grid, cfg.prior, fp, rf)
        agents.append(Agent(i, b, pf.MeasurementDb(), [], rf, rs, rc))

    oracle = cfg.oracle
    ref_belief = pf.init_belief(grid, cfg.prior, fp, rng_ref) if oracle == "reference" else None
    exact = None
    if oracle == "exact":
        prior = GridDist.uniform(grid, None if cfg.prior == "uniform" else cfg.prior)
        exact = prior.mass

    ledger = comms.BandwidthLedger()
    log = MetricsLog(n_agents=N, horizon=T, target_path=[target])
    pool = ThreadPoolExecutor() if parallel else None
    mapper = pool.map if pool else map

    def sense_phase(agent: Agent, t: int):
        agent.belief = pf.propagate(agent.belief, grid, cfg.motion, agent.rng_filter)
        pose = cfg.pose(agent.id, t)
        m = sense(grid, pose, cfg.sensor, target, t, agent.id, agent.rng_sense)
        pf.db_insert(agent.db, m, t, fp.window)
        agent.own.append(m)
        if len(agent.own) > fp.window + 1:
            agent.own.pop(0)
        agent.belief = pf.incorporate(agent.belief, m, grid, cfg.sensor, fp.weight_floor)
        return m

    try:
        for t in range(1, T + 1):
            target = step_target(grid, cfg.motion, target, rng_world)
            log.target_path.append(target)
            fresh = list(mapper(lambda a: sense_phase(a, t), agents))
            log.measurements.extend(fresh)

            if ref_belief is not None:
                ref_belief = pf.propagate(ref_belief, grid, cfg.motion, rng_ref)
                for m in fresh:
                    ref_belief = pf.incorporate(ref_belief, m, grid, cfg.sensor, fp.weight_floor)
            if exact is not None:
                exact = brute_force_posterior(
                    grid, cfg.motion, cfg.sensor, GridDist(grid, exact), {1: fresh}, 1
                ).mass

            _communicate(cfg, agents, fresh, t, ledger)

            ref_marg = None
            if ref_belief is not None:
                ref_marg = pf.marginal_at(ref_belief, grid)
            elif exact is not None:
                ref_marg = GridDist(grid, exact)
            margs = list(mapper(lambda a: pf.marginal_at(a.belief, grid), agents))
            if keep_marginals:
                log.reference.append(ref_marg)
                log.marginals.append(margs)
            for a, marg in zip(agents, margs):
                kl = None if ref_marg is None else kl_grid(ref_marg, marg)
                log.rows.append(
                    (
                        t,
                        a.id,
                        kl,
                        pf.effective_sample_size(a.belief),
                        ledger.scalars_sent(a.id),
                        ledger.messages_sent(a.id),
                    )
                )
    finally:
        if pool:
            pool.shutdown()

    log.total_scalars = ledger.scalars_sent()
    log.total_messages = ledger.messages_sent()
    log.messages_by_kind = {k: ledger.messages_sent(kind=k) for k in comms.MESSAGE_CLASSES}
    return log


def _communicate(cfg: ScenarioConfig, agents: list, fresh: list, t: int, ledger) -> None:
    cp, fp = cfg.comm, cfg.filter
    if cp.strategy == "none":
        return
    if cp.strategy == "full":
        for m in fresh:
            for other in agents:
                if other.id != m.agent:
                    ledger.record(m.agent, "broadcast", m)
                    _deliver(other, m, t, cfg)
        return
    if t % cp.rate != 0:
        return
    poses = [cfg.pose(a.id, t) for a in agents]
    for a in agents:
        nbrs = neighbors(poses, a.id, cfg.k_nbr)
        if cp.strategy == "baseline":
            m = comms.baseline_next(a.own, cp.k, t)
            if m is None:
                continue
            for j in nbrs:
                ledger.record(a.id, "broadcast", m)
                _deliver(agents[j], m, t, cfg)
        elif cp.strategy == "selective":
            try:
                peer = agents[pick_peer(nbrs, a.rng_comm)]
            except NoPeer:
                continue
            exclude = tuple(sorted(mid for mid, m in a.db.entries.items() if m.agent != a.id))
            q = comms.compose_query(
                a.belief, cp.M, cfg.grid, a.rng_comm, requester=a.id, exclude=exclude, span=cp.span
            )
            ledger.record(a.id, "query", q)
            r = comms.select_response(
                q, peer.db, cfg.sensor, fp.weight_floor, fp.window, responder=peer.id
            )
            ledger.record(peer.id, "response", r)
            if r.payload is not None:
                _deliver(a, r.payload, t, cfg)
        else:
            raise ValueError(f"unknown strategy {cp.strategy!r}")


@dataclass
class SweepRow:
    strategy: str
    rate: int
    bandwidth: float
    kl_mean: float
    kl_std: float
    repeats: int
    kls: list = field(default_factory=list, repr=False)
    bandwidths: list = field(default_factory=list, repr=False)


def sweep(base: ScenarioConfig, rates, strategies, repeats: int, parallel: bool | None = None) -> list:
    """Run every (strategy, rate) pair over ``repeats`` seeds (base seed + r).

    Rows are sorted by bandwidth (scalars per agent per step).
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    rows = []
    for strategy in strategies:
        for rate in rates:
            cfg = base.with_comm(strategy=strategy, rate=int(rate))
            kls, bws = [], []
            for r in range(repeats):
                log = run(cfg.with_overrides(seed=base.seed + r), parallel=parallel)
                kls.append(log.mean_kl)
                bws.append(log.bandwidth_per_agent_step)
            rows.append(
                SweepRow(
                    strategy,
                    int(rate),
                    float(np.mean(bws)),
                    float(np.mean(kls)),
                    float(np.std(kls)),
                    repeats,
                    kls,
                    bws,
                )
            )
    rows.sort(key=lambda r: (r.bandwidth, r.strategy, r.rate))
    return rows


def sweep_to_csv(rows) -> str:
    buf = io.StringIO()
    buf.write(",".join(SWEEP_HEADER) + "\n")
    for r in rows:
        buf.write(f"{r.strategy},{r.rate},{r.bandwidth!r},{r.kl_mean!r},{r.kl_std!r},{r.repeats}\n")
    return buf.getvalue()


def sweep_to_json(rows) -> str:
    out = [
        {"strategy": r.strategy, "rate": r.rate, "bandwidth": r.bandwidth, "kl_mean": r.kl_mean,
         "kl_std": r.kl_std, "repeats": r.repeats, "kl_runs": r.kls}
        for r in rows
    ]
    return json.dumps(out, indent=1, sort_keys=True) + "\n"
