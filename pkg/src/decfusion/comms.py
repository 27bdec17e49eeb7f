"""Query/response protocol for exchanging the most informative measurement,
the every-k broadcast baseline, and scalar bandwidth accounting.

Wire layout (field order is fixed and each entry below is one scalar):

* QueryMsg: requester, time, then per sample ``weight, x0, y0, ..., xL, yL``,
  then the excluded measurement ids.
* Measurement: id, agent, time, then ``x, y`` per visible cell, then
  ``x, y`` of the detection when present.
* ResponseMsg: responder, then the measurement (if any).
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .filter import ParticleBelief, StaleMeasurement
from .sensor import Measurement, SensorParams, likelihood_xy
from .world import GridMap


@dataclass(frozen=True)
class QueryMsg:
    requester: int
    time: int
    # samples[i, k] = (x, y) of sample i at time start + k
    samples: np.ndarray
    weights: np.ndarray
    exclude: tuple = ()

    @property
    def start(self) -> int:
        return self.time - (self.samples.shape[1] - 1)

    @property
    def window_len(self) -> int:
        return self.samples.shape[1]

    def to_scalars(self) -> list:
        out = [self.requester, self.time]
        for w, traj in zip(self.weights, self.samples):
            out.append(float(w))
            out.extend(int(v) for v in traj.reshape(-1))
        out.extend(self.exclude)
        return out


@dataclass(frozen=True)
class ResponseMsg:
    responder: int
    payload: Optional[Measurement] = None
    score: float = 0.0

    def to_scalars(self) -> list:
        out = [self.responder]
        if self.payload is not None:
            out.extend(measurement_scalars(self.payload))
        return out


def measurement_scalars(m: Measurement) -> list:
    out = [m.id, m.agent, m.time]
    for c in m.visible:
        out.extend(c)
    if m.detection is not None:
        out.extend(m.detection)
    return out


def compose_query(
    b: ParticleBelief,
    M: int,
    grid: GridMap,
    rng,
    requester: int = 0,
    exclude=(),
    span: int | None = None,
) -> QueryMsg:
    """Pick ``M`` distinct particles uniformly and ship their windowed trajectories.

    ``span`` caps the number of past steps carried (defaults to the whole
    belief window).
    """
    if not 1 <= M <= b.n:
        raise ValueError(f"M must lie in [1, {b.n}], got {M}")
    idx = rng.choice(b.n, size=M, replace=False)
    states = b.states[idx]
    if span is not None:
        states = states[:, -(span + 1):]
    w = b.weights[idx]
    total = w.sum()
    w = w / total if total > 0 else np.full(M, 1.0 / M)
    return QueryMsg(requester, b.now, grid.coords[states], w, tuple(exclude))


def score_measurement(q: QueryMsg, m: Measurement, params: SensorParams, floor: float) -> float:
    """KL(old || new) in nats between the query's weighted samples before and
    after reweighting by the floored likelihood of ``m``."""
    k = m.time - q.start
    if not 0 <= k < q.window_len:
        raise StaleMeasurement(f"{m.id} is outside the query window")
    xy = q.samples[:, k]
    lik = np.maximum(likelihood_xy(m, xy[:, 0], xy[:, 1], params), floor)
    return _reweight_kl(q.weights, lik)


def _reweight_kl(w: np.ndarray, lik: np.ndarray) -> float:
    live = w > 0
    w = w[live]
    lik = lik[live]
    if np.all(lik == lik[0]):
        return 0.0
    # log(w/u) = log(sum(w * lik)) - log(lik)
    return float(max(np.sum(w * (np.log(np.dot(w, lik)) - np.log(lik))), 0.0))


def select_response(
    q: QueryMsg,
    db,
    params: SensorParams,
    floor: float,
    window: int,
    responder: int = 0,
) -> ResponseMsg:
    """Return the db entry with the highest score for this query.

    Skips entries older than ``q.time - window``, entries named in the
    query's exclusion list, and entries authored by the requester (it holds
    all of its own fresh measurements). Ties go to the newer measurement, then
    the lower agent id, then the lower id.
    """
    excluded = set(q.exclude)
    best, best_key = None, None
    for m in db:
        if m.time < q.time - window or m.id in excluded or m.agent == q.requester:
            continue
        try:
            s = score_measurement(q, m, params, floor)
        except StaleMeasurement:
            continue
        key = (-s, -m.time, m.agent, m.id)
        if best_key is None or key < best_key:
            best, best_key = m, key
    if best is None or best_key[0] == 0.0:
        return ResponseMsg(responder, None, 0.0)
    return ResponseMsg(responder, best, -best_key[0])


def baseline_next(own_stream, k: int, t: int) -> Optional[Measurement]:
    """Own most recent measurement on every k-th step, else None."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if t % k != 0 or not own_stream:
        return None
    return max(own_stream, key=lambda m: m.time)


def bandwidth_of(msg) -> int:
    if isinstance(msg, QueryMsg):
        M = len(msg.weights)
        return 2 + M * (msg.window_len * 2 + 1) + len(msg.exclude)
    if isinstance(msg, ResponseMsg):
        return 1 + (0 if msg.payload is None else bandwidth_of(msg.payload))
    if isinstance(msg, Measurement):
        return 3 + 2 * len(msg.visible) + (2 if msg.detection is not None else 0)
    raise TypeError(f"no bandwidth model for {type(msg).__name__}")


MESSAGE_CLASSES = ("query", "response", "broadcast")


@dataclass
class BandwidthLedger:
    scalars: dict = field(default_factory=lambda: defaultdict(int))
    messages: dict = field(default_factory=lambda: defaultdict(int))

    def record(self, agent: int, kind: str, msg) -> int:
        if kind not in MESSAGE_CLASSES:
            raise ValueError(f"unknown message class {kind!r}")
        cost = bandwidth_of(msg)
        self.scalars[agent, kind] += cost
        self.messages[agent, kind] += 1
        return cost

    def scalars_sent(self, agent: int | None = None) -> int:
        return sum(v for (a, _), v in self.scalars.items() if agent is None or a == agent)

    def messages_sent(self, agent: int | None = None, kind: str | None = None) -> int:
        return sum(
            v
            for (a, k), v in self.messages.items()
            if (agent is None or a == agent) and (kind is None or k == kind)
        )
