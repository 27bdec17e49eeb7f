"""Occupancy grid, target motion kernel and line-of-sight visibility."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import NamedTuple

import numpy as np


class MapFormatError(ValueError):
    pass


class MapValidationError(ValueError):
    pass


class DomainError(ValueError):
    """A cell argument is blocked, out of bounds or otherwise unusable."""


class Cell(NamedTuple):
    x: int
    y: int


class Heading(str, Enum):
    N = "N"
    E = "E"
    S = "S"
    W = "W"

    @property
    def vector(self) -> tuple[int, int]:
        # y grows downward (row 0 is the first text line)
        return {"N": (0, -1), "E": (1, 0), "S": (0, 1), "W": (-1, 0)}[self.value]


FOV_FULL = "full"
FOV_FRONTAL = "frontal_half"

# E, W, S, N in (dx, dy)
MOVES = ((1, 0), (-1, 0), (0, 1), (0, -1))


@dataclass(frozen=True)
class AgentPose:
    cell: Cell
    heading: Heading = Heading.N


@dataclass(frozen=True)
class MotionParams:
    p_stay: float = 0.2

    def __post_init__(self):
        if not 0.0 <= self.p_stay <= 1.0:
            raise ValueError(f"p_stay must lie in [0, 1], got {self.p_stay}")


class GridMap:
    """Immutable occupancy grid.

    ``blocked[y, x]`` is True for obstacle cells. Free cells are numbered
    row-major; ``index[y, x]`` gives that number (or -1 when blocked) and
    ``coords[i]`` maps back to ``(x, y)``. Particle filters work on these
    indices.
    """

    def __init__(self, blocked):
        blocked = np.array(blocked, dtype=bool)
        if blocked.ndim != 2 or blocked.shape[0] < 1 or blocked.shape[1] < 1:
            raise MapValidationError("map must be a non-empty 2D grid")
        if blocked.all():
            raise MapValidationError("map has no free cell")
        blocked.setflags(write=False)
        self.blocked = blocked
        self.height, self.width = blocked.shape
        ys, xs = np.nonzero(~blocked)
        self.coords = np.stack([xs, ys], axis=1)
        self.coords.setflags(write=False)
        index = np.full(blocked.shape, -1, dtype=np.int64)
        index[ys, xs] = np.arange(len(xs))
        index.setflags(write=False)
        self.index = index
        self.n_free = len(xs)
        self._neighbors = None
        self._vis_cache: dict = {}

    def __repr__(self):
        return f"GridMap({self.width}x{self.height}, free={self.n_free})"

    def in_bounds(self, c) -> bool:
        return 0 <= c[0] < self.width and 0 <= c[1] < self.height

    def is_free(self, c) -> bool:
        return self.in_bounds(c) and not self.blocked[c[1], c[0]]

    def free_cells(self) -> list[Cell]:
        return [Cell(int(x), int(y)) for x, y in self.coords]

    def cell_of(self, i: int) -> Cell:
        x, y = self.coords[i]
        return Cell(int(x), int(y))

    def index_of(self, c) -> int:
        if not self.is_free(c):
            raise DomainError(f"cell {tuple(c)} is not a free cell of {self!r}")
        return int(self.index[c[1], c[0]])

    @property
    def neighbor_table(self) -> np.ndarray:
        """(n_free, 4) free-cell indices reached by each move; blocked moves map to self."""
        if self._neighbors is None:
            table = np.empty((self.n_free, 4), dtype=np.int64)
            for k, (dx, dy) in enumerate(MOVES):
                nx = self.coords[:, 0] + dx
                ny = self.coords[:, 1] + dy
                ok = (nx >= 0) & (nx < self.width) & (ny >= 0) & (ny < self.height)
                dest = np.arange(self.n_free)
                dest[ok] = np.where(
                    self.index[ny[ok], nx[ok]] >= 0, self.index[ny[ok], nx[ok]], dest[ok]
                )
                table[:, k] = dest
            table.setflags(write=False)
            self._neighbors = table
        return self._neighbors

    def to_text(self) -> str:
        return "".join("".join("#" if b else "." for b in row) + "\n" for row in self.blocked)


def load_map(text: str) -> GridMap:
    """Parse an ASCII map: '.' free, '#' blocked, first line is y = 0."""
    lines = [ln.rstrip("\r") for ln in text.split("\n")]
    while lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise MapFormatError("empty map text")
    width = len(lines[0])
    rows = []
    for y, line in enumerate(lines):
        if len(line) != width:
            raise MapFormatError(f"line {y} has length {len(line)}, expected {width}")
        bad = set(line) - {".", "#"}
        if bad:
            raise MapFormatError(f"unknown character(s) {sorted(bad)} on line {y}")
        rows.append([ch == "#" for ch in line])
    if width == 0:
        raise MapFormatError("map lines are empty")
    return GridMap(rows)


def _require_free(grid: GridMap, c) -> None:
    if not grid.is_free(c):
        raise DomainError(f"cell {tuple(c)} is blocked or out of bounds")


def transition_prob(grid: GridMap, params: MotionParams, frm, to) -> float:
    _require_free(grid, frm)
    if not grid.is_free(to):
        return 0.0
    move = (1.0 - params.p_stay) / 4.0
    mass = 0.0
    for dx, dy in ((0, 0),) + MOVES:
        dest = (frm[0] + dx, frm[1] + dy)
        if not grid.is_free(dest):
            dest = tuple(frm)
        if dest == tuple(to):
            mass += params.p_stay if (dx, dy) == (0, 0) else move
    return mass


def transition_matrix(grid: GridMap, params: MotionParams) -> np.ndarray:
    """Dense row-stochastic kernel over free cells: ``T[i, j] = p(j | i)``."""
    n = grid.n_free
    T = np.zeros((n, n))
    T[np.arange(n), np.arange(n)] += params.p_stay
    move = (1.0 - params.p_stay) / 4.0
    for k in range(4):
        np.add.at(T, (np.arange(n), grid.neighbor_table[:, k]), move)
    return T


def sample_moves(grid: GridMap, params: MotionParams, states: np.ndarray, rng) -> np.ndarray:
    """Vectorised kernel draw for an array of free-cell indices.

    Draw order per call: one uniform per state (stay test), then one
    direction per state.
    """
    n = len(states)
    u = rng.random(n)
    d = rng.integers(0, 4, size=n)
    moved = grid.neighbor_table[states, d]
    return np.where(u < params.p_stay, states, moved)


def step_target(grid: GridMap, params: MotionParams, state, rng) -> Cell:
    i = grid.index_of(state)
    j = sample_moves(grid, params, np.array([i]), rng)[0]
    return grid.cell_of(j)


def _line(a, b):
    """Integer Bresenham cells from a to b inclusive."""
    x0, y0 = a
    x1, y1 = b
    dx, dy = abs(x1 - x0), -abs(y1 - y0)
    sx = 1 if x0 < x1 else -1
    sy = 1 if y0 < y1 else -1
    err = dx + dy
    while True:
        yield x0, y0
        if x0 == x1 and y0 == y1:
            return
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x0 += sx
        if e2 <= dx:
            err += dx
            y0 += sy


def line_of_sight(grid: GridMap, a, b) -> bool:
    # trace from the lexicographically smaller end so visibility is symmetric
    a, b = (tuple(a), tuple(b)) if tuple(a) <= tuple(b) else (tuple(b), tuple(a))
    return all(not grid.blocked[y, x] for x, y in _line(a, b))


def visible_cells(grid: GridMap, pose: AgentPose, max_range: int, fov: str = FOV_FULL) -> frozenset:
    """Free cells within Chebyshev ``max_range`` that have line of sight to the pose."""
    _require_free(grid, pose.cell)
    if max_range < 0:
        raise ValueError("max_range must be >= 0")
    if fov not in (FOV_FULL, FOV_FRONTAL):
        raise ValueError(f"unknown fov {fov!r}")
    key = (tuple(pose.cell), Heading(pose.heading), max_range, fov)
    hit = grid._vis_cache.get(key)
    if hit is not None:
        return hit
    px, py = pose.cell
    hx, hy = Heading(pose.heading).vector
    out = set()
    for y in range(max(0, py - max_range), min(grid.height, py + max_range + 1)):
        for x in range(max(0, px - max_range), min(grid.width, px + max_range + 1)):
            if grid.blocked[y, x]:
                continue
            if fov == FOV_FRONTAL and (x - px) * hx + (y - py) * hy < 0:
                continue
            if line_of_sight(grid, (px, py), (x, y)):
                out.add(Cell(x, y))
    result = frozenset(out)
    grid._vis_cache[key] = result
    return result
