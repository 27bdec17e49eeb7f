import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from decfusion.world import (
    AgentPose,
    Cell,
    DomainError,
    Heading,
    MapFormatError,
    MapValidationError,
    MotionParams,
    load_map,
    step_target,
    transition_matrix,
    transition_prob,
    visible_cells,
)

OPEN3 = load_map("...\n...\n...\n")


def test_load_minimal():
    g = load_map(".\n")
    assert (g.width, g.height, g.n_free) == (1, 1, 1)


def test_load_transcribes_blocked_cell():
    g = load_map("..#\n...\n")
    assert (g.width, g.height) == (3, 2)
    assert g.blocked.sum() == 1
    assert g.blocked[0, 2]
    assert not g.is_free((2, 0))


def test_load_rejects_fully_blocked():
    with pytest.raises(MapValidationError):
        load_map("##\n##\n")


@pytest.mark.parametrize("text", ["..\n.\n", ".x\n..\n", ""])
def test_load_format_errors(text):
    with pytest.raises(MapFormatError):
        load_map(text)


def test_transition_examples():
    p = MotionParams(0.2)
    assert transition_prob(OPEN3, p, (1, 1), (1, 1)) == pytest.approx(0.2)
    assert transition_prob(OPEN3, p, (1, 1), (1, 0)) == pytest.approx(0.2)
    one = load_map(".\n")
    for ps in (0.0, 0.3, 1.0):
        assert transition_prob(one, MotionParams(ps), (0, 0), (0, 0)) == 1.0


def test_transition_blocked_source_is_domain_error():
    g = load_map(".#\n..\n")
    with pytest.raises(DomainError):
        transition_prob(g, MotionParams(0.5), (1, 0), (0, 0))
    with pytest.raises(DomainError):
        transition_prob(g, MotionParams(0.5), (5, 5), (0, 0))


maps = st.integers(1, 5).flatmap(
    lambda w: st.integers(1, 5).flatmap(
        lambda h: st.lists(st.booleans(), min_size=w * h, max_size=w * h).map(
            lambda bits: (w, h, bits)
        )
    )
)


def _build(shape):
    w, h, bits = shape
    bits = list(bits)
    bits[0] = False  # keep one free cell
    rows = ["".join("#" if bits[y * w + x] else "." for x in range(w)) for y in range(h)]
    return load_map("\n".join(rows) + "\n")


@settings(max_examples=60, deadline=None)
@given(maps, st.floats(0, 1))
def test_rows_sum_to_one_and_blocked_get_nothing(shape, p_stay):
    g = _build(shape)
    params = MotionParams(p_stay)
    for src in g.free_cells():
        total = 0.0
        for y in range(-1, g.height + 1):
            for x in range(-1, g.width + 1):
                mass = transition_prob(g, params, src, (x, y))
                if not g.is_free((x, y)):
                    assert mass == 0.0
                total += mass
        assert abs(total - 1.0) < 1e-12


@settings(max_examples=30, deadline=None)
@given(maps, st.floats(0, 1))
def test_dense_matrix_agrees_with_scalar_kernel(shape, p_stay):
    g = _build(shape)
    params = MotionParams(p_stay)
    T = transition_matrix(g, params)
    for i, a in enumerate(g.free_cells()):
        for j, b in enumerate(g.free_cells()):
            assert T[i, j] == pytest.approx(transition_prob(g, params, a, b), abs=1e-15)


def test_step_target_trivial_cases():
    rng = np.random.default_rng(0)
    one = load_map(".\n")
    assert all(step_target(one, MotionParams(0.3), (0, 0), rng) == (0, 0) for _ in range(50))
    assert all(step_target(OPEN3, MotionParams(1.0), (1, 1), rng) == (1, 1) for _ in range(50))


def test_step_target_matches_kernel_goodness_of_fit():
    g = load_map("....\n..#.\n....\n")
    params = MotionParams(0.2)
    src = Cell(1, 1)
    rng = np.random.default_rng(12345)
    n = 100_000
    counts = {}
    for _ in range(n):
        c = step_target(g, params, src, rng)
        counts[c] = counts.get(c, 0) + 1
    support = [c for c in g.free_cells() if transition_prob(g, params, src, c) > 0]
    assert set(counts) <= set(support)
    expected = np.array([n * transition_prob(g, params, src, c) for c in support])
    observed = np.array([counts.get(c, 0) for c in support])
    assert stats.chisquare(observed, expected).pvalue > 0.001
    # each outcome within 3 standard errors as well
    p = expected / n
    se = np.sqrt(n * p * (1 - p))
    assert np.all(np.abs(observed - expected) <= 3 * se + 1e-9)


def test_visible_examples():
    one = load_map(".\n")
    assert visible_cells(one, AgentPose(Cell(0, 0)), 5) == {(0, 0)}
    corridor = load_map(".....\n")
    assert visible_cells(corridor, AgentPose(Cell(0, 0)), 2) == {(0, 0), (1, 0), (2, 0)}
    walled = load_map(".#...\n")
    assert visible_cells(walled, AgentPose(Cell(0, 0)), 4) == {(0, 0)}


def test_visible_on_blocked_pose_is_domain_error():
    with pytest.raises(DomainError):
        visible_cells(load_map(".#\n"), AgentPose(Cell(1, 0)), 2)


def test_frontal_half_plane():
    g = load_map(".....\n.....\n.....\n")
    vis = visible_cells(g, AgentPose(Cell(2, 1), Heading.E), 2, "frontal_half")
    assert all(c.x >= 2 for c in vis)
    assert Cell(2, 1) in vis and Cell(4, 0) in vis
    vis_n = visible_cells(g, AgentPose(Cell(2, 1), Heading.N), 2, "frontal_half")
    assert all(c.y <= 1 for c in vis_n)


def test_walls_occlude_behind():
    g = load_map(".....\n..#..\n.....\n")
    vis = visible_cells(g, AgentPose(Cell(0, 1)), 4)
    assert Cell(1, 1) in vis
    assert Cell(3, 1) not in vis and Cell(4, 1) not in vis


@settings(max_examples=60, deadline=None)
@given(maps, st.integers(0, 4))
def test_visibility_symmetric_and_range_zero(shape, r):
    g = _build(shape)
    free = g.free_cells()
    vis = {c: visible_cells(g, AgentPose(c), r) for c in free}
    for a in free:
        assert visible_cells(g, AgentPose(a), 0) == {a}
        assert a in vis[a]
        for b in vis[a]:
            assert a in vis[b]
