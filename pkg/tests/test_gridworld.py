# tests/test_gridworld.py
from collections import Counter, deque

import numpy as np
import pytest
from scipy.stats import chisquare

from perspectiva.errores import ConfigError, FoodEatenError, MalformedTraceError, TerminalStepError
from perspectiva.gridworld import (AgentPose, Orientation, SpawnRegion, WorldConfig, WorldState,
                                   count_initial_configs, count_reachable_states, dominant_sees_food,
                                   field_of_view, make_rng, max_episode_reward, shortest_path_length, spawn,
                                   state_from_record, step, trace_record)

N, E, S, W = Orientation.NORTH, Orientation.EAST, Orientation.SOUTH, Orientation.WEST


def world(side=13, **kw) -> WorldConfig:
    return WorldConfig(side=side, **kw)


def state(sub, dom, food, side=13, **kw) -> WorldState:
    return WorldState(AgentPose(*sub), AgentPose(*dom), food, world(side, **kw))


def bfs_length(s: WorldState) -> int:
    side = s.side
    start, goal = s.subordinate.cell, s.food
    dist = {start: 0}
    queue = deque([start])
    while queue:
        r, c = queue.popleft()
        if (r, c) == goal:
            return dist[(r, c)]
        for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
            nxt = (r + dr, c + dc)
            if 0 <= nxt[0] < side and 0 <= nxt[1] < side and nxt != s.dominant.cell and nxt not in dist:
                dist[nxt] = dist[(r, c)] + 1
                queue.append(nxt)
    raise AssertionError("sin camino")


# ============================================================================
# Orientación / config
# ============================================================================
def test_orientation_turns_are_closed():
    for o in Orientation:
        assert o.turned(-1).turned(-1).turned(-1).turned(-1) is o
        assert o.opposite.opposite is o
        assert Orientation.from_vector(*o.vector) is o


def test_world_config_rejects_region_outside_grid():
    with pytest.raises(ConfigError):
        WorldConfig(side=5, spawn_region=SpawnRegion(top=3, left=3, height=5, width=5))
    with pytest.raises(ConfigError):
        WorldConfig(side=5, spawn_size=3, subordinate_rows=[7])


def test_world_config_rejects_region_on_subordinate_column():
    with pytest.raises(ConfigError):
        WorldConfig(side=5, spawn_size=5)
    with pytest.raises(ConfigError):
        WorldConfig(side=9, spawn_region=SpawnRegion(top=2, left=0, height=3, width=3))
    assert WorldConfig(side=5, spawn_size=3).region.left == 1


def test_resolved_side_per_vision():
    assert WorldConfig().resolved("allo").side == 13
    assert WorldConfig().resolved("ego").side == 11
    assert WorldConfig(side=7).resolved("ego").side == 7
    region = WorldConfig().resolved("allo").region
    assert (region.top, region.left, region.height, region.width) == (4, 4, 5, 5)


# ============================================================================
# spawn
# ============================================================================
def test_spawn_invariants():
    cfg = world(11)
    rng = make_rng(0)
    region = set(cfg.region.cells())
    for _ in range(2000):
        s = spawn(cfg, rng)
        assert s.subordinate.col == 0 and s.subordinate.orientation is E
        assert s.dominant.cell != s.food
        assert s.dominant.cell in region and s.food in region
        assert s.subordinate.cell not in (s.dominant.cell, s.food)
        assert s.t == 0 and not s.terminal


def test_spawn_never_overlaps_subordinate_next_to_its_column():
    cfg = WorldConfig(side=5, spawn_size=3)
    assert cfg.region.left == 1
    rng = make_rng(11)
    for _ in range(2000):
        s = spawn(cfg, rng)
        assert s.subordinate.cell not in (s.dominant.cell, s.food)


def test_spawn_dominant_cell_is_uniform():
    cfg = world(13)
    rng = make_rng(7)
    counts = Counter(spawn(cfg, rng).dominant.cell for _ in range(25000))
    observed = [counts[c] for c in cfg.region.cells()]
    assert len(counts) == 25
    assert chisquare(observed).pvalue > 1e-3


def test_spawn_is_reproducible():
    cfg = world(11)
    a = [spawn(cfg, make_rng(3)) for _ in range(3)]
    b = [spawn(cfg, make_rng(3)) for _ in range(3)]
    assert a == b


# ============================================================================
# campo visual
# ============================================================================
def test_fov_from_leftmost_column_facing_east_covers_grid():
    for row in range(11):
        assert field_of_view(AgentPose(row, 0, E), 11).all()


def test_fov_north_from_center_is_upper_half():
    mask = field_of_view(AgentPose(6, 6, N), 13)
    rows = np.arange(13)[:, None].repeat(13, axis=1)
    assert np.array_equal(mask, rows <= 6)


@pytest.mark.parametrize("side", [11, 13])
def test_fov_matches_angle_oracle_exhaustively(side, visible_oracle):
    for r in range(side):
        for c in range(side):
            for o in Orientation:
                mask = field_of_view(AgentPose(r, c, o), side)
                expected = np.array([[visible_oracle(r, c, o, (i, j)) for j in range(side)] for i in range(side)])
                assert np.array_equal(mask, expected), (r, c, o)


def test_fov_open_half_plane_excludes_boundary():
    mask = field_of_view(AgentPose(6, 6, N), 13, closed=False)
    assert mask[6, 6]
    assert not mask[6, 0]
    assert mask[5, 0]


# ============================================================================
# dominant_sees_food
# ============================================================================
def test_dominant_sees_food_examples():
    assert dominant_sees_food(state((0, 0, E), (6, 6, N), (3, 6)))
    assert not dominant_sees_food(state((0, 0, E), (6, 6, N), (9, 6)))


def test_dominant_sees_food_matches_oracle(visible_oracle):
    cfg = world(13)
    cells = cfg.region.cells()
    n = 0
    for dom in cells:
        for o in Orientation:
            for food in cells:
                if food == dom:
                    continue
                s = WorldState(AgentPose(0, 0, E), AgentPose(dom[0], dom[1], o), food, cfg)
                assert dominant_sees_food(s) == visible_oracle(dom[0], dom[1], o, food)
                n += 1
    assert n == 25 * 4 * 24


def test_dominant_sees_food_without_food_raises():
    with pytest.raises(FoodEatenError):
        dominant_sees_food(state((0, 0, E), (6, 6, N), None))


# ============================================================================
# step
# ============================================================================
def test_stay_costs_step_and_keeps_pose():
    s = state((3, 0, E), (6, 6, N), (5, 5))
    nxt, reward, events = step(s, (0, 0), N)
    assert reward == pytest.approx(-0.1)
    assert nxt.subordinate == s.subordinate
    assert nxt.t == 1 and not nxt.terminal and not events.ate


def test_eating_unseen_food_pays_and_terminates():
    s = state((9, 5, E), (6, 6, N), (9, 6))
    nxt, reward, events = step(s, (0, 1), E)
    assert reward == pytest.approx(999.9)
    assert nxt.terminal and nxt.food is None
    assert events.ate and events.seen is False


def test_eating_seen_food_is_punished():
    s = state((3, 5, E), (6, 6, N), (3, 6))
    _, reward, events = step(s, (0, 1), E)
    assert reward == pytest.approx(-1000.1)
    assert events.seen is True


def test_move_rotates_to_travel_direction():
    s = state((3, 2, N), (6, 6, N), (8, 8))
    nxt, _, _ = step(s, (0, 1), E)
    assert nxt.subordinate == AgentPose(3, 3, E)


def test_blocked_moves_keep_cell_but_rotate():
    s = state((0, 0, E), (1, 0, N), (8, 8))
    off_grid, _, ev = step(s, (-1, 0), N)
    assert off_grid.subordinate == AgentPose(0, 0, N) and ev.blocked
    into_dom, reward, ev = step(s, (1, 0), S)
    assert into_dom.subordinate == AgentPose(0, 0, S) and ev.blocked
    assert reward == pytest.approx(-0.1)


def test_timeout_after_max_steps():
    s = state((3, 0, E), (6, 6, N), (5, 5))
    total = 0.0
    for _ in range(100):
        s, reward, _ = step(s, (0, 0), E)
        total += reward
    assert s.terminal and s.t == 100
    assert total == pytest.approx(-10.0)
    with pytest.raises(TerminalStepError):
        step(s, (0, 0), E)


def test_step_rejects_bad_displacement():
    s = state((3, 0, E), (6, 6, N), (5, 5))
    with pytest.raises(ValueError):
        step(s, (1, 1), S)
    with pytest.raises(ValueError):
        step(s, (1, 0), N)


def test_episodes_are_deterministic_and_dominant_static():
    cfg = world(11)
    actions = make_rng(5).integers(4, size=100)
    vectors = [o.vector for o in Orientation]

    def play():
        s = spawn(cfg, make_rng(11))
        dom0 = s.dominant
        trace = []
        for a in actions:
            if s.terminal:
                break
            s, reward, _ = step(s, vectors[a], Orientation(int(a)))
            assert s.dominant == dom0
            trace.append((s, reward))
        return trace

    assert play() == play()


def test_episode_reward_algebra():
    cfg = world(11)
    rng = make_rng(21)
    allowed = {round(-10.0, 6)} | {round(sign * 1000 - 0.1 * k, 6) for sign in (1, -1) for k in range(1, 101)}
    for _ in range(200):
        s = spawn(cfg, rng)
        total = 0.0
        while not s.terminal:
            o = Orientation(int(rng.integers(4)))
            s, reward, _ = step(s, o.vector, o)
            total += reward
        assert round(total, 6) in allowed
        assert s.t <= 100


# ============================================================================
# recompensa máxima
# ============================================================================
def test_max_episode_reward_examples():
    unseen = state((9, 1, E), (6, 6, N), (9, 5))
    assert shortest_path_length(unseen) == 4
    assert max_episode_reward(state((9, 0, E), (6, 6, N), (9, 5))) == pytest.approx(999.5)
    assert max_episode_reward(state((0, 0, E), (6, 6, N), (3, 6))) == pytest.approx(-10.0)


def test_shortest_path_detours_around_dominant():
    s = state((6, 0, E), (6, 5, N), (6, 7))
    assert shortest_path_length(s) == 9 == bfs_length(s)


def test_shortest_path_matches_bfs_on_random_spawns():
    for side in (11, 13):
        cfg = world(side)
        rng = make_rng(side)
        for _ in range(500):
            s = spawn(cfg, rng)
            assert shortest_path_length(s) == bfs_length(s)


# ============================================================================
# conteos y trazas
# ============================================================================
def test_initial_config_counts():
    assert count_initial_configs(world(11)) == 26400
    assert count_initial_configs(world(13)) == 31200


def test_reachable_state_count_is_positive_and_bounded():
    cfg = WorldConfig(side=5, spawn_size=3)
    n = count_reachable_states(cfg)
    pairs = 9 * 8
    assert 0 < n <= pairs * 4 * 25 * 4


def test_trace_record_round_trip():
    s = state((2, 0, E), (6, 6, W), (5, 5))
    rec = trace_record(s, 3, -0.1, False)
    assert rec == {"t": 0, "sub": [2, 0, 1], "dom": [6, 6, 3], "food": [5, 5], "action": 3,
                   "reward": -0.1, "terminal": False}
    assert state_from_record(rec, s.config) == s


def test_state_from_record_rejects_malformed():
    with pytest.raises(MalformedTraceError):
        state_from_record({"t": 0, "sub": [1, 2], "dom": [0, 0, 0], "food": None}, world(13))
    with pytest.raises(MalformedTraceError):
        state_from_record({"t": 0, "sub": [1, 2, 9], "dom": [0, 0, 0], "food": None}, world(13))
