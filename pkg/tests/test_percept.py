# tests/test_percept.py
import numpy as np
import pytest

from perspectiva.gridworld import AgentPose, Orientation, WorldConfig, WorldState, make_rng, spawn
from perspectiva.percept import (ActionMode, RelativeOrientation, STAY, VisualMode, action_names,
                                 allocentric_from_egocentric, decode_action, encode, encode_action, encode_allocentric,
                                 encode_egocentric, from_egocentric, map_shape, orientation_size, relative_orientation,
                                 state_from_allocentric, to_egocentric)

N, E, S, W = Orientation.NORTH, Orientation.EAST, Orientation.SOUTH, Orientation.WEST


def random_state(rng: np.random.Generator, side: int) -> WorldState:
    """Estado con poses arbitrarias (no solo de aparición)."""
    cells = rng.choice(side * side, size=3, replace=False)
    (sr, sc), (dr, dc), (fr, fc) = (divmod(int(c), side) for c in cells)
    return WorldState(
        subordinate=AgentPose(sr, sc, Orientation(int(rng.integers(4)))),
        dominant=AgentPose(dr, dc, Orientation(int(rng.integers(4)))),
        food=(fr, fc),
        config=WorldConfig(side=side),
    )


def rotate_about(cell, center, quarters: int):
    dr, dc = cell[0] - center[0], cell[1] - center[1]
    for _ in range(quarters):
        dr, dc = dc, -dr
    return center[0] + dr, center[1] + dc


def test_modes_print_their_value():
    assert str(VisualMode.EGOCENTRIC) == f"{VisualMode.EGOCENTRIC}" == "ego"
    assert f"{ActionMode.ALLOCENTRIC:>5}" == " allo"
    assert VisualMode("allo") is VisualMode.ALLOCENTRIC and VisualMode.ALLOCENTRIC == "allo"


def test_shapes_per_mode():
    assert map_shape(VisualMode.ALLOCENTRIC, 13) == (13, 13, 4)
    assert map_shape(VisualMode.EGOCENTRIC, 11) == (11, 21, 3)
    assert orientation_size("allo") == 8 and orientation_size("ego") == 4


# ============================================================================
# alocéntrico
# ============================================================================
def test_allocentric_at_spawn_sees_everything():
    cfg = WorldConfig(side=13)
    s = spawn(cfg, make_rng(0))
    obs = encode_allocentric(s)
    assert obs.maps.shape == (13, 13, 4)
    assert obs.maps[:, :, 3].all()
    assert obs.maps[s.subordinate.row, 0, 0] == 1
    assert obs.maps[s.dominant.row, s.dominant.col, 1] == 1
    assert obs.maps[s.food[0], s.food[1], 2] == 1
    assert obs.orientation[:4].tolist() == [0, 0, 1, 0]
    assert obs.orientation[4:].sum() == 1


def test_allocentric_hides_dominant_behind():
    s = WorldState(AgentPose(6, 8, E), AgentPose(6, 4, S), (6, 10), WorldConfig(side=13))
    obs = encode_allocentric(s)
    assert obs.maps[:, :, 1].sum() == 0
    assert not obs.orientation[4:].any()
    assert obs.maps[6, 10, 2] == 1


def test_entity_maps_are_masked_and_one_hot():
    rng = make_rng(3)
    for _ in range(3000):
        s = random_state(rng, 13 if rng.integers(2) else 11)
        for vision in VisualMode:
            obs = encode(s, vision)
            mask = obs.maps[:, :, -1]
            entities = obs.maps[:, :, :-1]
            assert set(np.unique(obs.maps)) <= {0.0, 1.0}
            assert (entities.sum(axis=(0, 1)) <= 1).all()
            assert not (entities * (1 - mask)[:, :, None]).any()


# ============================================================================
# egocéntrico
# ============================================================================
def test_egocentric_food_ahead_lands_above_anchor():
    s = WorldState(AgentPose(5, 0, E), AgentPose(3, 5, N), (5, 1), WorldConfig(side=11))
    obs = encode_egocentric(s)
    assert obs.maps.shape == (11, 21, 3)
    assert np.argwhere(obs.maps[:, :, 1]).tolist() == [[9, 10]]
    assert obs.maps[10, 10, 2] == 1


def test_egocentric_relative_orientation_in_vector():
    s = WorldState(AgentPose(8, 5, N), AgentPose(2, 5, S), (4, 4), WorldConfig(side=11))
    obs = encode_egocentric(s)
    assert obs.orientation.tolist() == [1, 0, 0, 0]
    assert int(np.argmax(obs.orientation)) == RelativeOrientation.TOWARD_AGENT


def test_egocentric_map_covers_visible_cells_exactly():
    s = WorldState(AgentPose(10, 0, E), AgentPose(3, 5, N), (5, 5), WorldConfig(side=11))
    obs = encode_egocentric(s)
    assert obs.maps[:, :, 2].sum() == 121


def test_egocentric_rotation_invariance():
    center = (5, 5)
    cfg = WorldConfig(side=11)
    rng = make_rng(9)
    for _ in range(300):
        cells = rng.choice(121, size=2, replace=False)
        dom_cell, food = (divmod(int(c), 11) for c in cells)
        if center in (dom_cell, food):
            continue
        sub_o, dom_o = Orientation(int(rng.integers(4))), Orientation(int(rng.integers(4)))
        encodings = []
        for q in range(4):
            d = rotate_about(dom_cell, center, q)
            s = WorldState(AgentPose(5, 5, sub_o.turned(q)), AgentPose(d[0], d[1], dom_o.turned(q)),
                           rotate_about(food, center, q), cfg)
            encodings.append(encode_egocentric(s))
        for other in encodings[1:]:
            assert np.array_equal(other.maps, encodings[0].maps)
            assert np.array_equal(other.orientation, encodings[0].orientation)


def test_egocentric_coordinates_round_trip():
    for o in Orientation:
        sub = AgentPose(4, 6, o)
        for r in range(11):
            for c in range(11):
                assert from_egocentric(sub, to_egocentric(sub, (r, c), 11), 11) == (r, c)


# ============================================================================
# reconstrucción
# ============================================================================
def test_allocentric_reconstructed_from_egocentric():
    rng = make_rng(17)
    for _ in range(2000):
        s = random_state(rng, 11)
        ego = encode_egocentric(s)
        rebuilt = allocentric_from_egocentric(ego, s.subordinate, 11)
        allo = encode_allocentric(s)
        assert np.array_equal(rebuilt.maps, allo.maps)
        assert np.array_equal(rebuilt.orientation, allo.orientation)


def test_state_recovered_from_allocentric_at_full_visibility():
    cfg = WorldConfig(side=13)
    rng = make_rng(4)
    for _ in range(500):
        s = spawn(cfg, rng)
        assert state_from_allocentric(encode_allocentric(s), cfg) == s


# ============================================================================
# orientación relativa
# ============================================================================
@pytest.mark.parametrize("sub, dom, expected", [
    (E, E, RelativeOrientation.SAME_DIRECTION),
    (E, W, RelativeOrientation.TOWARD_AGENT),
    (N, E, RelativeOrientation.TO_ITS_RIGHT),
    (N, W, RelativeOrientation.TO_ITS_LEFT),
    (N, S, RelativeOrientation.TOWARD_AGENT),
])
def test_relative_orientation_examples(sub, dom, expected):
    assert relative_orientation(sub, dom) is expected


def test_relative_orientation_is_bijective_per_subordinate():
    for sub in Orientation:
        assert {relative_orientation(sub, dom) for dom in Orientation} == set(RelativeOrientation)


# ============================================================================
# acciones
# ============================================================================
def test_decode_action_examples():
    assert decode_action(0, ActionMode.ALLOCENTRIC, S) == ((-1, 0), N)
    assert decode_action(0, ActionMode.EGOCENTRIC, W) == ((0, -1), W)
    assert decode_action(1, ActionMode.EGOCENTRIC, N) == ((1, 0), S)
    assert decode_action(2, ActionMode.EGOCENTRIC, N) == ((0, 1), E)
    assert decode_action(3, ActionMode.EGOCENTRIC, N) == ((0, -1), W)
    assert decode_action(STAY, ActionMode.EGOCENTRIC, W) == ((0, 0), W)


def test_decode_action_injective_and_inverse():
    for mode in ActionMode:
        for o in Orientation:
            decoded = [decode_action(i, mode, o) for i in range(5)]
            assert len({d[0] for d in decoded}) == 5
            for i, (_, heading) in enumerate(decoded[:STAY]):
                assert encode_action(heading, mode, o) == i


def test_decode_action_rejects_out_of_range():
    with pytest.raises(ValueError):
        decode_action(5, ActionMode.ALLOCENTRIC, N)


def test_action_names_follow_decoding_order():
    allo = list(action_names(ActionMode.ALLOCENTRIC))
    assert allo == ["north", "south", "east", "west", "stay"]
    for i, name in enumerate(allo[:STAY]):
        assert decode_action(i, ActionMode.ALLOCENTRIC, E)[1].name.lower() == name
    ego = list(action_names(ActionMode.EGOCENTRIC))
    assert ego[STAY] == "stay"
    # mirando al norte, adelante/atrás/derecha/izquierda son N/S/E/O
    assert [decode_action(i, ActionMode.EGOCENTRIC, N)[1] for i in range(STAY)] == [N, S, E, W]
