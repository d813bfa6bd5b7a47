# tests/conftest.py
import numpy as np
import pytest

from perspectiva.gridworld import WorldConfig, make_rng, spawn, step, trace_record
from perspectiva.percept import decode_action, encode
from perspectiva.qagent import NetworkConfig
from perspectiva.replay import Trajectory, TrajectoryStep
from perspectiva.train import RlSchedule


def angle_visible(viewer_row, viewer_col, heading, cell) -> bool:
    """Oráculo por ángulo: |ángulo(desplazamiento, rumbo)| <= 90°; la celda propia siempre se ve."""
    dr, dc = cell[0] - viewer_row, cell[1] - viewer_col
    if (dr, dc) == (0, 0):
        return True
    hr, hc = heading.vector
    diff = np.arctan2(dr, dc) - np.arctan2(hr, hc)
    diff = abs((diff + np.pi) % (2 * np.pi) - np.pi)
    return diff <= np.pi / 2 + 1e-9


@pytest.fixture
def tiny_world() -> WorldConfig:
    return WorldConfig(side=5, spawn_size=3, max_steps=10)


@pytest.fixture
def tiny_net() -> NetworkConfig:
    return NetworkConfig(filters=2, dense_units=8, lstm_units=8)


@pytest.fixture
def tiny_schedule() -> RlSchedule:
    return RlSchedule(total_steps=200, batch=2, capacity=50, min_trajectories=2, train_every=2,
                      target_every=5, eval_every=5, eval_episodes=4, seeds=[0])


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.Generator(np.random.Philox(1234))


@pytest.fixture
def visible_oracle():
    return angle_visible


def play_trajectory(world: WorldConfig, vision, action, actions, seed: int = 0) -> Trajectory:
    """Episodio con acciones fijas desde una aparición sembrada; corta al terminar."""
    state = spawn(world, make_rng(seed))
    traj = Trajectory()
    for a in actions:
        if state.terminal:
            break
        obs = encode(state, vision)
        displacement, heading = decode_action(a, action, state.subordinate.orientation)
        nxt, reward, _ = step(state, displacement, heading)
        traj.append(TrajectoryStep(obs, int(a), reward, nxt.terminal), trace_record(state, a, reward, nxt.terminal))
        state = nxt
    return traj


@pytest.fixture
def make_trajectory():
    return play_trajectory
