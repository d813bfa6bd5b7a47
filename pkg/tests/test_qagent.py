# tests/test_qagent.py
import numpy as np
import pytest
from scipy.stats import chisquare

from perspectiva.autograd import LstmState, ParamSet, Tensor, load_checkpoint, no_grad, precision, save_checkpoint
from perspectiva.errores import EmptyBufferError, ModeMismatchError, ShapeMismatchError
from perspectiva.gridworld import WorldConfig, make_rng, spawn
from perspectiva.percept import ActionMode, VisualMode, encode
from perspectiva.qagent import (GreedyAgent, NetworkAgent, Policy, TargetNetwork, act, build_architecture,
                                dueling_combine, forward_step, init_params, param_shapes, parameter_count,
                                parameter_parity, q_learning_loss, q_values, soft_update)
from perspectiva.replay import PaddedBatch, pad_trajectories

EGO, ALLO = VisualMode.EGOCENTRIC, VisualMode.ALLOCENTRIC


@pytest.fixture
def ego_arch(tiny_world, tiny_net):
    return build_architecture(EGO, ActionMode.EGOCENTRIC, tiny_world.side, tiny_net)


@pytest.fixture
def ego_params(ego_arch):
    return init_params(ego_arch, make_rng(0))


def constant_q_params(arch, value: float) -> ParamSet:
    """Todos los pesos en cero y sesgo del valor fijo: Q(s,a) = value para toda acción."""
    params = ParamSet()
    for name, shape in param_shapes(arch).items():
        params.add(name, np.zeros(shape, dtype=np.float32))
    params["val/b"].data[:] = value
    return params


# ============================================================================
# duelo
# ============================================================================
def test_dueling_example():
    q = dueling_combine(Tensor([[2.0]]), Tensor([[1.0, 3.0, 0.0, 0.0, 0.0]]))
    assert q.data.tolist() == [[0.0, 2.0, -1.0, -1.0, -1.0]]


def test_dueling_identities():
    rng = np.random.default_rng(0)
    with precision(np.float64):
        value = Tensor(rng.normal(size=(10000, 1)))
        adv = Tensor(rng.normal(size=(10000, 5)))
        q = dueling_combine(value, adv).data
    assert np.allclose(q.max(axis=1), value.data[:, 0])
    assert np.array_equal(q.argmax(axis=1), adv.data.argmax(axis=1))
    best = adv.data.argmax(axis=1)
    rows = np.arange(10000)
    assert np.allclose((q[rows, best][:, None] - q), (adv.data[rows, best][:, None] - adv.data))


# ============================================================================
# política
# ============================================================================
def test_act_greedy_at_zero_epsilon():
    policy = Policy(0.0, make_rng(0))
    q = np.array([0.0, 5.0, 1.0, 1.0, 1.0])
    assert {act(policy, q) for _ in range(200)} == {1}


def test_act_ties_break_to_lowest_index():
    assert act(Policy(0.0, make_rng(0)), np.array([1.0, 3.0, 3.0, 0.0, 3.0])) == 1


def test_act_uniform_at_full_epsilon():
    policy = Policy(1.0, make_rng(1))
    q = np.array([0.0, 5.0, 1.0, 1.0, 1.0])
    counts = np.bincount([act(policy, q) for _ in range(100_000)], minlength=5)
    assert chisquare(counts).pvalue > 1e-3


def test_act_half_epsilon_greedy_frequency():
    policy = Policy(0.5, make_rng(2))
    q = np.array([0.0, 5.0, 1.0, 1.0, 1.0])
    freq = np.mean([act(policy, q) == 1 for _ in range(100_000)])
    assert freq == pytest.approx(0.6, abs=0.01)


def test_policy_rejects_bad_epsilon():
    with pytest.raises(ValueError):
        Policy(1.5, make_rng(0))


# ============================================================================
# red objetivo
# ============================================================================
def scalar_params(value: float) -> ParamSet:
    ps = ParamSet()
    ps.add("w", np.array([value], dtype=np.float64))
    return ps


def test_soft_update_endpoints_and_scalar():
    source = scalar_params(1.0)
    assert soft_update(TargetNetwork(scalar_params(0.0)), source, 1.0).params["w"].data[0] == 1.0
    assert soft_update(TargetNetwork(scalar_params(0.0)), source, 0.0).params["w"].data[0] == 0.0
    assert soft_update(TargetNetwork(scalar_params(0.0)), source, 0.01).params["w"].data[0] == pytest.approx(0.01)


def test_soft_update_contracts(ego_arch):
    source = init_params(ego_arch, make_rng(1))
    target = TargetNetwork.from_source(init_params(ego_arch, make_rng(2)))
    before = {k: source[k].data - target.params[k].data for k in source}
    soft_update(target, source, 0.25)
    for k in source:
        after = source[k].data - target.params[k].data
        assert np.allclose(after, 0.75 * before[k], atol=1e-6)


def test_soft_update_shape_mismatch(ego_arch):
    with pytest.raises(ShapeMismatchError):
        soft_update(TargetNetwork(scalar_params(0.0)), init_params(ego_arch, make_rng(0)), 0.5)


def test_target_copy_is_independent(ego_params):
    target = TargetNetwork.from_source(ego_params)
    ego_params["fc1/b"].data[:] = 5.0
    assert not target.params["fc1/b"].data.any()


# ============================================================================
# arquitectura
# ============================================================================
def test_parameter_parity_between_modes():
    parity = parameter_parity(WorldConfig())
    assert parity["allocentric"] == 117220
    assert parity["egocentric"] == 117422
    assert parity["relative_difference"] < 0.02


def test_parameter_count_matches_init(ego_arch, ego_params):
    assert ego_params.count() == parameter_count(ego_arch)
    assert ego_params.shapes() == param_shapes(ego_arch)
    assert not ego_params["conv/bias"].data.any()


def test_init_is_seeded(ego_arch):
    a, b = init_params(ego_arch, make_rng(4)), init_params(ego_arch, make_rng(4))
    c = init_params(ego_arch, make_rng(5))
    assert all(np.array_equal(a[k].data, b[k].data) for k in a)
    assert not np.array_equal(a["fc1/w"].data, c["fc1/w"].data)


def test_allocentric_checkpoint_rejected_by_egocentric_network():
    allo = build_architecture(ALLO, ActionMode.ALLOCENTRIC, 13)
    ego = build_architecture(EGO, ActionMode.EGOCENTRIC, 11)
    blob = save_checkpoint(init_params(allo, make_rng(0)), arch=allo.model_dump(mode="json"))
    with pytest.raises(ShapeMismatchError):
        load_checkpoint(blob, expected_shapes=param_shapes(ego))


# ============================================================================
# forward
# ============================================================================
def test_q_values_shape_and_state(tiny_world, ego_arch, ego_params):
    obs = encode(spawn(tiny_world, make_rng(0)), EGO)
    q, state = q_values(ego_params, ego_arch, obs)
    assert q.shape == (5,)
    assert state.hidden.shape == (1, ego_arch.lstm_units)
    q2, _ = q_values(ego_params, ego_arch, obs, state)
    assert not np.array_equal(q, q2)


def test_q_values_rejects_other_vision(tiny_world, ego_arch, ego_params):
    obs = encode(spawn(tiny_world, make_rng(0)), ALLO)
    with pytest.raises(ModeMismatchError):
        q_values(ego_params, ego_arch, obs)
    with pytest.raises(ModeMismatchError):
        forward_step(ego_params, ego_arch, obs.maps[None], obs.orientation[None])


def test_forward_is_deterministic(tiny_world, ego_arch, ego_params):
    obs = encode(spawn(tiny_world, make_rng(3)), EGO)
    with no_grad():
        a, _ = forward_step(ego_params, ego_arch, obs.maps[None], obs.orientation[None])
        b, _ = forward_step(ego_params, ego_arch, obs.maps[None], obs.orientation[None])
    assert np.array_equal(a.data, b.data)


def test_taps_cover_every_layer(tiny_world, ego_arch, ego_params):
    obs = encode(spawn(tiny_world, make_rng(3)), EGO)
    taps = {}
    with no_grad():
        forward_step(ego_params, ego_arch, obs.maps[None], obs.orientation[None], taps=taps)
    assert list(taps) == ["Input", "flatten", "merge", "FC_1", "FC_2", "LSTM", "FC_3", "output"]
    assert taps["merge"].shape == (1, ego_arch.merge_size)
    assert taps["FC_3"].shape == (1, 6)


def test_agent_reset_gives_identical_q_traces(tiny_world, ego_arch, ego_params, make_trajectory):
    traj = make_trajectory(tiny_world, EGO, ActionMode.EGOCENTRIC, [0, 2, 4, 1, 3], seed=5)
    maps, orient, *_ = traj.arrays()
    agent = GreedyAgent(ego_params, ego_arch)
    traces = []
    for _ in range(2):
        agent.reset(1)
        traces.append([agent.q(maps[t:t + 1], orient[t:t + 1]) for t in range(len(traj))])
    assert all(np.array_equal(a, b) for a, b in zip(*traces))


def test_agent_keep_selects_rows(ego_arch, ego_params):
    agent = NetworkAgent(ego_params, ego_arch)
    agent.reset(3)
    agent.state = LstmState(Tensor(np.arange(3 * ego_arch.lstm_units).reshape(3, -1)),
                            Tensor(np.zeros((3, ego_arch.lstm_units))))
    agent.keep(np.array([0, 2]))
    assert agent.state.hidden.shape == (2, ego_arch.lstm_units)
    assert agent.state.hidden.data[1, 0] == 2 * ego_arch.lstm_units


def test_agent_check_modes(ego_arch, ego_params):
    agent = GreedyAgent(ego_params, ego_arch)
    agent.check_modes(EGO, ActionMode.EGOCENTRIC)
    with pytest.raises(ModeMismatchError):
        agent.check_modes(EGO, ActionMode.ALLOCENTRIC)


# ============================================================================
# pérdida TD
# ============================================================================
def test_terminal_target_is_reward(tiny_world, ego_arch, make_trajectory):
    params = constant_q_params(ego_arch, 999.9)
    traj = make_trajectory(tiny_world, EGO, ActionMode.EGOCENTRIC, [4], seed=0)
    batch = pad_trajectories([traj], 10)
    batch.rewards[0, 0] = 999.9
    batch.terminals[0, 0] = 1.0
    loss = q_learning_loss(batch, params, params, ego_arch, gamma=0.99)
    assert float(loss.data) == pytest.approx(0.0, abs=1e-6)


def test_zero_gamma_regresses_on_reward(tiny_world, ego_arch, make_trajectory):
    params = constant_q_params(ego_arch, 2.0)
    traj = make_trajectory(tiny_world, EGO, ActionMode.EGOCENTRIC, [4, 4, 4, 4], seed=0)
    batch = pad_trajectories([traj], 10)
    loss = q_learning_loss(batch, params, params, ego_arch, gamma=0.0)
    expected = np.mean((2.0 - batch.rewards[0, :4]) ** 2)
    assert float(loss.data) == pytest.approx(expected, rel=1e-5)


def test_loss_matches_hand_unroll(tiny_world, ego_arch, make_trajectory):
    params = init_params(ego_arch, make_rng(1))
    target = init_params(ego_arch, make_rng(2))
    traj = make_trajectory(tiny_world, EGO, ActionMode.EGOCENTRIC, [2, 2, 4], seed=3)
    assert len(traj) == 3
    maps, orient, actions, rewards, terminals = traj.arrays()
    gamma = 0.9

    with no_grad():
        q_online, q_target = [], []
        s_on = s_tg = None
        for t in range(3):
            q, s_on = forward_step(params, ego_arch, maps[t:t + 1], orient[t:t + 1], s_on)
            qt, s_tg = forward_step(target, ego_arch, maps[t:t + 1], orient[t:t + 1], s_tg)
            q_online.append(q.data[0].astype(np.float64))
            q_target.append(qt.data[0].astype(np.float64))
    errors = []
    for t in range(3):
        bootstrap = 0.0 if (terminals[t] or t == 2) else q_target[t + 1].max()
        y = rewards[t] + gamma * bootstrap
        errors.append((q_online[t][actions[t]] - y) ** 2)

    loss = q_learning_loss(pad_trajectories([traj], 10), params, target, ego_arch, gamma)
    assert float(loss.data) == pytest.approx(np.mean(errors), rel=1e-4)


def test_padded_loss_equals_per_trajectory_loss(tiny_world, ego_arch, make_trajectory):
    params = init_params(ego_arch, make_rng(1))
    target = init_params(ego_arch, make_rng(2))
    short = make_trajectory(tiny_world, EGO, ActionMode.EGOCENTRIC, [4, 0, 2], seed=1)
    long = make_trajectory(tiny_world, EGO, ActionMode.EGOCENTRIC, [4, 4, 3, 1, 4, 2], seed=2)
    n_short, n_long = len(short), len(long)
    joint = q_learning_loss(pad_trajectories([short, long], 10), params, target, ego_arch, 0.99)
    alone_short = q_learning_loss(pad_trajectories([short], 10), params, target, ego_arch, 0.99)
    alone_long = q_learning_loss(pad_trajectories([long], 10), params, target, ego_arch, 0.99)
    weighted = (float(alone_short.data) * n_short + float(alone_long.data) * n_long) / (n_short + n_long)
    assert float(joint.data) == pytest.approx(weighted, rel=1e-4)


def test_loss_gradients_reach_every_parameter(tiny_world, ego_arch, make_trajectory):
    params = init_params(ego_arch, make_rng(1))
    traj = make_trajectory(tiny_world, EGO, ActionMode.EGOCENTRIC, [4, 0, 2, 1], seed=0)
    loss = q_learning_loss(pad_trajectories([traj], 10), params, TargetNetwork.from_source(params).params,
                           ego_arch, 0.99)
    loss.backward()
    grads = params.grads()
    assert set(grads) == set(param_shapes(ego_arch))
    assert all(np.isfinite(g).all() for g in grads.values())
    assert np.abs(grads["val/w"]).sum() > 0


def test_loss_on_empty_batch_raises(ego_arch, ego_params):
    h, w, c = ego_arch.map_shape
    empty = PaddedBatch(np.zeros((1, 4, h, w, c)), np.zeros((1, 4, 4)), np.zeros((1, 4), dtype=np.int64),
                        np.zeros((1, 4)), np.zeros((1, 4)), np.zeros((1, 4)))
    with pytest.raises(EmptyBufferError):
        q_learning_loss(empty, ego_params, ego_params, ego_arch, 0.99)
