# perspectiva/qagent.py
"""
Red Q duelo recurrente:
conv 6×3×3 → aplanado → concatenación de orientaciones → densa 32 → densa 32
→ LSTM 128 → cabezas de ventaja (5) y valor (1), Q = V + (A − max A).
Sin LSTM y con 2 salidas es el clasificador del experimento supervisado.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict

from .autograd import (ACTIVATIONS, LstmState, ParamSet, Tensor, concat, conv2d, conv_output_shape, default_dtype,
                       dense, fan_in_uniform, lstm_step, no_grad)
from .errores import EmptyBufferError, ModeMismatchError, ShapeMismatchError
from .gridworld import WorldConfig
from .percept import N_ACTIONS, ActionMode, Observation, VisualMode, map_shape, orientation_size
from .replay import PaddedBatch

log = logging.getLogger(__name__)

TAP_NAMES = ("Input", "flatten", "merge", "FC_1", "FC_2", "LSTM", "FC_3", "output")

Padding = Literal["valid", "same"]
Activation = Literal["relu", "tanh", "sigmoid", "linear"]


# ============================================================================
# ARQUITECTURA
# ============================================================================
class NetworkConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    filters: int = 6
    kernel: int = 3
    dense_units: int = 32
    lstm_units: int = 128
    activation: Activation = "relu"
    # con estos valores 13×13×4 y 11×21×3 quedan a < 2 % en número de parámetros
    padding_allocentric: Padding = "same"
    padding_egocentric: Padding = "valid"


class Architecture(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    vision: VisualMode
    action: ActionMode
    side: int
    map_shape: tuple[int, int, int]
    orientation_size: int
    filters: int = 6
    kernel: int = 3
    padding: Padding = "valid"
    dense_units: int = 32
    lstm_units: int = 128
    activation: Activation = "relu"
    recurrent: bool = True
    n_outputs: int = N_ACTIONS

    @property
    def conv_shape(self) -> tuple[int, int, int]:
        h, w = conv_output_shape(self.map_shape[0], self.map_shape[1], self.kernel, self.padding)
        return h, w, self.filters

    @property
    def flatten_size(self) -> int:
        h, w, f = self.conv_shape
        return h * w * f

    @property
    def merge_size(self) -> int:
        return self.flatten_size + self.orientation_size

    def fingerprint(self) -> dict:
        return {
            "vision": str(self.vision),
            "action": str(self.action),
            "maps": list(self.map_shape),
            "orientation": self.orientation_size,
            "flatten": self.flatten_size,
            "outputs": self.n_outputs,
            "recurrent": self.recurrent,
        }


def build_architecture(vision: VisualMode, action: ActionMode, side: int, net: Optional[NetworkConfig] = None,
                       recurrent: bool = True, n_outputs: int = N_ACTIONS) -> Architecture:
    net = net or NetworkConfig()
    vision = VisualMode(vision)
    padding = net.padding_allocentric if vision is VisualMode.ALLOCENTRIC else net.padding_egocentric
    return Architecture(
        vision=vision,
        action=ActionMode(action),
        side=side,
        map_shape=map_shape(vision, side),
        orientation_size=orientation_size(vision),
        filters=net.filters,
        kernel=net.kernel,
        padding=padding,
        dense_units=net.dense_units,
        lstm_units=net.lstm_units,
        activation=net.activation,
        recurrent=recurrent,
        n_outputs=n_outputs,
    )


def param_shapes(arch: Architecture) -> dict[str, tuple]:
    c = arch.map_shape[2]
    d, h = arch.dense_units, arch.lstm_units
    shapes = {
        "conv/kernel": (arch.kernel, arch.kernel, c, arch.filters),
        "conv/bias": (arch.filters,),
        "fc1/w": (arch.merge_size, d),
        "fc1/b": (d,),
        "fc2/w": (d, d),
        "fc2/b": (d,),
    }
    if arch.recurrent:
        shapes.update({
            "lstm/w_x": (d, 4 * h),
            "lstm/w_h": (h, 4 * h),
            "lstm/b": (4 * h,),
            "adv/w": (h, arch.n_outputs),
            "adv/b": (arch.n_outputs,),
            "val/w": (h, 1),
            "val/b": (1,),
        })
    else:
        shapes.update({"out/w": (d, arch.n_outputs), "out/b": (arch.n_outputs,)})
    return shapes


def init_params(arch: Architecture, rng: np.random.Generator) -> ParamSet:
    """Uniforme escalada por fan-in para pesos; sesgos en cero."""
    params = ParamSet()
    for name, shape in param_shapes(arch).items():
        if name.endswith("/b") or name.endswith("/bias"):
            params.add(name, np.zeros(shape, dtype=default_dtype()))
            continue
        fan_in = int(np.prod(shape[:-1]))
        params.add(name, fan_in_uniform(rng, shape, fan_in))
    return params


def parameter_count(arch: Architecture) -> int:
    return int(sum(np.prod(s) for s in param_shapes(arch).values()))


def parameter_parity(world: WorldConfig, net: Optional[NetworkConfig] = None) -> dict:
    """
    Parámetros de la red alocéntrica vs egocéntrica y su diferencia relativa. Sin `side` fijo se comparan
    los lados por modo (13×13×4 frente a 11×21×3); con `side` fijo ambas redes usan ese lado.
    """
    allo = build_architecture(VisualMode.ALLOCENTRIC, ActionMode.ALLOCENTRIC,
                              world.side or world.side_allocentric, net)
    ego = build_architecture(VisualMode.EGOCENTRIC, ActionMode.EGOCENTRIC, world.side or world.side_egocentric, net)
    n_allo, n_ego = parameter_count(allo), parameter_count(ego)
    return {
        "allocentric": n_allo,
        "egocentric": n_ego,
        "flatten_allocentric": allo.flatten_size,
        "flatten_egocentric": ego.flatten_size,
        "relative_difference": abs(n_allo - n_ego) / max(n_allo, n_ego),
    }


# ============================================================================
# FORWARD
# ============================================================================
def _check_inputs(arch: Architecture, maps: np.ndarray, orientation: np.ndarray) -> None:
    if tuple(maps.shape[1:]) != tuple(arch.map_shape) or orientation.shape[1:] != (arch.orientation_size,):
        raise ModeMismatchError(
            f"Entrada {maps.shape[1:]}/{orientation.shape[1:]} no corresponde a la red "
            f"{arch.vision} {arch.map_shape}/{arch.orientation_size}")


def features(params: ParamSet, arch: Architecture, maps: np.ndarray, orientation: np.ndarray,
             taps: Optional[dict] = None) -> Tensor:
    _check_inputs(arch, maps, orientation)
    n = maps.shape[0]
    x = Tensor(maps)
    o = Tensor(orientation)
    conv = conv2d(x, params["conv/kernel"], params["conv/bias"], arch.padding)
    flat = ACTIVATIONS[arch.activation](conv).reshape(n, -1)
    merge = concat([flat, o], axis=1)
    fc1 = dense(merge, params["fc1/w"], params["fc1/b"], arch.activation)
    fc2 = dense(fc1, params["fc2/w"], params["fc2/b"], arch.activation)
    if taps is not None:
        taps["Input"] = np.concatenate([maps.reshape(n, -1), orientation], axis=1)
        taps["flatten"] = flat.data
        taps["merge"] = merge.data
        taps["FC_1"] = fc1.data
        taps["FC_2"] = fc2.data
    return fc2


def dueling_combine(value: Tensor, advantage: Tensor) -> Tensor:
    """Q(s,a) = V(s) + [A(s,a) − max_a' A(s,a')]."""
    return value + (advantage - advantage.max(axis=1, keepdims=True))


def forward_step(params: ParamSet, arch: Architecture, maps: np.ndarray, orientation: np.ndarray,
                 state: Optional[LstmState] = None, taps: Optional[dict] = None) -> tuple[Tensor, LstmState]:
    if not arch.recurrent:
        raise ModeMismatchError("forward_step requiere una red recurrente")
    h = features(params, arch, maps, orientation, taps)
    if state is None:
        state = LstmState.zeros(maps.shape[0], arch.lstm_units)
    out, state = lstm_step(h, state, params["lstm/w_x"], params["lstm/w_h"], params["lstm/b"])
    value = dense(out, params["val/w"], params["val/b"])
    advantage = dense(out, params["adv/w"], params["adv/b"])
    q = dueling_combine(value, advantage)
    if taps is not None:
        taps["LSTM"] = out.data
        taps["FC_3"] = np.concatenate([value.data, advantage.data], axis=1)
        taps["output"] = q.data
    return q, state


def classify(params: ParamSet, arch: Architecture, maps: np.ndarray, orientation: np.ndarray,
             taps: Optional[dict] = None) -> Tensor:
    """Logits del clasificador sin LSTM."""
    h = features(params, arch, maps, orientation, taps)
    logits = dense(h, params["out/w"], params["out/b"])
    if taps is not None:
        taps["output"] = logits.data
    return logits


def q_values(params: ParamSet, arch: Architecture, obs: Observation,
             state: Optional[LstmState] = None) -> tuple[np.ndarray, LstmState]:
    if VisualMode(obs.vision) is not arch.vision:
        raise ModeMismatchError(f"Observación {obs.vision} para una red {arch.vision}")
    with no_grad():
        q, state = forward_step(params, arch, obs.maps[None], obs.orientation[None], state)
    return q.data[0], state


# ============================================================================
# POLÍTICA
# ============================================================================
@dataclass
class Policy:
    epsilon: float
    rng: np.random.Generator

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError(f"epsilon fuera de [0, 1]: {self.epsilon}")


def greedy(q: np.ndarray) -> int:
    """argmax con empate al menor índice."""
    return int(np.argmax(q))


def act(policy: Policy, q: np.ndarray, rng: Optional[np.random.Generator] = None) -> int:
    rng = rng or policy.rng
    if rng.random() < policy.epsilon:
        return int(rng.integers(len(q)))
    return greedy(q)


@dataclass
class NetworkAgent:
    """Agente por lotes sobre la red; conserva el estado LSTM de cada entorno activo."""

    params: ParamSet
    arch: Architecture
    epsilon: float = 0.0
    rng: Optional[np.random.Generator] = None
    state: Optional[LstmState] = field(default=None, repr=False)

    def check_modes(self, vision: VisualMode, action: ActionMode) -> None:
        if self.arch.vision is not VisualMode(vision) or self.arch.action is not ActionMode(action):
            raise ModeMismatchError(
                f"Parámetros entrenados para {self.arch.vision}/{self.arch.action}, "
                f"evaluación pedida en {vision}/{action}")

    def reset(self, n: int) -> None:
        self.state = LstmState.zeros(n, self.arch.lstm_units)

    def keep(self, rows: np.ndarray) -> None:
        self.state = LstmState(Tensor(self.state.hidden.data[rows]), Tensor(self.state.cell.data[rows]))

    def q(self, maps: np.ndarray, orientation: np.ndarray) -> np.ndarray:
        with no_grad():
            q, self.state = forward_step(self.params, self.arch, maps, orientation, self.state)
        return q.data

    def act(self, states, maps: np.ndarray, orientation: np.ndarray) -> np.ndarray:
        q = self.q(maps, orientation)
        actions = np.argmax(q, axis=1)
        if self.epsilon > 0.0:
            for i in range(len(actions)):
                if self.rng.random() < self.epsilon:
                    actions[i] = int(self.rng.integers(q.shape[1]))
        return actions


class GreedyAgent(NetworkAgent):
    """ε = 0: determinista dada la historia de observaciones."""

    def __init__(self, params: ParamSet, arch: Architecture):
        super().__init__(params, arch, epsilon=0.0)


# ============================================================================
# RED OBJETIVO
# ============================================================================
@dataclass
class TargetNetwork:
    params: ParamSet

    @classmethod
    def from_source(cls, source: ParamSet) -> "TargetNetwork":
        return cls(source.copy())


def soft_update(target: TargetNetwork, source: ParamSet, tau: float) -> TargetNetwork:
    """θ⁻ = θτ + θ⁻(1−τ) elemento a elemento."""
    if target.params.shapes() != source.shapes():
        raise ShapeMismatchError("Red objetivo y red de entrenamiento con formas distintas")
    for name in source.names():
        tgt = target.params[name]
        tgt.data = (source[name].data * tau + tgt.data * (1.0 - tau)).astype(tgt.data.dtype)
    return target


# ============================================================================
# PÉRDIDA TD
# ============================================================================
def q_learning_loss(batch: PaddedBatch, params: ParamSet, target: ParamSet, arch: Architecture,
                    gamma: float) -> Tensor:
    """
    Media sobre pasos reales de (Q(s,a) − y)², y = r + γ·max_a' Q⁻(s',a');
    y = r en pasos terminales y en el último paso real de cada trayectoria.
    La LSTM se desenrolla sobre la trayectoria completa; el relleno final se recorta.
    """
    mask = batch.mask
    n_real = float(mask.sum())
    if mask.shape[0] == 0 or n_real == 0:
        raise EmptyBufferError("Lote vacío")
    length = int(mask.sum(axis=1).max())
    b = mask.shape[0]

    with no_grad():
        tstate = None
        target_max = np.zeros((b, length), dtype=np.float64)
        for t in range(length):
            tq, tstate = forward_step(target, arch, batch.maps[:, t], batch.orientation[:, t], tstate)
            target_max[:, t] = tq.data.max(axis=1)

    state = None
    total = None
    for t in range(length):
        q, state = forward_step(params, arch, batch.maps[:, t], batch.orientation[:, t], state)
        q_sa = q.take_rows(batch.actions[:, t])
        bootstrap = target_max[:, t + 1] * mask[:, t + 1] if t + 1 < length else np.zeros(b)
        y = batch.rewards[:, t] + gamma * (1.0 - batch.terminals[:, t]) * bootstrap
        diff = q_sa - y
        term = (diff * diff * batch.mask[:, t]).sum()
        total = term if total is None else total + term
    return total * (1.0 / n_real)
