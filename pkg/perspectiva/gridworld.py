# perspectiva/gridworld.py
"""
Mundo en grilla 2-D: subordinado (aprende), dominante (estático) y una comida.
Campo visual de 180°, movimiento con rotación, recompensas y término de episodio.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field, replace
from enum import IntEnum
from functools import lru_cache
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from .errores import ConfigError, FoodEatenError, MalformedTraceError, TerminalStepError

log = logging.getLogger(__name__)

Cell = tuple[int, int]

# ============================================================================
# ORIENTACIÓN
# ============================================================================
_VECTORS: tuple[Cell, ...] = ((-1, 0), (0, 1), (1, 0), (0, -1))


class Orientation(IntEnum):
    """Sentido horario: NORTH=0, EAST=1, SOUTH=2, WEST=3."""

    NORTH = 0
    EAST = 1
    SOUTH = 2
    WEST = 3

    @property
    def vector(self) -> Cell:
        return _VECTORS[self.value]

    def turned(self, quarters: int) -> "Orientation":
        return Orientation((self.value + quarters) % 4)

    @property
    def opposite(self) -> "Orientation":
        return self.turned(2)

    @classmethod
    def from_vector(cls, dr: int, dc: int) -> "Orientation":
        try:
            return cls(_VECTORS.index((dr, dc)))
        except ValueError:
            raise ValueError(f"Desplazamiento sin orientación: {(dr, dc)}") from None


# ============================================================================
# CONFIG
# ============================================================================
class Rewards(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    eat_observed: float = -1000.0
    eat_unobserved: float = 1000.0
    step: float = -0.1


class SpawnRegion(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    top: int
    left: int
    height: int = 5
    width: int = 5

    def cells(self) -> list[Cell]:
        return [(self.top + i, self.left + j) for i in range(self.height) for j in range(self.width)]


class WorldConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    side: Optional[int] = None  # None: se resuelve según el modo visual
    side_allocentric: int = 13
    side_egocentric: int = 11
    spawn_size: int = 5
    spawn_region: Optional[SpawnRegion] = None  # None: centrada
    subordinate_rows: Optional[list[int]] = None  # None: toda la columna 0
    max_steps: int = 100
    rewards: Rewards = Rewards()
    closed_fov: bool = True

    @model_validator(mode="after")
    def _check(self) -> "WorldConfig":
        if self.max_steps < 1:
            raise ConfigError(f"max_steps debe ser >= 1 (recibido {self.max_steps})")
        if self.side is None:
            return self
        if self.side < 3:
            raise ConfigError(f"La grilla necesita lado >= 3 (recibido {self.side})")
        region = self.region
        if region.height * region.width < 2:
            raise ConfigError("La región de aparición necesita al menos 2 celdas")
        if region.top < 0 or region.left < 0 or region.top + region.height > self.side \
                or region.left + region.width > self.side:
            raise ConfigError(f"La región de aparición {region} no cabe en una grilla de {self.side}")
        if region.left == 0:
            # la columna 0 es la del subordinado
            raise ConfigError(f"La región de aparición {region} toca la columna 0 del subordinado")
        for r in self.subordinate_rows or []:
            if not 0 <= r < self.side:
                raise ConfigError(f"Fila de aparición del subordinado fuera de la grilla: {r}")
        return self

    @property
    def region(self) -> SpawnRegion:
        if self.spawn_region is not None:
            return self.spawn_region
        if self.side is None:
            raise ConfigError("Grilla sin lado resuelto")
        origin = (self.side - self.spawn_size) // 2
        return SpawnRegion(top=origin, left=origin, height=self.spawn_size, width=self.spawn_size)

    @property
    def rows(self) -> list[int]:
        if self.side is None:
            raise ConfigError("Grilla sin lado resuelto")
        return list(self.subordinate_rows) if self.subordinate_rows else list(range(self.side))

    def resolved(self, vision: str) -> "WorldConfig":
        """Copia con lado concreto: 13 alocéntrico, 11 egocéntrico salvo que side esté fijado."""
        if self.side is not None:
            return self
        side = self.side_allocentric if vision == "allo" else self.side_egocentric
        return WorldConfig.model_validate({**self.model_dump(), "side": side})


# ============================================================================
# ESTADO
# ============================================================================
@dataclass(frozen=True, slots=True)
class AgentPose:
    row: int
    col: int
    orientation: Orientation

    @property
    def cell(self) -> Cell:
        return (self.row, self.col)


@dataclass(frozen=True, slots=True)
class StepEvents:
    ate: bool = False
    seen: Optional[bool] = None
    blocked: bool = False


@dataclass(frozen=True, slots=True)
class WorldState:
    subordinate: AgentPose
    dominant: AgentPose
    food: Optional[Cell]
    config: WorldConfig = field(compare=False, repr=False)
    t: int = 0
    terminal: bool = False

    @property
    def side(self) -> int:
        return self.config.side


def _require_side(config: WorldConfig) -> int:
    if config.side is None:
        raise ConfigError("WorldConfig sin lado: usar config.resolved(vision)")
    return config.side


def make_rng(seed: int) -> np.random.Generator:
    """Generador contador (Philox) reproducible."""
    return np.random.Generator(np.random.Philox(seed))


def spawn(config: WorldConfig, rng: np.random.Generator) -> WorldState:
    _require_side(config)
    rows = config.rows
    sub_row = rows[int(rng.integers(len(rows)))]
    cells = config.region.cells()
    dom_idx = int(rng.integers(len(cells)))
    food_idx = int(rng.integers(len(cells) - 1))
    if food_idx >= dom_idx:
        food_idx += 1
    dom_o = Orientation(int(rng.integers(4)))
    dr, dc = cells[dom_idx]
    return WorldState(
        subordinate=AgentPose(sub_row, 0, Orientation.EAST),
        dominant=AgentPose(dr, dc, dom_o),
        food=cells[food_idx],
        config=config,
    )


def state_from_config(config: WorldConfig, sub_row: int, dominant: AgentPose, food: Cell) -> WorldState:
    _require_side(config)
    return WorldState(
        subordinate=AgentPose(sub_row, 0, Orientation.EAST),
        dominant=dominant,
        food=tuple(food),
        config=config,
    )


# ============================================================================
# CAMPO VISUAL
# ============================================================================
def cell_visible(pose: AgentPose, cell: Cell, closed: bool = True) -> bool:
    hr, hc = pose.orientation.vector
    dot = (cell[0] - pose.row) * hr + (cell[1] - pose.col) * hc
    if cell == pose.cell:
        return True
    return dot >= 0 if closed else dot > 0


@lru_cache(maxsize=4096)
def _fov_cached(row: int, col: int, orientation: int, side: int, closed: bool) -> np.ndarray:
    hr, hc = _VECTORS[orientation]
    rr, cc = np.mgrid[0:side, 0:side]
    dot = (rr - row) * hr + (cc - col) * hc
    mask = dot >= 0 if closed else dot > 0
    mask[row, col] = True
    mask.setflags(write=False)
    return mask


def field_of_view(pose: AgentPose, side: int, closed: bool = True) -> np.ndarray:
    """Máscara booleana side×side: semiplano frontal, alcance ilimitado, sin oclusión."""
    if not (0 <= pose.row < side and 0 <= pose.col < side):
        raise ValueError(f"Pose fuera de la grilla: {pose}")
    return _fov_cached(pose.row, pose.col, int(pose.orientation), side, closed)


def dominant_sees_food(state: WorldState) -> bool:
    if state.food is None:
        raise FoodEatenError("La comida ya fue comida")
    return cell_visible(state.dominant, state.food, state.config.closed_fov)


# ============================================================================
# DINÁMICA
# ============================================================================
def step(state: WorldState, displacement: Cell, new_orientation: Orientation) -> tuple[WorldState, float, StepEvents]:
    if state.terminal:
        raise TerminalStepError(f"Paso después de terminar el episodio (t={state.t})")
    dr, dc = displacement
    if abs(dr) + abs(dc) > 1:
        raise ValueError(f"Desplazamiento inválido: {displacement}")
    sub = state.subordinate
    cfg = state.config
    side = cfg.side

    if (dr, dc) == (0, 0):
        orientation = sub.orientation
    else:
        orientation = Orientation(new_orientation)
        if orientation.vector != (dr, dc):
            raise ValueError(f"La orientación {orientation.name} no apunta a {displacement}")

    target = (sub.row + dr, sub.col + dc)
    blocked = (dr, dc) != (0, 0) and (
        not (0 <= target[0] < side and 0 <= target[1] < side) or target == state.dominant.cell
    )
    if blocked or (dr, dc) == (0, 0):
        target = sub.cell
    new_sub = AgentPose(target[0], target[1], orientation)

    reward = cfg.rewards.step
    food = state.food
    ate = False
    seen = None
    if food is not None and target == food:
        seen = dominant_sees_food(state)
        reward += cfg.rewards.eat_observed if seen else cfg.rewards.eat_unobserved
        ate = True
        food = None

    t = state.t + 1
    terminal = ate or t >= cfg.max_steps
    new_state = replace(state, subordinate=new_sub, food=food, t=t, terminal=terminal)
    return new_state, reward, StepEvents(ate=ate, seen=seen, blocked=blocked)


def shortest_path_length(state: WorldState) -> int:
    """Distancia 4-vecinos subordinado→comida con la celda del dominante bloqueada."""
    if state.food is None:
        raise FoodEatenError("La comida ya fue comida")
    (sr, sc), (fr, fc), (dr, dc) = state.subordinate.cell, state.food, state.dominant.cell
    dist = abs(sr - fr) + abs(sc - fc)
    if sr == fr == dr and min(sc, fc) < dc < max(sc, fc):
        dist += 2
    elif sc == fc == dc and min(sr, fr) < dr < max(sr, fr):
        dist += 2
    return dist


def max_episode_reward(state0: WorldState) -> float:
    cfg = state0.config
    if dominant_sees_food(state0):
        return cfg.rewards.step * cfg.max_steps
    return cfg.rewards.eat_unobserved + cfg.rewards.step * shortest_path_length(state0)


# ============================================================================
# CONTEOS (configuraciones iniciales / estados alcanzables)
# ============================================================================
def count_initial_configs(config: WorldConfig) -> int:
    _require_side(config)
    n = len(config.region.cells())
    return len(config.rows) * n * 4 * (n - 1)


def count_reachable_states(config: WorldConfig) -> int:
    """Estados no terminales alcanzables: (pose subordinado, pose dominante, comida)."""
    side = _require_side(config)
    cells = config.region.cells()
    starts = [(r, 0, int(Orientation.EAST)) for r in config.rows]
    total = 0
    for dom in cells:
        for food in cells:
            if food == dom:
                continue
            seen: set[tuple[int, int, int]] = set(s for s in starts if (s[0], s[1]) not in (dom, food))
            queue = deque(seen)
            while queue:
                r, c, o = queue.popleft()
                for nxt_o, (dr, dc) in enumerate(_VECTORS):
                    nr, nc = r + dr, c + dc
                    if not (0 <= nr < side and 0 <= nc < side) or (nr, nc) == dom:
                        nr, nc = r, c  # bloqueado: solo rota
                    if (nr, nc) == food:
                        continue  # comer termina el episodio
                    nxt = (nr, nc, nxt_o)
                    if nxt not in seen:
                        seen.add(nxt)
                        queue.append(nxt)
            total += len(seen) * 4
    return total


# ============================================================================
# TRAZAS (JSON lines)
# ============================================================================
def trace_record(state: WorldState, action: Optional[int], reward: float, terminal: bool) -> dict:
    """Un objeto por paso: estado antes de la acción, acción, recompensa y término."""
    sub, dom = state.subordinate, state.dominant
    return {
        "t": state.t,
        "sub": [sub.row, sub.col, int(sub.orientation)],
        "dom": [dom.row, dom.col, int(dom.orientation)],
        "food": list(state.food) if state.food is not None else None,
        "action": None if action is None else int(action),
        "reward": float(reward),
        "terminal": bool(terminal),
    }


def state_from_record(record: dict, config: WorldConfig) -> WorldState:
    try:
        sr, sc, so = record["sub"]
        dr, dc, do = record["dom"]
        food = record["food"]
        return WorldState(
            subordinate=AgentPose(int(sr), int(sc), Orientation(int(so))),
            dominant=AgentPose(int(dr), int(dc), Orientation(int(do))),
            food=None if food is None else (int(food[0]), int(food[1])),
            config=config,
            t=int(record["t"]),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise MalformedTraceError(f"Registro de traza inválido: {e}") from e
