# perspectiva/percept.py
"""
Percepción y acción del subordinado.

Mapas (alto × ancho × canal, orden fijo para que los checkpoints sean portables):
  - alocéntrico  side × side × 4: subordinado, dominante, comida, observable
  - egocéntrico  side × (2·side−1) × 3: dominante, comida, observable
Orientaciones one-hot:
  - alocéntrico: subordinado + dominante, orden (N, S, E, O) → 8 valores
  - egocéntrico: dominante relativo, orden (hacia el agente, misma dirección,
    a su izquierda, a su derecha) → 4 valores
Entidades no visibles: mapa y orientación en cero.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum, IntEnum
from typing import Iterable, Sequence

import numpy as np

from .gridworld import AgentPose, Cell, Orientation, WorldConfig, WorldState, field_of_view

N_ACTIONS = 5


class _Mode(str, Enum):
    """str(modo) y f"{modo}" dan el valor ("allo" / "ego")."""

    def __str__(self) -> str:
        return self.value

    def __format__(self, spec: str) -> str:
        return format(self.value, spec)


class VisualMode(_Mode):
    ALLOCENTRIC = "allo"
    EGOCENTRIC = "ego"


class ActionMode(_Mode):
    ALLOCENTRIC = "allo"
    EGOCENTRIC = "ego"


class RelativeOrientation(IntEnum):
    """El valor es el índice en el one-hot egocéntrico."""

    TOWARD_AGENT = 0
    SAME_DIRECTION = 1
    TO_ITS_LEFT = 2
    TO_ITS_RIGHT = 3


# one-hot alocéntrico en orden (N, S, E, O)
_ALLO_INDEX = {Orientation.NORTH: 0, Orientation.SOUTH: 1, Orientation.EAST: 2, Orientation.WEST: 3}
_ALLO_FROM_INDEX = {v: k for k, v in _ALLO_INDEX.items()}

# cuartos de vuelta horaria del dominante respecto al subordinado
_REL_BY_QUARTERS = {
    0: RelativeOrientation.SAME_DIRECTION,
    1: RelativeOrientation.TO_ITS_RIGHT,
    2: RelativeOrientation.TOWARD_AGENT,
    3: RelativeOrientation.TO_ITS_LEFT,
}
_QUARTERS_BY_REL = {v: k for k, v in _REL_BY_QUARTERS.items()}

ALLO_ACTIONS = ("north", "south", "east", "west", "stay")
EGO_ACTIONS = ("forward", "backward", "right", "left", "stay")
_ALLO_HEADINGS = (Orientation.NORTH, Orientation.SOUTH, Orientation.EAST, Orientation.WEST)
_EGO_QUARTERS = (0, 2, 1, 3)
STAY = 4


@dataclass(frozen=True)
class Observation:
    maps: np.ndarray
    orientation: np.ndarray
    vision: VisualMode


def map_shape(vision: VisualMode, side: int) -> tuple[int, int, int]:
    if VisualMode(vision) is VisualMode.ALLOCENTRIC:
        return (side, side, 4)
    return (side, 2 * side - 1, 3)


def orientation_size(vision: VisualMode) -> int:
    return 8 if VisualMode(vision) is VisualMode.ALLOCENTRIC else 4


def observation_fingerprint(vision: VisualMode, side: int) -> dict:
    return {"vision": str(vision), "maps": list(map_shape(vision, side)), "orientation": orientation_size(vision)}


def _one_hot(index: int, size: int = 4) -> np.ndarray:
    v = np.zeros(size, dtype=np.float32)
    v[index] = 1.0
    return v


def relative_orientation(sub: Orientation, dom: Orientation) -> RelativeOrientation:
    return _REL_BY_QUARTERS[(int(dom) - int(sub)) % 4]


# ============================================================================
# CODIFICACIÓN
# ============================================================================
def encode_allocentric(state: WorldState) -> Observation:
    side = state.side
    sub, dom = state.subordinate, state.dominant
    fov = field_of_view(sub, side, state.config.closed_fov)
    maps = np.zeros((side, side, 4), dtype=np.float32)
    maps[sub.row, sub.col, 0] = 1.0
    dom_vec = np.zeros(4, dtype=np.float32)
    if fov[dom.row, dom.col]:
        maps[dom.row, dom.col, 1] = 1.0
        dom_vec = _one_hot(_ALLO_INDEX[dom.orientation])
    if state.food is not None and fov[state.food]:
        maps[state.food[0], state.food[1], 2] = 1.0
    maps[:, :, 3] = fov
    orientation = np.concatenate([_one_hot(_ALLO_INDEX[sub.orientation]), dom_vec])
    return Observation(maps, orientation, VisualMode.ALLOCENTRIC)


def to_egocentric(sub: AgentPose, cell: Cell, side: int) -> tuple[int, int]:
    """Celda del mundo → celda del mapa egocéntrico (ancla en (side−1, side−1), rumbo hacia arriba)."""
    hr, hc = sub.orientation.vector
    rr, rc = sub.orientation.turned(1).vector
    dr, dc = cell[0] - sub.row, cell[1] - sub.col
    forward = dr * hr + dc * hc
    lateral = dr * rr + dc * rc
    return side - 1 - forward, side - 1 + lateral


def from_egocentric(sub: AgentPose, map_cell: Cell, side: int) -> Cell:
    hr, hc = sub.orientation.vector
    rr, rc = sub.orientation.turned(1).vector
    forward = side - 1 - map_cell[0]
    lateral = map_cell[1] - (side - 1)
    return sub.row + forward * hr + lateral * rr, sub.col + forward * hc + lateral * rc


def encode_egocentric(state: WorldState) -> Observation:
    side = state.side
    sub, dom = state.subordinate, state.dominant
    fov = field_of_view(sub, side, state.config.closed_fov)
    maps = np.zeros((side, 2 * side - 1, 3), dtype=np.float32)

    rows, cols = np.nonzero(fov)
    hr, hc = sub.orientation.vector
    rr, rc = sub.orientation.turned(1).vector
    forward = (rows - sub.row) * hr + (cols - sub.col) * hc
    lateral = (rows - sub.row) * rr + (cols - sub.col) * rc
    maps[side - 1 - forward, side - 1 + lateral, 2] = 1.0

    dom_vec = np.zeros(4, dtype=np.float32)
    if fov[dom.row, dom.col]:
        mr, mc = to_egocentric(sub, dom.cell, side)
        maps[mr, mc, 0] = 1.0
        dom_vec = _one_hot(int(relative_orientation(sub.orientation, dom.orientation)))
    if state.food is not None and fov[state.food]:
        mr, mc = to_egocentric(sub, state.food, side)
        maps[mr, mc, 1] = 1.0
    return Observation(maps, dom_vec, VisualMode.EGOCENTRIC)


def encode(state: WorldState, vision: VisualMode) -> Observation:
    if VisualMode(vision) is VisualMode.ALLOCENTRIC:
        return encode_allocentric(state)
    return encode_egocentric(state)


def stack_observations(observations: Sequence[Observation]) -> tuple[np.ndarray, np.ndarray]:
    maps = np.stack([o.maps for o in observations])
    orientation = np.stack([o.orientation for o in observations])
    return maps, orientation


# ============================================================================
# RECONSTRUCCIÓN (equivalencia de información con visibilidad completa)
# ============================================================================
def allocentric_from_egocentric(obs: Observation, sub: AgentPose, side: int) -> Observation:
    """Reconstruye la codificación alocéntrica a partir de la egocéntrica y la pose del subordinado."""
    maps = np.zeros((side, side, 4), dtype=np.float32)
    maps[sub.row, sub.col, 0] = 1.0
    dom_vec = np.zeros(4, dtype=np.float32)
    for mr, mc in zip(*np.nonzero(obs.maps[:, :, 2])):
        r, c = from_egocentric(sub, (mr, mc), side)
        maps[r, c, 3] = 1.0
    for channel, target in ((0, 1), (1, 2)):
        hits = np.argwhere(obs.maps[:, :, channel] > 0)
        for mr, mc in hits:
            r, c = from_egocentric(sub, (mr, mc), side)
            maps[r, c, target] = 1.0
    if obs.orientation.any():
        rel = RelativeOrientation(int(np.argmax(obs.orientation)))
        dom_vec = _one_hot(_ALLO_INDEX[sub.orientation.turned(_QUARTERS_BY_REL[rel])])
    orientation = np.concatenate([_one_hot(_ALLO_INDEX[sub.orientation]), dom_vec])
    return Observation(maps, orientation, VisualMode.ALLOCENTRIC)


def state_from_allocentric(obs: Observation, config: WorldConfig) -> WorldState:
    """Estado a partir de una observación alocéntrica con dominante y comida visibles."""
    (sr, sc), = np.argwhere(obs.maps[:, :, 0] > 0)
    (dr, dc), = np.argwhere(obs.maps[:, :, 1] > 0)
    food = np.argwhere(obs.maps[:, :, 2] > 0)
    sub_o = _ALLO_FROM_INDEX[int(np.argmax(obs.orientation[:4]))]
    dom_o = _ALLO_FROM_INDEX[int(np.argmax(obs.orientation[4:]))]
    return WorldState(
        subordinate=AgentPose(int(sr), int(sc), sub_o),
        dominant=AgentPose(int(dr), int(dc), dom_o),
        food=(int(food[0][0]), int(food[0][1])) if len(food) else None,
        config=config,
    )


# ============================================================================
# ACCIONES
# ============================================================================
def decode_action(index: int, mode: ActionMode, sub_orientation: Orientation) -> tuple[Cell, Orientation]:
    if not 0 <= int(index) < N_ACTIONS:
        raise ValueError(f"Acción fuera de rango: {index}")
    index = int(index)
    if index == STAY:
        return (0, 0), sub_orientation
    if ActionMode(mode) is ActionMode.ALLOCENTRIC:
        heading = _ALLO_HEADINGS[index]
    else:
        heading = Orientation(sub_orientation).turned(_EGO_QUARTERS[index])
    return heading.vector, heading


def encode_action(heading: Orientation, mode: ActionMode, sub_orientation: Orientation) -> int:
    """Inversa de decode_action para movimientos: rumbo absoluto → índice de acción."""
    if ActionMode(mode) is ActionMode.ALLOCENTRIC:
        return _ALLO_HEADINGS.index(heading)
    return _EGO_QUARTERS.index((int(heading) - int(sub_orientation)) % 4)


def action_names(mode: ActionMode) -> Iterable[str]:
    return ALLO_ACTIONS if ActionMode(mode) is ActionMode.ALLOCENTRIC else EGO_ACTIONS
