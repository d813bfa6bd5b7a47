# perspectiva/replay.py
"""Memoria de trayectorias completas con relleno de ceros y máscara."""

from __future__ import annotations

import json
import logging
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errores import EmptyBufferError, TrajectoryError
from .gridworld import WorldConfig, state_from_record
from .percept import Observation, VisualMode, encode

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrajectoryStep:
    observation: Observation
    action: int
    reward: float
    terminal: bool


@dataclass
class Trajectory:
    steps: list[TrajectoryStep] = field(default_factory=list)
    records: list[dict] = field(default_factory=list)  # traza JSON del episodio (opcional)
    _arrays: Optional[tuple] = field(default=None, repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.steps)

    def append(self, step: TrajectoryStep, record: Optional[dict] = None) -> None:
        self.steps.append(step)
        self._arrays = None
        if record is not None:
            self.records.append(record)

    def arrays(self) -> tuple:
        """(mapas, orientaciones, acciones, recompensas, términos) apilados; se cachea."""
        if self._arrays is None:
            self._arrays = (
                np.stack([s.observation.maps for s in self.steps]),
                np.stack([s.observation.orientation for s in self.steps]),
                np.array([s.action for s in self.steps], dtype=np.int64),
                np.array([s.reward for s in self.steps], dtype=np.float64),
                np.array([float(s.terminal) for s in self.steps], dtype=np.float64),
            )
        return self._arrays

    @property
    def total_reward(self) -> float:
        return float(sum(s.reward for s in self.steps))


@dataclass
class PaddedBatch:
    maps: np.ndarray  # (B, T, H, W, C)
    orientation: np.ndarray  # (B, T, K)
    actions: np.ndarray  # (B, T) int64
    rewards: np.ndarray  # (B, T) float64
    terminals: np.ndarray  # (B, T) float64
    mask: np.ndarray  # (B, T) float64

    @property
    def lengths(self) -> np.ndarray:
        return self.mask.sum(axis=1).astype(np.int64)


def pad_trajectories(trajectories: list[Trajectory], max_len: int) -> PaddedBatch:
    if not trajectories:
        raise EmptyBufferError("Lote vacío")
    first = trajectories[0].steps[0].observation
    b = len(trajectories)
    maps = np.zeros((b, max_len) + first.maps.shape, dtype=first.maps.dtype)
    orientation = np.zeros((b, max_len) + first.orientation.shape, dtype=first.orientation.dtype)
    actions = np.zeros((b, max_len), dtype=np.int64)
    rewards = np.zeros((b, max_len), dtype=np.float64)
    terminals = np.zeros((b, max_len), dtype=np.float64)
    mask = np.zeros((b, max_len), dtype=np.float64)
    for i, traj in enumerate(trajectories):
        n = len(traj)
        m, o, a, r, d = traj.arrays()
        maps[i, :n] = m
        orientation[i, :n] = o
        actions[i, :n] = a
        rewards[i, :n] = r
        terminals[i, :n] = d
        mask[i, :n] = 1.0
    return PaddedBatch(maps, orientation, actions, rewards, terminals, mask)


class ReplayBuffer:
    """Anillo FIFO de trayectorias; muestreo uniforme con reemplazo."""

    def __init__(self, capacity: int = 1000, max_len: int = 100):
        self.capacity = capacity
        self.max_len = max_len
        self._storage: deque[Trajectory] = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._storage)

    def __iter__(self):
        return iter(self._storage)

    def push(self, trajectory: Trajectory) -> "ReplayBuffer":
        n = len(trajectory)
        if not 1 <= n <= self.max_len:
            raise TrajectoryError(f"Largo de trayectoria {n} fuera de [1, {self.max_len}]")
        self._storage.append(trajectory)
        return self

    def sample_batch(self, batch: int, rng: np.random.Generator) -> PaddedBatch:
        if not self._storage:
            raise EmptyBufferError("Memoria de repetición vacía")
        idx = rng.integers(len(self._storage), size=batch)
        return pad_trajectories([self._storage[i] for i in idx], self.max_len)

    # ------------------------------------------------------------ volcado
    def dump(self, path: Path) -> None:
        """JSON lines en formato de traza con campo `episode`; las observaciones se recodifican al cargar."""
        with open(path, "w", encoding="utf-8") as f:
            for ep, traj in enumerate(self._storage):
                if len(traj.records) != len(traj):
                    raise TrajectoryError("Trayectoria sin traza: no se puede volcar")
                for rec in traj.records:
                    f.write(json.dumps({"episode": ep, **rec}) + "\n")
        log.info(f"[REPLAY] {len(self._storage)} trayectorias volcadas en {path}")

    @classmethod
    def restore(cls, path: Path, vision: VisualMode, world: WorldConfig,
                capacity: int = 1000, max_len: int = 100) -> "ReplayBuffer":
        buffer = cls(capacity, max_len)
        current, current_ep = None, None
        with open(path, "r", encoding="utf-8") as f:
            for line in f:
                rec = json.loads(line)
                ep = rec.pop("episode")
                if ep != current_ep:
                    if current is not None:
                        buffer.push(current)
                    current, current_ep = Trajectory(), ep
                state = state_from_record(rec, world)
                step = TrajectoryStep(encode(state, vision), int(rec["action"]), float(rec["reward"]),
                                      bool(rec["terminal"]))
                current.append(step, rec)
        if current is not None:
            buffer.push(current)
        log.info(f"[REPLAY] {len(buffer)} trayectorias restauradas desde {path}")
        return buffer
