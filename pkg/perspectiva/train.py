# perspectiva/train.py
"""
Los dos experimentos:
  - RL: Q duelo recurrente en las cuatro combinaciones visión × acción.
  - Supervisado: predecir desde el paso inicial si el dominante ve la comida.
"""

from __future__ import annotations

import json
import logging
import math
from collections import deque
from pathlib import Path
from typing import Literal, Optional

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, model_validator
from sklearn.model_selection import train_test_split

from .analysis import enumerate_initial_configs, initial_dataset, run_episodes
from .autograd import (Adam, ParamSet, clip_gradients, load_checkpoint, no_grad, restore_rng, rng_state,
                       save_checkpoint, softmax_cross_entropy)
from .errores import CheckpointError, ConfigError, ModeMismatchError
from .gridworld import WorldConfig, max_episode_reward, spawn, step, trace_record
from .percept import ActionMode, VisualMode, decode_action, encode, observation_fingerprint
from .qagent import (Architecture, GreedyAgent, NetworkConfig, Policy, TargetNetwork, act, build_architecture,
                     classify, init_params, param_shapes, parameter_parity, q_learning_loss, q_values,
                     soft_update)
from .replay import ReplayBuffer, Trajectory, TrajectoryStep

log = logging.getLogger(__name__)

RL_COLUMNS = ["step", "episode", "mean_reward_100ep", "max_possible_reward_100ep", "greedy_reward_100ep",
              "greedy_max_possible_100ep", "epsilon", "loss", "seed"]
SUPERVISED_COLUMNS = ["epoch", "train_acc", "val_acc", "seed"]
STREAMS = ("env", "policy", "replay", "init", "eval")

CHECKPOINT_FILE = "checkpoint.bin"
REPLAY_FILE = "replay.jsonl"


# ============================================================================
# CONFIG
# ============================================================================
class RlSchedule(BaseModel):
    model_config = ConfigDict(extra="forbid")

    total_steps: int = 20_000_000
    epsilon_start: float = 1.0
    epsilon_end: float = 0.1
    anneal_fraction: float = 0.75
    lr: float = 1e-3
    clip: float = 2.0
    clip_mode: Literal["norm", "value"] = "norm"
    gamma: float = 0.99
    tau: float = 0.01
    target_every: int = 100  # pasos de optimización
    train_every: int = 1  # pasos de entorno
    batch: int = 16
    capacity: int = 1000
    min_trajectories: int = 16
    eval_every: int = 100  # episodios
    eval_episodes: int = 100
    checkpoint_every: int = 0  # pasos de entorno; 0 = sólo al final
    seeds: list[int] = list(range(7))

    @model_validator(mode="after")
    def _check(self) -> "RlSchedule":
        if not 0.0 < self.anneal_fraction <= 1.0:
            raise ConfigError(f"anneal_fraction debe estar en (0, 1] (recibido {self.anneal_fraction})")
        if not 0.0 <= self.epsilon_end <= self.epsilon_start <= 1.0:
            raise ConfigError("Se requiere 0 <= epsilon_end <= epsilon_start <= 1")
        if self.total_steps < 1 or self.batch < 1 or self.capacity < 1:
            raise ConfigError("total_steps, batch y capacity deben ser >= 1")
        if self.train_every < 1 or self.target_every < 1 or self.eval_every < 1:
            raise ConfigError("train_every, target_every y eval_every deben ser >= 1")
        if not self.seeds:
            raise ConfigError("Se necesita al menos una semilla")
        return self


class SupervisedConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    split: float = 0.8
    batch: int = 64
    lr: float = 1e-3
    epochs: int = 20
    weight_seeds: int = 20
    split_seed: int = 0
    # tail: validación = el tramo final en orden de enumeración (filas del subordinado no vistas al entrenar)
    # random: partición barajada con split_seed
    holdout: Literal["tail", "random"] = "tail"
    subset: Optional[int] = None  # muestra fija para la prueba de capacidad

    @model_validator(mode="after")
    def _check(self) -> "SupervisedConfig":
        if not 0.0 < self.split < 1.0:
            raise ConfigError(f"split debe estar en (0, 1) (recibido {self.split})")
        if self.epochs < 1 or self.weight_seeds < 1 or self.batch < 1:
            raise ConfigError("epochs, weight_seeds y batch deben ser >= 1")
        return self


def anneal_epsilon(step_count: int, schedule: RlSchedule) -> float:
    """Lineal de epsilon_start a epsilon_end en anneal_fraction·total; constante después."""
    horizon = schedule.anneal_fraction * schedule.total_steps
    if step_count >= horizon:
        return schedule.epsilon_end
    return schedule.epsilon_start + (schedule.epsilon_end - schedule.epsilon_start) * step_count / horizon


def make_streams(seed: int) -> dict[str, np.random.Generator]:
    children = np.random.SeedSequence(seed).spawn(len(STREAMS))
    return {name: np.random.Generator(np.random.Philox(child)) for name, child in zip(STREAMS, children)}


def run_fingerprint(vision: VisualMode, world: WorldConfig, arch: Architecture,
                    net: Optional[NetworkConfig] = None) -> dict:
    """Formas de entrada, arquitectura (aplanado incluido) y paridad de parámetros entre modos visuales."""
    side = world.resolved(vision).side
    return {**observation_fingerprint(vision, side), **arch.fingerprint(), "parity": parameter_parity(world, net)}


# ============================================================================
# RL
# ============================================================================
class _RlRun:
    """Estado mutable de un entrenamiento; todo lo que un checkpoint necesita para reanudar."""

    def __init__(self, vision: VisualMode, action: ActionMode, schedule: RlSchedule, world: WorldConfig,
                 arch: Architecture, seed: int):
        self.vision, self.action = vision, action
        self.schedule, self.world, self.arch, self.seed = schedule, world, arch, seed
        self.rngs = make_streams(seed)
        self.params = init_params(arch, self.rngs["init"])
        self.target = TargetNetwork.from_source(self.params)
        self.optimizer = Adam(lr=schedule.lr)
        self.buffer = ReplayBuffer(schedule.capacity, world.max_steps)
        self.steps = 0
        self.episodes = 0
        self.updates = 0
        self.rewards: deque[float] = deque(maxlen=100)
        self.max_possible: deque[float] = deque(maxlen=100)
        self.rows: list[dict] = []
        self.last_loss = float("nan")
        self.status = "running"
        self.fingerprint: dict = {}

    # ------------------------------------------------------------ episodios
    def run_episode(self) -> None:
        state = spawn(self.world, self.rngs["env"])
        best = max_episode_reward(state)
        traj = Trajectory()
        lstm = None
        total = 0.0
        while not state.terminal:
            epsilon = anneal_epsilon(self.steps, self.schedule)
            obs = encode(state, self.vision)
            q, lstm = q_values(self.params, self.arch, obs, lstm)
            a = act(Policy(epsilon, self.rngs["policy"]), q)
            displacement, heading = decode_action(a, self.action, state.subordinate.orientation)
            nxt, reward, _ = step(state, displacement, heading)
            traj.append(TrajectoryStep(obs, a, reward, nxt.terminal), trace_record(state, a, reward, nxt.terminal))
            total += reward
            state = nxt
            self.steps += 1
            if len(self.buffer) >= self.schedule.min_trajectories and self.steps % self.schedule.train_every == 0:
                if not self.optimize():
                    return
        self.buffer.push(traj)
        self.rewards.append(total)
        self.max_possible.append(best)
        self.episodes += 1

    def optimize(self) -> bool:
        s = self.schedule
        batch = self.buffer.sample_batch(s.batch, self.rngs["replay"])
        self.params.zero_grad()
        loss = q_learning_loss(batch, self.params, self.target.params, self.arch, s.gamma)
        value = float(loss.data)
        if not math.isfinite(value):
            log.error(f"[RL] pérdida no finita ({value}) en el paso {self.steps}; se detiene el entrenamiento")
            self.status = "halted"
            return False
        loss.backward()
        grads = clip_gradients(self.params.grads(), s.clip, s.clip_mode)
        self.optimizer.step(self.params, grads)
        self.updates += 1
        self.last_loss = value
        if self.updates % s.target_every == 0:
            soft_update(self.target, self.params, s.tau)
        return True

    def evaluate(self) -> None:
        s = self.schedule
        states = [spawn(self.world, self.rngs["eval"]) for _ in range(s.eval_episodes)]
        records = run_episodes(GreedyAgent(self.params, self.arch), states, self.vision, self.action)
        row = {
            "step": self.steps,
            "episode": self.episodes,
            "mean_reward_100ep": float(np.mean(self.rewards)),
            "max_possible_reward_100ep": float(np.mean(self.max_possible)),
            "greedy_reward_100ep": float(np.mean([r.total_reward for r in records])),
            "greedy_max_possible_100ep": float(np.mean([r.max_reward for r in records])),
            "epsilon": anneal_epsilon(min(self.steps, s.total_steps), s),
            "loss": self.last_loss,
            "seed": self.seed,
        }
        self.rows.append(row)
        log.info(f"[RL] seed={self.seed} paso={self.steps} ep={self.episodes} "
                 f"recompensa={row['mean_reward_100ep']:.2f}/{row['max_possible_reward_100ep']:.2f} "
                 f"codiciosa={row['greedy_reward_100ep']:.2f} eps={row['epsilon']:.3f}")

    # ------------------------------------------------------------ checkpoints
    def checkpoint_bytes(self) -> bytes:
        return save_checkpoint(
            self.params,
            arch=self.arch.model_dump(mode="json"),
            target=self.target.params,
            optimizer=self.optimizer,
            rng_states={name: rng_state(g) for name, g in self.rngs.items()},
            counters={"steps": self.steps, "episodes": self.episodes, "updates": self.updates},
            extra={
                "kind": "rl",
                "seed": self.seed,
                "status": self.status,
                "rewards": list(self.rewards),
                "max_possible": list(self.max_possible),
                "rows": self.rows,
                "last_loss": self.last_loss,
            },
        )

    def write_checkpoint(self, folder: Path) -> Path:
        folder.mkdir(parents=True, exist_ok=True)
        path = folder / CHECKPOINT_FILE
        path.write_bytes(self.checkpoint_bytes())
        self.buffer.dump(folder / REPLAY_FILE)
        log.info(f"[CKPT] paso {self.steps}: {path}")
        return path

    def restore(self, path: Path) -> None:
        ckpt = load_checkpoint(Path(path).read_bytes(), expected_shapes=param_shapes(self.arch))
        if ckpt.arch is not None:
            stored = Architecture.model_validate(ckpt.arch)
            if (stored.vision, stored.action) != (self.arch.vision, self.arch.action):
                raise ModeMismatchError(f"Checkpoint {stored.vision}/{stored.action}, "
                                        f"corrida {self.arch.vision}/{self.arch.action}")
        if ckpt.target is None or ckpt.optimizer is None:
            raise CheckpointError("El checkpoint no tiene red objetivo ni estado de Adam: no se puede reanudar")
        self.params = ckpt.params
        self.target = TargetNetwork(ckpt.target)
        self.optimizer = ckpt.optimizer
        self.rngs = {name: restore_rng(state) for name, state in ckpt.rng_states.items()}
        self.steps = int(ckpt.counters["steps"])
        self.episodes = int(ckpt.counters["episodes"])
        self.updates = int(ckpt.counters["updates"])
        extra = ckpt.extra
        self.rewards = deque(extra.get("rewards", []), maxlen=100)
        self.max_possible = deque(extra.get("max_possible", []), maxlen=100)
        self.rows = list(extra.get("rows", []))
        self.last_loss = float(extra.get("last_loss", float("nan")))
        replay = Path(path).with_name(REPLAY_FILE)
        if replay.exists():
            self.buffer = ReplayBuffer.restore(replay, self.vision, self.world, self.schedule.capacity,
                                               self.world.max_steps)
        log.info(f"[CKPT] reanudando desde {path} (paso {self.steps}, episodio {self.episodes})")

    def frame(self) -> pd.DataFrame:
        df = pd.DataFrame(self.rows, columns=RL_COLUMNS)
        df.attrs["status"] = self.status
        df.attrs["fingerprint"] = self.fingerprint
        return df


def train_rl(vision: VisualMode, action: ActionMode, schedule: RlSchedule, world: Optional[WorldConfig] = None,
             net: Optional[NetworkConfig] = None, seed: int = 0, out_dir: Optional[Path] = None,
             resume: Optional[Path] = None, stop_at: Optional[int] = None) -> tuple[ParamSet, pd.DataFrame]:
    """
    Episodios completos a la memoria, Adam + recorte sobre la pérdida TD, promedio τ de la red objetivo
    y una fila de log cada `eval_every` episodios. El estado de la corrida queda en `df.attrs["status"]`.

    `stop_at` corta la corrida en el primer fin de episodio con pasos >= stop_at (estado `interrupted`);
    se continúa con `resume` apuntando al checkpoint escrito.
    """
    vision, action = VisualMode(vision), ActionMode(action)
    base = world or WorldConfig()
    world = base.resolved(vision)
    arch = build_architecture(vision, action, world.side, net)
    run = _RlRun(vision, action, schedule, world, arch, seed)
    run.fingerprint = run_fingerprint(vision, base, arch, net)
    if resume is not None:
        run.restore(Path(resume))
    log.info(f"[RL] {vision}/{action} seed={seed} lado={world.side} parámetros={run.params.count()}")

    every = schedule.checkpoint_every
    next_checkpoint = (run.steps // every + 1) * every if every else None
    while run.steps < schedule.total_steps:
        run.run_episode()
        if run.status == "halted":
            break
        if run.episodes % schedule.eval_every == 0:
            run.evaluate()
        if next_checkpoint is not None and out_dir is not None and run.steps >= next_checkpoint:
            run.write_checkpoint(out_dir)
            next_checkpoint = (run.steps // every + 1) * every
        if stop_at is not None and run.steps >= stop_at and run.steps < schedule.total_steps:
            run.status = "interrupted"
            break

    if run.status == "running":
        run.status = "completed"
    if out_dir is not None:
        run.write_checkpoint(out_dir)
    return run.params, run.frame()


# ============================================================================
# SUPERVISADO
# ============================================================================
def _accuracy(params: ParamSet, arch: Architecture, maps: np.ndarray, orientation: np.ndarray,
              labels: np.ndarray, chunk: int = 2048) -> float:
    if len(labels) == 0:
        return float("nan")
    hits = 0
    with no_grad():
        for lo in range(0, len(labels), chunk):
            logits = classify(params, arch, maps[lo:lo + chunk], orientation[lo:lo + chunk])
            hits += int((np.argmax(logits.data, axis=1) == labels[lo:lo + chunk]).sum())
    return hits / len(labels)


def split_dataset(n: int, config: SupervisedConfig) -> tuple[np.ndarray, np.ndarray]:
    """
    Partición no estratificada. Con `holdout="tail"` la validación es el último tramo de los índices, en el
    orden de enumeración (fila del subordinado como bucle externo); con `"random"` se baraja con
    `split_seed`. `subset` fija una muestra sembrada antes de partir.
    """
    idx = np.arange(n)
    if config.subset is not None:
        rng = np.random.Generator(np.random.Philox(config.split_seed))
        idx = np.sort(rng.choice(n, min(config.subset, n), replace=False))
    if config.holdout == "tail":
        train, val = train_test_split(idx, train_size=config.split, shuffle=False)
    else:
        train, val = train_test_split(idx, train_size=config.split, random_state=config.split_seed, shuffle=True)
    return np.asarray(train), np.asarray(val)


def train_supervised(vision: VisualMode, config: SupervisedConfig, world: Optional[WorldConfig] = None,
                     net: Optional[NetworkConfig] = None, out_dir: Optional[Path] = None
                     ) -> tuple[ParamSet, pd.DataFrame]:
    """Entropía cruzada sobre la etiqueta «el dominante ve la comida»; una corrida por semilla de pesos."""
    vision = VisualMode(vision)
    base = world or WorldConfig()
    world = base.resolved(vision)
    configs = enumerate_initial_configs(vision, world)
    maps, orientation, labels = initial_dataset(configs, vision, world)
    train, val = split_dataset(len(labels), config)
    arch = build_architecture(vision, ActionMode(str(vision)), world.side, net, recurrent=False, n_outputs=2)
    log.info(f"[SUP] {vision}: {len(configs)} configuraciones, entrenamiento {len(train)}, "
             f"validación {len(val)} ({config.holdout})")

    first_params: Optional[ParamSet] = None
    rows = []
    for weight_seed in range(config.weight_seeds):
        rngs = make_streams(weight_seed)
        params = init_params(arch, rngs["init"])
        optimizer = Adam(lr=config.lr)
        for epoch in range(1, config.epochs + 1):
            order = train[rngs["replay"].permutation(len(train))]
            for lo in range(0, len(order), config.batch):
                idx = order[lo:lo + config.batch]
                params.zero_grad()
                loss = softmax_cross_entropy(classify(params, arch, maps[idx], orientation[idx]), labels[idx])
                loss.backward()
                optimizer.step(params, params.grads())
            row = {
                "epoch": epoch,
                "train_acc": _accuracy(params, arch, maps[train], orientation[train], labels[train]),
                "val_acc": _accuracy(params, arch, maps[val], orientation[val], labels[val]),
                "seed": weight_seed,
            }
            rows.append(row)
        log.info(f"[SUP] semilla {weight_seed}: val_acc final {rows[-1]['val_acc']:.4f}")
        if first_params is None:
            first_params = params

    df = pd.DataFrame(rows, columns=SUPERVISED_COLUMNS)
    df.attrs["status"] = "completed"
    df.attrs["fingerprint"] = run_fingerprint(vision, base, arch, net)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / CHECKPOINT_FILE).write_bytes(save_checkpoint(
            first_params, arch=arch.model_dump(mode="json"),
            extra={"kind": "supervised", "split_seed": config.split_seed, "status": "completed"}))
        split = {"holdout": config.holdout, "train": train.tolist(), "val": val.tolist()}
        (out_dir / "split.json").write_text(json.dumps(split), encoding="utf-8")
    return first_params, df

