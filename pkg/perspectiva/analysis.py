# perspectiva/analysis.py
"""
Enumeración de configuraciones iniciales, evaluación de comportamiento,
sondas lineales por capa y dibujo de trayectorias.
"""

from __future__ import annotations

import json
import logging
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Protocol, Sequence

import numpy as np
import pandas as pd
from reportlab.graphics import renderSVG
from reportlab.graphics.shapes import Drawing, Line, Polygon, Rect, String
from reportlab.lib import colors
from sklearn.discriminant_analysis import LinearDiscriminantAnalysis
from sklearn.model_selection import train_test_split

from .autograd import LstmState, ParamSet, no_grad
from .errores import DegenerateSplitError, MalformedTraceError
from .gridworld import (AgentPose, Cell, Orientation, WorldConfig, WorldState, cell_visible, count_initial_configs,
                        count_reachable_states, dominant_sees_food, field_of_view, max_episode_reward,
                        state_from_config, state_from_record, step, trace_record)
from .percept import STAY, ActionMode, VisualMode, decode_action, encode, encode_action, stack_observations
from .qagent import TAP_NAMES, Architecture, NetworkAgent, classify, forward_step

log = logging.getLogger(__name__)

# conteos publicados, sólo para el informe de enumeración
PUBLISHED_COUNTS = {VisualMode.EGOCENTRIC: 26400, VisualMode.ALLOCENTRIC: 32100}


# ============================================================================
# CONFIGURACIONES INICIALES
# ============================================================================
@dataclass(frozen=True)
class InitialConfig:
    sub_row: int
    dominant: AgentPose
    food: Cell
    label: bool  # el dominante ve la comida

    @property
    def config_id(self) -> str:
        d = self.dominant
        return f"s{self.sub_row}-d{d.row}_{d.col}_{d.orientation.name[0]}-f{self.food[0]}_{self.food[1]}"

    def state(self, world: WorldConfig) -> WorldState:
        return state_from_config(world, self.sub_row, self.dominant, self.food)


def enumerate_initial_configs(vision: VisualMode, world: Optional[WorldConfig] = None) -> list[InitialConfig]:
    """filas del subordinado × celdas del dominante × 4 orientaciones × celdas de comida ≠ dominante."""
    world = (world or WorldConfig()).resolved(vision)
    cells = world.region.cells()
    configs = []
    for row in world.rows:
        for dom_cell in cells:
            for orientation in Orientation:
                dominant = AgentPose(dom_cell[0], dom_cell[1], orientation)
                for food in cells:
                    if food == dom_cell:
                        continue
                    label = cell_visible(dominant, food, world.closed_fov)
                    configs.append(InitialConfig(row, dominant, food, label))
    return configs


def configs_frame(configs: Sequence[InitialConfig]) -> pd.DataFrame:
    return pd.DataFrame([{
        "config_id": c.config_id,
        "sub_row": c.sub_row,
        "dom_row": c.dominant.row,
        "dom_col": c.dominant.col,
        "dom_orientation": c.dominant.orientation.name,
        "food_row": c.food[0],
        "food_col": c.food[1],
        "label_seen": c.label,
    } for c in configs])


def enumeration_report(vision: VisualMode, world: WorldConfig, configs: Sequence[InitialConfig]) -> dict:
    """Conteo enumerado frente a la forma cerrada, estados alcanzables y la referencia publicada si aplica."""
    world = world.resolved(vision)
    n_cells = len(world.region.cells())
    closed_form = count_initial_configs(world)
    report = {
        "vision": str(vision),
        "side": world.side,
        "count": len(configs),
        "closed_form": closed_form,
        "reachable_states": count_reachable_states(world),
        "seen_fraction": float(np.mean([c.label for c in configs])) if configs else 0.0,
    }
    published = PUBLISHED_COUNTS.get(VisualMode(vision))
    if world.side in (11, 13) and world.spawn_region is None and world.subordinate_rows is None:
        report["published_count"] = published
        if published != len(configs):
            report["note"] = (f"La referencia publicada indica {published}; la enumeración cerrada "
                              f"{len(world.rows)}·{n_cells}·4·{n_cells - 1} da {closed_form}. "
                              "Se conserva la enumeración.")
    return report


def initial_dataset(configs: Sequence[InitialConfig], vision: VisualMode,
                    world: WorldConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(mapas, orientaciones, etiquetas) del paso inicial de cada configuración."""
    world = world.resolved(vision)
    maps, orientation = stack_observations([encode(c.state(world), vision) for c in configs])
    labels = np.array([int(c.label) for c in configs], dtype=np.int64)
    return maps, orientation, labels


# ============================================================================
# AGENTES DE EVALUACIÓN
# ============================================================================
class Agent(Protocol):
    def reset(self, n: int) -> None: ...

    def keep(self, rows: np.ndarray) -> None: ...

    def act(self, states: Sequence[WorldState], maps: np.ndarray, orientation: np.ndarray) -> np.ndarray: ...


def first_step_to_food(state: WorldState) -> Optional[Orientation]:
    """Primer rumbo de un camino mínimo (BFS, celda del dominante bloqueada)."""
    side = state.side
    start, goal, blocked = state.subordinate.cell, state.food, state.dominant.cell
    if goal is None or start == goal:
        return None
    first: dict[Cell, Optional[Orientation]] = {start: None}
    queue = deque([start])
    while queue:
        cell = queue.popleft()
        for heading in (Orientation.NORTH, Orientation.EAST, Orientation.SOUTH, Orientation.WEST):
            dr, dc = heading.vector
            nxt = (cell[0] + dr, cell[1] + dc)
            if nxt in first or nxt == blocked or not (0 <= nxt[0] < side and 0 <= nxt[1] < side):
                continue
            first[nxt] = heading if first[cell] is None else first[cell]
            if nxt == goal:
                return first[nxt]
            queue.append(nxt)
    return None


@dataclass
class OracleAgent:
    """Camino mínimo a la comida si el dominante no la ve; si la ve, se queda quieto."""

    action: ActionMode

    def reset(self, n: int) -> None:
        pass

    def keep(self, rows: np.ndarray) -> None:
        pass

    def act(self, states, maps, orientation) -> np.ndarray:
        actions = np.full(len(states), STAY, dtype=np.int64)
        for i, s in enumerate(states):
            if s.food is None or dominant_sees_food(s):
                continue
            heading = first_step_to_food(s)
            if heading is not None:
                actions[i] = encode_action(heading, self.action, s.subordinate.orientation)
        return actions


@dataclass
class RandomAgent:
    rng: np.random.Generator
    n_actions: int = 5

    def reset(self, n: int) -> None:
        pass

    def keep(self, rows: np.ndarray) -> None:
        pass

    def act(self, states, maps, orientation) -> np.ndarray:
        return self.rng.integers(self.n_actions, size=len(states))


# ============================================================================
# EPISODIOS EN LOTE
# ============================================================================
@dataclass
class EpisodeRecord:
    initial: WorldState
    total_reward: float = 0.0
    max_reward: float = 0.0
    ate: bool = False
    seen: Optional[bool] = None
    length: int = 0
    trace: list[dict] = field(default_factory=list)


def run_episodes(agent: Agent, states: Sequence[WorldState], vision: VisualMode, action: ActionMode,
                 record: bool = False) -> list[EpisodeRecord]:
    """Corre todos los episodios a la par; los terminados salen del lote."""
    records = [EpisodeRecord(initial=s, max_reward=max_episode_reward(s)) for s in states]
    current = list(states)
    active = list(range(len(states)))
    agent.reset(len(states))
    while active:
        batch = [current[i] for i in active]
        maps, orientation = stack_observations([encode(s, vision) for s in batch])
        actions = agent.act(batch, maps, orientation)
        still = []
        for j, i in enumerate(active):
            s = current[i]
            displacement, heading = decode_action(int(actions[j]), action, s.subordinate.orientation)
            nxt, reward, events = step(s, displacement, heading)
            rec = records[i]
            if record:
                rec.trace.append(trace_record(s, int(actions[j]), reward, nxt.terminal))
            rec.total_reward += reward
            rec.length += 1
            if events.ate:
                rec.ate, rec.seen = True, events.seen
            current[i] = nxt
            if not nxt.terminal:
                still.append(j)
        if len(still) < len(active):
            agent.keep(np.array(still, dtype=np.int64))
        active = [active[j] for j in still]
    return records


# ============================================================================
# COMPORTAMIENTO
# ============================================================================
QUARTET = ("eat-correct", "eat-wrong", "avoid-correct", "avoid-wrong")


@dataclass
class BehaviorReport:
    outcomes: pd.DataFrame
    vision: str
    action: str
    agent: str

    def _pct(self, should_eat: bool) -> float:
        rows = self.outcomes[self.outcomes["label_seen"] != should_eat]
        if rows.empty:
            return float("nan")
        return float(100.0 * rows["correct"].mean())

    @property
    def pct_correct_when_should_eat(self) -> float:
        return self._pct(True)

    @property
    def pct_correct_when_should_avoid(self) -> float:
        return self._pct(False)

    def quartet(self) -> dict[str, Optional[str]]:
        """Primer config_id de cada tipo (comer/evitar × correcto/incorrecto)."""
        df = self.outcomes
        should_eat = ~df["label_seen"]
        masks = {
            "eat-correct": should_eat & df["correct"],
            "eat-wrong": should_eat & ~df["correct"],
            "avoid-correct": ~should_eat & df["correct"],
            "avoid-wrong": ~should_eat & ~df["correct"],
        }
        return {k: (str(df.loc[m, "config_id"].iloc[0]) if m.any() else None) for k, m in masks.items()}

    def to_dict(self) -> dict:
        n_eat = int((~self.outcomes["label_seen"]).sum())
        return {
            "vision": self.vision,
            "action": self.action,
            "agent": self.agent,
            "configs": int(len(self.outcomes)),
            "should_eat": n_eat,
            "should_avoid": int(len(self.outcomes)) - n_eat,
            "pct_correct_when_should_eat": self.pct_correct_when_should_eat,
            "pct_correct_when_should_avoid": self.pct_correct_when_should_avoid,
            "quartet": self.quartet(),
        }

    def write(self, folder: Path) -> dict[str, str]:
        folder.mkdir(parents=True, exist_ok=True)
        json_path, csv_path = folder / "behavior.json", folder / "behavior.csv"
        json_path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True), encoding="utf-8")
        self.outcomes.to_csv(csv_path, index=False)
        return {"behavior_json": str(json_path), "behavior_csv": str(csv_path)}


def evaluate_behavior(agent: Agent, vision: VisualMode, action: ActionMode, world: Optional[WorldConfig] = None,
                      *, configs: Optional[Sequence[InitialConfig]] = None, chunk: int = 2048,
                      agent_name: Optional[str] = None) -> BehaviorReport:
    """
    Política codiciosa desde cada configuración inicial.
    Correcto: come la comida no vista; nunca come la vista (comerla termina el episodio).
    """
    vision, action = VisualMode(vision), ActionMode(action)
    world = (world or WorldConfig()).resolved(vision)
    if isinstance(agent, NetworkAgent):
        agent.check_modes(vision, action)
    configs = list(configs) if configs is not None else enumerate_initial_configs(vision, world)

    rows = []
    for lo in range(0, len(configs), chunk):
        part = configs[lo:lo + chunk]
        records = run_episodes(agent, [c.state(world) for c in part], vision, action)
        for c, rec in zip(part, records):
            rows.append({
                "config_id": c.config_id,
                "sub_row": c.sub_row,
                "dom_row": c.dominant.row,
                "dom_col": c.dominant.col,
                "dom_orientation": c.dominant.orientation.name,
                "food_row": c.food[0],
                "food_col": c.food[1],
                "label_seen": c.label,
                "ate": rec.ate,
                "correct": rec.ate != c.label,
                "total_reward": rec.total_reward,
                "max_reward": rec.max_reward,
                "length": rec.length,
            })
        log.info(f"[EVAL] {min(lo + chunk, len(configs))}/{len(configs)} configuraciones")

    report = BehaviorReport(pd.DataFrame(rows), str(vision), str(action), agent_name or type(agent).__name__)
    log.info(f"[EVAL] {vision}/{action}: comer {report.pct_correct_when_should_eat:.2f}% "
             f"evitar {report.pct_correct_when_should_avoid:.2f}%")
    return report


def replay_configs(agent: Agent, configs: Sequence[InitialConfig], vision: VisualMode, action: ActionMode,
                   world: WorldConfig) -> list[EpisodeRecord]:
    """Re-ejecuta configuraciones con traza para dibujarlas."""
    world = world.resolved(vision)
    return run_episodes(agent, [c.state(world) for c in configs], vision, action, record=True)


# ============================================================================
# SONDAS LINEALES
# ============================================================================
@dataclass
class ProbeReport:
    layers: pd.DataFrame  # layer, accuracy, accuracy_std, repeats, n_train, n_test
    shuffled: bool

    @property
    def accuracy(self) -> dict[str, float]:
        return dict(zip(self.layers["layer"], self.layers["accuracy"].astype(float)))

    def to_dict(self) -> dict:
        return {"shuffled": self.shuffled, "accuracy": self.accuracy}

    def write(self, folder: Path) -> dict[str, str]:
        folder.mkdir(parents=True, exist_ok=True)
        json_path, csv_path = folder / "probe.json", folder / "probe.csv"
        json_path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True), encoding="utf-8")
        self.layers.to_csv(csv_path, index=False)
        return {"probe_json": str(json_path), "probe_csv": str(csv_path)}


def layer_activations(params: ParamSet, arch: Architecture, maps: np.ndarray, orientation: np.ndarray,
                      chunk: int = 2048) -> dict[str, np.ndarray]:
    """Activaciones del primer paso (LSTM desde cero) en cada capa registrada."""
    collected: dict[str, list[np.ndarray]] = {}
    with no_grad():
        for lo in range(0, len(maps), chunk):
            taps: dict[str, np.ndarray] = {}
            m, o = maps[lo:lo + chunk], orientation[lo:lo + chunk]
            if arch.recurrent:
                forward_step(params, arch, m, o, LstmState.zeros(len(m), arch.lstm_units), taps)
            else:
                classify(params, arch, m, o, taps)
            for name, values in taps.items():
                collected.setdefault(name, []).append(np.asarray(values, dtype=np.float64))
    return {name: np.concatenate(collected[name]) for name in TAP_NAMES if name in collected}


def balanced_split(labels: np.ndarray, rng: np.random.Generator, test_size: float = 0.2,
                   seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Submuestrea la clase mayoritaria y parte 80/20 estratificado."""
    pos, neg = np.flatnonzero(labels == 1), np.flatnonzero(labels == 0)
    if len(pos) < 2 or len(neg) < 2:
        raise DegenerateSplitError(f"Sonda con una sola clase ({len(pos)} positivos, {len(neg)} negativos)")
    n = min(len(pos), len(neg))
    chosen = np.sort(np.concatenate([rng.choice(pos, n, replace=False), rng.choice(neg, n, replace=False)]))
    train, test = train_test_split(chosen, test_size=test_size, stratify=labels[chosen], random_state=seed)
    return np.sort(train), np.sort(test)


def probe_layers(params: ParamSet, arch: Architecture, dataset: tuple[np.ndarray, np.ndarray, np.ndarray],
                 *, shuffle_labels: bool = False, seed: int = 0, ridge: float = 1e-3,
                 repeats: int = 5) -> ProbeReport:
    """
    LDA por capa sobre activaciones del primer paso, promediada en `repeats` particiones balanceadas
    (semillas seed, seed+1, ...). Con `shuffle_labels` cada repetición baraja las etiquetas de nuevo.
    """
    if repeats < 1:
        raise ValueError(f"repeats debe ser >= 1 (recibido {repeats})")
    maps, orientation, labels = dataset
    activations = layer_activations(params, arch, maps, orientation)

    scores: dict[str, list[float]] = {name: [] for name in activations}
    n_train = n_test = 0
    for k in range(repeats):
        rng = np.random.Generator(np.random.Philox(seed + k))
        y = rng.permutation(labels) if shuffle_labels else labels
        train, test = balanced_split(y, rng, seed=seed + k)
        n_train, n_test = len(train), len(test)
        for name, values in activations.items():
            lda = LinearDiscriminantAnalysis(solver="lsqr", shrinkage=ridge)
            lda.fit(values[train], y[train])
            scores[name].append(float(lda.score(values[test], y[test])))

    rows = []
    for name, accs in scores.items():
        acc = float(np.mean(accs))
        rows.append({"layer": name, "accuracy": acc, "accuracy_std": float(np.std(accs)), "repeats": repeats,
                     "n_train": n_train, "n_test": n_test})
        log.info(f"[PROBE] {name}: {acc:.4f} ({repeats} particiones)")
    return ProbeReport(pd.DataFrame(rows), shuffle_labels)


# ============================================================================
# DIBUJO
# ============================================================================
_CELL = 28
_MARGIN = 12
_SUB_COLOR = colors.HexColor("#2563eb")
_DOM_COLOR = colors.HexColor("#dc2626")
_FOOD_COLOR = colors.HexColor("#059669")
_FOV_COLOR = colors.HexColor("#fef3c7")
_PATH_COLOR = colors.HexColor("#6b7280")


def _records(episode) -> list[dict]:
    trace = episode.trace if isinstance(episode, EpisodeRecord) else list(episode)
    if not trace:
        raise MalformedTraceError("Traza vacía")
    return trace


def path_headings(episode) -> list[tuple[int, int, Orientation]]:
    """Una marca por paso: celda y rumbo del subordinado antes de actuar."""
    headings = []
    for rec in _records(episode):
        try:
            row, col, orientation = (int(v) for v in rec["sub"])
            headings.append((row, col, Orientation(orientation)))
        except (KeyError, TypeError, ValueError, IndexError) as e:
            raise MalformedTraceError(f"Registro de traza inválido: {e}") from e
    return headings


def path_markers(episode) -> list[Cell]:
    return [(row, col) for row, col, _ in path_headings(episode)]


def _arrow(row: int, col: int, orientation: Orientation, side: int, color, scale: float = 1.0,
           outline: bool = True) -> Polygon:
    # el eje y de reportlab crece hacia arriba
    cx = _MARGIN + col * _CELL + _CELL / 2
    cy = _MARGIN + (side - 1 - row) * _CELL + _CELL / 2
    dr, dc = orientation.vector
    fx, fy = dc, -dr
    px, py = -fy, fx
    h = _CELL * 0.38 * scale
    tip = (cx + fx * h, cy + fy * h)
    left = (cx - fx * h * 0.6 + px * h * 0.7, cy - fy * h * 0.6 + py * h * 0.7)
    right = (cx - fx * h * 0.6 - px * h * 0.7, cy - fy * h * 0.6 - py * h * 0.7)
    return Polygon([*tip, *left, *right], fillColor=color, strokeColor=colors.black if outline else None,
                   strokeWidth=0.5)


def trajectory_drawing(episode, world: WorldConfig, title: str = "") -> Drawing:
    """
    Grilla con el campo visual del dominante, la comida, el camino con una flecha chica de rumbo por paso,
    el dominante y la pose final del subordinado.
    """
    trace = _records(episode)
    side = world.side
    if side is None:
        raise MalformedTraceError("Se necesita un mundo con lado resuelto para dibujar")
    states = [state_from_record(rec, world) for rec in trace]
    first, last = states[0], states[-1]
    for s in states:
        for r, c in (s.subordinate.cell, s.dominant.cell):
            if not (0 <= r < side and 0 <= c < side):
                raise MalformedTraceError(f"Celda fuera de la grilla: {(r, c)}")

    size = 2 * _MARGIN + side * _CELL
    d = Drawing(size, size + (16 if title else 0))
    fov = field_of_view(first.dominant, side, world.closed_fov)
    for r in range(side):
        for c in range(side):
            fill = _FOV_COLOR if fov[r, c] else colors.white
            d.add(Rect(_MARGIN + c * _CELL, _MARGIN + (side - 1 - r) * _CELL, _CELL, _CELL,
                       fillColor=fill, strokeColor=colors.lightgrey, strokeWidth=0.5))

    if first.food is not None:
        fr, fc = first.food
        d.add(Rect(_MARGIN + fc * _CELL + _CELL * 0.3, _MARGIN + (side - 1 - fr) * _CELL + _CELL * 0.3,
                   _CELL * 0.4, _CELL * 0.4, fillColor=_FOOD_COLOR, strokeColor=None))

    headings = path_headings(trace)
    for (r0, c0, _), (r1, c1, _) in zip(headings, headings[1:]):
        d.add(Line(_MARGIN + c0 * _CELL + _CELL / 2, _MARGIN + (side - 1 - r0) * _CELL + _CELL / 2,
                   _MARGIN + c1 * _CELL + _CELL / 2, _MARGIN + (side - 1 - r1) * _CELL + _CELL / 2,
                   strokeColor=_PATH_COLOR, strokeWidth=1))
    for r, c, orientation in headings:
        d.add(_arrow(r, c, orientation, side, _PATH_COLOR, scale=0.4, outline=False))

    dom = first.dominant
    d.add(_arrow(dom.row, dom.col, dom.orientation, side, _DOM_COLOR))
    sub = last.subordinate
    d.add(_arrow(sub.row, sub.col, sub.orientation, side, _SUB_COLOR))
    if title:
        d.add(String(_MARGIN, size + 2, title, fontName="Helvetica", fontSize=10))
    return d


def render_trajectory(episode, world: WorldConfig, title: str = "") -> bytes:
    svg = renderSVG.drawToString(trajectory_drawing(episode, world, title))
    return svg.encode("utf-8") if isinstance(svg, str) else svg
