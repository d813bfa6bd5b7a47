# perspectiva/config.py
"""
Configuración de una corrida: valores por defecto < perfil < archivo --config < flags.
El modelo combinado es lo que se guarda en el manifiesto.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Any, Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, ValidationError

from .errores import ConfigError
from .gridworld import WorldConfig
from .percept import ActionMode, VisualMode
from .qagent import NetworkConfig
from .train import RlSchedule, SupervisedConfig

log = logging.getLogger(__name__)

PROFILES_DIR = Path(__file__).resolve().parent / "perfiles"

Kind = Literal["rl", "supervised", "eval", "probe", "enumerate", "render"]


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Kind = "rl"
    profile: Optional[Literal["desk", "paper"]] = None
    vision: VisualMode = VisualMode.EGOCENTRIC
    action: ActionMode = ActionMode.EGOCENTRIC
    world: WorldConfig = WorldConfig()
    network: NetworkConfig = NetworkConfig()
    schedule: RlSchedule = RlSchedule()
    supervised: SupervisedConfig = SupervisedConfig()
    agent: Literal["network", "oracle", "random"] = "network"
    shuffle_labels: bool = False
    checkpoint: Optional[str] = None
    trace: Optional[str] = None
    resume: Optional[str] = None
    out: Optional[str] = None
    workers: int = 1

    @property
    def seeds(self) -> list[int]:
        return list(self.schedule.seeds)

    @property
    def modes(self) -> str:
        if self.kind in ("supervised", "enumerate"):
            return str(self.vision)
        return f"{self.vision}-{self.action}"


def deep_merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = value
    return out


def read_config_file(path: Path) -> dict:
    """YAML o JSON; un manifiesto de corrida aporta su campo `config`."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"No existe el archivo de configuración: {path}")
    text = path.read_text(encoding="utf-8")
    try:
        data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as e:
        raise ConfigError(f"No se pudo leer {path}: {e}") from e
    data = data or {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path} debe contener un mapa de claves")
    if "config" in data and "code_hash" in data:
        seed = data.get("seed")
        data = data["config"]
        if data.get("kind") == "rl" and seed is not None:
            data = deep_merge(data, {"schedule": {"seeds": [seed]}})
    return data


def profile_values(name: Optional[str]) -> dict:
    if name is None:
        return {}
    path = PROFILES_DIR / f"{name}.yaml"
    if not path.exists():
        raise ConfigError(f"Perfil desconocido: {name}")
    return read_config_file(path)


def load_config(profile: Optional[str] = None, config_file: Optional[Path] = None,
                overrides: Optional[dict[str, Any]] = None) -> RunConfig:
    file_values = read_config_file(config_file) if config_file is not None else {}
    flags = overrides or {}
    profile = flags.get("profile") or file_values.get("profile") or profile
    merged = deep_merge(deep_merge(profile_values(profile), file_values), flags)
    merged["profile"] = profile
    try:
        config = RunConfig.model_validate(merged)
    except ValidationError as e:
        raise ConfigError(_validation_detail(e)) from None
    log.info(f"Configuración: {config.kind} {config.modes} perfil={profile} semillas={config.seeds}")
    return config


def _validation_detail(error: ValidationError) -> str:
    parts = []
    for err in error.errors():
        where = ".".join(str(p) for p in err["loc"])
        parts.append(f"{where}: {err['msg']}")
    return "Configuración inválida: " + "; ".join(parts)


def parse_seeds(value: str) -> list[int]:
    """'3' → [0, 1, 2]; '3,7,9' → [3, 7, 9]."""
    try:
        if "," in value:
            return [int(v) for v in value.split(",") if v.strip()]
        return list(range(int(value)))
    except ValueError:
        raise ConfigError(f"--seeds inválido: {value}") from None
