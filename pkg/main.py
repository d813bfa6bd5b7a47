# main.py — Laboratorio de toma de perspectiva
# Versión: 1.0.0 — corridas rl / supervised / eval / probe / enumerate / render + report

import os, sys, json, logging, hashlib, argparse
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime
from pathlib import Path
from typing import Optional

import pandas as pd

from perspectiva import __version__
from perspectiva.analysis import (EpisodeRecord, OracleAgent, RandomAgent, configs_frame, enumerate_initial_configs,
                                  enumeration_report, evaluate_behavior, initial_dataset, probe_layers,
                                  render_trajectory, replay_configs)
from perspectiva.autograd import load_checkpoint
from perspectiva.config import RunConfig, load_config, parse_seeds
from perspectiva.errores import ConfigError, IncompleteRunError, LabError, MalformedTraceError, ShapeMismatchError
from perspectiva.percept import observation_fingerprint
from perspectiva.qagent import Architecture, GreedyAgent, build_architecture, init_params, param_shapes
from perspectiva.train import RL_COLUMNS, SUPERVISED_COLUMNS, make_streams, train_rl, train_supervised

# ============================================================================
# CONFIG
# ============================================================================
APP_NAME = "perspectiva"
BASE_DIR = Path(__file__).resolve().parent
RUNS_DIR = Path(os.getenv("LAB_RUNS_DIR", "runs"))
LOG_LEVEL = os.getenv("LAB_LOG_LEVEL", "INFO").upper().strip()

LOG_FILE, MANIFEST_FILE, CHECKPOINT_FILE, REPORT_DIR = "log.csv", "manifest.json", "checkpoint.bin", "report"
AGGREGATED = {
    "rl": ("episode", ["step", "mean_reward_100ep", "max_possible_reward_100ep", "greedy_reward_100ep",
                       "greedy_max_possible_100ep", "epsilon"]),
    "supervised": ("epoch", ["train_acc", "val_acc"]),
}

log = logging.getLogger(APP_NAME)


def setup_logging():
    if hasattr(sys.stderr, "reconfigure"):
        sys.stderr.reconfigure(line_buffering=True)
    logging.basicConfig(level=getattr(logging, LOG_LEVEL, logging.INFO),
                        format="%(asctime)s [%(levelname)s] %(name)s: %(message)s")


# ============================================================================
# ARTEFACTOS
# ============================================================================
def code_hash() -> str:
    h = hashlib.sha256()
    for path in sorted([BASE_DIR / "main.py", *(BASE_DIR / "perspectiva").rglob("*.py"),
                        *(BASE_DIR / "perspectiva" / "perfiles").glob("*.yaml")]):
        h.update(path.relative_to(BASE_DIR).as_posix().encode())
        h.update(path.read_bytes())
    return h.hexdigest()


def run_dir(config: RunConfig, seed: int, stamp: str) -> Path:
    root = Path(config.out) if config.out else RUNS_DIR
    folder = root / f"{stamp}-{config.kind}-{config.modes}-s{seed}"
    folder.mkdir(parents=True, exist_ok=True)
    return folder


def write_log(folder: Path, df: pd.DataFrame, fingerprint: dict) -> Path:
    path = folder / LOG_FILE
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(f"# fingerprint: {json.dumps(fingerprint, sort_keys=True)}\n")
        df.to_csv(f, index=False)
    return path


def read_log(path: Path) -> pd.DataFrame:
    return pd.read_csv(path, comment="#")


def write_manifest(folder: Path, config: RunConfig, seed: int, status: str, fingerprint: dict,
                   artifacts: dict) -> Path:
    manifest = {
        "kind": config.kind,
        "config": config.model_dump(mode="json"),
        "seed": seed,
        "status": status,
        "code_hash": code_hash(),
        "fingerprint": fingerprint,
        "artifacts": {k: str(Path(v).relative_to(folder)) if Path(v).is_relative_to(folder) else str(v)
                      for k, v in artifacts.items()},
        "created_at": datetime.now().isoformat(timespec="seconds"),
        "version": __version__,
    }
    path = folder / MANIFEST_FILE
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    return path


def network_agent(config: RunConfig) -> GreedyAgent:
    if not config.checkpoint:
        raise ConfigError("--checkpoint es obligatorio con --agent network")
    ckpt = load_checkpoint(Path(config.checkpoint).read_bytes())
    if ckpt.arch is None:
        raise ConfigError(f"El checkpoint {config.checkpoint} no declara su arquitectura")
    arch = Architecture.model_validate(ckpt.arch)
    if ckpt.params.shapes() != param_shapes(arch):
        raise ShapeMismatchError("Parámetros del checkpoint no corresponden a su arquitectura declarada")
    return GreedyAgent(ckpt.params, arch)


def make_agent(config: RunConfig, seed: int):
    if config.agent == "oracle":
        return OracleAgent(config.action)
    if config.agent == "random":
        return RandomAgent(make_streams(seed)["eval"])
    return network_agent(config)


# ============================================================================
# CORRIDAS
# ============================================================================
def run_rl_seed(config_data: dict, seed: int, stamp: str) -> dict:
    config = RunConfig.model_validate(config_data)
    folder = run_dir(config, seed, stamp)
    resume = Path(config.resume) if config.resume else None
    _, df = train_rl(config.vision, config.action, config.schedule, config.world, config.network,
                     seed=seed, out_dir=folder, resume=resume)
    status, fingerprint = df.attrs.get("status", "completed"), df.attrs.get("fingerprint", {})
    artifacts = {"log": write_log(folder, df, fingerprint), "checkpoint": folder / CHECKPOINT_FILE,
                 "replay": folder / "replay.jsonl"}
    write_manifest(folder, config, seed, status, fingerprint, artifacts)
    log.info(f"[RL] seed={seed} {status}: {folder}")
    return {"dir": str(folder), "status": status}


def run_rl(config: RunConfig, stamp: str) -> list[dict]:
    if config.resume and len(config.seeds) > 1:
        raise ConfigError("--resume reanuda una sola semilla; usar --seeds con un único valor")
    data = config.model_dump(mode="json")
    if config.workers > 1 and len(config.seeds) > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            futures = [pool.submit(run_rl_seed, data, seed, stamp) for seed in config.seeds]
            return [f.result() for f in futures]
    return [run_rl_seed(data, seed, stamp) for seed in config.seeds]


def run_supervised(config: RunConfig, stamp: str) -> list[dict]:
    seed = config.supervised.split_seed
    folder = run_dir(config, seed, stamp)
    _, df = train_supervised(config.vision, config.supervised, config.world, config.network, out_dir=folder)
    fingerprint = df.attrs.get("fingerprint", {})
    artifacts = {"log": write_log(folder, df, fingerprint), "checkpoint": folder / CHECKPOINT_FILE,
                 "split": folder / "split.json"}
    write_manifest(folder, config, seed, "completed", fingerprint, artifacts)
    return [{"dir": str(folder), "status": "completed"}]


def run_eval(config: RunConfig, stamp: str) -> list[dict]:
    seed = config.seeds[0]
    folder = run_dir(config, seed, stamp)
    agent = make_agent(config, seed)
    report = evaluate_behavior(agent, config.vision, config.action, config.world, agent_name=config.agent)
    artifacts = report.write(folder / REPORT_DIR)
    world = config.world.resolved(config.vision)
    write_manifest(folder, config, seed, "completed", observation_fingerprint(config.vision, world.side), artifacts)
    return [{"dir": str(folder), "status": "completed", **{k: v for k, v in report.to_dict().items()
                                                           if k.startswith("pct")}}]


def run_probe(config: RunConfig, stamp: str) -> list[dict]:
    seed = config.seeds[0]
    folder = run_dir(config, seed, stamp)
    world = config.world.resolved(config.vision)
    if config.checkpoint:
        agent = network_agent(config)
        params, arch = agent.params, agent.arch
    else:
        arch = build_architecture(config.vision, config.action, world.side, config.network)
        params = init_params(arch, make_streams(seed)["init"])
        log.info("[PROBE] sin --checkpoint: red recién inicializada")
    dataset = initial_dataset(enumerate_initial_configs(config.vision, world), config.vision, world)
    report = probe_layers(params, arch, dataset, shuffle_labels=config.shuffle_labels, seed=seed)
    artifacts = report.write(folder / REPORT_DIR)
    write_manifest(folder, config, seed, "completed", arch.fingerprint(), artifacts)
    return [{"dir": str(folder), "status": "completed", "accuracy": report.accuracy}]


def run_enumerate(config: RunConfig, stamp: str) -> list[dict]:
    seed = config.seeds[0]
    folder = run_dir(config, seed, stamp)
    configs = enumerate_initial_configs(config.vision, config.world)
    csv_path = folder / REPORT_DIR / "configs.csv"
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    configs_frame(configs).to_csv(csv_path, index=False)
    summary = enumeration_report(config.vision, config.world, configs)
    json_path = folder / REPORT_DIR / "enumeration.json"
    json_path.write_text(json.dumps(summary, indent=2, sort_keys=True), encoding="utf-8")
    if "note" in summary:
        log.warning(summary["note"])
    world = config.world.resolved(config.vision)
    write_manifest(folder, config, seed, "completed", observation_fingerprint(config.vision, world.side),
                   {"configs_csv": csv_path, "enumeration_json": json_path})
    return [{"dir": str(folder), "status": "completed", "count": summary["count"]}]


def read_trace(path: Path) -> dict[str, list[dict]]:
    """JSON lines; con campo `episode` se separa por episodio."""
    episodes: dict[str, list[dict]] = {}
    with open(path, "r", encoding="utf-8") as f:
        for n, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise MalformedTraceError(f"{path}:{n}: {e}") from e
            episodes.setdefault(str(rec.pop("episode", 0)), []).append(rec)
    if not episodes:
        raise MalformedTraceError(f"Traza vacía: {path}")
    return episodes


def run_render(config: RunConfig, stamp: str) -> list[dict]:
    seed = config.seeds[0]
    folder = run_dir(config, seed, stamp)
    world = config.world.resolved(config.vision)
    out = folder / REPORT_DIR
    out.mkdir(parents=True, exist_ok=True)
    artifacts = {}
    if config.trace:
        for episode, records in read_trace(Path(config.trace)).items():
            path = out / f"trace-{episode}.svg"
            path.write_bytes(render_trajectory(records, world, title=f"episodio {episode}"))
            artifacts[f"svg_{episode}"] = path
    else:
        agent = make_agent(config, seed)
        report = evaluate_behavior(agent, config.vision, config.action, world, agent_name=config.agent)
        by_id = {c.config_id: c for c in enumerate_initial_configs(config.vision, world)}
        chosen = {kind: by_id[cid] for kind, cid in report.quartet().items() if cid is not None}
        records: list[EpisodeRecord] = replay_configs(make_agent(config, seed), list(chosen.values()),
                                                      config.vision, config.action, world)
        for (kind, cfg), rec in zip(chosen.items(), records):
            path = out / f"{cfg.config_id}.svg"
            path.write_bytes(render_trajectory(rec, world, title=f"{kind} {cfg.config_id}"))
            artifacts[kind] = path
        artifacts.update(report.write(out))
    write_manifest(folder, config, seed, "completed", observation_fingerprint(config.vision, world.side), artifacts)
    n_svg = sum(1 for v in artifacts.values() if str(v).endswith(".svg"))
    return [{"dir": str(folder), "status": "completed", "svg": n_svg}]


RUNNERS = {
    "rl": run_rl,
    "supervised": run_supervised,
    "eval": run_eval,
    "probe": run_probe,
    "enumerate": run_enumerate,
    "render": run_render,
}


# ============================================================================
# REPORT
# ============================================================================
def collect_runs(folder: Path) -> list[Path]:
    if (folder / MANIFEST_FILE).exists():
        return [folder]
    runs = sorted(p.parent for p in folder.glob(f"*/{MANIFEST_FILE}"))
    if not runs:
        raise IncompleteRunError(f"No hay corridas (sin {MANIFEST_FILE}) en {folder}")
    return runs


def aggregate(frames: list[pd.DataFrame], key: str, columns: list[str]) -> pd.DataFrame:
    """Media ± SEM entre semillas por bloque; una sola semilla deja SEM en 0."""
    df = pd.concat(frames, ignore_index=True)
    grouped = df.groupby(key)[columns]
    mean, sem = grouped.mean(), grouped.sem().fillna(0.0)
    out = pd.DataFrame(index=mean.index)
    for col in columns:
        out[f"{col}_mean"] = mean[col]
        out[f"{col}_sem"] = sem[col]
    out["n_seeds"] = df.groupby(key)["seed"].nunique()
    return out.reset_index()


def report(folder: Path) -> dict:
    folder = Path(folder)
    runs = collect_runs(folder)
    manifests = [json.loads((r / MANIFEST_FILE).read_text(encoding="utf-8")) for r in runs]
    kinds = {m["kind"] for m in manifests}
    if len(kinds) != 1 or next(iter(kinds)) not in AGGREGATED:
        raise ConfigError(f"report agrega corridas rl o supervised de un solo tipo (encontrado {sorted(kinds)})")
    kind = kinds.pop()
    incomplete = [str(r) for r, m in zip(runs, manifests)
                  if m.get("status") != "completed" or not (r / LOG_FILE).exists()]
    if incomplete:
        raise IncompleteRunError(f"Corridas incompletas: {incomplete}")

    key, columns = AGGREGATED[kind]
    frames = [read_log(r / LOG_FILE) for r in runs]
    expected = RL_COLUMNS if kind == "rl" else SUPERVISED_COLUMNS
    for r, df in zip(runs, frames):
        if list(df.columns) != expected:
            raise IncompleteRunError(f"{r / LOG_FILE}: columnas {list(df.columns)}")
    if any(df.empty for df in frames):
        raise IncompleteRunError(f"Corridas sin filas de log: {[str(r) for r, df in zip(runs, frames) if df.empty]}")
    if kind == "rl":
        # cada semilla cierra un número distinto de bloques de episodios; se agregan los comunes
        common = min(len(df) for df in frames)
        if any(len(df) != common for df in frames):
            log.warning(f"[REPORT] semillas con {sorted({len(df) for df in frames})} bloques; se usan {common}")
        frames = [df.iloc[:common] for df in frames]

    table = aggregate(frames, key, columns)
    out = folder / REPORT_DIR
    out.mkdir(parents=True, exist_ok=True)
    name = "reward_vs_max.csv" if kind == "rl" else "accuracy_vs_epoch.csv"
    table.to_csv(out / name, index=False)
    summary = {"kind": kind, "runs": len(runs), "seeds": sorted({int(m["seed"]) for m in manifests}),
               "table": str(out / name), "rows": int(len(table))}
    if kind == "rl":
        last = table.iloc[-1]
        summary["final_mean_reward"] = float(last["mean_reward_100ep_mean"])
        summary["final_max_possible"] = float(last["max_possible_reward_100ep_mean"])
    else:
        summary["final_val_acc"] = float(table.iloc[-1]["val_acc_mean"])
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True), encoding="utf-8")
    log.info(f"[REPORT] {kind}: {len(runs)} corridas → {out / name}")
    return summary


# ============================================================================
# CLI
# ============================================================================
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog=APP_NAME, description="Laboratorio de toma de perspectiva")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="ejecuta un experimento")
    run.add_argument("kind", choices=list(RUNNERS))
    run.add_argument("--config", type=Path)
    run.add_argument("--profile", choices=["paper", "desk"])
    run.add_argument("--vision", choices=["allo", "ego"])
    run.add_argument("--action", choices=["allo", "ego"])
    run.add_argument("--seeds", type=str)
    run.add_argument("--steps", type=int)
    run.add_argument("--epochs", type=int)
    run.add_argument("--weight-seeds", type=int, dest="weight_seeds")
    run.add_argument("--out", type=str)
    run.add_argument("--resume", type=str)
    run.add_argument("--checkpoint", type=str)
    run.add_argument("--trace", type=str)
    run.add_argument("--agent", choices=["network", "oracle", "random"])
    run.add_argument("--shuffle-labels", action="store_true", default=None, dest="shuffle_labels")
    run.add_argument("--workers", type=int)

    rep = sub.add_parser("report", help="agrega semillas de una corrida terminada")
    rep.add_argument("dir", type=Path)
    return parser


def flag_overrides(args: argparse.Namespace) -> dict:
    flags: dict = {"kind": args.kind}
    for name in ("profile", "vision", "action", "out", "resume", "checkpoint", "trace", "agent",
                 "shuffle_labels", "workers"):
        value = getattr(args, name)
        if value is not None:
            flags[name] = value
    schedule: dict = {}
    if args.seeds is not None:
        schedule["seeds"] = parse_seeds(args.seeds)
    if args.steps is not None:
        schedule["total_steps"] = args.steps
    if schedule:
        flags["schedule"] = schedule
    supervised: dict = {}
    if args.epochs is not None:
        supervised["epochs"] = args.epochs
    if args.weight_seeds is not None:
        supervised["weight_seeds"] = args.weight_seeds
    if supervised:
        flags["supervised"] = supervised
    return flags


def main(argv: Optional[list[str]] = None) -> int:
    setup_logging()
    args = build_parser().parse_args(argv)
    try:
        if args.command == "report":
            print(json.dumps(report(args.dir), sort_keys=True))
            return 0
        config = load_config(config_file=args.config, overrides=flag_overrides(args))
        stamp = datetime.now().strftime("%Y%m%d-%H%M%S")
        results = RUNNERS[config.kind](config, stamp)
        print(json.dumps({"kind": config.kind, "runs": results}, sort_keys=True, default=str))
        return 0
    except LabError as e:
        log.error(f"[{type(e).__name__}] {e.detail}")
        print(json.dumps(e.as_dict()), file=sys.stderr)
        return e.status
    except Exception as e:
        log.exception(f"Error inesperado: {e}")
        print(json.dumps({"error": type(e).__name__, "status": 1, "detail": str(e)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
