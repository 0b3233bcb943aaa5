"""Command-line entry point: ``unitary-forge <command> [flags]``."""

from __future__ import annotations

import argparse
import dataclasses
import datetime as _dt
import hashlib
import json
import logging
import os
import shutil
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, network
from .agent import (
    DvnuTrainer,
    ReplayBuffer,
    Toggles,
    dvnu_task,
    make_task,
)
from .config import ConfigError, RunConfig, apply_override, merge
from .gates import circuit_to_json, gate_counts, to_qasm
from .linalg import UnitaryError, hs_distance, load_unitary
from .network import MlpSpec, NetworkError
from .phase_experiment import PhaseExperimentConfig, run_phase_experiment
from .search import (
    OracleBudgetError,
    SearchError,
    bfs_oracle,
    evaluate_success,
    make_eval_targets,
    synthesize,
)

EXIT_OK = 0
EXIT_SYNTH_FAILED = 2
EXIT_CONFIG = 3
EXIT_IO = 4

log = logging.getLogger("unitary_forge")


class InputError(RuntimeError):
    """Unreadable or malformed input/output files."""


# ---------------------------------------------------------------------------
# Config assembly


def _flag_overrides(args) -> dict:
    d: dict = {}
    if args.seed is not None:
        d["seed"] = args.seed
    if args.workers is not None:
        d["workers"] = args.workers
    if args.out is not None:
        d["output_dir"] = args.out
    env = {}
    if args.mode is not None:
        env["mode"] = args.mode
    if args.qubits is not None:
        env["n_qubits"] = args.qubits
    if args.epsilon is not None:
        env["epsilon"] = args.epsilon
    if env:
        d["env"] = env
    if args.toggles is not None:
        try:
            t = Toggles.parse(args.toggles)
        except ValueError as exc:
            raise ConfigError(f"--toggles: {exc}") from None
        d["train"] = {"toggles": dataclasses.asdict(t)}
    return d


def build_config(args, base: dict | None = None) -> RunConfig:
    """Defaults, then the config file (or ``base``), then flags and ``--set``."""
    data = RunConfig().to_dict()
    if base is not None:
        data = merge(data, base)
    if getattr(args, "config", None):
        try:
            file_data = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
        if not isinstance(file_data, dict):
            raise ConfigError(f"{args.config}: config root must be a JSON object")
        data = merge(data, file_data)
    data = merge(data, _flag_overrides(args))
    for item in getattr(args, "set", None) or []:
        key, sep, val = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        apply_override(data, key.strip(), val)
    return RunConfig.from_dict(data)


# ---------------------------------------------------------------------------
# Run directories


def make_run_dir(out: str, seed: int, suffix: str = "") -> Path:
    stamp = _dt.datetime.now().strftime("%Y%m%dT%H%M%S")
    base = Path(out) / f"{stamp}-{seed}{suffix}"
    path, n = base, 1
    while path.exists():
        path = base.with_name(f"{base.name}.{n}")
        n += 1
    try:
        path.mkdir(parents=True)
    except OSError as exc:
        raise InputError(f"cannot create run directory {path}: {exc.strerror}") from None
    return path


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(run_dir: Path, command: str, seed: int, status: str, extra: dict | None = None) -> None:
    files = {}
    for p in sorted(run_dir.rglob("*")):
        if p.is_file() and p.name != "manifest.json" and "checkpoint" not in p.parts:
            files[str(p.relative_to(run_dir))] = _sha256(p)
    manifest = {
        "command": command,
        "seed": seed,
        "version": __version__,
        "numpy": np.__version__,
        "status": status,
        "written": _dt.datetime.now().isoformat(timespec="seconds"),
        "files": files,
    }
    manifest.update(extra or {})
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Training with checkpoints


def build_trainer(cfg: RunConfig) -> DvnuTrainer:
    tcfg = cfg.train_config()
    task = dvnu_task(tcfg, cfg.env, cfg.kinds)
    rng = np.random.default_rng(cfg.seed)
    spec = MlpSpec(task.featurizer.input_dim, cfg.net.hidden, 1, cfg.net.activation,
                   int(rng.integers(2**31)))
    return DvnuTrainer(tcfg, task, rng, spec)


def save_checkpoint(trainer: DvnuTrainer, run_dir: Path) -> None:
    tmp = run_dir / "checkpoint.tmp"
    final = run_dir / "checkpoint"
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir()
    network.save(trainer.net, tmp / "online.dvnu")
    network.save(trainer.target_net, tmp / "target.dvnu")
    np.savez(tmp / "buffer.npz", **trainer.buffer.state_dict())
    (tmp / "state.json").write_text(json.dumps(trainer.scalar_state()))
    if final.exists():
        shutil.rmtree(final)
    tmp.rename(final)


def load_checkpoint(trainer: DvnuTrainer, run_dir: Path) -> None:
    ck = run_dir / "checkpoint"
    trainer.net = network.load(ck / "online.dvnu")
    trainer.target_net = network.load(ck / "target.dvnu")
    with np.load(ck / "buffer.npz") as data:
        trainer.buffer = ReplayBuffer.from_state_dict(data, trainer.task.actions.dim)
    trainer.load_scalar_state(json.loads((ck / "state.json").read_text()))


def run_training(cfg: RunConfig, run_dir: Path, resume: bool = False, stop_after: int | None = None) -> DvnuTrainer:
    trainer = build_trainer(cfg)
    if resume:
        load_checkpoint(trainer, run_dir)
        log.info("resuming %s at iteration %d", run_dir, trainer.iteration)

    def on_iteration(t: DvnuTrainer) -> None:
        save_checkpoint(t, run_dir)
        t.log.write_csv(run_dir / "metrics.csv")

    trainer.log.write_csv(run_dir / "metrics.csv")
    remaining = cfg.train.iterations - trainer.iteration
    if stop_after is not None:
        remaining = min(remaining, stop_after)
    trainer.run(max(0, remaining), callback=on_iteration)
    return trainer


def cmd_train(args) -> int:
    if args.resume:
        run_dir = Path(args.resume)
        if not (run_dir / "config.json").exists():
            raise InputError(f"{run_dir}: no config.json to resume from")
        base = json.loads((run_dir / "config.json").read_text())
        cfg = RunConfig.from_dict(base)
        if args.workers is not None:
            cfg.workers = args.workers
    else:
        cfg = build_config(args)
        run_dir = make_run_dir(cfg.output_dir, cfg.seed)
        cfg.save(run_dir / "config.json")
    write_manifest(run_dir, "train", cfg.seed, "running")
    t0 = time.perf_counter()
    trainer = run_training(cfg, run_dir, resume=bool(args.resume), stop_after=args.stop_after)
    network.save(trainer.net, run_dir / "weights.dvnu")
    (run_dir / "circuits").mkdir(exist_ok=True)
    done = trainer.iteration >= cfg.train.iterations
    write_manifest(run_dir, "train", cfg.seed, "complete" if done else "partial",
                   {"iterations_completed": trainer.iteration, "wall_s": round(time.perf_counter() - t0, 3)})
    print(run_dir)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Synthesis / evaluation


def _load_weights(path) -> network.NetworkState:
    try:
        return network.load(path)
    except OSError as exc:
        raise InputError(f"cannot read weights {path}: {exc.strerror}") from None
    except (NetworkError, KeyError, TypeError, ValueError) as exc:
        raise InputError(f"{path}: {exc}") from None


def _config_for_weights(args) -> RunConfig:
    """Run config saved beside the weights, overridden by ``--config`` and flags."""
    side = Path(args.weights).parent / "config.json"
    base = json.loads(side.read_text()) if side.exists() and not args.config else None
    return build_config(args, base)


def _synthesis_task(cfg: RunConfig):
    return dvnu_task(cfg.train, cfg.env, cfg.kinds)


def _search_cfg(cfg: RunConfig, args):
    kw = {}
    if getattr(args, "beam", None):
        kw.update(strategy="beam", beam_width=args.beam)
    if getattr(args, "restarts", None):
        kw["restarts"] = args.restarts
    if getattr(args, "max_steps", None):
        kw["max_steps"] = args.max_steps
    return dataclasses.replace(cfg.search, **kw) if kw else cfg.search


def cmd_synth(args) -> int:
    cfg = _config_for_weights(args)
    net = _load_weights(args.weights)
    try:
        target = load_unitary(args.target)
    except OSError as exc:
        raise InputError(f"cannot read target {args.target}: {exc.strerror}") from None
    except (UnitaryError, ValueError) as exc:
        raise InputError(f"{args.target}: {exc}") from None
    task = _synthesis_task(cfg)
    if target.shape[0] != task.actions.dim:
        raise ConfigError(
            f"target acts on {target.shape[0].bit_length() - 1} qubit(s) but the run is configured for {cfg.env.n_qubits}"
        )
    scfg = _search_cfg(cfg, args)
    try:
        res = synthesize(net, target, task, scfg)
    except SearchError as exc:
        raise ConfigError(str(exc)) from None
    out = Path(args.out) if args.out else Path(args.weights).parent / "circuits"
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise InputError(f"cannot create {out}: {exc.strerror}") from None
    name = args.name or Path(args.target).stem
    report = {
        "target": str(args.target),
        "mode": cfg.env.mode,
        "epsilon": cfg.env.epsilon if scfg.epsilon is None else scfg.epsilon,
        "success": res.success,
        "wall_ms": round(res.wall_ms, 3),
        "steps": res.steps,
        "restarts_used": res.restarts_used,
    }
    if res.success:
        circ = res.circuit
        # independent check through the flattened gate list
        from .gates import flat_unitary

        report["d_hs"] = float(hs_distance(flat_unitary(circ), target))
        report["gate_counts"] = gate_counts(circ)
        report["length"] = len(circ)
        (out / f"{name}.json").write_text(json.dumps(circuit_to_json(circ), indent=1) + "\n")
        (out / f"{name}.qasm").write_text(to_qasm(circ))
    else:
        report["best_distance"] = res.distance
    (out / f"{name}.report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK if res.success else EXIT_SYNTH_FAILED


def _parse_depths(text: str) -> list[int]:
    out = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part:
            a, b = part.split("-")
            out.extend(range(int(a), int(b) + 1))
        elif part:
            out.append(int(part))
    if not out or min(out) < 1:
        raise ConfigError(f"bad depth list {text!r}")
    return out


def cmd_eval(args) -> int:
    cfg = _config_for_weights(args)
    net = _load_weights(args.weights)
    task = _synthesis_task(cfg)
    targets = make_eval_targets(task, _parse_depths(args.depths), args.per_depth,
                                np.random.default_rng(cfg.seed))
    try:
        table = evaluate_success(net, targets, task, _search_cfg(cfg, args),
                                 random_control=args.random_control,
                                 distance_control=args.distance_control,
                                 control_seed=cfg.seed, workers=cfg.resolved_workers())
    except SearchError as exc:
        raise ConfigError(str(exc)) from None
    run_dir = make_run_dir(cfg.output_dir, cfg.seed, "-eval")
    cfg.save(run_dir / "config.json")
    table.write_csv(run_dir / "success.csv", timing=not args.no_timing)
    write_manifest(run_dir, "eval", cfg.seed, "complete", {"weights": str(args.weights)})
    print(run_dir)
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = build_config(args)
    run_dir = make_run_dir(cfg.output_dir, cfg.seed, "-ablate")
    cfg.save(run_dir / "config.json")
    grid = Toggles.grid() if args.grid == "all" else [Toggles(), Toggles(False, False, False)]
    depths = _parse_depths(args.depths)
    rows = []
    for toggles in grid:
        for s in range(args.seeds):
            seed = cfg.seed + s
            sub = dataclasses.replace(cfg, seed=seed, train=dataclasses.replace(cfg.train, toggles=toggles))
            tag = "".join(str(int(v)) for v in dataclasses.astuple(toggles))
            sub_dir = run_dir / f"t{tag}-s{seed}"
            sub_dir.mkdir()
            sub.save(sub_dir / "config.json")
            trainer = build_trainer(sub)
            trainer.run()
            trainer.log.write_csv(sub_dir / "metrics.csv")
            network.save(trainer.net, sub_dir / "weights.dvnu")
            targets = make_eval_targets(trainer.task, depths, args.per_depth, np.random.default_rng(cfg.seed))
            table = evaluate_success(trainer.net, targets, trainer.task, cfg.search)
            table.write_csv(sub_dir / "success.csv", timing=False)
            rows.append((toggles.tag(), seed, table.pooled_rate(depths), trainer.log.final_success()))
            log.info("ablation %s seed %d: success %.3f", toggles.tag(), seed, rows[-1][2])
    with open(run_dir / "summary.csv", "w") as fh:
        fh.write("toggles,seed,eval_success,final_rollout_success\n")
        for tag, seed, ev, fin in rows:
            fh.write(f"{tag},{seed},{ev:.6f},{fin:.6f}\n")
    write_manifest(run_dir, "ablate", cfg.seed, "complete")
    print(run_dir)
    return EXIT_OK


def cmd_oracle(args) -> int:
    cfg = build_config(args)
    task = make_task(cfg.env, cfg.kinds, Toggles(False, False, False))
    items = []
    if args.corpus:
        try:
            corpus = json.loads(Path(args.corpus).read_text())
        except OSError as exc:
            raise InputError(f"cannot read corpus {args.corpus}: {exc.strerror}") from None
        from .linalg import unitary_from_json

        for i, entry in enumerate(corpus["targets"]):
            try:
                items.append((entry.get("id", str(i)), unitary_from_json(entry["unitary"])))
            except (KeyError, UnitaryError, ValueError) as exc:
                raise InputError(f"{args.corpus}: target {i}: {exc}") from None
    elif args.target:
        try:
            items.append((Path(args.target).stem, load_unitary(args.target)))
        except OSError as exc:
            raise InputError(f"cannot read target {args.target}: {exc.strerror}") from None
        except (UnitaryError, ValueError) as exc:
            raise InputError(f"{args.target}: {exc}") from None
    else:
        raise ConfigError("oracle needs --target or --corpus")
    run_dir = make_run_dir(cfg.output_dir, cfg.seed, "-oracle")
    cfg.save(run_dir / "config.json")
    lines = ["id,found,min_depth,states_expanded,actions"]
    for ident, u in items:
        if u.shape[0] != task.actions.dim:
            raise ConfigError(f"target {ident} does not match --qubits {cfg.env.n_qubits}")
        try:
            res = bfs_oracle(u, task, args.max_depth, node_budget=args.node_budget)
        except OracleBudgetError as exc:
            raise ConfigError(f"target {ident}: {exc}") from None
        acts = " ".join(task.actions[a].label for a in res.action_ids)
        depth = "" if res.min_depth is None else res.min_depth
        lines.append(f"{ident},{int(res.found)},{depth},{res.states_expanded},{acts}")
    (run_dir / "oracle.csv").write_text("\n".join(lines) + "\n")
    write_manifest(run_dir, "oracle", cfg.seed, "complete")
    print(run_dir)
    return EXIT_OK


def cmd_phase_experiment(args) -> int:
    cfg = build_config(args)
    pcfg = PhaseExperimentConfig(
        n_qubits=cfg.env.n_qubits if args.qubits else 2,
        epochs=args.epochs,
        grid_points=args.grid_points,
        train_phases=args.train_phases,
        seed=cfg.seed,
    )
    result = run_phase_experiment(pcfg)
    run_dir = make_run_dir(cfg.output_dir, cfg.seed, "-phase")
    (run_dir / "config.json").write_text(json.dumps(dataclasses.asdict(pcfg), indent=2, sort_keys=True) + "\n")
    result.write_csv(run_dir / "phase.csv")
    write_manifest(run_dir, "phase-experiment", cfg.seed, "complete")
    print(run_dir)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--mode", choices=("inversion", "diagonalization"))
    p.add_argument("--qubits", type=int, choices=(1, 2, 3))
    p.add_argument("--epsilon", type=float)
    p.add_argument("--toggles", help='observation stages, e.g. "111" or "perturb=0"')
    p.add_argument("--out", help="output directory")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any config field, e.g. train.iterations=20")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="unitary-forge", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a value network")
    _common(p)
    p.add_argument("--resume", metavar="RUN_DIR", help="continue an interrupted run")
    p.add_argument("--stop-after", type=int, help="stop after this many iterations (checkpoint kept)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("synth", help="synthesize a circuit for a target unitary")
    _common(p)
    p.add_argument("--weights", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--beam", type=int, help="beam width (default: greedy)")
    p.add_argument("--restarts", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--name", help="output file stem (default: target file stem)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("eval", help="success rates by target depth")
    _common(p)
    p.add_argument("--weights", required=True)
    p.add_argument("--depths", default="1-5")
    p.add_argument("--per-depth", type=int, default=50)
    p.add_argument("--beam", type=int)
    p.add_argument("--restarts", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--random-control", action="store_true")
    p.add_argument("--distance-control", action="store_true")
    p.add_argument("--no-timing", action="store_true", help="write 0 in the wall-time column")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train over the observation-stage toggle grid")
    _common(p)
    p.add_argument("--seeds", type=int, default=4)
    p.add_argument("--grid", choices=("all", "corners"), default="all")
    p.add_argument("--depths", default="1-5")
    p.add_argument("--per-depth", type=int, default=50)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("oracle", help="exact minimum depth by breadth-first search")
    _common(p)
    p.add_argument("--target")
    p.add_argument("--corpus", help="JSON file with a 'targets' list")
    p.add_argument("--max-depth", type=int, default=4)
    p.add_argument("--node-budget", type=int, default=5_000_000)
    p.set_defaults(func=cmd_oracle)

    for name in ("phase-experiment", "classify-experiment"):
        p = sub.add_parser(name, help="gate classification under global phase shifts")
        _common(p)
        p.add_argument("--epochs", type=int, default=250)
        p.add_argument("--grid-points", type=int, default=16)
        p.add_argument("--train-phases", choices=("zero", "random"), default="zero")
        p.set_defaults(func=cmd_phase_experiment)
    return parser


def _setup_logging() -> None:
    level = os.environ.get("UNITARY_FORGE_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InputError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
