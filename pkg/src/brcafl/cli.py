"""Command-line runner: ``run``, ``sweep`` and ``pretrain``.

Configs are flat JSON objects with dotted keys (see
:class:`brcafl.simulation.ExperimentConfig`). ``--override KEY=VALUE``
values are parsed as JSON when possible and as plain strings otherwise.

Exit codes: 0 success, 2 invalid configuration or arguments, 3 the run
aborted (for example on a non-finite model).
"""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import hashlib
import json
import logging
import subprocess
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Optional, Sequence

from . import checkpoint
from .simulation import (
    ConfigError,
    Experiment,
    ExperimentConfig,
    SimulationAbort,
    default_detector,
)

log = logging.getLogger("brcafl")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ABORT = 3
SENTINEL = "INCOMPLETE"


# -- config assembly --

def parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_override(item: str) -> tuple[str, Any]:
    key, sep, value = item.partition("=")
    if not sep or not key:
        raise ConfigError(f"override {item!r} is not KEY=VALUE")
    return key.strip(), parse_value(value)


def load_config(
    path: Optional[str],
    overrides: Sequence[str] = (),
    seed: Optional[int] = None,
    idx_dir: Optional[str] = None,
) -> ExperimentConfig:
    flat: dict[str, Any] = {}
    if path is not None:
        try:
            flat = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(flat, dict):
            raise ConfigError("config must be a JSON object of dotted keys")
    for item in overrides:
        key, value = parse_override(item)
        flat[key] = value
    if seed is not None:
        flat["seed"] = seed
    if idx_dir is not None:
        flat["dataset.kind"] = "idx"
        flat["dataset.idx_dir"] = idx_dir
    return ExperimentConfig.from_flat(flat)


def config_digest(config: ExperimentConfig) -> str:
    return hashlib.sha256(config.canonical_json().encode()).hexdigest()


def git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True, text=True, timeout=5, cwd=Path(__file__).parent,
        )
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() if out.returncode == 0 and out.stdout.strip() else "unknown"


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- run --

def execute_run(config: ExperimentConfig, out: Path) -> tuple[float, float]:
    """Run one experiment into ``out``; return the final (accuracy, loss).

    ``out/INCOMPLETE`` exists until every output file has been written.
    """
    out.mkdir(parents=True, exist_ok=True)
    sentinel = out / SENTINEL
    sentinel.write_text("run started but did not finish\n")
    manifest = {
        "config_digest": config_digest(config),
        "config": config.to_flat(),
        "master_seed": config.seed,
        "output_dir": str(out),
        "git_describe": git_describe(),
        "started": _now(),
        "finished": None,
    }
    _write_json(out / "manifest.json", manifest)

    detector = None
    try:
        if config.detector_checkpoint:
            detector = checkpoint.load_detector(config.detector_checkpoint)
        experiment = Experiment(config, detector)
    except ConfigError:
        raise
    except (ValueError, OSError) as exc:
        # infeasible partitions, unreadable data or checkpoints
        raise ConfigError(str(exc)) from exc

    with open(out / "metrics.jsonl", "w") as fh:
        def emit(m):
            fh.write(json.dumps(m.to_json(), sort_keys=True) + "\n")
            fh.flush()
            log.info("round %d: accuracy %.4f loss %.4f", m.round, m.test_accuracy, m.test_loss)

        state, history = experiment.run(on_round=emit)

    with open(out / "summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["round", "accuracy", "loss"])
        for m in history:
            writer.writerow([m.round, repr(m.test_accuracy), repr(m.test_loss)])

    checkpoint.save_model(out / "model.ckpt", experiment.spec, state.global_params)
    if state.detector is not None:
        checkpoint.save_detector(out / "detector.ckpt", state.detector)

    manifest["finished"] = _now()
    _write_json(out / "manifest.json", manifest)
    sentinel.unlink()
    if history:
        return history[-1].test_accuracy, history[-1].test_loss
    return float("nan"), float("nan")


def cmd_run(args) -> int:
    config = load_config(args.config, args.override, args.seed, args.idx_dir)
    accuracy, test_loss = execute_run(config, Path(args.out))
    print(f"final accuracy {accuracy:.4f} loss {test_loss:.4f} -> {args.out}")
    return EXIT_OK


# -- sweep --

def parse_values(text: str) -> list:
    text = text.strip()
    if text.startswith("["):
        values = json.loads(text)
        if not isinstance(values, list):
            raise ConfigError("--values must be a JSON list or comma-separated")
        return values
    return [parse_value(v.strip()) for v in text.split(",") if v.strip()]


def _cell_dir(out: Path, axis: str, value, seed: int) -> Path:
    label = json.dumps(value) if not isinstance(value, str) else value
    label = label.replace("/", "_").replace(" ", "")
    return out / f"{axis}={label}" / f"seed={seed}"


def _run_cell(flat: dict, out: str) -> tuple[str, float, float]:
    try:
        config = ExperimentConfig.from_flat(flat)
        accuracy, test_loss = execute_run(config, Path(out))
        return "ok", accuracy, test_loss
    except (ConfigError, SimulationAbort, ValueError, OSError) as exc:
        return f"{type(exc).__name__}: {exc}", float("nan"), float("nan")


def cmd_sweep(args) -> int:
    base = load_config(args.config, args.override, None, args.idx_dir)
    if args.axis not in ExperimentConfig.key_map():
        raise ConfigError(f"unknown sweep axis {args.axis!r}")
    values = parse_values(args.values)
    if not values:
        raise ConfigError("sweep needs at least one value")
    seeds = [int(s) for s in parse_values(args.seeds)] if args.seeds else [base.seed]
    if not seeds:
        raise ConfigError("sweep needs at least one seed")
    if args.jobs < 1:
        raise ConfigError("--jobs must be at least 1")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cells = []
    for value in values:
        for seed in seeds:
            flat = base.to_flat()
            flat[args.axis] = value
            flat["seed"] = seed
            cells.append((value, seed, flat, str(_cell_dir(out, args.axis, value, seed))))

    if args.jobs == 1:
        results = [_run_cell(flat, cell_out) for _, _, flat, cell_out in cells]
    else:
        with concurrent.futures.ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_run_cell, [c[2] for c in cells], [c[3] for c in cells]))

    with open(out / "sweep.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([args.axis, "seed", "final_accuracy", "final_loss", "status"])
        for (value, seed, _, _), (status, accuracy, test_loss) in zip(cells, results):
            label = value if isinstance(value, str) else json.dumps(value)
            writer.writerow([label, seed, repr(accuracy), repr(test_loss), status])
            if status != "ok":
                log.error("cell %s=%s seed=%s failed: %s", args.axis, label, seed, status)
    failed = sum(status != "ok" for status, _, _ in results)
    print(f"{len(cells) - failed}/{len(cells)} cells finished -> {out / 'sweep.csv'}")
    return EXIT_OK


# -- pretrain --

def cmd_pretrain(args) -> int:
    config = load_config(args.config, args.override, args.seed, args.idx_dir)
    detector = default_detector(config.with_keys(**{"defense.kind": "brca"}))
    path = Path(args.out)
    if path.is_dir() or args.out.endswith(("/", "\\")):
        path.mkdir(parents=True, exist_ok=True)
        path = path / "detector.ckpt"
    else:
        path.parent.mkdir(parents=True, exist_ok=True)
    checkpoint.save_detector(path, detector)
    print(f"detector ({detector.input_dim}-wide probe) -> {path}")
    return EXIT_OK


# -- entry point --

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="brcafl", description="Byzantine-robust federated learning simulator")
    parser.add_argument("--log-level", default="WARNING", help="python logging level (default WARNING)")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--config", help="JSON file of dotted config keys")
        p.add_argument("--out", required=True, help="output directory (pretrain: checkpoint path or directory)")
        p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key; repeatable")
        p.add_argument("--idx-dir", help="load the standard IDX image/label files from this directory")
        if seed:
            p.add_argument("--seed", type=int, help="master seed (overrides the config)")

    p_run = sub.add_parser("run", help="pre-train if needed, then run all rounds")
    common(p_run)
    p_run.set_defaults(func=cmd_run)

    p_sweep = sub.add_parser("sweep", help="run a grid of values x seeds along one config key")
    common(p_sweep, seed=False)
    p_sweep.add_argument("--axis", required=True, help="dotted config key to vary")
    p_sweep.add_argument("--values", required=True, help="comma-separated values or a JSON list")
    p_sweep.add_argument("--seeds", help="comma-separated master seeds (default: the config seed)")
    p_sweep.add_argument("--jobs", type=int, default=1, help="worker processes (default 1)")
    p_sweep.set_defaults(func=cmd_sweep)

    p_pre = sub.add_parser("pretrain", help="pre-train the anomaly detector on a source-domain task")
    common(p_pre)
    p_pre.set_defaults(func=cmd_pretrain)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SimulationAbort as exc:
        print(f"error: run aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
