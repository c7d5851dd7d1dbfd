"""Command-line entry point: ``moe-robust {train,eval,report}``.

Exit codes: 0 success, 1 numerical failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import datetime as dt
import json
import logging
import sys
from dataclasses import asdict, dataclass
from pathlib import Path

import torch

from . import __version__
from .attacks import evaluate
from .config import RunConfig, digest, dump_yaml, load_config, load_datasets, model_digest, resolve
from .diagnostics import (
    TradeoffPoint, cost_curve, cost_rows, fixed_expert_rows, fixed_expert_sweep, read_table,
    routing_report, routing_rows, tradeoff_report, write_table,
)
from .errors import ConfigError, ConflictError, FormatError, InvalidArgument, ModelConstructionError, NumericalFailure
from .models import build_model
from .numerics import atomic_write_bytes, load_checkpoint, model_state, save_checkpoint

log = logging.getLogger("moe_robust")

EXIT_OK, EXIT_NUMERICAL, EXIT_USAGE = 0, 1, 2
POINTS_SCHEMA = {"schema": "tradeoff_points", "version": 1}


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    config_path: str | None
    config_digest: str
    model_digest: str
    seed: int
    out_dir: str
    started: str
    finished: str
    version: str = __version__


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


def _write_json(path: Path, obj) -> None:
    atomic_write_bytes(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


def _write_manifest(out: Path, cfg: RunConfig, args, started: str) -> None:
    m = RunManifest(args.command, list(args.argv), str(args.config) if getattr(args, "config", None) else None,
                    digest(cfg), model_digest(cfg), cfg.seed, str(out), started, _now())
    _write_json(out / "manifest.json", asdict(m))
    atomic_write_bytes(out / "config.yaml", dump_yaml(cfg).encode())


def _load_model(cfg: RunConfig, checkpoint: Path) -> torch.nn.Module:
    tensors, header = load_checkpoint(checkpoint)
    want = model_digest(cfg)
    if header["config_digest"] != want:
        raise ConfigError(
            f"checkpoint digest {header['config_digest']} does not match model config digest {want}"
        )
    model = build_model(cfg.model, cfg.seed)
    model.load_state_dict(tensors)
    model.eval()
    return model


def _resolve_args(args) -> RunConfig:
    if args.config is None:
        return resolve({}, args.set, args.seed)
    return load_config(args.config, args.set, args.seed)


def cmd_train(args) -> int:
    started = _now()
    cfg = _resolve_args(args)
    out = Path(args.out) if args.out else Path("runs") / f"{cfg.run_id}-s{cfg.seed}"
    out.mkdir(parents=True, exist_ok=True)
    train_data, eval_data = load_datasets(cfg.data)
    model = build_model(cfg.model, cfg.seed)
    mdig = model_digest(cfg)

    from .training import train

    def on_checkpoint(epoch, m):
        save_checkpoint(out / f"epoch{epoch + 1:04d}.ckpt", model_state(m), mdig, {"epoch": epoch + 1})

    tmp_log = out / "trainlog.jsonl.partial"
    train(model, train_data, eval_data, cfg.train, tmp_log, on_checkpoint)
    tmp_log.replace(out / "trainlog.jsonl")
    save_checkpoint(out / "model.ckpt", model_state(model), mdig, {"epoch": cfg.train.epochs})
    _write_manifest(out, cfg, args, started)
    print(f"wrote {out / 'model.ckpt'}")
    return EXIT_OK


def _read_points(path: Path) -> list[dict]:
    if not path.exists():
        return []
    header, rows = read_table(path)
    if header.get("schema") != POINTS_SCHEMA["schema"]:
        raise FormatError(f"{path}: not a tradeoff points file")
    return rows


def cmd_eval(args) -> int:
    cfg = _resolve_args(args)
    model = _load_model(cfg, Path(args.checkpoint))
    _, eval_data = load_datasets(cfg.data)
    names = args.attack or sorted(cfg.eval.attacks)
    if names == ["none"]:
        names = []
    unknown = [n for n in names if n not in cfg.eval.attacks]
    if unknown:
        raise ConfigError(f"attacks not configured under eval.attacks: {', '.join(unknown)}")

    points_path = Path(args.points)
    existing = _read_points(points_path)
    model_id = f"{cfg.run_id}-s{cfg.seed}"
    mdig = model_digest(cfg)
    regime = "adversarial" if cfg.train.adversarial else "normal"
    new_rows = []
    clean = None
    for name in names or [None]:
        key = {"model_id": model_id, "attack": name, "config_digest": mdig,
               "attack_config": asdict(cfg.eval.attacks[name]) if name else None}
        if any({k: r.get(k) for k in key} == key for r in existing):
            print(f"{model_id} / {name or 'clean'}: already recorded, skipping")
            continue
        if clean is None:
            clean = evaluate(model, eval_data, None, cfg.eval.batch_size, cfg.seed)
        acc = evaluate(model, eval_data, cfg.eval.attacks[name], cfg.eval.batch_size, cfg.seed) if name else None
        point = TradeoffPoint(model_id, regime, clean, {name: acc} if name else {}, mdig)
        row = dict(key, regime=regime, clean_accuracy=clean, accuracy=acc if name else clean,
                   point=asdict(point))
        new_rows.append(row)
        print(f"{model_id} / {name or 'clean'}: clean {clean:.4f}" + (f", attacked {acc:.4f}" if name else ""))
    if new_rows:
        rows = existing + new_rows
        text = json.dumps(POINTS_SCHEMA, sort_keys=True) + "\n" + "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows)
        atomic_write_bytes(points_path, text.encode())
    return EXIT_OK


def cmd_report(args) -> int:
    out = Path(args.out)
    if args.kind == "tradeoff":
        points = []
        for p in args.points:
            for r in _read_points(Path(p)):
                points.append(TradeoffPoint(**r["point"]))
        if not points:
            raise InvalidArgument("no tradeoff points found in the given files")
        rows = tradeoff_report(points, out)
        print(f"wrote {len(rows)} rows to {out}.jsonl / .tsv")
        return EXIT_OK

    cfg = _resolve_args(args)
    if args.kind == "cost":
        c = cfg.cost
        rows = cost_rows(cost_curve(c.arch, c.expert_kind, c.expert_counts, c.ks, c.stage, c.block_index,
                                    c.conv_index, c.gate_kind, cfg.model.num_classes, cfg.model.input_shape))
        write_table(out, "cost", rows)
        print(f"wrote {len(rows)} rows to {out}.jsonl / .tsv")
        return EXIT_OK

    if not args.checkpoint:
        raise ConfigError(f"report {args.kind} needs --checkpoint")
    model = _load_model(cfg, Path(args.checkpoint))
    _, eval_data = load_datasets(cfg.data)
    if args.kind == "routing":
        rows = routing_rows(routing_report(model, eval_data))
        write_table(out, "routing", rows)
    else:
        attack = None
        if args.attack and args.attack != "none":
            if args.attack not in cfg.eval.attacks:
                raise ConfigError(f"attack {args.attack!r} not configured under eval.attacks")
            attack = cfg.eval.attacks[args.attack]
        rows = fixed_expert_rows(fixed_expert_sweep(model, eval_data, attack, cfg.seed, cfg.eval.batch_size))
        write_table(out, "fixed_expert", rows)
    print(f"wrote {len(rows)} rows to {out}.jsonl / .tsv")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="moe-robust", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", type=Path, required=config_required, help="YAML run config")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config entry, e.g. train.lr0=0 (repeatable)")

    p = sub.add_parser("train", help="train a model and write checkpoint, log and manifest")
    common(p)
    p.add_argument("--out", type=Path, default=None, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint and append tradeoff points")
    common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--attack", action="append", default=None,
                   help="attack name from eval.attacks, or 'none' for clean only (repeatable)")
    p.add_argument("--points", "--out", dest="points", type=Path, default=Path("points.jsonl"))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="write routing / fixed-expert / tradeoff / cost reports")
    p.add_argument("kind", choices=["routing", "fixed-expert", "tradeoff", "cost"])
    common(p, config_required=False)
    p.add_argument("--checkpoint", type=Path, default=None)
    p.add_argument("--attack", default=None, help="attack name for fixed-expert reports")
    p.add_argument("--points", nargs="*", default=[], help="tradeoff points files")
    p.add_argument("--out", type=Path, required=True, help="output prefix (.jsonl and .tsv are written)")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, ConflictError, FormatError, InvalidArgument, ModelConstructionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
