"""
Command line entry point: ``bcsinet <command> [flags]``.

Commands: gen-data, train, eval, analyze, bench, export.

Settings come from built-in defaults, then an optional ``--config`` file of
``key=value`` lines (``#`` starts a comment), then command-line flags. Unknown
config keys are rejected. The fully resolved settings are logged on stderr.

Exit codes: 0 success, 2 usage or configuration error, 3 runtime failure.
"""

import argparse
import json
import logging
import sys
from dataclasses import fields, replace
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import binkernel, channel, complexity, models, trainer

log = logging.getLogger("bcsinet")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3

CHECKPOINT_NAME = "checkpoint.bcsickpt"
METRICS_NAME = "metrics.jsonl"


class ConfigError(ValueError):
    """Bad configuration file or flag value."""


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def _parse_eta(text):
    try:
        return float(Fraction(str(text)))
    except (ValueError, ZeroDivisionError):
        raise ConfigError(f"invalid compression ratio {text!r}") from None


def _parse_bool(text):
    value = str(text).strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"invalid boolean {text!r}")


_TRAIN_FIELDS = {f.name: f.type for f in fields(trainer.TrainConfig)}
_CASTS = {"int": int, "float": float, "str": str, "bool": _parse_bool}

# key -> parser for everything a config file may set
CONFIG_KEYS = {
    "family": str, "head": str, "refinenets": int, "eta": _parse_eta,
    "data": str, "out": str, "scale": float, "profile": str,
    **{name: _CASTS[typ if isinstance(typ, str) else typ.__name__] for name, typ in _TRAIN_FIELDS.items()},
}


def read_config(path):
    """Parse a key=value file into a dict of typed values."""
    values = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    for number, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{number}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in CONFIG_KEYS:
            raise ConfigError(f"{path}:{number}: unknown key {key!r}")
        try:
            values[key] = CONFIG_KEYS[key](value)
        except ValueError as exc:
            raise ConfigError(f"{path}:{number}: bad value for {key}: {exc}") from None
    return values


def resolve(args, keys):
    """Merge config file values and explicit flags for ``keys``."""
    settings = read_config(args.config) if getattr(args, "config", None) else {}
    for key in keys:
        value = getattr(args, key, None)
        if value is not None:
            settings[key] = value
    return settings


def _spec_from(settings):
    kwargs = {k: settings[k] for k in ("family", "head", "refinenets", "eta") if k in settings}
    try:
        return models.ModelSpec(**kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _train_config_from(settings, base=None):
    kwargs = dict(vars(base)) if base is not None else {}
    kwargs.update({k: v for k, v in settings.items() if k in _TRAIN_FIELDS})
    try:
        return trainer.TrainConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def _log_resolved(command, settings):
    log.info("resolved config for %s: %s", command, json.dumps(settings, sort_keys=True, default=str))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args):
    settings = {"seed": 0, "scale": channel.DESK_SCALE, "profile": "indoor"}
    settings.update(resolve(args, ("seed", "scale", "profile", "out")))
    if not settings.get("out"):
        raise ConfigError("gen-data needs --out")
    if settings["profile"] not in channel.PROFILES:
        raise ConfigError(f"unknown profile {settings['profile']!r}")
    try:
        sizes = channel.split_sizes(settings["scale"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    _log_resolved("gen-data", settings)
    splits = channel.generate(settings["seed"], sizes=sizes, profile=settings["profile"])
    paths = channel.save_splits(splits, settings["out"])
    for name, path in paths.items():
        print(f"{name}: {len(splits[name])} samples -> {path}")
    return EXIT_OK


def _load_dataset(path, split):
    path = Path(path)
    if path.is_dir():
        path = path / f"{split}.bin"
    return channel.load(path)


def cmd_train(args):
    keys = ("family", "head", "refinenets", "eta", "data", "out", *_TRAIN_FIELDS)
    settings = resolve(args, keys)
    if not settings.get("data"):
        raise ConfigError("train needs --data (directory with train.bin and val.bin)")
    if not settings.get("out"):
        raise ConfigError("train needs --out")
    out = Path(settings["out"])

    if args.resume:
        ckpt = trainer.load_checkpoint(args.resume, which="current")
        net, state = ckpt.net, ckpt.state
        cfg = _train_config_from(settings, base=ckpt.config)
        spec = net.spec
        requested = _spec_from({**spec.to_dict(), **settings})
        if requested != spec:
            raise ConfigError(f"--resume checkpoint holds {spec.name}, flags ask for {requested.name}")
    else:
        spec = _spec_from(settings)
        cfg = _train_config_from(settings)
        net = models.build(spec, seed=cfg.seed)
        state = None
    _log_resolved("train", {**spec.to_dict(), **vars(cfg), "data": settings["data"], "out": str(out),
                            "resume": args.resume})

    train = _load_dataset(settings["data"], "train")
    val = _load_dataset(settings["data"], "val")
    out.mkdir(parents=True, exist_ok=True)
    metrics_path = out / METRICS_NAME
    ckpt_path = out / CHECKPOINT_NAME
    history = state.history if state else []
    metrics_path.write_text(trainer.history_jsonl(history))
    norms = (train.norm_min, train.norm_max)

    state = state or trainer.TrainState()

    def on_epoch(record):
        with open(metrics_path, "a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
        db = record["val_nmse_db"]
        log.info("epoch %d lr %.3g val_mse %s NMSE %s dB reboots %d", record["epoch"], record["lr"],
                 record["val_mse"], "n/a" if db is None else f"{db:.2f}", record["reboots"])
        done = record["epoch"] + 1
        if args.checkpoint_every and done % args.checkpoint_every == 0 and done < cfg.epochs:
            # fit advances the epoch counter after this callback returns
            trainer.save_checkpoint(ckpt_path, net, replace(state, epoch=done), cfg, norms)

    best, state = trainer.fit(net, train, val, cfg, state=state, log=on_epoch)
    trainer.save_checkpoint(ckpt_path, net, state, cfg, norms)
    _, _, db = trainer.evaluate(best, val, physical=cfg.physical_nmse)
    print(f"best epoch {state.best_epoch}, validation NMSE: {db:.2f} dB")
    print(f"checkpoint: {ckpt_path}")
    print(f"metrics: {metrics_path}")
    return EXIT_OK


def _eval_model(model, ds, physical):
    out = np.concatenate([model.reconstruct(ds.data[i:i + 256]) for i in range(0, len(ds), 256)])
    if physical:
        return trainer.nmse_db(ds.physical(), ds.physical(out))
    return trainer.nmse_db(ds.data, out)


def cmd_eval(args):
    if bool(args.ckpt) == bool(args.deployed):
        raise ConfigError("eval needs exactly one of --ckpt or --deployed")
    if not args.data:
        raise ConfigError("eval needs --data")
    ds = _load_dataset(args.data, "test")
    if args.ckpt:
        model = trainer.load_checkpoint(args.ckpt, which=args.which).net
    else:
        model = binkernel.import_model(args.deployed)
    _log_resolved("eval", {"model": args.ckpt or args.deployed, "data": args.data,
                           "normalized": args.normalized, "samples": len(ds)})
    db = _eval_model(model, ds, physical=not args.normalized)
    print(f"NMSE: {db:.2f} dB")
    return EXIT_OK


def cmd_analyze(args):
    _log_resolved("analyze", {"table": args.table, "csv": args.csv})
    rows = complexity.table(args.table)
    print(complexity.format_table(args.table, rows))
    if args.csv:
        Path(args.csv).write_text(complexity.to_csv(rows))
    return EXIT_OK


def cmd_bench(args):
    if args.deployed:
        model = binkernel.import_model(args.deployed)
    elif args.ckpt:
        model = binkernel.deploy(trainer.load_checkpoint(args.ckpt).net)
    else:
        settings = resolve(args, ("family", "head", "refinenets", "eta"))
        settings.setdefault("family", "BCsiNet")
        model = binkernel.deploy(models.build(_spec_from(settings), seed=0))
    if not model.spec.binary:
        raise ConfigError("bench needs a binary (BCsiNet) model")
    _log_resolved("bench", {"model": model.spec.name, "iterations": args.iterations, "runs": args.runs})
    report = binkernel.bench(model, iterations=args.iterations, runs=args.runs)
    print(report.summary())
    return EXIT_OK


def cmd_export(args):
    if not args.ckpt or not args.out:
        raise ConfigError("export needs --ckpt and --out")
    ckpt = trainer.load_checkpoint(args.ckpt, which=args.which)
    _log_resolved("export", {"ckpt": args.ckpt, "out": args.out, "which": args.which})
    model = binkernel.export(ckpt.net, args.out, *ckpt.norms)
    print(f"{model.spec.name}: encoder FC {model.fc_storage_bytes} bytes -> {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _add_spec_flags(p):
    p.add_argument("--family", type=str, help="CsiNet or BCsiNet")
    p.add_argument("--head", type=str, help="encoder head A, B or C")
    p.add_argument("--refinenets", type=int, help="2 or 3 RefineNet blocks")
    p.add_argument("--eta", type=_parse_eta, help="compression ratio, e.g. 0.25 or 1/4")


def build_parser():
    parser = argparse.ArgumentParser(prog="bcsinet", description="Binary-weight CSI feedback autoencoders.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="synthesize train/val/test datasets")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--scale", type=float, help="fraction of the full 100k/30k/20k split sizes")
    p.add_argument("--profile", choices=sorted(channel.PROFILES))
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a network")
    p.add_argument("--config")
    _add_spec_flags(p)
    p.add_argument("--data", help="directory containing train.bin and val.bin")
    p.add_argument("--out", help="output directory for checkpoint and metrics")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--checkpoint-every", type=int, default=10, help="epochs between checkpoint writes (0: end only)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--warmup", type=int)
    p.add_argument("--lr-start", dest="lr_start", type=float)
    p.add_argument("--lr-end", dest="lr_end", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--gate", choices=[g.value for g in trainer.GateVariant])
    p.add_argument("--max-reboots", dest="max_reboots", type=int)
    p.add_argument("--normalized", dest="physical_nmse", action="store_const", const=False,
                   help="report NMSE on normalized data instead of channel scale")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="NMSE of a checkpoint or deployed model on a dataset")
    p.add_argument("--ckpt")
    p.add_argument("--deployed")
    p.add_argument("--which", choices=("best", "current"), default="best")
    p.add_argument("--data", help="dataset file, or a directory holding test.bin")
    p.add_argument("--normalized", action="store_true", help="NMSE on normalized data")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="complexity tables")
    p.add_argument("--table", choices=complexity.TABLE_MODES, required=True)
    p.add_argument("--csv", help="also write the rows as CSV")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("bench", help="binary vs float FC micro-benchmark")
    p.add_argument("--config")
    p.add_argument("--ckpt")
    p.add_argument("--deployed")
    _add_spec_flags(p)
    p.add_argument("--iterations", type=int, default=2000)
    p.add_argument("--runs", type=int, default=5)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("export", help="write the deployed (BN-folded, bit-packed) model")
    p.add_argument("--ckpt")
    p.add_argument("--which", choices=("best", "current"), default="best")
    p.add_argument("--out")
    p.set_defaults(func=cmd_export)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 on usage errors
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"bcsinet {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (trainer.TrainingDivergedError, channel.FormatError, OSError, ValueError, KeyError) as exc:
        print(f"bcsinet {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
