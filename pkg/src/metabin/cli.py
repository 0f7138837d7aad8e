"""Command-line entry point.

Usage::

    metabin generate --out runs/data
    metabin train --config run.cfg --out runs/metabin --seed 3
    metabin eval --checkpoint runs/metabin/model.ckpt --out runs/metabin
    metabin gradcheck
    metabin dump-rho --checkpoint runs/metabin/model.ckpt --out runs/metabin
    metabin probe-rho-grad --checkpoint runs/metabin/model.ckpt --out runs/metabin

Run configs are flat ``key = value`` text files (``#`` starts a comment).
Training keys use the :class:`TrainConfig` field names, dataset keys carry a
``data_`` prefix (``data_num_domains``, ``data_seed``, ...). Unknown keys are
rejected and missing keys take their defaults; the resolved config is written
to ``config.txt`` in the output directory. ``--seed`` sets both ``seed`` and
``data_seed``.

Exit status: 0 on success, 1 for usage or config errors, 2 for runtime and
numeric failures (including a failed gradient check).
"""

import argparse
import contextlib
import csv
import json
import logging
import os
import sys
from dataclasses import asdict, fields

import numpy as np

from .data import GeneratorConfig, generate, load_dataset, save_dataset
from .errors import ConfigError, MetaBINError
from .evaluation import evaluate_targets
from .gradsuite import format_table, run_suite
from .model import MetaBINNet, load_checkpoint
from .normalization import write_rho_csv
from .trainer import MetaBINTrainer, TrainConfig, probe_over_batches

log = logging.getLogger("metabin")

DATA_PREFIX = "data_"
CONFIG_ECHO = "config.txt"
LOCK_NAME = ".metabin.lock"

# keys that belong to neither the trainer nor the generator
RUN_DEFAULTS = {
    "dataset": "",  # path of a saved dataset; empty means generate from the data_ keys
    "audit": False,
    "gradcheck_instances": 20,
    "probe_batches": 50,
}


class UsageError(Exception):
    pass


class LockError(MetaBINError):
    pass


# -- config -------------------------------------------------------------------

def default_config():
    values = {}
    values.update(asdict(TrainConfig()))
    values.update({DATA_PREFIX + k: v for k, v in asdict(GeneratorConfig()).items()})
    values.update(RUN_DEFAULTS)
    return values


def _parse_value(key, text, default):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            kind = type(default[0]) if default else float
            parts = [p for p in text.strip("()[] ").split(",") if p.strip()]
            return tuple(kind(p) for p in parts)
        return text
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {type(default).__name__}") from None


def _format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config_text(text, base=None):
    """Apply ``key = value`` lines on top of ``base`` (defaults when None)."""
    values = default_config() if base is None else dict(base)
    defaults = default_config()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in defaults:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _parse_value(key, value, defaults[key])
    return values


def format_config(values):
    lines = []
    for key in default_config():
        lines.append(f"{key} = {_format_value(values[key])}")
    return "\n".join(lines) + "\n"


def split_config(values):
    """Return (TrainConfig, GeneratorConfig, run options) from a resolved mapping."""
    train = TrainConfig(**{f.name: values[f.name] for f in fields(TrainConfig)})
    gen = GeneratorConfig(**{f.name: values[DATA_PREFIX + f.name] for f in fields(GeneratorConfig)})
    run = {k: values[k] for k in RUN_DEFAULTS}
    return train, gen, run


def resolve(args):
    values = default_config()
    if args.config:
        try:
            with open(args.config) as fh:
                text = fh.read()
        except OSError as exc:
            raise UsageError(f"cannot read config {args.config}: {exc.strerror}") from None
        values = parse_config_text(text, values)
    if args.set:
        values = parse_config_text("\n".join(args.set), values)
    if args.seed is not None:
        values["seed"] = args.seed
        values["data_seed"] = args.seed
    return values


# -- plumbing -----------------------------------------------------------------

@contextlib.contextmanager
def output_lock(out_dir):
    """Exclusive lock file so only one command writes to ``out_dir`` at a time."""
    if out_dir is None:
        yield
        return
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, LOCK_NAME)
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise LockError(f"{out_dir} is locked by another command ({path} exists)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        with contextlib.suppress(FileNotFoundError):
            os.remove(path)


def echo_config(values, out_dir):
    if out_dir is not None:
        with open(os.path.join(out_dir, CONFIG_ECHO), "w") as fh:
            fh.write(format_config(values))


def load_or_generate(values):
    _, gen, run = split_config(values)
    if run["dataset"]:
        return load_dataset(run["dataset"])
    return generate(gen)


def _require(args, *names):
    for name in names:
        if getattr(args, name) is None:
            raise UsageError(f"{args.command} needs --{name}")


def _emit_json(obj, out_dir, name):
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if out_dir is None:
        sys.stdout.write(text)
    else:
        with open(os.path.join(out_dir, name), "w") as fh:
            fh.write(text)
        print(os.path.join(out_dir, name))


# -- commands -----------------------------------------------------------------

def cmd_generate(args, values):
    _require(args, "out")
    _, gen, _ = split_config(values)
    dataset = generate(gen)
    path = os.path.join(args.out, "dataset.bin")
    save_dataset(dataset, path)
    echo_config(values, args.out)
    print(path)
    return 0


def cmd_train(args, values):
    _require(args, "out")
    cfg, _, run = split_config(values)
    dataset = load_or_generate(values)
    echo_config(values, args.out)
    trainer = MetaBINTrainer(dataset, cfg, audit=run["audit"])
    history = trainer.train(args.out)
    last = history.rows[-1]
    log.info("trained %d iterations, final mean rho %.4f", len(history.rows), last["mean_rho"])
    if run["audit"] and trainer.violations:
        log.error("episode separation violated: %s", trainer.violations[:5])
        return 2
    print(os.path.join(args.out, "model.ckpt"))
    return 0


def cmd_eval(args, values):
    _require(args, "checkpoint")
    model = load_checkpoint(args.checkpoint)
    dataset = load_or_generate(values)
    result, per_domain = evaluate_targets(model, dataset.targets)
    echo_config(values, args.out)
    metrics = result.to_dict(values["seed"])
    metrics["per_domain"] = [r.to_dict(values["seed"]) for r in per_domain]
    _emit_json(metrics, args.out, "metrics.json")
    return 0


def cmd_gradcheck(args, values):
    rows = run_suite(instances=values["gradcheck_instances"], seed=values["seed"])
    print(format_table(rows))
    if args.out is not None:
        echo_config(values, args.out)
        with open(os.path.join(args.out, "gradcheck.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["check", "instances", "coordinates", "excluded", "max_error", "passed"])
            for r in rows:
                writer.writerow([r.name, r.instances, r.checked, r.excluded, repr(r.max_error),
                                 int(r.passed)])
    failed = [r.name for r in rows if not r.passed]
    if failed:
        log.error("gradient check failed: %s", ", ".join(failed))
        return 2
    return 0


def _fresh_model(values):
    cfg, gen, _ = split_config(values)
    rng = np.random.SeedSequence(cfg.seed).spawn(3)[0]
    return MetaBINNet(num_classes=gen.num_domains * gen.identities_per_domain,
                      in_channels=gen.channels, channels=cfg.channels, strides=cfg.strides,
                      emb_dim=cfg.emb_dim, rho_init=cfg.rho_init, rng=np.random.default_rng(rng))


def cmd_dump_rho(args, values):
    model = load_checkpoint(args.checkpoint) if args.checkpoint else _fresh_model(values)
    if args.out is None:
        write_rho_csv(model.rho_layers(), "/dev/stdout")
        return 0
    echo_config(values, args.out)
    path = os.path.join(args.out, "rho.csv")
    write_rho_csv(model.rho_layers(), path)
    print(path)
    return 0


def cmd_probe_rho_grad(args, values):
    _require(args, "checkpoint")
    cfg, _, run = split_config(values)
    model = load_checkpoint(args.checkpoint)
    dataset = load_or_generate(values)
    result = probe_over_batches(model, dataset.sources, run["probe_batches"], cfg.n_mtr,
                                cfg.samples_per_domain, cfg.instances, cfg.margin, cfg.seed)
    result["seed"] = cfg.seed
    echo_config(values, args.out)
    _emit_json(result, args.out, "rho_grad.json")
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "dump-rho": cmd_dump_rho,
    "probe-rho-grad": cmd_probe_rho_grad,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    parser = _Parser(prog="metabin", description="Meta-learned batch-instance normalization toolkit")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="flat key = value run config")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--seed", type=int, help="overrides seed and data_seed")
    parser.add_argument("--checkpoint", help="model checkpoint to read")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config key; may be repeated")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"metabin: error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        values = resolve(args)
        train_cfg, gen_cfg, run = split_config(values)
        gen_cfg.validate()
        if run["dataset"]:
            train_cfg.validate()
        else:
            train_cfg.validate(gen_cfg.num_domains if train_cfg.enable_meta else None)
        with output_lock(args.out):
            return COMMANDS[args.command](args, values)
    except (UsageError, ConfigError) as exc:
        print(f"metabin: error: {exc}", file=sys.stderr)
        return 1
    except (MetaBINError, OSError, ArithmeticError, ValueError) as exc:
        print(f"metabin: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
