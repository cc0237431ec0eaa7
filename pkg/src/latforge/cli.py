"""Command line: ``latforge {gen-data,train,eval,relearn,plot}``.

Dataset files live in ``paths.data_dir`` (relative to the config file) as one
JSON record per line::

    {"role": ..., "prompt": [ids], "completion": [ids], "flags": {...}}

Preference splits carry ``chosen``/``rejected`` instead of ``completion``.
``manifest.json`` records the sha256 and record count of every split.

A run directory holds ``config.txt``, ``metrics.csv``, ``checkpoint-<step>.latf``
files, ``final.latf`` and, while training, ``run.lock``.

Exit codes: 0 ok, 2 config error, 3 NaN budget exceeded, 4 I/O error.
``LATFORGE_THREADS`` caps the BLAS thread pool.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import filelock
from threadpoolctl import threadpool_limits

from . import config as config_mod
from . import storage, trainer
from .config import ConfigError, RunConfig
from .evalkit import MetricsRecord, accuracy_and_perplexity, evaluate_splits, gap_closed
from .plots import plot_csv

EXIT_OK, EXIT_CONFIG, EXIT_NAN, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("latforge")


class Context:
    """A loaded config plus the directory its relative paths resolve against."""

    def __init__(self, config: RunConfig, root: Path):
        self.config = config
        self.root = root

    def resolve(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.root / p

    @property
    def data_dir(self) -> Path:
        return self.resolve(self.config.paths.data_dir)


def _load_context(path, **overrides) -> Context:
    cfg = config_mod.load(path).with_overrides(**overrides).validate()
    return Context(cfg, Path(path).resolve().parent)


def _context_for_checkpoint(args, ckpt: storage.Checkpoint) -> Context:
    if args.config:
        return _load_context(args.config)
    cfg = config_mod.loads(ckpt.config_text).validate()
    return Context(cfg, Path.cwd())


def _thread_limit():
    raw = os.environ.get("LATFORGE_THREADS")
    if raw is None or raw == "":
        return nullcontext()
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n < 1:
        raise ConfigError(f"LATFORGE_THREADS must be a positive integer; got {raw!r}")
    return threadpool_limits(limits=n)


def _emit(text: str, out) -> None:
    if out:
        storage.atomic_write(out, text)
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    ov = {"task__seed": args.seed} if args.seed is not None else {}
    ctx = _load_context(args.config, **ov)
    out = Path(args.out) if args.out else ctx.data_dir
    splits = trainer.build_datasets(ctx.config)
    manifest = storage.write_datasets(out, splits, ctx.config.hash())
    for role, entry in manifest["splits"].items():
        print(f"{role}: {entry['records']} records sha256={entry['sha256'][:16]}")
    return EXIT_OK


def _initial_params(ctx: Context, override):
    path = override or ctx.config.paths.init_checkpoint
    if not path:
        return None
    return storage.load_checkpoint(path if override else ctx.resolve(path)).params()


def cmd_train(args) -> int:
    ov = {"train__seed": args.seed} if args.seed is not None else {}
    ctx = _load_context(args.config, **ov)
    cfg = ctx.config
    out = Path(args.out) if args.out else Path("runs") / cfg.hash()
    out.mkdir(parents=True, exist_ok=True)
    datasets = storage.read_datasets(ctx.data_dir, cfg.task.seed)
    init = _initial_params(ctx, args.checkpoint)
    config_text = cfg.canonical_text()
    csv_path = out / "metrics.csv"

    with filelock.FileLock(str(out / "run.lock"), timeout=0):
        storage.atomic_write(out / "config.txt", config_text)
        state, records = None, []
        if args.resume:
            ck = storage.load_checkpoint(args.resume)
            counters = ck.counters()
            if counters is None or ck.momentum() is None:
                raise ConfigError(f"{args.resume} holds no trainer state to resume from")
            step, skips, updates = counters
            state = trainer.TrainState(step, ck.params(), ck.momentum(), skips, updates)
            if csv_path.exists():
                records = [_record_from_row(r) for r in storage.read_metrics_csv(csv_path) if r["step"] <= step]
            log.info("resuming at step %d", step)

        def on_record(r: MetricsRecord):
            records.append(r)
            storage.atomic_write(csv_path, storage.metrics_csv(records, cfg.hash()))
            log.info("step %d %s", r.step, {k: v for k, v in r.as_dict().items() if v is not None and k != "step"})

        def on_checkpoint(s: trainer.TrainState):
            storage.save_checkpoint(out / f"checkpoint-{s.step:06d}.latf", config_text, s.params, s.momentum,
                                    (s.step, s.nan_skips, s.updates))

        result = trainer.run(cfg, datasets, init=init, state=state, on_record=on_record, on_checkpoint=on_checkpoint)
        s = result.state
        storage.save_checkpoint(out / "final.latf", config_text, s.params, s.momentum, (s.step, s.nan_skips, s.updates))
    print(out / "final.latf")
    return EXIT_OK


def _record_from_row(row: dict) -> MetricsRecord:
    return MetricsRecord(**{k: row[k] for k in MetricsRecord.columns()})


def cmd_eval(args) -> int:
    if not args.checkpoint:
        raise ConfigError("eval needs --checkpoint")
    ck = storage.load_checkpoint(args.checkpoint)
    ctx = _context_for_checkpoint(args, ck)
    datasets = storage.read_datasets(ctx.data_dir, ctx.config.task.seed)
    splits = trainer.evaluation_splits(datasets)
    counters = ck.counters()
    record = MetricsRecord(step=counters[0] if counters else 0, nan_skips=counters[1] if counters else 0,
                           **evaluate_splits(ctx.config.model_config(), ck.params(), splits))
    _emit(storage.metrics_csv([record], ctx.config.hash()), args.out)
    return EXIT_OK


def cmd_relearn(args) -> int:
    if not args.checkpoint:
        raise ConfigError("relearn needs --checkpoint")
    ck = storage.load_checkpoint(args.checkpoint)
    ctx = _context_for_checkpoint(args, ck)
    cfg = ctx.config
    if args.seed is not None:
        cfg = cfg.with_overrides(relearn__seed=args.seed)
    datasets = storage.read_datasets(ctx.data_dir, cfg.task.seed)
    if "forget" not in datasets:
        raise ConfigError("relearn needs a forget split (task.setting = unlearn)")
    mc, r = cfg.model_config(), cfg.relearn
    report = trainer.relearn_attack(mc, ck.params(), datasets["forget"], r.n_examples, r.iters, r.eval_at, r.lr,
                                    seed=r.seed)
    out = {"n_examples": r.n_examples, "iters": r.iters, "eval_at": sorted(c for c in report.accuracies if c),
           "indices": report.indices, "accuracies": {str(k): v for k, v in sorted(report.accuracies.items())},
           "unlearned_accuracy": report.unattacked, "best_accuracy": report.best,
           "base_accuracy": None, "gap_closed": None, "config_hash": cfg.hash()}
    base = cfg.paths.init_checkpoint
    if base:
        base_params = storage.load_checkpoint(ctx.resolve(base)).params()
        out["base_accuracy"] = accuracy_and_perplexity(mc, base_params, datasets["forget"])[0]
        out["gap_closed"] = gap_closed(out["base_accuracy"], report.unattacked, report.best)
    _emit(json.dumps(out, indent=2) + "\n", args.out)
    return EXIT_OK


def cmd_plot(args) -> int:
    out = Path(args.out) if args.out else Path(args.csv).parent
    for path in plot_csv(args.csv, out):
        print(path)
    return EXIT_OK


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="latforge", description="Latent adversarial training on toy transformers.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write dataset files and their hash manifest")
    g.add_argument("--config", required=True)
    g.add_argument("--seed", type=int, help="override task.seed")
    g.add_argument("--out", help="output directory (default: paths.data_dir)")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run the configured training schedule")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int, help="override train.seed")
    t.add_argument("--out", help="run directory (default: runs/<config hash>)")
    t.add_argument("--checkpoint", help="initial parameters (overrides paths.init_checkpoint)")
    t.add_argument("--resume", help="checkpoint written by an earlier run of the same config")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="one metrics row for a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--config", help="defaults to the config stored in the checkpoint")
    e.add_argument("--out", help="CSV file (default: stdout)")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("relearn", help="few-shot re-learning attack on an unlearned checkpoint")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--config", help="defaults to the config stored in the checkpoint")
    r.add_argument("--seed", type=int, help="override relearn.seed")
    r.add_argument("--out", help="JSON report file (default: stdout)")
    r.set_defaults(func=cmd_relearn)

    pl = sub.add_parser("plot", help="SVG charts from a metrics CSV")
    pl.add_argument("csv")
    pl.add_argument("--out", help="output directory (default: next to the CSV)")
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except trainer.NanBudgetExceeded as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_NAN
    except filelock.Timeout as exc:
        print(f"run directory is locked by another process: {exc.lock_file}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
