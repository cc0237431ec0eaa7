"""The two end-to-end toy experiments: backdoor removal and robust unlearning.

Each recipe is a list of configs run in sequence, each stage starting from the
previous stage's parameters. The same settings ship as text files under
``configs/`` for use with the command line.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable

from . import trainer
from .config import RunConfig
from .evalkit import accuracy_and_perplexity, evaluate_splits, gap_closed

BACKDOOR_POISON = dict(task__setting="backdoor", task__seed=1, loss__kind="sft", train__steps=2000,
                       train__eval_every=500, optim__lr=0.02)
BACKDOOR_DPO = dict(task__setting="backdoor", task__seed=1, loss__kind="dpo", train__steps=1024,
                    train__batch_size=16, train__eval_every=256, attack__enabled=False)
BACKDOOR_DPO_LAT = dict(BACKDOOR_DPO, attack__enabled=True, attack__epsilon=4.0, attack__steps=8)

UNLEARN_BASE = dict(task__setting="unlearn", loss__kind="sft", train__steps=1000, train__eval_every=0,
                    optim__lr=0.02)
UNLEARN_GA = dict(task__setting="unlearn", loss__kind="unlearn-ga", train__steps=100, train__eval_every=0,
                  attack__enabled=False)
UNLEARN_GA_LAT = dict(UNLEARN_GA, attack__enabled=True, attack__epsilon=2.0, attack__steps=16)


def config(overrides: dict, **extra) -> RunConfig:
    return RunConfig().with_overrides(**overrides, **extra).validate()


@dataclass
class BackdoorResult:
    poisoned: dict
    dpo: dict
    dpo_lat: dict
    records: dict = field(default_factory=dict)


def run_backdoor(progress: Callable[[str, object], None] | None = None) -> BackdoorResult:
    """Plant the trigger, then remove it with DPO and with DPO-LAT.

    Neither removal stage sees the trigger: its preference data is built from
    untriggered harmful prompts only.
    """
    poison_cfg = config(BACKDOOR_POISON)
    datasets = trainer.build_datasets(poison_cfg)
    splits = trainer.evaluation_splits(datasets)
    note = (lambda tag: (lambda r: progress(tag, r))) if progress else (lambda tag: None)

    poisoned = trainer.run(poison_cfg, datasets, on_record=note("poison")).state.params
    out = {"poisoned": evaluate_splits(poison_cfg.model_config(), poisoned, splits)}
    records = {}
    for tag, ov in (("dpo", BACKDOOR_DPO), ("dpo_lat", BACKDOOR_DPO_LAT)):
        cfg = config(ov)
        res = trainer.run(cfg, datasets, init=poisoned, on_record=note(tag))
        out[tag] = evaluate_splits(cfg.model_config(), res.state.params, splits)
        records[tag] = res.records
    return BackdoorResult(out["poisoned"], out["dpo"], out["dpo_lat"], records)


@dataclass
class UnlearnArm:
    forget_accuracy: float
    retain_accuracy: float
    relearned_accuracy: float
    gap_closed: float | None


@dataclass
class UnlearnSeedResult:
    seed: int
    base_forget_accuracy: float
    ga: UnlearnArm
    ga_lat: UnlearnArm


def run_unlearning_seed(seed: int) -> UnlearnSeedResult:
    """Train on both grammars, unlearn grammar A with GA and GA-LAT, then re-learn."""
    base_cfg = config(UNLEARN_BASE, task__seed=seed, train__seed=seed)
    datasets = trainer.build_datasets(base_cfg)
    mc = base_cfg.model_config()
    base = trainer.run(base_cfg, datasets).state.params
    base_acc = accuracy_and_perplexity(mc, base, datasets["forget"])[0]
    arms = {}
    for tag, ov in (("ga", UNLEARN_GA), ("ga_lat", UNLEARN_GA_LAT)):
        cfg = config(ov, task__seed=seed, train__seed=seed, relearn__seed=seed)
        params = trainer.run(cfg, datasets, init=base).state.params
        forget = accuracy_and_perplexity(mc, params, datasets["forget"])[0]
        retain = accuracy_and_perplexity(mc, params, datasets["retain"])[0]
        r = cfg.relearn
        report = trainer.relearn_attack(mc, params, datasets["forget"], r.n_examples, r.iters, r.eval_at, r.lr,
                                        seed=r.seed)
        arms[tag] = UnlearnArm(forget, retain, report.best, gap_closed(base_acc, forget, report.best))
    return UnlearnSeedResult(seed, base_acc, arms["ga"], arms["ga_lat"])


def run_unlearning(seeds: Iterable[int] = range(5)) -> list[UnlearnSeedResult]:
    return [run_unlearning_seed(s) for s in seeds]
