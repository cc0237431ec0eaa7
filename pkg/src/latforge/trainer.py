"""Latent adversarial training loop, schedules, NaN guard and the re-learning attack."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from . import objectives as obj
from . import taskgen
from .attack import AttackBudget, AttackTrace, PerturbationSet, Whitener, run_pgd
from .config import RunConfig
from .evalkit import MetricsRecord, accuracy_and_perplexity, evaluate_splits
from .model import ModelConfig, TokenSequence, collate, hook_sites_for, init_params, site_inputs

log = logging.getLogger(__name__)


class NanBudgetExceeded(RuntimeError):
    pass


@dataclass
class TrainState:
    step: int
    params: dict
    momentum: dict
    nan_skips: int = 0
    updates: int = 0

    @classmethod
    def fresh(cls, params: Mapping) -> "TrainState":
        params = {k: np.array(v, dtype=np.float32) for k, v in params.items()}
        return cls(0, params, {k: np.zeros_like(v) for k, v in params.items()})

    def copy(self) -> "TrainState":
        return TrainState(self.step, {k: v.copy() for k, v in self.params.items()},
                          {k: v.copy() for k, v in self.momentum.items()}, self.nan_skips, self.updates)


# ---------------------------------------------------------------- data

def _key(*parts) -> int:
    return int.from_bytes(hashlib.sha256(repr(parts).encode()).digest()[:8], "little")


class Sampler:
    """Deterministic epoch-permuted batches; batch ``k`` is a pure function of ``k``."""

    def __init__(self, items: Sequence, batch_size: int, seed: int, name: str):
        if not items:
            raise ValueError(f"no data for sampler {name!r}")
        self.items = list(items)
        self.batch_size = batch_size
        self.seed = seed
        self.name = name
        self._perms: dict[int, np.ndarray] = {}

    def _perm(self, epoch: int) -> np.ndarray:
        if epoch not in self._perms:
            rng = np.random.default_rng(_key(self.seed, self.name, epoch))
            self._perms = {epoch: rng.permutation(len(self.items))}
        return self._perms[epoch]

    def indices(self, k: int) -> list[int]:
        n = len(self.items)
        out = []
        for pos in range(k * self.batch_size, (k + 1) * self.batch_size):
            out.append(int(self._perm(pos // n)[pos % n]))
        return out

    def batch(self, k: int) -> list:
        return [self.items[i] for i in self.indices(k)]


def build_datasets(config: RunConfig) -> dict:
    t = config.task
    sizes = {"pairs": t.pairs, "benign": t.benign, "poisoned": t.poisoned, "eval": t.eval,
             "forget": t.forget, "retain": t.retain}
    return taskgen.generate(t.setting, t.seed, sizes, t.trigger, t.rho)


def _with_proxy(triples, trigger):
    """Insert the proxy trigger after BOS in every prompt."""
    proxy = taskgen.proxy_trigger(trigger)
    return [obj.PreferenceTriple((t.prompt[0], *proxy, *t.prompt[1:]), t.chosen, t.rejected) for t in triples]


# ---------------------------------------------------------------- objectives

class Objective:
    """Adapter from a loss family to the trainer: data, losses and trainable set."""

    adversarial = True

    def __init__(self, config: RunConfig, datasets: Mapping, reference: Mapping):
        self.config = config
        self.cfg = config.model_config()
        self.datasets = datasets
        self.reference = reference
        bs, seed = config.train.batch_size, config.train.seed
        self.adv_sampler = Sampler(self.adversarial_items(), bs, seed, "adversarial")
        benign = self.benign_items()
        self.benign_sampler = Sampler(benign, bs, seed, "benign") if benign else None

    # data -------------------------------------------------------------
    def adversarial_items(self) -> list:
        raise NotImplementedError

    def benign_items(self) -> list:
        return list(self.datasets["benign"].items) if "benign" in self.datasets else []

    def adversarial_batch(self, k: int):
        return collate(self.adv_sampler.batch(k))

    def benign_batch(self, k: int):
        return collate(self.benign_sampler.batch(k))

    def prompt_mask(self, batch) -> np.ndarray:
        return batch.prompt_mask()

    # losses -----------------------------------------------------------
    def attack_loss(self, params, batch, pert):
        raise NotImplementedError

    def defense_loss(self, params, batch, pert):
        raise NotImplementedError

    def benign_loss(self, params, batch):
        return obj.benign_sft_loss(self.cfg, params, batch)

    def kl_loss(self, params, batch):
        return obj.benign_kl_loss(self.cfg, params, self.reference, batch)

    def trainable(self, name: str) -> bool:
        return True


class RTObjective(Objective):
    def adversarial_items(self):
        items = list(self.datasets["preference-pairs"].items)
        if self.config.task.proxy_trigger:
            items = _with_proxy(items, self.config.task.trigger)
        return items

    def adversarial_batch(self, k):
        return obj.collate_triples(self.adv_sampler.batch(k))

    def prompt_mask(self, batch):
        return batch.prompt_mask()

    def attack_loss(self, params, batch, pert):
        return obj.rt_attack_loss(self.cfg, params, batch, pert)

    def defense_loss(self, params, batch, pert):
        return obj.rt_defense_loss(self.cfg, params, batch, pert)


class DPOObjective(RTObjective):
    """DPO on the harmful split; the benign interleave is DPO on helpful pairs."""

    def benign_items(self):
        if "helpful-pairs" in self.datasets:
            return list(self.datasets["helpful-pairs"].items)
        return super().benign_items()

    def adversarial_batch(self, k):
        return obj.with_reference(self.cfg, self.reference, super().adversarial_batch(k))

    def benign_batch(self, k):
        items = self.benign_sampler.batch(k)
        if isinstance(items[0], obj.PreferenceTriple):
            pb = obj.collate_triples(items)
            if self.config.benign.mode == "kl-penalty":
                return pb.chosen_batch()
            return obj.with_reference(self.cfg, self.reference, pb)
        return collate(items)

    def attack_loss(self, params, batch, pert):
        return obj.dpo_loss(self.cfg, params, None, batch, self.config.loss.beta, pert, flip=True)

    def defense_loss(self, params, batch, pert):
        return obj.dpo_loss(self.cfg, params, None, batch, self.config.loss.beta, pert)

    def benign_loss(self, params, batch):
        if isinstance(batch, obj.PreferenceBatch):
            return obj.dpo_loss(self.cfg, params, None, batch, self.config.loss.beta)
        return super().benign_loss(params, batch)


class UnlearnObjective(Objective):
    """Gradient ascent via ``log(1 - p)`` on forget text plus a retain toward loss."""

    def __init__(self, config, datasets, reference):
        super().__init__(config, datasets, reference)
        self.retain_sampler = Sampler(list(datasets["retain"].items), config.train.batch_size,
                                      config.train.seed, "retain")

    def adversarial_items(self):
        return list(self.datasets["forget"].items)

    def benign_items(self):
        if "benign" in self.datasets:
            return list(self.datasets["benign"].items)
        return list(self.datasets["retain"].items)

    def adversarial_batch(self, k):
        return collate(self.adv_sampler.batch(k)), collate(self.retain_sampler.batch(k))

    def prompt_mask(self, batch):
        return batch[0].prompt_mask()

    def attack_loss(self, params, batch, pert):
        return obj.unlearn_attack_loss(self.cfg, params, batch[0], pert)

    def defense_loss(self, params, batch, pert):
        forget, retain = batch
        return obj.unlearn_forget_loss(self.cfg, params, forget, pert) + obj.retain_loss(self.cfg, params, retain)


class RMUObjective(UnlearnObjective):
    def __init__(self, config, datasets, reference):
        super().__init__(config, datasets, reference)
        r = config.rmu
        self.spec = obj.RmuSpec.sample(self.cfg.d_model, r.layer, np.random.default_rng(r.seed),
                                       coeff=r.coeff, alpha=r.alpha)

    def defense_loss(self, params, batch, pert):
        forget, retain = batch
        return obj.rmu_defense_loss(self.cfg, params, self.reference, forget, retain, self.spec, pert)

    def trainable(self, name):
        return self.spec.trainable(name)


class SFTObjective(Objective):
    adversarial = False

    def adversarial_items(self):
        roles = self.config.loss.train_roles or tuple(r for r in ("poisoned-train", "benign", "forget", "retain")
                                                     if r in self.datasets)
        items = []
        for r in roles:
            split = self.datasets[r]
            items += [taskgen_item_as_sequence(it) for it in split.items]
        return items

    def benign_items(self):
        return []

    def defense_loss(self, params, batch, pert):
        return obj.benign_sft_loss(self.cfg, params, batch)


def taskgen_item_as_sequence(item):
    if isinstance(item, obj.PreferenceTriple):
        return TokenSequence.join(item.prompt, item.chosen)
    return item


OBJECTIVES = {"rt": RTObjective, "dpo": DPOObjective, "unlearn-ga": UnlearnObjective,
              "rmu": RMUObjective, "sft": SFTObjective}


def make_objective(config: RunConfig, datasets: Mapping, reference: Mapping) -> Objective:
    try:
        cls = OBJECTIVES[config.loss.kind]
    except KeyError:
        raise ValueError(f"unknown loss kind {config.loss.kind!r}") from None
    return cls(config, datasets, reference)


# ---------------------------------------------------------------- attack plumbing

def attack_sites(config: RunConfig) -> list[int]:
    cfg = config.model_config()
    a = config.attack
    if a.site_list:
        sites = sorted(set(a.site_list))
        if not all(0 <= s < cfg.n_layers for s in sites):
            raise ValueError(f"attack sites {sites} outside model depth {cfg.n_layers}")
    else:
        sites = hook_sites_for(a.profile, cfg.n_layers, a.sites)
    if config.loss.kind == "rmu":
        sites = [s for s in sites if s <= config.rmu.layer] or [config.rmu.layer]
    return sites


def attack_budget(config: RunConfig) -> AttackBudget:
    a = config.attack
    return AttackBudget(epsilon=a.epsilon, steps=a.steps, step_size=a.step_size or None, mode=a.mode,
                        init=a.init, norm_scope=a.norm_scope)


def fit_site_whiteners(config: RunConfig, objective: Objective, params: Mapping, sites) -> dict:
    """One whitener per site from prompt-position activations of a few batches."""
    cfg = objective.cfg
    samples = {s: [] for s in sites}
    for k in range(config.attack.whiten_samples):
        batch = objective.adversarial_batch(k)
        tb = batch.pair if isinstance(batch, obj.PreferenceBatch) else (batch[0] if isinstance(batch, tuple) else batch)
        acts = site_inputs(cfg, params, tb, sites)
        mask = tb.prompt_mask().astype(bool)
        for s in sites:
            samples[s].append(acts[s][mask])
    return {s: Whitener(ridge=config.attack.whiten_ridge).fit(np.concatenate(v)) for s, v in samples.items()}


# ---------------------------------------------------------------- steps

@dataclass
class StepInfo:
    kind: str
    loss: float
    attack_loss: float | None = None
    skipped: bool = False
    extra: dict = field(default_factory=dict)


def _finite(grads: Mapping) -> bool:
    return all(np.all(np.isfinite(g)) for g in grads.values())


def apply_update(state: TrainState, grads: Mapping, lr: float, momentum: float, clip: float = 0.0) -> TrainState:
    """Momentum SGD: ``v <- mu v + g``, ``theta <- theta - lr v``."""
    if clip > 0:
        total = np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
        if total > clip:
            scale = np.float32(clip / total)
            grads = {k: g * scale for k, g in grads.items()}
    params, mom = dict(state.params), dict(state.momentum)
    lr32, mu32 = np.float32(lr), np.float32(momentum)
    for k, g in grads.items():
        v = mu32 * mom[k] + g.astype(np.float32)
        mom[k] = v
        params[k] = params[k] - lr32 * v
    return TrainState(state.step, params, mom, state.nan_skips, state.updates + 1)


def _grad_step(state: TrainState, loss_fn: Callable, objective: Objective, config: RunConfig, kind: str):
    trainable = {k: v for k, v in state.params.items() if objective.trainable(k)}
    frozen = {k: v for k, v in state.params.items() if k not in trainable}

    def closure(**P):
        return loss_fn({**frozen, **P})

    value, grads = ad.value_and_grad(closure, trainable)
    if not (np.isfinite(value) and _finite(grads)):
        skipped = state.copy()
        skipped.nan_skips += 1
        log.warning("non-finite %s gradient at step %d; update skipped", kind, state.step)
        return skipped, StepInfo(kind, value, skipped=True)
    o = config.optim
    return apply_update(state, grads, o.lr, o.momentum, o.grad_clip), StepInfo(kind, value)


def lat_train_step(state: TrainState, batch, objective: Objective, config: RunConfig,
                   benign_batch=None, whiteners=None) -> tuple[TrainState, StepInfo]:
    """Inner attack with frozen parameters, then one update on the defense objective.

    In kl-penalty mode ``benign_batch`` contributes ``weight * KL`` to the same
    update. The perturbation enters the defense pass as a constant.
    """
    pert = None
    attack_value = None
    if objective.adversarial and config.attack.enabled:
        sites = attack_sites(config)
        frozen = state.params
        trace = AttackTrace()
        rng = np.random.default_rng(_key(config.train.seed, "attack", state.step))
        pert = run_pgd(lambda p: objective.attack_loss(frozen, batch, p), sites, objective.prompt_mask(batch),
                       objective.cfg.d_model, attack_budget(config), rng, whiteners, trace).detached()
        if trace.losses:
            attack_value = trace.losses[-1]
    kl_weight = config.benign.weight if (config.benign.mode == "kl-penalty" and benign_batch is not None) else 0.0

    def loss_fn(P):
        loss = objective.defense_loss(P, batch, pert)
        if kl_weight:
            loss = loss + objective.kl_loss(P, benign_batch) * np.float32(kl_weight)
        return loss

    new_state, info = _grad_step(state, loss_fn, objective, config, "adversarial")
    info.attack_loss = attack_value
    return new_state, info


def benign_step(state: TrainState, batch, objective: Objective, config: RunConfig) -> tuple[TrainState, StepInfo]:
    """One unperturbed update on the benign objective."""
    return _grad_step(state, lambda P: objective.benign_loss(P, batch), objective, config, "benign")


def schedule(config: RunConfig, step: int) -> list[str]:
    """Update kinds executed for one training step."""
    kinds = ["adversarial"]
    if config.benign.mode == "sft-interleave" and config.loss.kind != "sft":
        kinds += ["benign"] * config.benign.ratio
    return kinds


# ---------------------------------------------------------------- run

def reference_params(config: RunConfig, init: Mapping | None = None) -> dict:
    if init is not None:
        return {k: np.array(v, dtype=np.float32) for k, v in init.items()}
    return init_params(config.model_config(), config.model.init_seed)


def evaluation_splits(datasets: Mapping) -> dict:
    return {r: datasets[r] for r in ("trigger-eval", "clean-eval", "forget", "retain") if r in datasets}


@dataclass
class RunResult:
    state: TrainState
    records: list
    steps: list = field(default_factory=list)


def run(config: RunConfig, datasets: Mapping | None = None, init: Mapping | None = None,
        state: TrainState | None = None, on_record: Callable | None = None,
        on_checkpoint: Callable | None = None, keep_steps: bool = False) -> RunResult:
    """Execute the configured schedule from ``state`` (or fresh) up to ``train.steps``.

    ``init`` supplies starting parameters; they also serve as the frozen
    reference. Records are emitted every ``eval_every`` steps and at the end.
    """
    datasets = build_datasets(config) if datasets is None else datasets
    reference = reference_params(config, init)
    objective = make_objective(config, datasets, reference)
    state = TrainState.fresh(reference) if state is None else state
    eval_splits = evaluation_splits(datasets)
    t = config.train
    nan_limit = t.max_nan_frac * t.steps
    whiteners = None
    if config.attack.whiten and objective.adversarial and config.attack.enabled:
        whiteners = fit_site_whiteners(config, objective, reference, attack_sites(config))

    records, infos = [], []
    acc = {"attack": [], "adversarial": [], "benign": []}
    benign_k = state.step * config.benign.ratio

    def emit():
        r = MetricsRecord(step=state.step, nan_skips=state.nan_skips,
                          loss_attack=_mean(acc["attack"]), loss_defense=_mean(acc["adversarial"]),
                          loss_benign=_mean(acc["benign"]), **evaluate_splits(objective.cfg, state.params, eval_splits))
        for v in acc.values():
            v.clear()
        records.append(r)
        if on_record is not None:
            on_record(r)

    while state.step < t.steps:
        k = state.step
        kl_batch = None
        if config.benign.mode == "kl-penalty" and objective.benign_sampler is not None:
            kl_batch = objective.benign_batch(k)
            if isinstance(kl_batch, obj.PreferenceBatch):
                kl_batch = kl_batch.chosen_batch()
        for kind in schedule(config, k):
            if kind == "adversarial":
                state, info = lat_train_step(state, objective.adversarial_batch(k), objective, config,
                                             kl_batch, whiteners)
                if info.attack_loss is not None:
                    acc["attack"].append(info.attack_loss)
            else:
                state, info = benign_step(state, objective.benign_batch(benign_k), objective, config)
                benign_k += 1
            if not info.skipped:
                acc[kind].append(info.loss)
            if keep_steps:
                infos.append(info)
        state.step += 1
        if state.nan_skips > nan_limit:
            raise NanBudgetExceeded(f"{state.nan_skips} skipped updates exceed {t.max_nan_frac:.0%} of {t.steps} steps")
        if t.eval_every and state.step % t.eval_every == 0:
            emit()
        elif state.step == t.steps:
            emit()
        if on_checkpoint is not None and t.checkpoint_every and state.step % t.checkpoint_every == 0:
            on_checkpoint(state)
    if on_checkpoint is not None:
        on_checkpoint(state)
    return RunResult(state, records, infos)


def _mean(xs):
    return float(np.mean(xs)) if xs else None


# ---------------------------------------------------------------- re-learning attack

@dataclass
class RelearnReport:
    accuracies: dict
    best: float
    indices: list

    @property
    def unattacked(self) -> float:
        return self.accuracies[0]


def relearn_attack(cfg: ModelConfig, params: Mapping, forget: taskgen.DatasetSplit, n_examples: int = 2,
                   iters: int = 20, eval_at: Sequence[int] = (5, 10, 20), lr: float = 0.01,
                   momentum: float = 0.9, seed: int = 0,
                   eval_split: taskgen.DatasetSplit | None = None) -> RelearnReport:
    """Fine-tune repeatedly on one fixed batch of forget examples.

    Returns forget accuracy before the attack (key 0) and at each checkpoint
    reached; ``best`` is the maximum over the checkpoints (the unattacked
    accuracy when no checkpoint is reached).
    """
    if len(forget) < n_examples:
        raise ValueError(f"forget split has {len(forget)} < {n_examples} examples")
    eval_split = forget if eval_split is None else eval_split
    rng = np.random.default_rng(seed)
    idx = sorted(int(i) for i in rng.choice(len(forget), size=n_examples, replace=False))
    batch = collate([forget.items[i] for i in idx])
    state = TrainState.fresh(params)
    accs = {0: accuracy_and_perplexity(cfg, state.params, eval_split)[0]}
    checkpoints = sorted(c for c in set(eval_at) if 0 < c <= iters)
    for it in range(1, iters + 1):
        _, grads = ad.value_and_grad(lambda **P: obj.benign_sft_loss(cfg, P, batch), state.params)
        if _finite(grads):
            state = apply_update(state, grads, lr, momentum)
        if it in checkpoints:
            accs[it] = accuracy_and_perplexity(cfg, state.params, eval_split)[0]
    best = max((accs[c] for c in checkpoints), default=accs[0])
    return RelearnReport(accs, best, idx)
