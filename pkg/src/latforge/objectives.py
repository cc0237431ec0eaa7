"""Attack and defense losses for refusal, preference, unlearning and RMU training.

Toward/away terms sum over completion tokens within a sequence and average
over the batch. Every ``log(1 - p)`` clamps ``p`` at ``1 - 1e-6``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .attack import PerturbationSet
from .autodiff import Tensor
from .model import (ModelConfig, TokenBatch, TokenSequence, collate, completion_mask, completion_targets,
                    forward, next_token_log_probs, residual_stream)

P_CLAMP = 1.0 - 1e-6
RMU_COEFF = 6.5
RMU_ALPHA = 1200.0


@dataclass(frozen=True)
class PreferenceTriple:
    prompt: tuple
    chosen: tuple
    rejected: tuple

    def __post_init__(self):
        for name in ("prompt", "chosen", "rejected"):
            object.__setattr__(self, name, tuple(int(t) for t in getattr(self, name)))
        if not self.prompt:
            raise ValueError("empty prompt")
        if not self.chosen or not self.rejected:
            raise ValueError("completions must be non-empty")

    def swapped(self) -> "PreferenceTriple":
        return PreferenceTriple(self.prompt, self.rejected, self.chosen)


@dataclass
class PreferenceBatch:
    """Chosen rows stacked above rejected rows in one padded batch.

    Both halves share prompts, so one ``(B, T, d)`` perturbation serves both.
    ``ref_logps`` optionally caches the frozen reference model's sequence
    log-probabilities in the same row order.
    """

    pair: TokenBatch
    size: int
    ref_logps: np.ndarray | None = None

    def prompt_mask(self) -> np.ndarray:
        return self.pair.prompt_mask()[: self.size]

    @property
    def width(self) -> int:
        return self.pair.shape[1]

    def swapped(self) -> "PreferenceBatch":
        order = np.concatenate([np.arange(self.size, 2 * self.size), np.arange(self.size)])
        pair = TokenBatch(self.pair.ids[order], self.pair.prompt_lens[order], self.pair.lengths[order])
        ref = None if self.ref_logps is None else self.ref_logps[order]
        return PreferenceBatch(pair, self.size, ref)

    def chosen_batch(self) -> TokenBatch:
        p = self.pair
        return TokenBatch(p.ids[: self.size], p.prompt_lens[: self.size], p.lengths[: self.size])


def collate_triples(triples: Sequence[PreferenceTriple]) -> PreferenceBatch:
    seqs = [TokenSequence.join(t.prompt, t.chosen) for t in triples]
    seqs += [TokenSequence.join(t.prompt, t.rejected) for t in triples]
    return PreferenceBatch(collate(seqs), len(triples))


def _stack_perturbations(pert: PerturbationSet | None, copies: int = 2) -> PerturbationSet | None:
    """Repeat a ``(B, T, d)`` perturbation for ``copies`` stacked halves (differentiably)."""
    if pert is None:
        return None
    deltas = {}
    for s, d in pert.deltas.items():
        d = ad.as_tensor(d)
        B, T, D = d.shape
        tiled = ad.add(np.zeros((copies, 1, 1, 1), dtype=d.data.dtype), ad.reshape(d, (1, B, T, D)))
        deltas[s] = ad.reshape(tiled, (copies * B, T, D))
    return PerturbationSet(deltas, np.tile(pert.mask, (copies, 1)))


def _split_halves(x: Tensor, size: int) -> tuple[Tensor, Tensor]:
    halves = ad.reshape(x, (2, size))
    first = (halves * np.array([[1.0], [0.0]], np.float32)).sum(axis=0)
    second = (halves * np.array([[0.0], [1.0]], np.float32)).sum(axis=0)
    return first, second


def log_sigmoid(z: Tensor) -> Tensor:
    """``log sigmoid(z)`` as the log-softmax of ``[z, 0]``; stable for any ``z``."""
    z = ad.as_tensor(z)
    pair = ad.reshape(z, z.shape + (1,)) * np.array([1.0, 0.0], np.float32)
    return ad.pick(ad.log_softmax(pair), np.zeros(z.shape, np.int64))


def token_stats(cfg: ModelConfig, params: Mapping, batch: TokenBatch, pert=None) -> tuple[Tensor, Tensor, np.ndarray]:
    """Per-position target log-probs, target probs and completion mask."""
    logits = forward(cfg, params, batch, pert)
    logp = next_token_log_probs(logits, batch)
    prob = ad.pick(ad.softmax(logits), completion_targets(batch))
    return logp, prob, completion_mask(batch)


def away_term(prob: Tensor, mask: np.ndarray) -> Tensor:
    """Per-sequence ``-sum_t log(1 - p_t)`` with ``p_t`` clamped."""
    return ad.neg((ad.log(1.0 - ad.minimum(prob, P_CLAMP)) * mask).sum(axis=-1))


def toward_term(logp: Tensor, mask: np.ndarray) -> Tensor:
    """Per-sequence ``-sum_t log p_t``."""
    return ad.neg((logp * mask).sum(axis=-1))


# ---------------------------------------------------------------- refusal training

def rt_attack_loss(cfg: ModelConfig, params: Mapping, batch: PreferenceBatch, pert=None) -> Tensor:
    """Toward the rejected completion, away from the chosen one."""
    logp, prob, mask = token_stats(cfg, params, batch.pair, _stack_perturbations(pert))
    toward = toward_term(logp, mask)
    away = away_term(prob, mask)
    away_chosen, _ = _split_halves(away, batch.size)
    _, toward_rejected = _split_halves(toward, batch.size)
    return (toward_rejected + away_chosen).mean()


def rt_defense_loss(cfg: ModelConfig, params: Mapping, batch: PreferenceBatch, pert=None) -> Tensor:
    """Toward the chosen completion, away from the rejected one."""
    return rt_attack_loss(cfg, params, batch.swapped(), pert)


# ---------------------------------------------------------------- benign terms

def benign_sft_loss(cfg: ModelConfig, params: Mapping, batch: TokenBatch) -> Tensor:
    logp, _, mask = _logp_only(cfg, params, batch)
    return toward_term(logp, mask).mean()


def _logp_only(cfg, params, batch, pert=None):
    logits = forward(cfg, params, batch, pert)
    return next_token_log_probs(logits, batch), logits, completion_mask(batch)


def categorical_kl(ref_logits: np.ndarray, logits: Tensor, mask: np.ndarray) -> Tensor:
    """Mean over masked positions of ``KL[softmax(ref) || softmax(logits)]``."""
    dtype = logits.data.dtype
    # same log-softmax code path for both sides, so identical logits cancel exactly
    ref_logp = ad.log_softmax(ad.Tensor(np.asarray(ref_logits, dtype=dtype))).data
    ref_p = np.exp(ref_logp)
    kl = (ad.sub(ref_logp, ad.log_softmax(logits)) * ref_p).sum(axis=-1)
    return (kl * mask).sum() * np.asarray(1.0 / max(mask.sum(), 1.0), dtype=dtype)


def benign_kl_loss(cfg: ModelConfig, params: Mapping, ref_params: Mapping, batch: TokenBatch) -> Tensor:
    ref_logits = forward(cfg, _frozen(ref_params), batch).data
    logits = forward(cfg, params, batch)
    return categorical_kl(ref_logits, logits, completion_mask(batch))


def _frozen(params: Mapping) -> dict:
    return {k: (v.data if isinstance(v, Tensor) else v) for k, v in params.items()}


# ---------------------------------------------------------------- DPO

def pair_log_probs(cfg: ModelConfig, params: Mapping, batch: PreferenceBatch, pert=None) -> Tensor:
    """Sequence log-probs for all ``2B`` rows (chosen rows first)."""
    logp, _, mask = _logp_only(cfg, params, batch.pair, _stack_perturbations(pert))
    return (logp * mask).sum(axis=-1)


def with_reference(cfg: ModelConfig, ref_params: Mapping, batch: PreferenceBatch) -> PreferenceBatch:
    ref = pair_log_probs(cfg, _frozen(ref_params), batch).data
    return PreferenceBatch(batch.pair, batch.size, ref)


def dpo_from_logps(policy: Tensor, reference: np.ndarray, size: int, beta: float) -> Tensor:
    """``-log sigmoid(beta * (logratio(winner) - logratio(loser)))`` averaged; winners are the first half."""
    ratio = ad.sub(policy, np.asarray(reference, dtype=policy.data.dtype))
    win, lose = _split_halves(ratio, size)
    return ad.neg(log_sigmoid((win - lose) * np.asarray(beta, dtype=policy.data.dtype))).mean()


def dpo_loss(cfg: ModelConfig, params: Mapping, ref_params: Mapping | None, batch: PreferenceBatch,
             beta: float = 0.1, pert=None, flip: bool = False) -> Tensor:
    """DPO with the perturbation applied to the policy forward only.

    ``flip=True`` prefers the rejected completion (the attacker's objective).
    """
    if beta <= 0:
        raise ValueError("beta must be positive")
    if batch.ref_logps is None:
        if ref_params is None:
            raise ValueError("need reference parameters or cached reference log-probs")
        batch = with_reference(cfg, ref_params, batch)
    if flip:
        batch = batch.swapped()
    policy = pair_log_probs(cfg, params, batch, pert)
    return dpo_from_logps(policy, batch.ref_logps, batch.size, beta)


# ---------------------------------------------------------------- unlearning

def unlearn_attack_loss(cfg: ModelConfig, params: Mapping, batch: TokenBatch, pert=None) -> Tensor:
    """Cross-entropy toward the forget text, summed over tokens."""
    logp, _, mask = _logp_only(cfg, params, batch, pert)
    return toward_term(logp, mask).mean()


def unlearn_forget_loss(cfg: ModelConfig, params: Mapping, batch: TokenBatch, pert=None) -> Tensor:
    _, prob, mask = token_stats(cfg, params, batch, pert)
    return away_term(prob, mask).mean()


def retain_loss(cfg: ModelConfig, params: Mapping, batch: TokenBatch) -> Tensor:
    logp, _, mask = _logp_only(cfg, params, batch)
    return toward_term(logp, mask).mean()


# ---------------------------------------------------------------- RMU

@dataclass(frozen=True)
class RmuSpec:
    direction: np.ndarray
    layer: int
    coeff: float = RMU_COEFF
    alpha: float = RMU_ALPHA
    trainable_layers: tuple = field(default=())

    def __post_init__(self):
        u = np.asarray(self.direction, dtype=np.float32)
        if not np.isclose(np.linalg.norm(u), 1.0, atol=1e-5):
            raise ValueError("steering direction must have unit norm")
        if self.coeff <= 0 or self.alpha < 0:
            raise ValueError("need coeff > 0 and alpha >= 0")
        object.__setattr__(self, "direction", u)
        if not self.trainable_layers:
            object.__setattr__(self, "trainable_layers", tuple(l for l in (self.layer - 2, self.layer - 1, self.layer) if l >= 0))

    @classmethod
    def sample(cls, d_model: int, layer: int, rng: np.random.Generator, **kw) -> "RmuSpec":
        u = rng.random(d_model)
        return cls(direction=(u / np.linalg.norm(u)).astype(np.float32), layer=layer, **kw)

    def trainable(self, name: str) -> bool:
        return any(name.startswith(f"layers.{l}.mlp.") for l in self.trainable_layers)


def _token_mask(batch: TokenBatch) -> np.ndarray:
    pos = np.arange(batch.shape[1])
    return (pos[None, :] < batch.lengths[:, None]).astype(np.float32)


def rmu_terms(forget_acts: Tensor, forget_mask: np.ndarray, target: np.ndarray,
              retain_acts: Tensor | None, frozen_retain_acts: np.ndarray | None,
              retain_mask: np.ndarray | None, alpha: float) -> Tensor:
    """Forget MSE to ``target`` plus ``alpha`` times retain activation matching.

    Each term sums squared distances over tokens and divides by the sequence
    length, then averages over the batch.
    """
    dtype = forget_acts.data.dtype
    diff = ad.sub(forget_acts, np.asarray(target, dtype=dtype))
    per_tok = (diff * diff).sum(axis=-1) * forget_mask
    loss = (per_tok.sum(axis=-1) * (1.0 / forget_mask.sum(axis=-1)).astype(dtype)).mean()
    if retain_acts is not None and alpha:
        rdiff = ad.sub(retain_acts, np.asarray(frozen_retain_acts, dtype=dtype))
        rtok = (rdiff * rdiff).sum(axis=-1) * retain_mask
        rterm = (rtok.sum(axis=-1) * (1.0 / retain_mask.sum(axis=-1)).astype(dtype)).mean()
        loss = loss + rterm * np.asarray(alpha, dtype=dtype)
    return loss


def rmu_defense_loss(cfg: ModelConfig, params: Mapping, frozen: Mapping, forget: TokenBatch,
                     retain: TokenBatch, spec: RmuSpec, pert=None) -> Tensor:
    """RMU objective with the adversary's perturbation present on the forget pass."""
    if pert is not None and any(s > spec.layer for s in pert.deltas):
        raise ValueError(f"attack sites {sorted(pert.deltas)} must not lie after RMU layer {spec.layer}")
    forget_acts = residual_stream(cfg, params, forget, pert, upto=spec.layer)
    retain_acts = residual_stream(cfg, params, retain, upto=spec.layer)
    frozen_acts = residual_stream(cfg, _frozen(frozen), retain, upto=spec.layer).data
    return rmu_terms(forget_acts, _token_mask(forget), spec.coeff * spec.direction,
                     retain_acts, frozen_acts, _token_mask(retain), spec.alpha)
