"""Small pre-norm decoder-only transformer with residual-stream hook sites.

A hook site ``l`` adds a perturbation to the residual stream at the input of
layer ``l``. All configured sites are applied within a single forward pass.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

NEG_INF = -1e9


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    d_model: int = 64
    n_heads: int = 4
    vocab_size: int = 64
    max_context: int = 64
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if min(self.n_layers, self.d_model, self.vocab_size, self.max_context) <= 0:
            raise ValueError("model dimensions must be positive")

    @property
    def d_mlp(self) -> int:
        return self.mlp_ratio * self.d_model

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple
    prompt_len: int

    def __post_init__(self):
        object.__setattr__(self, "ids", tuple(int(i) for i in self.ids))
        if not 0 < self.prompt_len <= len(self.ids):
            raise ValueError(f"prompt_len {self.prompt_len} out of range for length {len(self.ids)}")

    @classmethod
    def join(cls, prompt: Sequence[int], completion: Sequence[int]) -> "TokenSequence":
        return cls(tuple(prompt) + tuple(completion), len(prompt))

    @property
    def prompt(self) -> tuple:
        return self.ids[: self.prompt_len]

    @property
    def completion(self) -> tuple:
        return self.ids[self.prompt_len:]

    def __len__(self):
        return len(self.ids)


@dataclass
class TokenBatch:
    """Right-padded batch. Padding never leaks backwards under causal attention."""

    ids: np.ndarray  # (B, T) int64
    prompt_lens: np.ndarray  # (B,)
    lengths: np.ndarray  # (B,)

    @property
    def shape(self) -> tuple:
        return self.ids.shape

    def __len__(self):
        return self.ids.shape[0]

    def prompt_mask(self) -> np.ndarray:
        pos = np.arange(self.ids.shape[1])
        return (pos[None, :] < self.prompt_lens[:, None]).astype(np.float32)

    def target_mask(self) -> np.ndarray:
        """Mask over logit positions ``t`` whose next token ``t+1`` is a completion token."""
        pos = np.arange(self.ids.shape[1] - 1)
        lo = self.prompt_lens[:, None] - 1
        hi = self.lengths[:, None] - 1
        return ((pos[None, :] >= lo) & (pos[None, :] < hi)).astype(np.float32)

    def targets(self) -> np.ndarray:
        return self.ids[:, 1:]


def collate(seqs: Sequence[TokenSequence], pad_id: int = 0) -> TokenBatch:
    if not seqs:
        raise ValueError("empty batch")
    width = max(len(s) for s in seqs)
    ids = np.full((len(seqs), width), pad_id, dtype=np.int64)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s.ids
    return TokenBatch(
        ids=ids,
        prompt_lens=np.array([s.prompt_len for s in seqs], dtype=np.int64),
        lengths=np.array([len(s) for s in seqs], dtype=np.int64),
    )


def param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    d, V = cfg.d_model, cfg.vocab_size
    shapes = {"tok_emb": (V, d), "pos_emb": (cfg.max_context, d)}
    for l in range(cfg.n_layers):
        p = f"layers.{l}."
        shapes.update({
            p + "ln1.g": (d,), p + "ln1.b": (d,),
            p + "attn.wq": (d, d), p + "attn.wk": (d, d), p + "attn.wv": (d, d), p + "attn.wo": (d, d),
            p + "ln2.g": (d,), p + "ln2.b": (d,),
            p + "mlp.w1": (d, cfg.d_mlp), p + "mlp.b1": (cfg.d_mlp,),
            p + "mlp.w2": (cfg.d_mlp, d), p + "mlp.b2": (d,),
        })
    shapes.update({"ln_f.g": (d,), "ln_f.b": (d,), "unembed": (d, V)})
    return shapes


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".g"):
            params[name] = np.ones(shape, np.float32)
        elif name.endswith(".b") or name.endswith("b1") or name.endswith("b2"):
            params[name] = np.zeros(shape, np.float32)
        else:
            fan_in = shape[0] if name not in ("tok_emb", "pos_emb") else shape[1]
            scale = 1.0 / np.sqrt(fan_in)
            if name.endswith("wo") or name.endswith("w2"):
                scale /= np.sqrt(2 * cfg.n_layers)
            params[name] = (rng.standard_normal(shape) * scale).astype(np.float32)
    return params


def check_params(cfg: ModelConfig, params: Mapping) -> None:
    expected = param_shapes(cfg)
    if set(expected) != set(params):
        raise ValueError(f"parameter names differ: {sorted(set(expected) ^ set(params))}")
    for name, shape in expected.items():
        value = params[name]
        arr = value.data if isinstance(value, Tensor) else np.asarray(value)
        if arr.shape != shape:
            raise ValueError(f"parameter {name} has shape {arr.shape}, expected {shape}")


def _affine_ln(x: Tensor, g, b) -> Tensor:
    return ad.layernorm(x) * g + b


def _gelu(x: Tensor) -> Tensor:
    return x * ad.sigmoid(x * 1.702)


def _attention(cfg: ModelConfig, P: Mapping, prefix: str, x: Tensor) -> Tensor:
    B, T, d = x.shape
    H = cfg.n_heads
    dh = d // H

    def heads(w):
        return (x @ P[prefix + w]).reshape(B, T, H, dh).transpose(0, 2, 1, 3)

    q, k, v = heads("attn.wq"), heads("attn.wk"), heads("attn.wv")
    scores = (q @ k.transpose(0, 1, 3, 2)) * float(1.0 / np.sqrt(dh))
    causal = np.triu(np.full((T, T), NEG_INF, dtype=np.float32), k=1)
    att = ad.softmax(scores + causal)
    out = (att @ v).transpose(0, 2, 1, 3).reshape(B, T, d)
    return out @ P[prefix + "attn.wo"]


def _layer(cfg: ModelConfig, P: Mapping, l: int, h: Tensor) -> Tensor:
    p = f"layers.{l}."
    h = h + _attention(cfg, P, p, _affine_ln(h, P[p + "ln1.g"], P[p + "ln1.b"]))
    m = _affine_ln(h, P[p + "ln2.g"], P[p + "ln2.b"])
    m = _gelu(m @ P[p + "mlp.w1"] + P[p + "mlp.b1"]) @ P[p + "mlp.w2"] + P[p + "mlp.b2"]
    return h + m


def check_perturbations(cfg: ModelConfig, batch: TokenBatch, perturbations) -> None:
    if perturbations is None:
        return
    mask = np.asarray(perturbations.mask)
    if mask.shape != batch.shape:
        raise ValueError(f"perturbation mask shape {mask.shape} != batch shape {batch.shape}")
    if np.any(mask * (1.0 - batch.prompt_mask()) != 0):
        raise ValueError("perturbation mask covers completion positions; only prompt positions may be perturbed")
    for site, delta in perturbations.deltas.items():
        if not 0 <= site < cfg.n_layers:
            raise ValueError(f"hook site {site} outside [0, {cfg.n_layers})")
        shape = delta.shape
        if tuple(shape) != batch.shape + (cfg.d_model,):
            raise ValueError(f"perturbation at site {site} has shape {shape}, expected {batch.shape + (cfg.d_model,)}")


def residual_stream(cfg: ModelConfig, params: Mapping, batch: TokenBatch, perturbations=None,
                    upto: int | None = None) -> Tensor:
    """Residual stream after layer ``upto`` (default: the last layer)."""
    check_perturbations(cfg, batch, perturbations)
    B, T = batch.shape
    if T > cfg.max_context:
        raise ValueError(f"sequence length {T} exceeds max_context {cfg.max_context}")
    last = cfg.n_layers - 1 if upto is None else upto
    P = params
    h = ad.gather(P["tok_emb"], batch.ids) + ad.gather(P["pos_emb"], np.arange(T))
    mask = None
    if perturbations is not None:
        mask = np.asarray(perturbations.mask, dtype=np.float32)[:, :, None]
    for l in range(last + 1):
        if perturbations is not None and l in perturbations.deltas:
            h = h + perturbations.deltas[l] * mask
        h = _layer(cfg, P, l, h)
    return h


def site_inputs(cfg: ModelConfig, params: Mapping, batch: TokenBatch, sites) -> dict[int, np.ndarray]:
    """Residual stream entering each hook site, ``{site: (B, T, d)}``."""
    T = batch.shape[1]
    h = ad.gather(params["tok_emb"], batch.ids) + ad.gather(params["pos_emb"], np.arange(T))
    out = {}
    for l in range(max(sites) + 1):
        if l in sites:
            out[l] = np.array(h.data)
        h = _layer(cfg, params, l, h)
    return out


def forward(cfg: ModelConfig, params: Mapping, batch: TokenBatch, perturbations=None) -> Tensor:
    """Logits ``(B, T, vocab)`` with perturbations added at their hook sites."""
    h = residual_stream(cfg, params, batch, perturbations)
    h = _affine_ln(h, params["ln_f.g"], params["ln_f.b"])
    return h @ params["unembed"]


def token_log_probs(cfg: ModelConfig, params: Mapping, batch: TokenBatch, perturbations=None) -> Tensor:
    """Log-probability of each next token, shape ``(B, T)``.

    Position ``t`` scores token ``t+1``; the last column scores a dummy target
    and must be masked out by the caller (``completion_mask`` does this).
    """
    return next_token_log_probs(forward(cfg, params, batch, perturbations), batch)


def next_token_log_probs(logits: Tensor, batch: TokenBatch) -> Tensor:
    B, T, V = logits.shape
    targets = np.concatenate([batch.ids[:, 1:], np.zeros((B, 1), np.int64)], axis=1)
    ce = ad.cross_entropy(logits, targets)
    return ad.neg(ce)


def completion_mask(batch: TokenBatch) -> np.ndarray:
    """``(B, T)`` mask of logit positions predicting a completion token."""
    return np.concatenate([batch.target_mask(), np.zeros((len(batch), 1), np.float32)], axis=1)


def completion_targets(batch: TokenBatch) -> np.ndarray:
    return np.concatenate([batch.ids[:, 1:], np.zeros((len(batch), 1), np.int64)], axis=1)


def sequence_log_prob(cfg: ModelConfig, params: Mapping, batch: TokenBatch, perturbations=None) -> Tensor:
    """Per-sequence sum of completion-token log-probabilities, shape ``(B,)``."""
    if np.any(batch.lengths <= batch.prompt_lens):
        raise ValueError("empty completion")
    lp = token_log_probs(cfg, params, batch, perturbations)
    return (lp * completion_mask(batch)).sum(axis=1)


def greedy_decode(cfg: ModelConfig, params: Mapping, prompts: Sequence[Sequence[int]], max_new: int,
                  stop_token: int | None = None) -> list[tuple]:
    """Argmax decoding; ``np.argmax`` already breaks ties toward the lowest id."""
    out: list = [None] * len(prompts)
    by_len: dict[int, list[int]] = {}
    for i, p in enumerate(prompts):
        if len(p) + max_new > cfg.max_context:
            raise ValueError(f"prompt length {len(p)} + {max_new} exceeds max_context {cfg.max_context}")
        by_len.setdefault(len(p), []).append(i)
    for n, idx in by_len.items():
        ids = np.array([list(prompts[i]) for i in idx], dtype=np.int64).reshape(len(idx), n)
        done = np.zeros(len(idx), dtype=bool)
        for _ in range(max_new):
            batch = TokenBatch(ids, np.full(len(idx), ids.shape[1]), np.full(len(idx), ids.shape[1]))
            logits = forward(cfg, params, batch).data[:, -1, :]
            nxt = np.argmax(logits, axis=-1)
            if stop_token is not None:
                nxt = np.where(done, stop_token, nxt)
                done |= nxt == stop_token
            ids = np.concatenate([ids, nxt[:, None]], axis=1)
        for row, i in enumerate(idx):
            gen = tuple(int(t) for t in ids[row, n:])
            if stop_token is not None and stop_token in gen:
                gen = gen[: gen.index(stop_token) + 1]
            out[i] = gen
    return out


HOOK_PROFILES = {
    "jailbreak32": (8, 16, 24, 30),
    "backdoor32": (4, 12, 20, 28),
}


def hook_sites_for(profile: str, n_layers: int, k: int = 4) -> list[int]:
    """Layer indices to perturb.

    Named profiles carry fixed 32-layer choices; ``"even"`` spreads ``k`` sites as
    ``floor(L*i/k) - 1`` for ``i = 1..k``, clamped and deduplicated.
    """
    if profile in HOOK_PROFILES:
        sites = HOOK_PROFILES[profile]
        if max(sites) >= n_layers:
            raise ValueError(f"profile {profile!r} needs at least {max(sites) + 1} layers")
        return list(sites)
    if profile != "even":
        raise ValueError(f"unknown hook profile {profile!r}")
    if not 0 < k <= n_layers:
        raise ValueError(f"k={k} must be in [1, {n_layers}]")
    sites = {min(max(n_layers * i // k - 1, 0), n_layers - 1) for i in range(1, k + 1)}
    return sorted(sites)
