"""Projected gradient descent over residual-stream perturbations."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class PerturbationSet:
    """Additive latents per hook site, all sharing one prompt-position mask.

    ``deltas[site]`` has shape ``(B, T, d_model)``; ``mask`` is ``(B, T)``.
    Values may be arrays or differentiable :class:`Tensor` leaves.
    """

    deltas: dict
    mask: np.ndarray

    @classmethod
    def zeros(cls, sites, mask: np.ndarray, d_model: int) -> "PerturbationSet":
        mask = np.asarray(mask, dtype=np.float32)
        return cls({s: np.zeros(mask.shape + (d_model,), np.float32) for s in sites}, mask)

    @property
    def sites(self) -> list:
        return sorted(self.deltas)

    def arrays(self) -> dict:
        return {s: d.data if isinstance(d, Tensor) else np.asarray(d) for s, d in self.deltas.items()}

    def detached(self) -> "PerturbationSet":
        return PerturbationSet({s: np.array(a) for s, a in self.arrays().items()}, self.mask)

    def is_zero(self) -> bool:
        return all(not np.any(a) for a in self.arrays().values())


@dataclass
class AttackBudget:
    """PGD settings. ``epsilon`` is a scalar or a per-site mapping."""

    epsilon: float | Mapping[int, float] = 1.0
    steps: int = 16
    step_size: float | None = None  # default epsilon / 4 per site
    mode: str = "targeted"
    init: str = "zero"
    norm_scope: str = "position"

    def __post_init__(self):
        eps = self.epsilon.values() if isinstance(self.epsilon, Mapping) else [self.epsilon]
        if any(e < 0 for e in eps):
            raise ValueError("epsilon must be non-negative")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.step_size is not None and self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if self.mode not in ("targeted", "untargeted"):
            raise ValueError(f"unknown attack mode {self.mode!r}")
        if self.init not in ("zero", "uniform-in-ball"):
            raise ValueError(f"unknown init {self.init!r}")
        if self.norm_scope not in ("position", "aggregate"):
            raise ValueError(f"unknown norm scope {self.norm_scope!r}")

    def eps_for(self, site: int) -> float:
        if isinstance(self.epsilon, Mapping):
            return float(self.epsilon[site])
        return float(self.epsilon)

    def eta_for(self, site: int) -> float:
        return self.step_size if self.step_size is not None else self.eps_for(site) / 4


def _row_norms(v: np.ndarray) -> np.ndarray:
    return np.sqrt((v.astype(np.float64) ** 2).sum(axis=-1, keepdims=True))


def _clip_rows(v: np.ndarray, epsilon: float) -> np.ndarray:
    norms = _row_norms(v)
    outside = norms > epsilon
    # rows inside the ball, however small, keep scale 1
    scale = np.where(outside, epsilon / np.where(outside, norms, 1.0), 1.0)
    out = (v * scale).astype(v.dtype)
    # rounding can leave a rescaled row a hair outside the ball, which would
    # break idempotence; shrink those rows by one ulp-sized factor until inside
    shrink = np.asarray(1 - 2.0 ** -22, dtype=v.dtype)
    over = _row_norms(out) > epsilon
    while np.any(over):
        out = np.where(over, out * shrink, out)
        over = _row_norms(out) > epsilon
    return out


def project_l2(delta: np.ndarray, mask: np.ndarray, epsilon: float, scope: str = "position") -> np.ndarray:
    """Project onto the L2 ball at masked positions and zero the rest.

    ``scope="position"`` bounds each position's vector; ``"aggregate"`` bounds
    the flattened masked perturbation of each example.
    """
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    delta = np.asarray(delta)
    m = np.asarray(mask, dtype=delta.dtype)[..., None]
    masked = delta * m
    if scope == "position":
        return _clip_rows(masked, epsilon)
    if scope != "aggregate":
        raise ValueError(f"unknown norm scope {scope!r}")
    lead = masked.shape[0] if masked.ndim == 3 else 1
    flat = masked.reshape(lead, -1)
    return _clip_rows(flat, epsilon).reshape(masked.shape)


class Whitener(TransformerMixin, BaseEstimator):
    """PCA whitening of residual activations with a ridge on the covariance.

    ``ridge`` is relative to the mean eigenvalue of the sample covariance.
    After ``fit``: ``mean_``, ``components_`` (W), ``inverse_components_`` (W^-1).
    ``transform`` maps activations to whitened coordinates; ``scale`` and
    ``unscale`` apply only the linear part, which is what perturbations need.
    """

    def __init__(self, ridge: float = 1e-4):
        self.ridge = ridge

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        n, d = X.shape
        if n < d:
            raise ValueError(f"need at least d_model={d} samples, got {n}")
        if self.ridge <= 0:
            raise ValueError("ridge must be positive")
        self.mean_ = X.mean(axis=0)
        cov = np.cov(X, rowvar=False, bias=True).reshape(d, d)
        lam = self.ridge * max(np.trace(cov) / d, np.finfo(float).tiny)
        evals, evecs = np.linalg.eigh(cov + lam * np.eye(d))
        order = np.argsort(evals)[::-1]
        evals, evecs = evals[order], evecs[:, order]
        self.eigenvalues_ = evals
        self.components_ = (evecs / np.sqrt(evals)).T  # Lambda^-1/2 E^T
        self.inverse_components_ = evecs * np.sqrt(evals)  # E Lambda^1/2
        self.n_features_in_ = d
        return self

    def transform(self, X):
        check_is_fitted(self)
        X = check_array(X, dtype=np.float64)
        return (X - self.mean_) @ self.components_.T

    def inverse_transform(self, Z):
        check_is_fitted(self)
        Z = check_array(Z, dtype=np.float64)
        return Z @ self.inverse_components_.T + self.mean_

    def scale(self, v: np.ndarray) -> np.ndarray:
        """Whitened coordinates of a displacement (no centring)."""
        check_is_fitted(self)
        return np.asarray(v) @ self.components_.T

    def unscale(self, z: np.ndarray) -> np.ndarray:
        check_is_fitted(self)
        return np.asarray(z) @ self.inverse_components_.T


def fit_whitener(activations, ridge: float = 1e-4) -> Whitener:
    return Whitener(ridge=ridge).fit(activations)


def project_whitened(delta: np.ndarray, mask: np.ndarray, epsilon: float, whitener: Whitener) -> np.ndarray:
    """Clip each masked position to the epsilon ball in whitened coordinates."""
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    delta = np.asarray(delta)
    if delta.shape[-1] != whitener.n_features_in_:
        raise ValueError(f"whitener dimension {whitener.n_features_in_} != perturbation dimension {delta.shape[-1]}")
    m = np.asarray(mask, dtype=np.float64)[..., None]
    z = whitener.scale(delta.astype(np.float64) * m)
    norms = np.sqrt((z ** 2).sum(axis=-1, keepdims=True))
    inside = norms <= epsilon
    z = np.where(inside, z, z * (epsilon / np.maximum(norms, 1e-300)))
    # interior points pass through bit-for-bit
    out = np.where(inside, delta * m, whitener.unscale(z))
    return out.astype(delta.dtype)


@dataclass
class AttackTrace:
    losses: list = field(default_factory=list)
    resets: int = 0


def _project(budget: AttackBudget, site: int, delta, mask, whitener):
    eps = budget.eps_for(site)
    if whitener is not None:
        w = whitener[site] if isinstance(whitener, Mapping) else whitener
        return project_whitened(delta, mask, eps, w)
    return project_l2(delta, mask, eps, budget.norm_scope)


def _init_delta(budget, site, shape, mask, rng, whitener):
    if budget.init == "zero":
        return np.zeros(shape, np.float32)
    # uniform in the ball: gaussian direction, radius ~ eps * U^(1/d)
    d = shape[-1]
    v = rng.standard_normal(shape)
    v /= np.linalg.norm(v, axis=-1, keepdims=True)
    r = budget.eps_for(site) * rng.random(shape[:-1] + (1,)) ** (1.0 / d)
    v = (v * r).astype(np.float32)
    if whitener is not None:
        w = whitener[site] if isinstance(whitener, Mapping) else whitener
        v = w.unscale(v).astype(np.float32)
    return _project(budget, site, v, mask, whitener)


def run_pgd(loss: Callable[[PerturbationSet], Tensor], sites, mask: np.ndarray, d_model: int,
            budget: AttackBudget, rng: np.random.Generator | None = None, whitener=None,
            trace: AttackTrace | None = None) -> PerturbationSet:
    """Optimise perturbations at ``sites`` against ``loss``.

    ``loss`` maps a :class:`PerturbationSet` of differentiable leaves to a scalar
    with the model parameters held fixed (closed over by the caller). Targeted
    mode descends, untargeted mode ascends, each along the L2-normalised
    gradient of every site (norm taken per example over masked positions).
    A non-finite gradient resets the perturbation to its initial value.
    """
    mask = np.asarray(mask, dtype=np.float32)
    shape = mask.shape + (d_model,)
    if budget.init != "zero" and rng is None:
        raise ValueError("random init needs an rng")
    init = {s: _init_delta(budget, s, shape, mask, rng, whitener) for s in sites}
    deltas = {s: v.copy() for s, v in init.items()}
    sign = -1.0 if budget.mode == "targeted" else 1.0
    for _ in range(budget.steps):
        with ad.Tape() as tape:
            leaves = {s: Tensor(v, requires_grad=True, op=f"delta:{s}") for s, v in deltas.items()}
            value = loss(PerturbationSet(leaves, mask))
            tape.backward(value)
        if trace is not None:
            trace.losses.append(value.item())
        grads = {s: leaves[s].grad if leaves[s].grad is not None else np.zeros(shape, np.float32)
                 for s in sites}
        if not all(np.all(np.isfinite(g)) for g in grads.values()):
            deltas = {s: v.copy() for s, v in init.items()}
            if trace is not None:
                trace.resets += 1
            continue
        for s in sites:
            g = grads[s] * mask[..., None]
            norm = np.sqrt((g.astype(np.float64) ** 2).sum(axis=(-2, -1), keepdims=True))
            step = (g / np.maximum(norm, 1e-12)).astype(np.float32)
            deltas[s] = _project(budget, s, deltas[s] + sign * budget.eta_for(s) * step, mask, whitener)
    if trace is not None:
        final = loss(PerturbationSet(deltas, mask))
        trace.losses.append(final.item())
    return PerturbationSet(deltas, mask)
