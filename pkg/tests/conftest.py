import numpy as np
import pytest

from latforge import taskgen, trainer
from latforge.config import RunConfig
from latforge.model import ModelConfig, init_params

TINY = ModelConfig(n_layers=1, d_model=8, n_heads=2, vocab_size=16, max_context=16)


@pytest.fixture
def tiny_cfg():
    return TINY


@pytest.fixture
def tiny_params():
    return init_params(TINY, seed=3)


def uniform_params(cfg, seed=0):
    """Random weights with a zero unembedding: every next-token distribution is uniform."""
    p = init_params(cfg, seed)
    p["unembed"] = np.zeros_like(p["unembed"])
    return p


def forced_params(cfg, token, seed=0):
    """A model whose argmax is ``token`` at every position."""
    p = init_params(cfg, seed)
    p["unembed"] = np.zeros_like(p["unembed"])
    p["ln_f.g"] = np.zeros_like(p["ln_f.g"])
    p["ln_f.b"] = np.ones_like(p["ln_f.b"])
    p["unembed"][:, token] = 1.0
    return p


@pytest.fixture(scope="session")
def refusal_model():
    """Default model fine-tuned on refusal-preferred completions and benign answers."""
    cfg = RunConfig().with_overrides(task__setting="refusal", loss__kind="sft",
                                     loss__train_roles="preference-pairs,benign",
                                     train__steps=400, train__eval_every=0, optim__lr=0.02)
    return cfg, trainer.run(cfg).state.params


@pytest.fixture(scope="session")
def unlearn_base():
    cfg = RunConfig().with_overrides(task__setting="unlearn", task__seed=0, loss__kind="sft",
                                     train__steps=500, train__eval_every=0, optim__lr=0.02)
    datasets = trainer.build_datasets(cfg)
    return cfg, datasets, trainer.run(cfg, datasets).state.params


@pytest.fixture(scope="session")
def ga_unlearned(unlearn_base):
    cfg, datasets, base = unlearn_base
    ga = cfg.with_overrides(loss__kind="unlearn-ga", train__steps=60, optim__lr=3e-3, attack__enabled=False)
    return ga, datasets, base, trainer.run(ga, datasets, init=base).state.params


__all__ = ["TINY", "uniform_params", "forced_params", "taskgen"]
