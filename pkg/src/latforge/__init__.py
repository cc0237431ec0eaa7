"""Targeted and untargeted latent adversarial training for small transformer LMs."""

from .attack import AttackBudget, PerturbationSet, Whitener, fit_whitener, project_l2, project_whitened, run_pgd
from .config import RunConfig
from .model import ModelConfig, TokenSequence, forward, greedy_decode, hook_sites_for, init_params
from .trainer import TrainState, relearn_attack, run

__version__ = "0.1.0"
