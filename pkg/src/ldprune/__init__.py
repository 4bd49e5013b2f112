"""Operator-level structured pruning for toy latent diffusion U-Nets.

Operators are ranked by how far their removal moves the mean and spread of
generated latents; the least important are pruned and the student is
recovered by distillation from the original model.
"""

from .diffusion import SchedulerConfig, generate_latents, generate_many
from .graph import OperatorGraph, UNetSpec, build_unet, enumerate_candidates
from .latents import LatentSet
from .prune import PruneConfig, ScoreReport, rank_operators, run_pruning_pass, sweep
from .score import Combinator, get_score

__version__ = "0.1.0"

__all__ = [
    "SchedulerConfig", "generate_latents", "generate_many", "OperatorGraph", "UNetSpec", "build_unet",
    "enumerate_candidates", "LatentSet", "PruneConfig", "ScoreReport", "rank_operators", "run_pruning_pass",
    "sweep", "Combinator", "get_score",
]
