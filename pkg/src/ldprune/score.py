"""Operator importance from the divergence between two latent sets.

For a baseline set and a modified set of latents, the importance of the
modification is the Euclidean distance between the element-wise means plus
the Euclidean distance between the element-wise population standard
deviations. Alternative combinators (product, mean-only, std-only) are
available for ablation.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import modify
from .diffusion import SchedulerConfig, generate_many
from .graph import OperatorGraph
from .latents import LatentSet

__all__ = [
    "LatentSet",
    "Combinator",
    "ConditionScore",
    "OperatorScore",
    "latent_mean",
    "latent_std",
    "avg_distance",
    "std_distance",
    "combine",
    "get_score",
    "score_operator",
]

log = logging.getLogger(__name__)


class Combinator(str, enum.Enum):
    SUM = "sum"
    PRODUCT = "product"
    AVG_ONLY = "avg_only"
    STD_ONLY = "std_only"


def _as_set(s) -> LatentSet:
    return s if isinstance(s, LatentSet) else LatentSet(np.asarray(s))


def latent_mean(s) -> np.ndarray:
    s = _as_set(s)
    return s.latents.astype(np.float64).mean(axis=0)


def latent_std(s) -> np.ndarray:
    """Element-wise standard deviation with divisor ``N`` (not ``N - 1``)."""
    s = _as_set(s)
    x = s.latents.astype(np.float64)
    if len(s) == 1:
        log.warning("latent set of size 1: standard deviation is identically zero")
    return np.sqrt(((x - x.mean(axis=0)) ** 2).mean(axis=0))


def _check_pair(a: LatentSet, b: LatentSet) -> None:
    if a.dim != b.dim:
        raise ValueError(f"latent length mismatch: {a.dim} vs {b.dim}")


def avg_distance(orig, mod) -> float:
    orig, mod = _as_set(orig), _as_set(mod)
    _check_pair(orig, mod)
    return float(np.linalg.norm(latent_mean(orig) - latent_mean(mod)))


def std_distance(orig, mod) -> float:
    orig, mod = _as_set(orig), _as_set(mod)
    _check_pair(orig, mod)
    return float(np.linalg.norm(latent_std(orig) - latent_std(mod)))


def combine(avg_dist: float, std_dist: float, c: Combinator | str = Combinator.SUM) -> float:
    if avg_dist < 0 or std_dist < 0:
        raise ValueError("distances must be non-negative")
    c = Combinator(c)
    if c is Combinator.SUM:
        return avg_dist + std_dist
    if c is Combinator.PRODUCT:
        return avg_dist * std_dist
    if c is Combinator.AVG_ONLY:
        return avg_dist
    return std_dist


@dataclass(frozen=True)
class ConditionScore:
    avg_dist: float
    std_dist: float
    combined: float


def get_score(orig, mod, c: Combinator | str = Combinator.SUM) -> ConditionScore:
    a, s = avg_distance(orig, mod), std_distance(orig, mod)
    return ConditionScore(a, s, combine(a, s, c))


@dataclass
class OperatorScore:
    op_id: str
    per_condition: dict[int, ConditionScore] = field(default_factory=dict)
    total: float = 0.0

    def add(self, condition_id: int, score: ConditionScore) -> None:
        self.per_condition[int(condition_id)] = score
        self.total = self.total + score.combined

    def recombined(self, c: Combinator | str) -> "OperatorScore":
        """Same distances, different combinator."""
        out = OperatorScore(self.op_id)
        for cond, s in self.per_condition.items():
            out.add(cond, ConditionScore(s.avg_dist, s.std_dist, combine(s.avg_dist, s.std_dist, c)))
        return out

    def to_dict(self) -> dict:
        return {
            "op_id": self.op_id,
            "per_condition": {str(k): vars(v) for k, v in self.per_condition.items()},
            "total": self.total,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "OperatorScore":
        out = cls(d["op_id"])
        for k, v in d["per_condition"].items():
            out.per_condition[int(k)] = ConditionScore(**v)
        out.total = float(d["total"])
        return out


def score_operator(orig_sets: Mapping[int, LatentSet], graph: OperatorGraph, op_id: str,
                   conditions: Sequence[int], n_gen: int, sched: SchedulerConfig,
                   combinator: Combinator | str = Combinator.SUM, base_seed: int = 0,
                   adapter_init: str = "uniform") -> OperatorScore:
    """Modify ``op_id``, regenerate paired latents for every condition, restore.

    ``orig_sets`` must have been produced by :func:`generate_many` on the
    unmodified graph with the same conditions, ``n_gen`` and seed.
    """
    missing = [c for c in conditions if c not in orig_sets]
    if missing:
        raise ValueError(f"no original latents for conditions {missing}")
    try:
        plan = modify.plan_modification(graph, op_id, adapter_init)
    except KeyError as exc:
        raise modify.ModificationError(f"cannot score {op_id!r}: {exc}") from exc
    modify.apply(graph, plan)
    try:
        mod_sets = generate_many(graph, conditions, n_gen, sched, base_seed, provenance=op_id)
    except Exception as exc:
        raise RuntimeError(f"generation failed with {op_id!r} modified: {exc}") from exc
    finally:
        modify.restore(graph, plan)
    result = OperatorScore(op_id)
    for c in conditions:
        result.add(c, get_score(orig_sets[c], mod_sets[c], combinator))
    return result
