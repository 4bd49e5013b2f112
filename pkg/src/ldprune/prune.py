"""Score every candidate operator, then permanently apply the k cheapest edits."""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import modify
from .checkpoint import graph_hash
from .diffusion import SchedulerConfig, generate_many
from .graph import OperatorGraph, enumerate_candidates
from .score import Combinator, OperatorScore, score_operator
from .tensor import Tensor

log = logging.getLogger(__name__)

CACHE_ENV = "LDPRUNE_CACHE_DIR"

Scorer = Callable[[OperatorGraph, str], OperatorScore]


class PruneError(RuntimeError):
    pass


@dataclass
class PruneConfig:
    k: int = 10
    conditions: list[int] = field(default_factory=lambda: list(range(8)))
    n_gen: int = 16
    combinator: str = "sum"
    min_cost_fraction: float = 0.0
    base_seed: int = 0
    adapter_init: str = "uniform"

    def __post_init__(self):
        self.conditions = [int(c) for c in self.conditions]
        self.combinator = Combinator(self.combinator).value
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not self.conditions:
            raise ValueError("conditions must be non-empty (use [0] for unconditional models)")
        if self.n_gen < 1:
            raise ValueError("n_gen must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    def scoring_key(self) -> dict:
        """Fields that influence scores; ``k`` and the combinator do not."""
        d = self.to_dict()
        d.pop("k")
        d.pop("combinator")
        return d


@dataclass
class ScoreReport:
    scores: dict[str, OperatorScore]
    candidates: list[str]
    meta: dict[str, dict]  # op_id -> kind, block, est_cost, params_saved, action
    config: dict
    n_cost: float  # per-generation compute (MACs of one forward)
    forward_calls: int = 0
    ranking: list[str] = field(default_factory=list)
    chosen: list[str] = field(default_factory=list)
    plans: list[dict] = field(default_factory=list)

    @property
    def m(self) -> int:
        return len(self.candidates)

    @property
    def k(self) -> int:
        return len(self.chosen)

    def __post_init__(self):
        if not self.ranking:
            self.ranking = rank_operators(self)

    def recombined(self, combinator: Combinator | str) -> "ScoreReport":
        """Re-rank the same distances under another combinator (no regeneration)."""
        scores = {op: s.recombined(combinator) for op, s in self.scores.items()}
        cfg = dict(self.config, combinator=Combinator(combinator).value)
        return ScoreReport(scores, list(self.candidates), self.meta, cfg, self.n_cost, self.forward_calls)

    def rank_of(self) -> dict[str, int]:
        return {op: i + 1 for i, op in enumerate(self.ranking)}

    def to_dict(self) -> dict:
        ranks = self.rank_of()
        chosen = set(self.chosen)
        ops = []
        for op in self.candidates:
            s = self.scores[op].to_dict()
            ops.append({**s, **self.meta[op], "rank": ranks[op], "chosen": op in chosen})
        return {
            "config": self.config,
            "complexity": {"n": self.n_cost, "m": self.m, "k": self.k},
            "forward_calls": self.forward_calls,
            "ranking": self.ranking,
            "chosen": self.chosen,
            "plans": self.plans,
            "operators": ops,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScoreReport":
        scores, meta, cands = {}, {}, []
        for o in d["operators"]:
            scores[o["op_id"]] = OperatorScore.from_dict(o)
            meta[o["op_id"]] = {k: o[k] for k in ("kind", "block", "est_cost", "params_saved", "action")}
            cands.append(o["op_id"])
        rep = cls(scores, cands, meta, d["config"], d["complexity"]["n"], d.get("forward_calls", 0),
                  ranking=list(d["ranking"]))
        rep.chosen = list(d.get("chosen", []))
        rep.plans = list(d.get("plans", []))
        return rep

    def save_json(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))

    @classmethod
    def load_json(cls, path) -> "ScoreReport":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save_csv(self, path) -> None:
        ranks = self.rank_of()
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["op_id", "total", "rank", "block", "kind"])
            for op in self.ranking:
                w.writerow([op, repr(self.scores[op].total), ranks[op], self.meta[op]["block"], self.meta[op]["kind"]])


def rank_operators(report: ScoreReport) -> list[str]:
    """Ascending by total score, ties broken by operator id."""
    return sorted(report.scores, key=lambda op: (report.scores[op].total, op))


def block_of(op_id: str) -> str:
    parts = op_id.split(".")
    return ".".join(parts[:2]) if parts[0] in ("down", "up") else parts[0]


def _operator_meta(graph: OperatorGraph, op_id: str, adapter_init: str) -> dict:
    node = graph.node(op_id)
    plan = modify.plan_modification(graph, op_id, adapter_init)
    adapter_params = plan.adapter.param_count() if plan.adapter else 0
    return {
        "kind": node.kind,
        "block": block_of(op_id),
        "est_cost": float(node.est_cost),
        "params_saved": int(node.total_param_count() - adapter_params),
        "action": plan.action,
    }


# --------------------------------------------------------------------------
# scoring pass
# --------------------------------------------------------------------------

def _cache_path(cache_dir, graph: OperatorGraph, cfg: PruneConfig, sched: SchedulerConfig,
                candidates: Sequence[str]) -> Path:
    key = json.dumps({"graph": graph_hash(graph), "cfg": cfg.scoring_key(), "sched": sched.to_dict(),
                      "candidates": list(candidates)}, sort_keys=True)
    return Path(cache_dir) / f"scores-{hashlib.sha256(key.encode()).hexdigest()[:24]}.json"


def _score_chunk(args) -> tuple[list[dict], int]:
    graph, op_ids, orig_sets, cfg, sched = args
    calls = graph.forward_calls
    out = [score_operator(orig_sets, graph, op, cfg.conditions, cfg.n_gen, sched, cfg.combinator,
                          cfg.base_seed, cfg.adapter_init).to_dict() for op in op_ids]
    return out, graph.forward_calls - calls


def score_all(graph: OperatorGraph, cfg: PruneConfig, sched: SchedulerConfig | None = None,
              scorer: Scorer | None = None, jobs: int = 1, cache_dir=None,
              candidates: Sequence[str] | None = None) -> ScoreReport:
    """Score every candidate of ``graph``; the graph is left unmodified.

    ``scorer`` replaces the latent-generation scorer (used for testing the
    selection logic with synthetic scores). With ``jobs > 1`` candidates are
    split across worker processes, each holding a private graph copy;
    results are merged in candidate order and match a sequential run.
    Scores are cached under ``cache_dir`` (default ``$LDPRUNE_CACHE_DIR``).
    """
    sched = sched or SchedulerConfig()
    cands = list(candidates) if candidates is not None else enumerate_candidates(graph, cfg.min_cost_fraction)
    if not cands:
        raise PruneError("no prunable candidates")
    meta = {op: _operator_meta(graph, op, cfg.adapter_init) for op in cands}
    n_cost = float(sum(n.macs() for n in graph.nodes if not n.children and graph.is_live(n)))
    config = {**cfg.to_dict(), "scheduler": sched.to_dict()}

    if scorer is not None:
        scores = {op: scorer(graph, op) for op in cands}
        return ScoreReport(scores, cands, meta, config, n_cost)

    cache_dir = cache_dir if cache_dir is not None else os.environ.get(CACHE_ENV)
    cache_file = _cache_path(cache_dir, graph, cfg, sched, cands) if cache_dir else None
    if cache_file is not None and cache_file.exists():
        log.info("reusing cached scores from %s", cache_file)
        cached = json.loads(cache_file.read_text())
        scores = {d["op_id"]: OperatorScore.from_dict(d) for d in cached["scores"]}
        scores = {op: s.recombined(cfg.combinator) for op, s in scores.items()}
        return ScoreReport(scores, cands, meta, config, n_cost, cached["forward_calls"])

    calls0 = graph.forward_calls
    orig_sets = generate_many(graph, cfg.conditions, cfg.n_gen, sched, cfg.base_seed)
    calls = graph.forward_calls - calls0

    jobs = max(1, min(int(jobs), len(cands)))
    chunks = [cands[i::jobs] for i in range(jobs)]
    if jobs == 1:
        results = [_score_chunk((graph, cands, orig_sets, cfg, sched))]
    else:
        payloads = [(copy.deepcopy(graph), ch, orig_sets, cfg, sched) for ch in chunks]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_score_chunk, payloads))
    by_op = {}
    for out, n_calls in results:
        calls += n_calls
        for d in out:
            by_op[d["op_id"]] = OperatorScore.from_dict(d)
    scores = {op: by_op[op] for op in cands}

    if cache_file is not None:
        cache_file.parent.mkdir(parents=True, exist_ok=True)
        cache_file.write_text(json.dumps({"scores": [s.to_dict() for s in scores.values()],
                                          "forward_calls": calls}))
    return ScoreReport(scores, cands, meta, config, n_cost, calls)


# --------------------------------------------------------------------------
# selection and application
# --------------------------------------------------------------------------

def select(graph: OperatorGraph, ranking: Sequence[str], k: int) -> list[str]:
    """Walk the ranking from the bottom, keeping ``k`` non-overlapping operators.

    When a composite shows up after one of its descendants was taken, the
    composite replaces the descendants and the freed slots are filled by
    the next candidates in rank order.
    """
    if k > len(ranking):
        raise PruneError(f"k={k} exceeds the {len(ranking)} available candidates")
    chosen: list[str] = []
    for op in ranking:
        if len(chosen) == k:
            break
        anc = {a.id for a in graph.node(op).ancestors()}
        if anc.intersection(chosen):
            continue
        chosen = [c for c in chosen if op not in {a.id for a in graph.node(c).ancestors()}]
        chosen.append(op)
    if len(chosen) < k:
        raise PruneError(f"only {len(chosen)} non-overlapping candidates available for k={k}")
    return chosen


def covered(graph: OperatorGraph, chosen: Sequence[str]) -> set[str]:
    """Chosen operators plus everything nested inside them."""
    return {n.id for op in chosen for n in graph.node(op).walk()}


def smoke_forward(graph: OperatorGraph) -> None:
    x = Tensor(np.random.default_rng(0).standard_normal((1,) + graph.spec.latent_shape).astype(np.float32))
    calls = graph.forward_calls
    out = graph.forward(x, 500, 0)
    graph.forward_calls = calls
    if out.shape != x.shape or not np.isfinite(out.data).all():
        raise PruneError("pruned graph fails the smoke forward")


def apply_selection(graph: OperatorGraph, report: ScoreReport, k: int, adapter_init: str = "uniform"):
    """Copy ``graph`` and permanently apply the ``k`` chosen edits."""
    chosen = select(graph, report.ranking, k)
    pruned = copy.deepcopy(graph)
    plans = []
    for op in chosen:
        plan = modify.plan_modification(pruned, op, adapter_init)
        try:
            modify.commit(pruned, plan)
        except modify.ModificationError as exc:
            raise PruneError(f"failed to prune {op}: {exc}") from exc
        plans.append(plan.to_dict())
    try:
        pruned.check_shapes()
        smoke_forward(pruned)
    except Exception as exc:
        raise PruneError(f"pruned graph invalid after removing {chosen}: {exc}") from exc
    out = copy.copy(report)
    out.chosen, out.plans = chosen, plans
    out.config = dict(report.config, k=k)
    return pruned, out


def run_pruning_pass(graph: OperatorGraph, cfg: PruneConfig, sched: SchedulerConfig | None = None,
                     scorer: Scorer | None = None, jobs: int = 1, cache_dir=None,
                     candidates: Sequence[str] | None = None):
    """Score all candidates, prune the k lowest. Returns ``(pruned_graph, report)``."""
    graph.check_shapes()
    report = score_all(graph, cfg, sched, scorer, jobs, cache_dir, candidates)
    if cfg.k > report.m:
        raise PruneError(f"k={cfg.k} exceeds the {report.m} candidates")
    return apply_selection(graph, report, cfg.k, cfg.adapter_init)


def sweep(graph: OperatorGraph, cfg: PruneConfig, k_values: Sequence[int], sched: SchedulerConfig | None = None,
          scorer: Scorer | None = None, jobs: int = 1, cache_dir=None, out_dir=None,
          candidates: Sequence[str] | None = None):
    """Prune at several k from a single scoring pass.

    Returns a list of ``(k, checkpoint_path or None, pruned_graph, report)``;
    checkpoints are written only when ``out_dir`` is given.
    """
    ks = list(k_values)
    if not ks or ks != sorted(ks):
        raise ValueError("k_values must be non-empty and ascending")
    graph.check_shapes()
    report = score_all(graph, cfg, sched, scorer, jobs, cache_dir, candidates)
    results = []
    for k in ks:
        if k > report.m:
            raise PruneError(f"k={k} exceeds the {report.m} candidates")
        pruned, rep = apply_selection(graph, report, k, cfg.adapter_init)
        path = None
        if out_dir is not None:
            from .checkpoint import save_checkpoint

            path = Path(out_dir) / f"pruned_k{k}.ldpr"
            save_checkpoint(pruned, path, parent_hash=graph_hash(graph))
        results.append((k, path, pruned, rep))
    return results
