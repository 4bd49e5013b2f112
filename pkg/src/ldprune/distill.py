"""Teacher training and knowledge-distillation fine-tuning of pruned students.

The distillation objective mixes three mean-squared errors evaluated on the
same noisy latent, timestep and condition for teacher and student::

    task_coef * |eps_s - noise|^2 + out_coef * |eps_s - eps_t|^2
        + feat_coef * sum_taps |f_s - f_t|^2

Feature taps sit on resolution-level boundaries, which survive pruning.
"""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import modify
from . import tensor as T
from .checkpoint import save_checkpoint
from .data import SyntheticLatents
from .diffusion import SchedulerConfig, add_noise
from .graph import OperatorGraph, build_unet
from .tensor import GradTape, Tensor, no_tape

log = logging.getLogger(__name__)

# coefficients, learning rate, batch, accumulation and iterations per task
PRESETS = {
    "t2i": dict(feat_coef=0.7, out_coef=0.7, lr=3e-5, batch_size=64, grad_accum=4, iterations=50_000),
    "uig": dict(feat_coef=300.0, out_coef=300.0, lr=5e-6, batch_size=32, grad_accum=4, iterations=50_000),
    "uag": dict(feat_coef=10.0, out_coef=10.0, lr=1e-4, batch_size=64, grad_accum=2, iterations=12_000),
}


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class KDConfig:
    lr: float = 1e-4
    batch_size: int = 8
    grad_accum: int = 1
    iterations: int = 2000
    feat_coef: float = 1.0
    out_coef: float = 1.0
    task_coef: float = 1.0
    taps: list[str] | None = None  # None: every level boundary
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        for name in ("feat_coef", "out_coef", "task_coef"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.batch_size < 1 or self.grad_accum < 1 or self.iterations < 0 or self.lr <= 0:
            raise ValueError("invalid batch_size/grad_accum/iterations/lr")

    @classmethod
    def preset(cls, task: str, **overrides) -> "KDConfig":
        try:
            base = PRESETS[task.lower()]
        except KeyError:
            raise ValueError(f"unknown preset {task!r}; choose from {sorted(PRESETS)}") from None
        return cls(**{**base, **overrides})

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    rng_state: dict | None = None
    history: list[dict] = field(default_factory=list)

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        arrays = {f"m/{k}": a for k, a in self.m.items()}
        arrays.update({f"v/{k}": a for k, a in self.v.items()})
        meta = json.dumps({"step": self.step, "rng_state": self.rng_state, "history": self.history})
        np.savez(path, __meta__=np.frombuffer(meta.encode(), dtype=np.uint8), **arrays)

    @classmethod
    def load(cls, path) -> "TrainState":
        with np.load(path) as z:
            meta = json.loads(z["__meta__"].tobytes().decode())
            m = {k[2:]: z[k] for k in z.files if k.startswith("m/")}
            v = {k[2:]: z[k] for k in z.files if k.startswith("v/")}
        return cls(meta["step"], m, v, meta["rng_state"], meta["history"])


class Adam:
    """Adam with bias correction; moments live in a :class:`TrainState`."""

    def __init__(self, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr, self.betas, self.eps = lr, betas, eps

    def step(self, params: Sequence[tuple[str, Tensor]], grads: dict[str, np.ndarray], state: TrainState) -> None:
        b1, b2 = self.betas
        t = state.step + 1
        for name, p in params:
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(p.data)
            m = state.m.get(name)
            if m is None:
                m = state.m[name] = np.zeros_like(p.data)
                state.v[name] = np.zeros_like(p.data)
            v = state.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / (1 - b1 ** t)
            vhat = v / (1 - b2 ** t)
            p.data = (p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.data.dtype)


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------

def default_taps(graph: OperatorGraph) -> list[str]:
    n = graph.spec.num_levels
    return [f"down.{i}" for i in range(n)] + ["mid"] + [f"up.{i}" for i in range(n)]


def project_channels(x: Tensor, width: int) -> Tensor:
    """Frozen uniform map from ``x``'s channel count to ``width`` (NCHW)."""
    cin = x.shape[1]
    if cin == width:
        return x
    w = Tensor(np.full((width, cin, 1, 1), 1.0 / cin), dtype=x.data.dtype)
    return T.conv2d(x, w)


def kd_terms(teacher: OperatorGraph | None, student: OperatorGraph, clean: Tensor, cond, t, noise: Tensor,
             cfg: KDConfig, sched: SchedulerConfig | None = None) -> dict[str, Tensor]:
    """Individual loss terms and their weighted ``total``."""
    sched = sched or SchedulerConfig()
    noisy = add_noise(clean, noise, t, sched)
    use_kd = teacher is not None and (cfg.out_coef > 0 or cfg.feat_coef > 0)
    s_feats: dict | None = {} if use_kd and cfg.feat_coef > 0 else None
    eps_s = student.forward(noisy, t, cond, features=s_feats)
    terms = {"task": T.mse_loss(eps_s, noise)}
    zero = Tensor(np.zeros(()), dtype=eps_s.data.dtype)
    terms["out"], terms["feat"] = zero, zero
    if use_kd:
        t_feats: dict | None = {} if s_feats is not None else None
        with no_tape():
            calls = teacher.forward_calls
            eps_t = teacher.forward(noisy.detach(), t, cond, features=t_feats)
            teacher.forward_calls = calls
        terms["out"] = T.mse_loss(eps_s, eps_t.detach())
        if s_feats is not None:
            taps = cfg.taps or default_taps(teacher)
            common = [k for k in taps if k in s_feats and k in t_feats]
            if not common:
                raise ValueError(f"no common feature taps among {taps}")
            feat = None
            for k in common:
                tf = t_feats[k].detach()
                term = T.mse_loss(project_channels(s_feats[k], tf.shape[1]), tf)
                feat = term if feat is None else T.add(feat, term)
            terms["feat"] = feat
    total = T.scale(terms["task"], cfg.task_coef)
    total = T.add(total, T.scale(terms["out"], cfg.out_coef))
    total = T.add(total, T.scale(terms["feat"], cfg.feat_coef))
    terms["total"] = total
    return terms


def kd_loss(teacher, student, clean, cond, t, noise, cfg: KDConfig, sched: SchedulerConfig | None = None) -> Tensor:
    return kd_terms(teacher, student, clean, cond, t, noise, cfg, sched)["total"]


# --------------------------------------------------------------------------
# training loops
# --------------------------------------------------------------------------

def _draw(dataset: SyntheticLatents, rng: np.random.Generator, size: int, sched: SchedulerConfig):
    clean, cond = dataset.batch(rng, size)
    t = rng.integers(0, sched.num_train_steps, size=size)
    noise = rng.standard_normal(clean.shape).astype(np.float32)
    return Tensor(clean), cond, t, Tensor(noise)


def _fit(student: OperatorGraph, teacher: OperatorGraph | None, dataset: SyntheticLatents, cfg: KDConfig,
         sched: SchedulerConfig | None, state: TrainState | None, log_path, ckpt_dir) -> TrainState:
    sched = sched or SchedulerConfig()
    state = state or TrainState()
    rng = np.random.default_rng(cfg.seed)
    if state.rng_state is not None:
        rng.bit_generator.state = state.rng_state
    opt = Adam(cfg.lr)
    params = student.live_parameters()
    for _, p in params:
        p.requires_grad = True
    by_id = {id(p): name for name, p in params}
    log_fh = open(log_path, "a") if log_path else None
    try:
        while state.step < cfg.iterations:
            grads: dict[str, np.ndarray] = {}
            sums = {"task": 0.0, "out": 0.0, "feat": 0.0, "total": 0.0}
            try:
                for _ in range(cfg.grad_accum):
                    clean, cond, t, noise = _draw(dataset, rng, cfg.batch_size, sched)
                    with GradTape() as tape:
                        terms = kd_terms(teacher, student, clean, cond, t, noise, cfg, sched)
                    for k in sums:
                        sums[k] += terms[k].item() / cfg.grad_accum
                    if not np.isfinite(sums["total"]):
                        raise T.NonFiniteError(f"loss is {sums['total']}")
                    for leaf, g in tape.backward(terms["total"]).items():
                        name = by_id.get(id(leaf))
                        if name is not None:
                            grads[name] = grads.get(name, 0.0) + g / cfg.grad_accum
            except T.NonFiniteError as exc:
                if ckpt_dir is not None:
                    state.rng_state = rng.bit_generator.state
                    state.save(Path(ckpt_dir) / "diverged_state.npz")
                raise TrainingDiverged(f"training diverged at step {state.step}: {exc}") from exc
            opt.step(params, grads, state)
            state.step += 1
            record = {"step": state.step, **sums}
            state.history.append(record)
            if log_fh:
                log_fh.write(json.dumps(record) + "\n")
            if ckpt_dir is not None and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
                save_checkpoint(student, Path(ckpt_dir) / f"step{state.step:06d}.ldpr")
    finally:
        if log_fh:
            log_fh.close()
    state.rng_state = rng.bit_generator.state
    return state


def finetune(teacher: OperatorGraph, student: OperatorGraph, dataset: SyntheticLatents, cfg: KDConfig,
             sched: SchedulerConfig | None = None, state: TrainState | None = None,
             log_path=None, ckpt_dir=None) -> tuple[OperatorGraph, TrainState]:
    """Distil ``teacher`` into ``student`` in place; the teacher is never updated."""
    if teacher is student:
        raise ValueError("teacher and student must be distinct graphs")
    state = _fit(student, teacher, dataset, cfg, sched, state, log_path, ckpt_dir)
    return student, state


def reinitialized(student: OperatorGraph, seed: int = 1) -> OperatorGraph:
    """Same pruned structure as ``student`` with freshly initialised weights."""
    fresh = build_unet(student.spec, seed=seed)
    for p in student.applied_plans:
        plan = modify.ModificationPlan.from_dict(p.to_dict())
        modify.commit(fresh, plan)
    for src, dst in zip(student.nodes, fresh.nodes):
        dst.est_cost = src.est_cost
    return fresh


def train_from_scratch(teacher: OperatorGraph, pruned: OperatorGraph, dataset: SyntheticLatents, cfg: KDConfig,
                       sched: SchedulerConfig | None = None, init_seed: int = 1,
                       log_path=None, ckpt_dir=None) -> tuple[OperatorGraph, TrainState]:
    """Run the exact fine-tuning loop on a re-initialised copy of ``pruned``."""
    student = reinitialized(pruned, init_seed)
    return finetune(teacher, student, dataset, cfg, sched, log_path=log_path, ckpt_dir=ckpt_dir)


@dataclass
class TeacherConfig:
    lr: float = 3e-4
    batch_size: int = 8
    iterations: int = 2000
    seed: int = 0


def train_teacher(graph: OperatorGraph, dataset: SyntheticLatents, cfg: TeacherConfig,
                  sched: SchedulerConfig | None = None, log_path=None) -> tuple[OperatorGraph, TrainState]:
    """Plain noise-prediction training (no teacher)."""
    kd = KDConfig(lr=cfg.lr, batch_size=cfg.batch_size, iterations=cfg.iterations, seed=cfg.seed,
                  feat_coef=0.0, out_coef=0.0, task_coef=1.0)
    state = _fit(graph, None, dataset, kd, sched, None, log_path, None)
    return graph, state


def copy_graph(graph: OperatorGraph) -> OperatorGraph:
    return copy.deepcopy(graph)


__all__ = [
    "PRESETS", "KDConfig", "TrainState", "TeacherConfig", "Adam", "TrainingDiverged",
    "default_taps", "project_channels", "kd_terms", "kd_loss", "finetune", "reinitialized",
    "train_from_scratch", "train_teacher", "copy_graph",
]
