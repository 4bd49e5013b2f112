"""Noise schedule, epsilon-prediction objective and latent-only sampling.

Sampling stops at the final denoised latent; nothing here decodes.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .graph import OperatorGraph
from .latents import LatentSet
from .tensor import Tensor


@dataclass(frozen=True)
class SchedulerConfig:
    num_train_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    num_inference_steps: int = 20
    sampler: str = "ddim"  # "ddim" (eta=0, deterministic) or "ddpm" (ancestral)

    def __post_init__(self):
        if self.num_train_steps < 1:
            raise ValueError("num_train_steps must be positive")
        if not 1 <= self.num_inference_steps <= self.num_train_steps:
            raise ValueError(f"num_inference_steps must be in 1..{self.num_train_steps}")
        if not 0 < self.beta_start < self.beta_end < 1:
            raise ValueError("need 0 < beta_start < beta_end < 1")
        if self.sampler not in ("ddim", "ddpm"):
            raise ValueError(f"unknown sampler {self.sampler!r}")

    @property
    def betas(self) -> np.ndarray:
        return np.linspace(self.beta_start, self.beta_end, self.num_train_steps, dtype=np.float64)

    @property
    def alphas_cumprod(self) -> np.ndarray:
        return np.cumprod(1.0 - self.betas)

    def timesteps(self) -> np.ndarray:
        """Descending inference timesteps, evenly strided from ``T - stride`` to 0."""
        stride = self.num_train_steps // self.num_inference_steps
        return (np.arange(self.num_inference_steps) * stride)[::-1].astype(np.int64)

    def to_dict(self) -> dict:
        return asdict(self)


def add_noise(clean_latent: Tensor, noise: Tensor, t, cfg: SchedulerConfig) -> Tensor:
    """``sqrt(abar_t) * clean + sqrt(1 - abar_t) * noise`` (t scalar or per-sample)."""
    t = np.asarray(t)
    if t.min() < 0 or t.max() >= cfg.num_train_steps:
        raise ValueError(f"timestep outside [0, {cfg.num_train_steps})")
    abar = cfg.alphas_cumprod[t]
    dtype = clean_latent.data.dtype
    shape = (-1,) + (1,) * (clean_latent.ndim - 1) if abar.ndim else ()
    a = Tensor(np.sqrt(abar).reshape(shape), dtype=dtype)
    s = Tensor(np.sqrt(1.0 - abar).reshape(shape), dtype=dtype)
    return T.add(T.mul(clean_latent, a), T.mul(noise, s))


def initial_noise(shape: Sequence[int], base_seed: int, condition_id: int, sample_index: int) -> np.ndarray:
    """Starting noise for one sample; a pure function of its three keys."""
    rng = np.random.default_rng([base_seed, condition_id, sample_index])
    return rng.standard_normal(tuple(shape)).astype(np.float32)


def sample(graph: OperatorGraph, noise: np.ndarray, condition_ids: np.ndarray, cfg: SchedulerConfig,
           step_seeds: Sequence | None = None) -> np.ndarray:
    """Run the reverse process from ``noise`` (NCHW) and return final latents.

    With ``cfg.sampler == "ddim"`` the trajectory is deterministic; "ddpm"
    adds ancestral noise drawn from ``step_seeds`` (one seed key per sample).
    """
    abar = cfg.alphas_cumprod
    stride = cfg.num_train_steps // cfg.num_inference_steps
    x = noise.astype(np.float32)
    rngs = None
    if cfg.sampler == "ddpm":
        keys = step_seeds if step_seeds is not None else [[i] for i in range(len(x))]
        rngs = [np.random.default_rng(list(k) + [7919]) for k in keys]
    for t in cfg.timesteps():
        eps = graph.forward(Tensor(x), int(t), condition_ids).data
        a_t = abar[t]
        a_prev = abar[t - stride] if t - stride >= 0 else 1.0
        x0 = (x - np.sqrt(1.0 - a_t) * eps) / np.sqrt(a_t)
        if rngs is None:
            x = np.sqrt(a_prev) * x0 + np.sqrt(1.0 - a_prev) * eps
        else:
            var = (1.0 - a_prev) / (1.0 - a_t) * (1.0 - a_t / a_prev)
            direction = np.sqrt(max(1.0 - a_prev - var, 0.0)) * eps
            z = np.stack([r.standard_normal(x.shape[1:]) for r in rngs]) if t > 0 else 0.0
            x = np.sqrt(a_prev) * x0 + direction + np.sqrt(var) * z
        x = x.astype(np.float32)
        if not np.isfinite(x).all():
            raise FloatingPointError(f"sampling diverged at timestep {t}")
    return x


def generate_many(graph: OperatorGraph, condition_ids: Sequence[int], n: int, cfg: SchedulerConfig,
                  base_seed: int = 0, provenance: str = "original") -> dict[int, LatentSet]:
    """Generate ``n`` latents for each condition in one batched trajectory.

    Sample ``i`` of condition ``c`` always starts from
    ``initial_noise(base_seed, c, i)``, so sets produced by different graph
    variants are paired sample for sample.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    conds = [int(c) for c in condition_ids]
    shape = graph.spec.latent_shape
    noise = np.stack([initial_noise(shape, base_seed, c, i) for c in conds for i in range(n)])
    ids = np.repeat(np.asarray(conds, dtype=np.int64), n)
    keys = [(base_seed, c, i) for c in conds for i in range(n)]
    out = sample(graph, noise, ids, cfg, step_seeds=keys)
    return {c: LatentSet(out[j * n:(j + 1) * n], c, provenance) for j, c in enumerate(conds)}


def generate_latents(graph: OperatorGraph, condition_id: int, n: int, cfg: SchedulerConfig,
                     base_seed: int = 0, provenance: str = "original") -> LatentSet:
    return generate_many(graph, [condition_id], n, cfg, base_seed, provenance)[int(condition_id)]


def training_loss(graph: OperatorGraph, clean_latent: Tensor, condition_id, rng: np.random.Generator,
                  cfg: SchedulerConfig | None = None) -> Tensor:
    """Epsilon-prediction MSE at a uniformly drawn timestep per sample."""
    cfg = cfg or SchedulerConfig()
    n = clean_latent.shape[0]
    t = rng.integers(0, cfg.num_train_steps, size=n)
    noise = Tensor(rng.standard_normal(clean_latent.shape), dtype=clean_latent.data.dtype)
    noisy = add_noise(clean_latent, noise, t, cfg)
    pred = graph.forward(noisy, t, condition_id)
    return T.mse_loss(pred, noise)
