"""Quality and efficiency measurements for original and pruned denoisers."""

from __future__ import annotations

import platform
import threading
import time
from dataclasses import asdict, dataclass

import numpy as np
from scipy import linalg

from .diffusion import SchedulerConfig, initial_noise, sample
from .graph import OperatorGraph
from .latents import LatentSet

N_WARMUP = 20
N_MEASURED = 100

_MEASURE_LOCK = threading.Lock()


@dataclass(frozen=True)
class LatentFrechetResult:
    distance: float
    n_a: int
    n_b: int
    diag: bool


@dataclass(frozen=True)
class LatencyResult:
    mean_ms: float
    std_ms: float
    n_warmup: int
    n_measured: int
    inference_steps: int
    hardware: str
    speedup_pct: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def _matrix(x) -> np.ndarray:
    if isinstance(x, LatentSet):
        return x.latents.astype(np.float64)
    if isinstance(x, dict):
        return np.concatenate([_matrix(v) for _, v in sorted(x.items())])
    a = np.asarray(x, dtype=np.float64)
    return a.reshape(len(a), -1) if a.ndim != 1 else a[:, None]


def latent_frechet(a, b, diag: bool = True) -> LatentFrechetResult:
    """Frechet distance between Gaussian fits of two latent collections.

    ``a`` and ``b`` may be LatentSets, ``{condition: LatentSet}`` maps or
    arrays of shape ``[N, ...]``. Covariances use the unbiased estimator.
    """
    xa, xb = _matrix(a), _matrix(b)
    if len(xa) < 2 or len(xb) < 2:
        raise ValueError("latent_frechet needs at least 2 samples per side")
    if xa.shape[1] != xb.shape[1]:
        raise ValueError(f"dimension mismatch: {xa.shape[1]} vs {xb.shape[1]}")
    mu = float(np.sum((xa.mean(0) - xb.mean(0)) ** 2))
    if diag:
        va, vb = xa.var(0, ddof=1), xb.var(0, ddof=1)
        cov = float(np.sum(va + vb - 2.0 * np.sqrt(va * vb)))
    else:
        ca, cb = np.atleast_2d(np.cov(xa, rowvar=False)), np.atleast_2d(np.cov(xb, rowvar=False))
        root = linalg.sqrtm(ca @ cb)
        if np.iscomplexobj(root):
            root = root.real
        cov = float(np.trace(ca) + np.trace(cb) - 2.0 * np.trace(root))
    return LatentFrechetResult(max(mu + cov, 0.0), len(xa), len(xb), diag)


def hardware_note() -> str:
    return f"{platform.machine()} {platform.processor() or 'cpu'} python{platform.python_version()}"


def measure_latency(graph: OperatorGraph, cfg: SchedulerConfig | None = None, baseline: LatencyResult | None = None,
                    n_warmup: int = N_WARMUP, n_measured: int = N_MEASURED, condition_id: int = 0,
                    seed: int = 0) -> LatencyResult:
    """Wall-clock time of single-latent generations, after discarding warmup runs.

    Measurements hold a process-wide lock so two benchmarks never overlap.
    ``speedup_pct`` is ``100 * (baseline - mean) / baseline`` when a
    baseline is given.
    """
    cfg = cfg or SchedulerConfig()
    if n_measured < 1:
        raise ValueError("n_measured must be >= 1")
    shape = graph.spec.latent_shape
    cond = np.asarray([condition_id])
    calls = graph.forward_calls
    times = []
    with _MEASURE_LOCK:
        for i in range(n_warmup + n_measured):
            noise = initial_noise(shape, seed, condition_id, i)[None]
            t0 = time.perf_counter()
            sample(graph, noise, cond, cfg)
            dt = time.perf_counter() - t0
            if i >= n_warmup:
                times.append(dt * 1e3)
    graph.forward_calls = calls
    mean = float(np.mean(times))
    speedup = None if baseline is None else 100.0 * (baseline.mean_ms - mean) / baseline.mean_ms
    return LatencyResult(mean, float(np.std(times)), n_warmup, n_measured, cfg.num_inference_steps,
                         hardware_note(), speedup)


def count_params(graph: OperatorGraph) -> int:
    """Live trainable parameters; children of replaced composites are not counted."""
    return graph.param_count()
