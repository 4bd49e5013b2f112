"""Synthetic conditional latent dataset used in place of encoded images/audio.

Condition ``c`` owns a fixed Gaussian blob: its centre sits on a circle at
angle ``2*pi*c/num_conditions``, its width cycles through three values, and
each latent channel carries the blob with its own signed amplitude. Samples
add small per-sample jitter in position and amplitude plus white noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class DatasetConfig:
    num_samples: int = 2048
    num_conditions: int = 8
    channels: int = 4
    size: int = 16
    noise: float = 0.1
    seed: int = 0


def blob_pattern(cond: int, cfg: DatasetConfig, shift=(0.0, 0.0)) -> np.ndarray:
    s = cfg.size
    angle = 2 * np.pi * cond / cfg.num_conditions
    cy = (s - 1) / 2 + 0.3 * s * np.sin(angle) + shift[0]
    cx = (s - 1) / 2 + 0.3 * s * np.cos(angle) + shift[1]
    sigma = s * (0.08 + 0.04 * (cond % 3))
    yy, xx = np.mgrid[0:s, 0:s]
    blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
    amps = np.cos(np.arange(cfg.channels) * (1.0 + cond) * 0.9) * 1.5
    return amps[:, None, None] * blob[None]


class SyntheticLatents:
    """In-memory dataset of ``(latent, condition_id)`` pairs, fully determined by its config."""

    def __init__(self, cfg: DatasetConfig | None = None):
        self.cfg = cfg = cfg or DatasetConfig()
        rng = np.random.default_rng(cfg.seed)
        self.conditions = (np.arange(cfg.num_samples) % cfg.num_conditions).astype(np.int64)
        out = np.empty((cfg.num_samples, cfg.channels, cfg.size, cfg.size), np.float32)
        for i, c in enumerate(self.conditions):
            shift = rng.normal(0.0, 0.5, size=2)
            gain = 1.0 + 0.1 * rng.standard_normal()
            pattern = gain * blob_pattern(int(c), cfg, shift)
            out[i] = pattern + cfg.noise * rng.standard_normal(pattern.shape)
        self.latents = out

    def __len__(self) -> int:
        return len(self.latents)

    def batch(self, rng: np.random.Generator, size: int) -> tuple[np.ndarray, np.ndarray]:
        idx = rng.integers(0, len(self), size=size)
        return self.latents[idx], self.conditions[idx]

    def for_condition(self, cond: int) -> np.ndarray:
        return self.latents[self.conditions == cond]
