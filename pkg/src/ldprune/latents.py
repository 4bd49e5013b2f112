"""Ordered collections of generated latents."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class LatentSet:
    """``N_gen`` final latents for one condition, flattened row-major to ``[N, D]``.

    Float64 input is kept as is; anything else is stored as float32.
    """

    latents: np.ndarray
    condition_id: int = 0
    provenance: str = "original"

    def __post_init__(self):
        arr = np.asarray(self.latents)
        arr = arr.astype(np.float64 if arr.dtype == np.float64 else np.float32, copy=False)
        if arr.ndim == 1:
            arr = arr[None]
        if arr.ndim > 2:
            arr = arr.reshape(arr.shape[0], -1)
        if arr.shape[0] < 1:
            raise ValueError("a latent set needs at least one member")
        if not np.isfinite(arr).all():
            raise ValueError("latent set contains non-finite values")
        self.latents = np.ascontiguousarray(arr)

    def __len__(self) -> int:
        return self.latents.shape[0]

    @property
    def dim(self) -> int:
        return self.latents.shape[1]
