"""Candidate NFoV features: glimpses on a feature map, or pixel-space crops."""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

from .autodiff import Tensor, ops
from .geometry import CandidateGrid, extract_nfov, sampling_taps


class GlimpseSampler:
    """Fixed linear operator from an (n, h, w, d) feature map to candidate features.

    Each candidate is a g x g perspective grid at feature-map resolution,
    bilinearly sampled with longitude wrap. Samples sit at the centres of a
    g x g partition of the view, so every sample lies inside the frustum. ``pool="mean"`` averages the g*g
    samples into one d-vector; ``pool="flatten"`` concatenates them
    (g*g*d per candidate).
    """

    def __init__(self, grid: CandidateGrid, h: int, w: int, g: int = 4, pool: str = "mean"):
        if g < 1:
            raise ValueError(f"glimpse resolution must be >= 1, got {g}")
        if pool not in ("mean", "flatten"):
            raise ValueError(f"unknown pool {pool!r}")
        self.grid, self.h, self.w, self.g, self.pool = grid, h, w, g, pool
        idx, wts = [], []
        for cam in grid:
            taps = sampling_taps(cam, w, h, out_w=g, out_h=g, cells=True)
            idx.append(taps.flat_index())  # (g*g, 4)
            wts.append(taps.weights())
        idx = np.stack(idx)  # (N, g*g, 4)
        wts = np.stack(wts)
        n = len(grid)
        if pool == "mean":
            self.index = idx.reshape(n, -1)
            self.weight = wts.reshape(n, -1) / (g * g)
        else:
            self.index = idx.reshape(n * g * g, 4)
            self.weight = wts.reshape(n * g * g, 4)

    @property
    def out_dim_factor(self) -> int:
        return 1 if self.pool == "mean" else self.g * self.g

    def __call__(self, fmap: Tensor) -> Tensor:
        n, h, w, d = fmap.shape
        if (h, w) != (self.h, self.w):
            raise ValueError(f"sampler built for {self.h}x{self.w} maps, got {h}x{w}")
        flat = ops.reshape(fmap, (n, h * w, d))
        out = ops.gather_mix(flat, self.index, self.weight)
        if self.pool == "flatten":
            out = ops.reshape(out, (n, len(self.grid), self.g * self.g * d))
        return out


_samplers: dict[tuple, GlimpseSampler] = {}


def glimpse_features(fmap: Tensor, grid: CandidateGrid, g: int = 4, pool: str = "mean") -> Tensor:
    """Candidate features (n, N, d) sampled directly from the feature map."""
    if not isinstance(fmap, Tensor):
        fmap = Tensor(fmap)
    squeeze = fmap.ndim == 3
    if squeeze:
        fmap = ops.reshape(fmap, (1,) + fmap.shape)
    key = (id(grid), fmap.shape[1], fmap.shape[2], g, pool)
    sampler = _samplers.get(key)
    if sampler is None or sampler.grid is not grid:
        sampler = _samplers[key] = GlimpseSampler(grid, fmap.shape[1], fmap.shape[2], g, pool)
    out = sampler(fmap)
    return ops.reshape(out, out.shape[1:]) if squeeze else out


def nfov_raster_size(W: int, hfov: float, aspect: float = 0.75) -> tuple[int, int]:
    """Output size matching the panorama's angular pixel density at the view centre."""
    out_w = max(1, int(round(W * math.tan(math.radians(hfov) / 2.0) / math.pi)))
    return out_w, max(1, int(round(out_w * aspect)))


def extract_candidates(pano: np.ndarray, grid: CandidateGrid) -> np.ndarray:
    """All candidate rasters stacked as (N, out_h, out_w, C)."""
    return np.stack([extract_nfov(pano, cam) for cam in grid])


def pixel_space_features(pano: np.ndarray, grid: CandidateGrid, encoder: Callable[[np.ndarray], Tensor]) -> Tensor:
    """Extract every candidate NFoV at pixel level and encode each one.

    ``encoder`` maps an (N, out_h, out_w, C) batch of rasters to an (N, d)
    Tensor. Returns (N, d).
    """
    return encoder(extract_candidates(pano, grid))
