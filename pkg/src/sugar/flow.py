"""Exhaustive block-matching optical flow on a torus.

Each block of the earlier frame is compared against every integer
displacement within the search radius in the later frame; the displacement
with the lowest sum of squared differences wins, with ties broken toward
the smallest magnitude (then lexicographic (dy, dx)), so a static scene
reports exactly zero flow. Displaced windows wrap around the frame edges,
which keeps the contract exact with no boundary special cases.
"""
from __future__ import annotations

import numpy as np


class FlowError(ValueError):
    """Input unsuitable for flow estimation."""


def _displacements(radius: int) -> list[tuple[int, int]]:
    cands = [(dy, dx) for dy in range(-radius, radius + 1) for dx in range(-radius, radius + 1)]
    cands.sort(key=lambda d: (d[0] * d[0] + d[1] * d[1], d))
    return cands


class BlockMatchingFlow:
    """Dense integer flow per block; block_size must tile the frame."""

    def __init__(self, block_size: int = 4, search_radius: int = 3):
        self.block_size = block_size
        self.search_radius = search_radius
        self._cands = _displacements(search_radius)

    def block_flow(self, prev: np.ndarray, nxt: np.ndarray) -> np.ndarray:
        """(gh, gw, 2) best (dy, dx) for each block of `prev` found in `nxt`."""
        if prev.shape != nxt.shape:
            raise FlowError(f"frame shapes differ: {prev.shape} vs {nxt.shape}")
        h, w = prev.shape[:2]
        bs = self.block_size
        if h % bs or w % bs:
            raise FlowError(f"block size {bs} does not tile {h}x{w}")
        gh, gw = h // bs, w // bs
        best_ssd = np.full((gh, gw), np.inf)
        best = np.zeros((gh, gw, 2), dtype=np.int64)
        for dy, dx in self._cands:
            shifted = np.roll(nxt, (-dy, -dx), axis=(0, 1))
            diff = prev - shifted
            if diff.ndim == 3:
                diff = (diff * diff).sum(axis=-1)
            else:
                diff = diff * diff
            ssd = diff.reshape(gh, bs, gw, bs).sum(axis=(1, 3))
            better = ssd < best_ssd - 1e-12
            best_ssd = np.where(better, ssd, best_ssd)
            best[better] = (dy, dx)
        return best

    def mean_magnitude(self, prev: np.ndarray, nxt: np.ndarray) -> float:
        """Mean flow-vector magnitude (px) over all blocks of one frame pair."""
        vec = self.block_flow(prev, nxt)
        return float(np.sqrt((vec.astype(np.float64) ** 2).sum(axis=-1)).mean())
