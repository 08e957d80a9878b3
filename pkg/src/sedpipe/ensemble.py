"""Weighted-average fusion of posterior grids from multiple systems.

Grids for the same clip may differ in frame count (systems with different
time resolutions); each is resampled to the finest grid by linear
interpolation of frame-center values before averaging. Weights are
normalized to sum to one, so fusion is invariant to positive rescaling.
"""

from __future__ import annotations

import numpy as np

from sedpipe.corpus import PosteriorGrid


def resample_grid(values: np.ndarray, t_out: int) -> np.ndarray:
    """Linear interpolation of frame-center values onto t_out frames."""
    t_in = values.shape[0]
    if t_in == t_out:
        return values
    src = (np.arange(t_in) + 0.5) / t_in
    dst = (np.arange(t_out) + 0.5) / t_out
    out = np.empty((t_out, values.shape[1]), dtype=np.float64)
    for c in range(values.shape[1]):
        out[:, c] = np.interp(dst, src, values[:, c].astype(np.float64))
    return out


def fuse(grids: list[PosteriorGrid], weights=None) -> PosteriorGrid:
    """Weighted average of posteriors for one clip.

    weights defaults to uniform; entries must be nonnegative with a
    positive sum.
    """
    if not grids:
        raise ValueError("at least one grid required")
    first = grids[0]
    for g in grids[1:]:
        if g.clip_id != first.clip_id:
            raise ValueError(
                f"clip_id mismatch: {g.clip_id!r} vs {first.clip_id!r}"
            )
        if g.n_classes != first.n_classes:
            raise ValueError("class count mismatch between grids")
        if abs(g.clip_duration - first.clip_duration) > 1e-9:
            raise ValueError("clip_duration mismatch between grids")

    if weights is None:
        weights = np.ones(len(grids), dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (len(grids),):
        raise ValueError("one weight per grid required")
    if np.any(weights < 0):
        raise ValueError("weights must be nonnegative")
    total = weights.sum()
    if total <= 0:
        raise ValueError("weights must sum to a positive value")
    weights = weights / total

    t_star = max(g.n_frames for g in grids)
    fused = np.zeros((t_star, first.n_classes), dtype=np.float64)
    for g, w in zip(grids, weights):
        if w == 0.0:
            continue
        fused += w * resample_grid(g.values, t_star)
    fused = np.clip(fused, 0.0, 1.0)
    return PosteriorGrid(first.clip_id, first.clip_duration, fused)
