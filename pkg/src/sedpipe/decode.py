"""Posterior-grid decoding into timed events.

Per class: binarize at the class threshold, optionally median-filter,
merge sub-gap holes, drop sub-duration runs, and map the surviving frame
runs [t0, t1] to events [t0*dt, (t1+1)*dt) with dt = clip_duration / T.
Filtering and pruning default to off.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from sedpipe.corpus import PosteriorGrid, StrongEvent


@dataclass(frozen=True)
class ClassThresholds:
    theta: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "theta", tuple(float(t) for t in self.theta))
        if not all(0.0 < t < 1.0 for t in self.theta):
            raise ValueError("thresholds must lie in (0,1)")

    @classmethod
    def uniform(cls, value: float, n_classes: int) -> "ClassThresholds":
        return cls((value,) * n_classes)

    def __len__(self) -> int:
        return len(self.theta)


@dataclass(frozen=True)
class DecodeConfig:
    median_window: int = 1
    min_event_dur: float = 0.0
    min_gap: float = 0.0

    def __post_init__(self):
        if self.median_window < 1 or self.median_window % 2 == 0:
            raise ValueError("median_window must be odd and >= 1")
        if self.min_event_dur < 0 or self.min_gap < 0:
            raise ValueError("durations must be nonnegative")


def median_filter(mask: np.ndarray, window: int) -> np.ndarray:
    """Boolean majority filter; the window shrinks at the edges."""
    if window % 2 == 0:
        raise ValueError("median window must be odd")
    mask = np.asarray(mask, dtype=bool)
    if window == 1 or mask.size == 0:
        return mask.copy()
    half = window // 2
    n = mask.size
    out = np.empty(n, dtype=bool)
    for t in range(n):
        lo = max(0, t - half)
        hi = min(n, t + half + 1)
        votes = int(mask[lo:hi].sum())
        out[t] = votes * 2 > (hi - lo)
    return out


def binary_runs(mask: np.ndarray) -> list[tuple[int, int]]:
    """Inclusive (start, end) frame indices of the True runs in a mask."""
    runs: list[tuple[int, int]] = []
    start = None
    for t, on in enumerate(mask):
        if on and start is None:
            start = t
        elif not on and start is not None:
            runs.append((start, t - 1))
            start = None
    if start is not None:
        runs.append((start, len(mask) - 1))
    return runs


def decode_events(
    grid: PosteriorGrid,
    theta: ClassThresholds,
    cfg: DecodeConfig = DecodeConfig(),
) -> list[StrongEvent]:
    """Threshold, smooth, and merge one clip's posteriors into events.

    Events are returned class by class, sorted by onset within each class.
    """
    if len(theta) != grid.n_classes:
        raise ValueError(
            f"threshold count {len(theta)} != class count {grid.n_classes}"
        )
    dt = grid.frame_duration
    events: list[StrongEvent] = []
    for c in range(grid.n_classes):
        mask = grid.values[:, c] >= theta.theta[c]
        mask = median_filter(mask, cfg.median_window)
        runs = binary_runs(mask)
        if cfg.min_gap > 0 and len(runs) > 1:
            merged = [runs[0]]
            for start, end in runs[1:]:
                prev_start, prev_end = merged[-1]
                gap = (start - prev_end - 1) * dt
                if gap < cfg.min_gap:
                    merged[-1] = (prev_start, end)
                else:
                    merged.append((start, end))
            runs = merged
        for start, end in runs:
            if (end - start + 1) * dt < cfg.min_event_dur:
                continue
            events.append(
                StrongEvent(grid.clip_id, start * dt, (end + 1) * dt, c)
            )
    return events
