"""Per-class decoding-threshold search against a development set.

Event-based class-wise F1 decomposes over classes (matching is per clip
and per class), so each class's threshold is searched independently over a
candidate grid; ties break toward the smallest threshold. Classes with no
reference events fall back to 0.5 with a warning.
"""

from __future__ import annotations

import warnings

import numpy as np

from sedpipe.corpus import PosteriorGrid, StrongEvent
from sedpipe.decode import ClassThresholds, DecodeConfig, binary_runs, median_filter
from sedpipe.evaluation import ClassCounts, CollarSpec, class_f1, match_events

DEFAULT_GRID = tuple(round(0.05 * k, 2) for k in range(1, 20))


def _decode_one_class(
    grid: PosteriorGrid, klass: int, theta: float, cfg: DecodeConfig
) -> list[StrongEvent]:
    """Events of a single class, identical to decode_events restricted to it."""
    dt = grid.frame_duration
    mask = grid.values[:, klass] >= theta
    mask = median_filter(mask, cfg.median_window)
    runs = binary_runs(mask)
    if cfg.min_gap > 0 and len(runs) > 1:
        merged = [runs[0]]
        for start, end in runs[1:]:
            prev_start, prev_end = merged[-1]
            if (start - prev_end - 1) * dt < cfg.min_gap:
                merged[-1] = (prev_start, end)
            else:
                merged.append((start, end))
        runs = merged
    return [
        StrongEvent(grid.clip_id, start * dt, (end + 1) * dt, klass)
        for start, end in runs
        if (end - start + 1) * dt >= cfg.min_event_dur
    ]


def class_f1_at_threshold(
    grids: list[PosteriorGrid],
    refs: list[StrongEvent],
    klass: int,
    theta: float,
    cfg: DecodeConfig,
    collar: CollarSpec,
    n_classes: int,
) -> float:
    ests: list[StrongEvent] = []
    for grid in grids:
        ests.extend(_decode_one_class(grid, klass, theta, cfg))
    refs_c = [ev for ev in refs if ev.klass == klass]
    counts = match_events(refs_c, ests, collar, n_classes)
    return class_f1(counts[klass])[2]


def tune_thresholds(
    grids: list[PosteriorGrid],
    refs: list[StrongEvent],
    candidates: tuple[float, ...] = DEFAULT_GRID,
    cfg: DecodeConfig = DecodeConfig(),
    collar: CollarSpec = CollarSpec(),
    n_classes: int | None = None,
    default_theta: float = 0.5,
) -> ClassThresholds:
    """Per class, the grid value maximizing that class's event F1."""
    if not candidates:
        raise ValueError("candidate grid must be nonempty")
    if not all(0.0 < t < 1.0 for t in candidates):
        raise ValueError("candidate thresholds must lie in (0,1)")
    if not grids:
        raise ValueError("at least one posterior grid required")
    if n_classes is None:
        n_classes = grids[0].n_classes

    refs_per_class = np.zeros(n_classes, dtype=np.int64)
    for ev in refs:
        refs_per_class[ev.klass] += 1

    theta = []
    cand = sorted(candidates)
    for c in range(n_classes):
        if refs_per_class[c] == 0:
            warnings.warn(
                f"no reference events for class {c}; threshold defaults to "
                f"{default_theta}"
            )
            theta.append(default_theta)
            continue
        best_theta, best_f1 = cand[0], -1.0
        for t in cand:
            f1 = class_f1_at_threshold(grids, refs, c, t, cfg, collar, n_classes)
            if f1 > best_f1:
                best_theta, best_f1 = t, f1
        theta.append(best_theta)
    return ClassThresholds(tuple(theta))
