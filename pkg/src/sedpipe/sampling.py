"""Class-balanced epoch planning, loss re-weighting, and mixup.

The imbalance cap is enforced at epoch granularity: with m the size of the
smallest class, every class contributes min(n_c, cap*m) clip picks per
epoch, sampled without replacement from the clips containing it, so the
realized pick ratio between any two classes never exceeds the cap. A
multi-class clip counts toward each of its classes and may therefore appear
several times per epoch.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from sedpipe.corpus import WeakLabel


@dataclass(frozen=True)
class MixupConfig:
    alpha: float = 0.2
    enabled: bool = True

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("mixup alpha must be positive")


@dataclass
class EpochPlan:
    """Pick order for one epoch.

    order[i] is a dataset index; classes[i] is the class whose quota that
    pick was drawn for (used to audit the ratio cap).
    """

    order: list[int]
    classes: list[int]

    def __len__(self) -> int:
        return len(self.order)

    def class_pick_counts(self, n_classes: int) -> np.ndarray:
        counts = np.zeros(n_classes, dtype=np.int64)
        for c in self.classes:
            counts[c] += 1
        return counts


def class_clip_counts(labels: list[WeakLabel], n_classes: int) -> np.ndarray:
    """n_c = number of clips whose weak label contains class c."""
    counts = np.zeros(n_classes, dtype=np.int64)
    for lab in labels:
        for c in lab.classes:
            counts[c] += 1
    return counts


def plan_epoch(
    labels: list[WeakLabel],
    n_classes: int,
    cap: float = 6.0,
    rng_seed: int | np.random.Generator = 0,
) -> EpochPlan:
    """Build one epoch's class-balanced pick order.

    Classes absent from the dataset are skipped with a warning; the minimum
    class size is computed over the classes actually present.
    """
    if cap < 1:
        raise ValueError("cap must be >= 1")
    for lab in labels:
        if not lab.classes:
            raise ValueError(f"clip {lab.clip_id!r} has an empty class set")
    rng = (
        rng_seed
        if isinstance(rng_seed, np.random.Generator)
        else np.random.default_rng(rng_seed)
    )
    if not labels:
        warnings.warn("plan_epoch called with an empty dataset")
        return EpochPlan([], [])

    counts = class_clip_counts(labels, n_classes)
    present = np.flatnonzero(counts)
    absent = np.flatnonzero(counts == 0)
    if absent.size:
        warnings.warn(f"classes without clips skipped: {absent.tolist()}")
    m = int(counts[present].min())

    members: dict[int, list[int]] = {int(c): [] for c in present}
    for idx, lab in enumerate(labels):
        for c in lab.classes:
            members[c].append(idx)

    picks: list[tuple[int, int]] = []
    for c in present.tolist():
        quota = min(int(counts[c]), int(cap * m))
        chosen = rng.choice(len(members[c]), size=quota, replace=False)
        picks.extend((members[c][j], c) for j in chosen)

    perm = rng.permutation(len(picks))
    order = [picks[j][0] for j in perm]
    classes = [picks[j][1] for j in perm]
    return EpochPlan(order, classes)


def class_weights(labels: list[WeakLabel], n_classes: int) -> np.ndarray:
    """Inverse-frequency loss weights, normalized so a uniform dataset
    yields all ones: w_c = (sum_k n_k / C) / n_c over the present classes.

    Absent classes get weight 0 with a warning; they carry no signal.
    """
    counts = class_clip_counts(labels, n_classes)
    present = counts > 0
    if not present.any():
        raise ValueError("no class has any clip")
    if not present.all():
        warnings.warn(
            f"classes without clips get zero weight: {np.flatnonzero(~present).tolist()}"
        )
    weights = np.zeros(n_classes, dtype=np.float64)
    mean_count = counts[present].sum() / present.sum()
    weights[present] = mean_count / counts[present]
    return weights


def mixup(
    batch_x: list[np.ndarray],
    batch_y: list[np.ndarray],
    cfg: MixupConfig,
    rng: np.random.Generator,
    lam: float | None = None,
    partners: np.ndarray | None = None,
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Convex-combine each batch item with a random partner.

    One lambda ~ Beta(alpha, alpha) is drawn per pair; partners come from a
    random permutation of the batch. `lam` and `partners` override the draws
    (used by tests). lambda values of exactly 1 or 0 short-circuit to copies
    so the identity paths are bit-exact.
    """
    if len(batch_x) != len(batch_y):
        raise ValueError("batch_x and batch_y must have equal length")
    n = len(batch_x)
    if n == 0:
        return [], []
    shape = batch_x[0].shape
    ylen = len(batch_y[0])
    for x, y in zip(batch_x, batch_y):
        if x.shape != shape:
            raise ValueError(f"feature shape mismatch: {x.shape} vs {shape}")
        if len(y) != ylen:
            raise ValueError("target length mismatch")

    if partners is None:
        partners = rng.permutation(n)
    lams = np.full(n, lam, dtype=np.float64) if lam is not None else rng.beta(
        cfg.alpha, cfg.alpha, size=n
    )

    mixed_x: list[np.ndarray] = []
    mixed_y: list[np.ndarray] = []
    for i in range(n):
        j = int(partners[i])
        lam_i = float(lams[i])
        if lam_i == 1.0:
            mixed_x.append(batch_x[i].copy())
            mixed_y.append(np.asarray(batch_y[i], dtype=np.float64).copy())
        elif lam_i == 0.0:
            mixed_x.append(batch_x[j].copy())
            mixed_y.append(np.asarray(batch_y[j], dtype=np.float64).copy())
        else:
            mixed_x.append(lam_i * batch_x[i] + (1.0 - lam_i) * batch_x[j])
            mixed_y.append(
                lam_i * np.asarray(batch_y[i], dtype=np.float64)
                + (1.0 - lam_i) * np.asarray(batch_y[j], dtype=np.float64)
            )
    return mixed_x, mixed_y
