"""Tiered pseudo-labeling of unlabeled clips from tagging scores.

Three nested confidence thresholds admit 1-, 2-, and 3-class weak labels:
the top-scoring class must clear t1 for the clip to be kept at all, the
second class is added only when the first was and its score clears t2, the
third only when the second was added and its score clears t3. Clips whose
top score falls below t1 are dropped entirely.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from sedpipe.corpus import TagScores, Vocabulary, WeakLabel


@dataclass(frozen=True)
class TierThresholds:
    """Confidence cutoffs (t1, t2, t3) for 1-, 2-, 3-class pseudo-labels."""

    t1: float = 0.99
    t2: float = 0.47
    t3: float = 0.28

    def __post_init__(self):
        if not (1.0 >= self.t1 >= self.t2 >= self.t3 >= 0.0):
            raise ValueError(
                f"require 1 >= t1 >= t2 >= t3 >= 0, got "
                f"({self.t1}, {self.t2}, {self.t3})"
            )


@dataclass
class LabelDistribution:
    """Tally of weak labels by class-set size, one row of the usual table."""

    total: int = 0
    one_type: int = 0
    two_type: int = 0
    three_type: int = 0
    four_plus: int = 0
    none: int = 0

    def add(self, n_classes: int) -> None:
        self.total += 1
        if n_classes == 0:
            self.none += 1
        elif n_classes == 1:
            self.one_type += 1
        elif n_classes == 2:
            self.two_type += 1
        elif n_classes == 3:
            self.three_type += 1
        else:
            self.four_plus += 1

    def as_row(self, name: str) -> str:
        return (
            f"{name}\t{self.total}\t{self.one_type}\t{self.two_type}"
            f"\t{self.three_type}\t{self.four_plus}\t{self.none}"
        )

    @staticmethod
    def header() -> str:
        return "dataset\ttotal\t1-type\t2-type\t3-type\t4-type\tnone"


def assign_weak_label(
    scores: TagScores, th: TierThresholds, vocab: Vocabulary
) -> frozenset[int] | None:
    """Predicted class set for one clip, or None when the clip is dropped.

    Score ties rank the lower class index first, keeping the result
    deterministic.
    """
    s = scores.scores
    if s.shape[0] != len(vocab):
        raise ValueError(
            f"score vector length {s.shape[0]} != vocabulary size {len(vocab)}"
        )
    order = np.argsort(-s, kind="stable")
    if s[order[0]] < th.t1:
        return None
    label = {int(order[0])}
    if len(order) >= 2 and s[order[1]] >= th.t2:
        label.add(int(order[1]))
        if len(order) >= 3 and s[order[2]] >= th.t3:
            label.add(int(order[2]))
    return frozenset(label)


def build_extended_dataset(
    weak: list[WeakLabel],
    unlabeled: list[TagScores],
    th: TierThresholds,
    vocab: Vocabulary,
) -> tuple[list[WeakLabel], LabelDistribution]:
    """Original weak labels plus accepted pseudo-labels, with the tally.

    Dropped clips are excluded from both the label list and the tally.
    """
    seen: set[str] = set()
    for lab in weak:
        if lab.clip_id in seen:
            raise ValueError(f"duplicate clip_id {lab.clip_id!r} in weak labels")
        seen.add(lab.clip_id)

    combined = list(weak)
    for ts in unlabeled:
        if ts.clip_id in seen:
            raise ValueError(
                f"clip_id {ts.clip_id!r} occurs in both weak and unlabeled inputs"
            )
        seen.add(ts.clip_id)
        label = assign_weak_label(ts, th, vocab)
        if label is not None:
            combined.append(WeakLabel(ts.clip_id, label))

    dist = LabelDistribution()
    for lab in combined:
        dist.add(len(lab.classes))
    return combined, dist
