"""Event-based class-wise F1 with onset/offset collars.

A predicted event matches a reference event of the same class, in the same
clip, when its onset lies within the onset collar and its offset within
max(absolute offset collar, relative collar * reference duration). True
positives are counted by a maximum-cardinality one-to-one matching over the
compatible pairs, which is deterministic and order-independent.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field

from sedpipe.corpus import StrongEvent, Vocabulary


@dataclass(frozen=True)
class CollarSpec:
    onset_collar: float = 0.200
    offset_collar_abs: float = 0.200
    offset_collar_rel: float = 0.20

    def __post_init__(self):
        if min(self.onset_collar, self.offset_collar_abs, self.offset_collar_rel) < 0:
            raise ValueError("collars must be nonnegative")

    def compatible(self, ref: StrongEvent, est: StrongEvent) -> bool:
        offset_tol = max(
            self.offset_collar_abs, self.offset_collar_rel * (ref.offset - ref.onset)
        )
        return (
            abs(est.onset - ref.onset) <= self.onset_collar
            and abs(est.offset - ref.offset) <= offset_tol
        )


@dataclass
class ClassCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def __iadd__(self, other: "ClassCounts") -> "ClassCounts":
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn
        return self


def max_matching(compat: list[list[bool]]) -> int:
    """Maximum-cardinality bipartite matching size via augmenting paths."""
    n_ref = len(compat)
    n_est = len(compat[0]) if n_ref else 0
    match_of_est = [-1] * n_est

    def augment(r: int, visited: list[bool]) -> bool:
        for e in range(n_est):
            if compat[r][e] and not visited[e]:
                visited[e] = True
                if match_of_est[e] < 0 or augment(match_of_est[e], visited):
                    match_of_est[e] = r
                    return True
        return False

    size = 0
    for r in range(n_ref):
        if augment(r, [False] * n_est):
            size += 1
    return size


def match_events(
    refs: list[StrongEvent],
    ests: list[StrongEvent],
    collar: CollarSpec,
    n_classes: int,
) -> list[ClassCounts]:
    """Per-class tp/fp/fn counts; matching is within clip and class only."""
    by_key_ref: dict[tuple[str, int], list[StrongEvent]] = defaultdict(list)
    by_key_est: dict[tuple[str, int], list[StrongEvent]] = defaultdict(list)
    for ev in refs:
        by_key_ref[(ev.clip_id, ev.klass)].append(ev)
    for ev in ests:
        by_key_est[(ev.clip_id, ev.klass)].append(ev)

    counts = [ClassCounts() for _ in range(n_classes)]
    for key in sorted(set(by_key_ref) | set(by_key_est)):
        _, klass = key
        r_list = by_key_ref.get(key, [])
        e_list = by_key_est.get(key, [])
        compat = [[collar.compatible(r, e) for e in e_list] for r in r_list]
        tp = max_matching(compat) if r_list and e_list else 0
        counts[klass] += ClassCounts(
            tp=tp, fp=len(e_list) - tp, fn=len(r_list) - tp
        )
    return counts


def class_f1(counts: ClassCounts) -> tuple[float, float, float]:
    """(precision, recall, f1); each is 0 when its denominator is 0."""
    p = counts.tp / (counts.tp + counts.fp) if counts.tp + counts.fp else 0.0
    r = counts.tp / (counts.tp + counts.fn) if counts.tp + counts.fn else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f1


@dataclass
class EvalReport:
    """Per-class metrics plus the unweighted macro average."""

    vocab: Vocabulary
    counts: list[ClassCounts]
    precision: list[float] = field(default_factory=list)
    recall: list[float] = field(default_factory=list)
    f1: list[float] = field(default_factory=list)

    def __post_init__(self):
        if not self.f1:
            for c in self.counts:
                p, r, f1 = class_f1(c)
                self.precision.append(p)
                self.recall.append(r)
                self.f1.append(f1)

    @property
    def macro_f1(self) -> float:
        return sum(self.f1) / len(self.f1)

    @property
    def micro_counts(self) -> ClassCounts:
        total = ClassCounts()
        for c in self.counts:
            total += c
        return total

    def render(self) -> str:
        """Tab-separated table: class rows, then Average, then micro counts.

        Percentages are shown with one decimal.
        """
        lines = ["class\tprecision\trecall\tf1\ttp\tfp\tfn"]
        for i, name in enumerate(self.vocab.classes):
            c = self.counts[i]
            lines.append(
                f"{name}\t{100 * self.precision[i]:.1f}\t{100 * self.recall[i]:.1f}"
                f"\t{100 * self.f1[i]:.1f}\t{c.tp}\t{c.fp}\t{c.fn}"
            )
        n = len(self.f1)
        lines.append(
            f"Average\t{100 * sum(self.precision) / n:.1f}"
            f"\t{100 * sum(self.recall) / n:.1f}\t{100 * self.macro_f1:.1f}\t\t\t"
        )
        m = self.micro_counts
        lines.append(f"micro\t\t\t\t{m.tp}\t{m.fp}\t{m.fn}")
        return "\n".join(lines) + "\n"


def macro_report(f1_by_class: list[float], vocab: Vocabulary) -> str:
    """Render per-class F1 fractions as percentage rows plus the Average.

    The Average row is the unweighted arithmetic mean over classes.
    """
    if len(f1_by_class) != len(vocab):
        raise ValueError("one f1 value per vocabulary class required")
    lines = ["class\tf1"]
    for name, value in zip(vocab.classes, f1_by_class):
        lines.append(f"{name}\t{100 * value:.1f}")
    mean = sum(f1_by_class) / len(f1_by_class)
    lines.append(f"Average\t{100 * mean:.1f}")
    return "\n".join(lines) + "\n"


def evaluate_events(
    refs: list[StrongEvent],
    ests: list[StrongEvent],
    vocab: Vocabulary,
    collar: CollarSpec = CollarSpec(),
) -> EvalReport:
    counts = match_events(refs, ests, collar, len(vocab))
    return EvalReport(vocab, counts)
