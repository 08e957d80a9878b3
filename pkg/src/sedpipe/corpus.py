"""Label-file parsing, tagging-score files, and the binary posterior format.

File conventions follow the DCASE distribution style: UTF-8, tab separated,
one optional header line. All label and score indices resolve through a
:class:`Vocabulary` so that class order is fixed for a run.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Iterable

import numpy as np

DEFAULT_CLASSES = (
    "Alarm/bell",
    "Blender",
    "Cat",
    "Dishes",
    "Dog",
    "Electric shaver",
    "Frying",
    "Running water",
    "Speech",
    "Vacuum cleaner",
)

POSTERIOR_MAGIC = b"SEDP"
FEATURE_MAGIC = b"SEDF"
FORMAT_VERSION = 1

_U32_MAX = 2**32 - 1


class CorpusFormatError(ValueError):
    """Raised when a label, score, or posterior file violates its format."""


@dataclass(frozen=True)
class Vocabulary:
    """Ordered set of class names; index() and name() form a bijection."""

    classes: tuple[str, ...] = DEFAULT_CLASSES

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        if len(set(self.classes)) != len(self.classes):
            raise ValueError("class names must be unique")
        if not self.classes:
            raise ValueError("vocabulary must not be empty")
        object.__setattr__(self, "_index", {c: i for i, c in enumerate(self.classes)})

    def __len__(self) -> int:
        return len(self.classes)

    def index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise KeyError(f"unknown class name: {name!r}") from None

    def name(self, index: int) -> str:
        return self.classes[index]

    def __contains__(self, name: str) -> bool:
        return name in self._index


@dataclass(frozen=True)
class WeakLabel:
    """Clip-level presence annotation: which classes occur, no timing."""

    clip_id: str
    classes: frozenset[int]

    def __post_init__(self):
        object.__setattr__(self, "classes", frozenset(self.classes))


@dataclass(frozen=True)
class StrongEvent:
    """One timed event: [onset, offset) seconds of class `klass` in a clip."""

    clip_id: str
    onset: float
    offset: float
    klass: int

    def __post_init__(self):
        if not (0.0 <= self.onset < self.offset):
            raise ValueError(
                f"require 0 <= onset < offset, got ({self.onset}, {self.offset})"
            )


@dataclass
class TagScores:
    """Per-clip tagging-model output: one score in [0,1] per class."""

    clip_id: str
    scores: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.ndim != 1:
            raise ValueError("scores must be a vector")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError(f"non-finite score for clip {self.clip_id!r}")
        if np.any(self.scores < 0) or np.any(self.scores > 1):
            raise ValueError(f"scores outside [0,1] for clip {self.clip_id!r}")


@dataclass
class PosteriorGrid:
    """Frame-by-class probability matrix for one clip.

    Frame t covers the time span [t*clip_duration/T, (t+1)*clip_duration/T).
    Values are stored float32 so that file roundtrips are bit-exact.
    """

    clip_id: str
    clip_duration: float
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float32)
        if self.values.ndim != 2 or self.values.shape[0] < 1:
            raise ValueError("values must be a T x C matrix with T >= 1")
        if self.clip_duration <= 0:
            raise ValueError("clip_duration must be positive")
        if not np.all((self.values >= 0.0) & (self.values <= 1.0)):
            raise ValueError(f"posterior values outside [0,1] for {self.clip_id!r}")

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    @property
    def n_classes(self) -> int:
        return self.values.shape[1]

    @property
    def frame_duration(self) -> float:
        return self.clip_duration / self.n_frames

    def __eq__(self, other) -> bool:
        if not isinstance(other, PosteriorGrid):
            return NotImplemented
        return (
            self.clip_id == other.clip_id
            and self.clip_duration == other.clip_duration
            and self.values.shape == other.values.shape
            and bool(np.all(self.values == other.values))
        )


# ---------------------------------------------------------------------------
# text parsing helpers

def _is_number(token: str) -> bool:
    try:
        float(token)
    except ValueError:
        return False
    return True


def parse_weak_labels(text: str, vocab: Vocabulary) -> list[WeakLabel]:
    """Parse `clip_id<TAB>comma-separated-labels` lines.

    An empty label field means an empty class set. A single header line is
    tolerated when its first token is literally `filename`.
    """
    out: list[WeakLabel] = []
    seen: set[str] = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.rstrip("\n\r")
        if not line.strip():
            continue
        parts = line.split("\t")
        if lineno == 1 and parts[0].strip().lower() == "filename":
            continue
        if len(parts) == 1:
            # no tab at all: treat as clip with empty label set only if the
            # line ends where the label field would start
            raise CorpusFormatError(f"line {lineno}: expected clip_id<TAB>labels")
        clip_id = parts[0].strip()
        if not clip_id:
            raise CorpusFormatError(f"line {lineno}: empty clip_id")
        if clip_id in seen:
            raise CorpusFormatError(f"line {lineno}: duplicate clip_id {clip_id!r}")
        seen.add(clip_id)
        label_field = parts[1].strip()
        classes: set[int] = set()
        if label_field:
            for token in label_field.split(","):
                token = token.strip()
                if token not in vocab:
                    raise CorpusFormatError(
                        f"line {lineno}: unknown class {token!r}"
                    )
                classes.add(vocab.index(token))
        out.append(WeakLabel(clip_id, frozenset(classes)))
    return out


def parse_strong_labels(text: str, vocab: Vocabulary) -> list[StrongEvent]:
    """Parse `clip_id<TAB>onset<TAB>offset<TAB>label` lines, in file order.

    A header line is detected by a non-numeric onset field on line 1.
    """
    out: list[StrongEvent] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.rstrip("\n\r")
        if not line.strip():
            continue
        parts = [p.strip() for p in line.split("\t")]
        if len(parts) != 4:
            raise CorpusFormatError(
                f"line {lineno}: expected 4 tab-separated fields, got {len(parts)}"
            )
        if lineno == 1 and not _is_number(parts[1]):
            continue
        clip_id, onset_s, offset_s, label = parts
        if not _is_number(onset_s) or not _is_number(offset_s):
            raise CorpusFormatError(f"line {lineno}: non-numeric time field")
        onset, offset = float(onset_s), float(offset_s)
        if offset <= onset:
            raise CorpusFormatError(
                f"line {lineno}: offset before onset ({onset_s}, {offset_s})"
            )
        if onset < 0:
            raise CorpusFormatError(f"line {lineno}: negative onset")
        if label not in vocab:
            raise CorpusFormatError(f"line {lineno}: unknown class {label!r}")
        out.append(StrongEvent(clip_id, onset, offset, vocab.index(label)))
    return out


def parse_tag_scores(text: str, vocab: Vocabulary) -> list[TagScores]:
    """Parse a tag-score file: header row of class names, then
    `clip_id<TAB>s_1<TAB>...<TAB>s_C` rows with scores in [0,1].

    The header defines the column order; it must mention every vocabulary
    class exactly once. A leading non-class header cell (e.g. `filename`)
    names the clip-id column and is skipped.
    """
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        return []
    header = [p.strip() for p in lines[0].split("\t")]
    if header and header[0] not in vocab:
        header = header[1:]
    if sorted(header) != sorted(vocab.classes):
        raise CorpusFormatError(
            "tag-score header must list every vocabulary class exactly once"
        )
    col_to_class = [vocab.index(name) for name in header]

    out: list[TagScores] = []
    seen: set[str] = set()
    for lineno, raw in enumerate(lines[1:], start=2):
        parts = [p.strip() for p in raw.split("\t")]
        if len(parts) != len(vocab) + 1:
            raise CorpusFormatError(
                f"line {lineno}: expected clip_id plus {len(vocab)} scores"
            )
        clip_id = parts[0]
        if clip_id in seen:
            raise CorpusFormatError(f"line {lineno}: duplicate clip_id {clip_id!r}")
        seen.add(clip_id)
        scores = np.empty(len(vocab), dtype=np.float64)
        for col, token in enumerate(parts[1:]):
            if not _is_number(token):
                raise CorpusFormatError(f"line {lineno}: non-numeric score {token!r}")
            scores[col_to_class[col]] = float(token)
        try:
            out.append(TagScores(clip_id, scores))
        except ValueError as exc:
            raise CorpusFormatError(f"line {lineno}: {exc}") from None
    return out


def format_weak_labels(labels: Iterable[WeakLabel], vocab: Vocabulary) -> str:
    lines = ["filename\tevent_labels"]
    for lab in labels:
        names = ",".join(vocab.name(i) for i in sorted(lab.classes))
        lines.append(f"{lab.clip_id}\t{names}")
    return "\n".join(lines) + "\n"


def format_strong_labels(events: Iterable[StrongEvent], vocab: Vocabulary) -> str:
    lines = ["filename\tonset\toffset\tevent_label"]
    for ev in events:
        lines.append(
            f"{ev.clip_id}\t{ev.onset:.6f}\t{ev.offset:.6f}\t{vocab.name(ev.klass)}"
        )
    return "\n".join(lines) + "\n"


def format_tag_scores(scores: Iterable[TagScores], vocab: Vocabulary) -> str:
    lines = ["filename\t" + "\t".join(vocab.classes)]
    for ts in scores:
        lines.append(ts.clip_id + "\t" + "\t".join(f"{s:.6f}" for s in ts.scores))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# binary posterior container
#
# Little-endian layout: magic 'SEDP', u32 version=1, u32 clip_id length,
# UTF-8 clip_id, f64 clip_duration, u32 T, u32 C, then T*C float32 values
# in row-major (time-major) order.

def _read_exact(source: BinaryIO, n: int) -> bytes:
    data = source.read(n)
    if len(data) != n:
        raise CorpusFormatError("unexpected end of stream")
    return data


def write_posterior(grid: PosteriorGrid, sink: BinaryIO) -> None:
    cid = grid.clip_id.encode("utf-8")
    t, c = grid.values.shape
    if len(cid) > _U32_MAX or t > _U32_MAX or c > _U32_MAX:
        raise CorpusFormatError("dimension overflow")
    sink.write(POSTERIOR_MAGIC)
    sink.write(struct.pack("<I", FORMAT_VERSION))
    sink.write(struct.pack("<I", len(cid)))
    sink.write(cid)
    sink.write(struct.pack("<d", grid.clip_duration))
    sink.write(struct.pack("<II", t, c))
    sink.write(grid.values.astype("<f4", copy=False).tobytes(order="C"))


def read_posterior(source: BinaryIO) -> PosteriorGrid:
    magic = _read_exact(source, 4)
    if magic != POSTERIOR_MAGIC:
        raise CorpusFormatError(f"bad magic {magic!r}, expected {POSTERIOR_MAGIC!r}")
    (version,) = struct.unpack("<I", _read_exact(source, 4))
    if version != FORMAT_VERSION:
        raise CorpusFormatError(f"unsupported version {version}")
    (id_len,) = struct.unpack("<I", _read_exact(source, 4))
    clip_id = _read_exact(source, id_len).decode("utf-8")
    (duration,) = struct.unpack("<d", _read_exact(source, 8))
    t, c = struct.unpack("<II", _read_exact(source, 8))
    if t < 1 or c < 1 or t * c * 4 > 2**40:
        raise CorpusFormatError(f"implausible dimensions T={t} C={c}")
    raw = _read_exact(source, t * c * 4)
    values = np.frombuffer(raw, dtype="<f4").reshape(t, c)
    if not np.all((values >= 0.0) & (values <= 1.0)):
        raise CorpusFormatError("posterior values outside [0,1]")
    return PosteriorGrid(clip_id, duration, values)
