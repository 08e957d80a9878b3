"""Synthetic corpus generator: tone and noise-burst events with known
strong labels, so every pipeline stage can run without the real dataset.

Each vocabulary class gets a fixed spectral signature: most classes are
pure tones at geometrically spaced frequencies, a few are band-limited
noise bursts. Events ride on a quiet broadband noise floor.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from sedpipe.corpus import (
    StrongEvent,
    TagScores,
    Vocabulary,
    WeakLabel,
    format_strong_labels,
    format_tag_scores,
    format_weak_labels,
)

# class indices rendered as noise bursts instead of tones (defaults chosen
# for the 10-class vocabulary; harmless for smaller ones)
NOISE_CLASS_INDICES = frozenset({6, 9})


@dataclass(frozen=True)
class SynthConfig:
    sr: int = 22050
    clip_duration: float = 10.0
    n_clips: int = 20
    min_events: int = 1
    max_events: int = 2
    min_event_dur: float = 1.0
    max_event_dur: float = 2.5
    event_amplitude: float = 0.3
    noise_floor: float = 0.005
    min_onset_margin: float = 0.25
    base_freq: float = 250.0
    seed: int = 0


def class_frequency(klass: int, cfg: SynthConfig) -> float:
    """Geometric spacing keeps the signatures apart on the mel scale."""
    return cfg.base_freq * 2.0 ** (klass / 2.0)


def _tone(freq: float, n: int, sr: int) -> np.ndarray:
    return np.sin(2.0 * np.pi * freq * np.arange(n) / sr)


def _render_event(
    klass: int, n: int, sr: int, cfg: SynthConfig, rng: np.random.Generator
) -> np.ndarray:
    freq = class_frequency(klass, cfg)
    if klass in NOISE_CLASS_INDICES:
        noise = rng.standard_normal(n)
        spec = np.fft.rfft(noise)
        freqs = np.fft.rfftfreq(n, d=1.0 / sr)
        mask = (freqs >= freq / 1.3) & (freqs <= freq * 1.3)
        spec[~mask] = 0.0
        burst = np.fft.irfft(spec, n)
        peak = np.abs(burst).max()
        if peak > 0:
            burst = burst / peak
        sig = burst
    else:
        sig = _tone(freq, n, sr)
    # 10 ms raised-cosine ramps to avoid clicks
    ramp = min(int(0.010 * sr), n // 4)
    if ramp > 0:
        env = np.ones(n)
        ramp_curve = 0.5 * (1.0 - np.cos(np.pi * np.arange(ramp) / ramp))
        env[:ramp] = ramp_curve
        env[-ramp:] = ramp_curve[::-1]
        sig = sig * env
    return cfg.event_amplitude * sig


@dataclass
class SynthClip:
    clip_id: str
    wave: np.ndarray = field(repr=False)
    sr: int = 22050
    events: list[StrongEvent] = field(default_factory=list)

    @property
    def weak_label(self) -> WeakLabel:
        return WeakLabel(self.clip_id, frozenset(ev.klass for ev in self.events))


def generate_clip(
    clip_id: str, cfg: SynthConfig, vocab: Vocabulary, rng: np.random.Generator
) -> SynthClip:
    n = int(round(cfg.clip_duration * cfg.sr))
    wave = cfg.noise_floor * rng.standard_normal(n)
    n_events = int(rng.integers(cfg.min_events, cfg.max_events + 1))
    n_events = min(n_events, len(vocab))
    classes = rng.choice(len(vocab), size=n_events, replace=False)
    events: list[StrongEvent] = []
    for klass in sorted(int(c) for c in classes):
        dur = float(rng.uniform(cfg.min_event_dur, cfg.max_event_dur))
        dur = min(dur, cfg.clip_duration - 2 * cfg.min_onset_margin)
        latest = cfg.clip_duration - dur - cfg.min_onset_margin
        onset = float(rng.uniform(cfg.min_onset_margin, latest))
        start = int(round(onset * cfg.sr))
        length = int(round(dur * cfg.sr))
        length = min(length, n - start)
        wave[start : start + length] += _render_event(
            klass, length, cfg.sr, cfg, rng
        )
        events.append(
            StrongEvent(clip_id, start / cfg.sr, (start + length) / cfg.sr, klass)
        )
    return SynthClip(clip_id, wave, cfg.sr, events)


def generate_corpus(
    cfg: SynthConfig, vocab: Vocabulary, rng: np.random.Generator | None = None
) -> list[SynthClip]:
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    width = max(3, len(str(cfg.n_clips - 1)))
    return [
        generate_clip(f"clip_{i:0{width}d}.wav", cfg, vocab, rng)
        for i in range(cfg.n_clips)
    ]


def synth_tag_scores(
    clips: list[SynthClip],
    vocab: Vocabulary,
    rng: np.random.Generator,
    positive_mean: float = 0.95,
    negative_mean: float = 0.05,
    jitter: float = 0.04,
) -> list[TagScores]:
    """Mock tagging-model scores: high for true classes, low otherwise."""
    out = []
    for clip in clips:
        scores = np.clip(
            negative_mean + jitter * rng.standard_normal(len(vocab)), 0.0, 1.0
        )
        for klass in clip.weak_label.classes:
            scores[klass] = np.clip(
                positive_mean + jitter * rng.standard_normal(), 0.0, 1.0
            )
        out.append(TagScores(clip.clip_id, scores))
    return out


def write_corpus(
    clips: list[SynthClip],
    out_dir: str | Path,
    vocab: Vocabulary,
    scores: list[TagScores] | None = None,
) -> dict[str, Path]:
    """Write WAVs plus weak/strong label files; returns the written paths."""
    out_dir = Path(out_dir)
    audio_dir = out_dir / "audio"
    audio_dir.mkdir(parents=True, exist_ok=True)
    for clip in clips:
        pcm = np.clip(clip.wave, -1.0, 1.0)
        wavfile.write(
            str(audio_dir / clip.clip_id), clip.sr, (pcm * 32767.0).astype(np.int16)
        )
    paths = {
        "audio_dir": audio_dir,
        "weak": out_dir / "weak.tsv",
        "strong": out_dir / "strong.tsv",
    }
    paths["weak"].write_text(
        format_weak_labels([c.weak_label for c in clips], vocab), encoding="utf-8"
    )
    all_events = [ev for clip in clips for ev in clip.events]
    paths["strong"].write_text(
        format_strong_labels(all_events, vocab), encoding="utf-8"
    )
    if scores is not None:
        paths["scores"] = out_dir / "scores.tsv"
        paths["scores"].write_text(format_tag_scores(scores, vocab), encoding="utf-8")
    return paths
