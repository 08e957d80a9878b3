"""3-channel log-mel / delta / delta-delta feature extraction.

Waveforms are resampled to 22.05 kHz, framed with a 2048-sample Hann window
every 684 samples, pooled through a 128-band triangular mel filterbank, and
log-compressed. First and second order regression deltas are stacked on top
as channels 1 and 2.

Conventions chosen here (and kept fixed for reproducibility): the
2595*log10(1 + f/700) mel scale, area-normalized filter triangles, natural
log with an additive floor, no frame centering, and edge-replicated deltas.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

from sedpipe.corpus import FEATURE_MAGIC, FORMAT_VERSION, CorpusFormatError, _read_exact

_U32_MAX = 2**32 - 1


@dataclass(frozen=True)
class FeatureConfig:
    target_sr: int = 22050
    n_fft: int = 2048
    hop: int = 684
    n_mels: int = 128
    fmin: float = 0.0
    fmax: float | None = None  # None = target_sr / 2
    log_floor: float = 1e-10
    delta_window: int = 2

    def __post_init__(self):
        if self.hop > self.n_fft:
            raise ValueError("hop must not exceed n_fft")
        if self.n_mels < 1:
            raise ValueError("n_mels must be >= 1")
        fmax = self.resolved_fmax
        if not (0 <= self.fmin < fmax <= self.target_sr / 2):
            raise ValueError("require 0 <= fmin < fmax <= target_sr/2")
        if self.log_floor <= 0:
            raise ValueError("log_floor must be positive")
        if self.delta_window < 1:
            raise ValueError("delta_window must be >= 1")

    @property
    def resolved_fmax(self) -> float:
        return self.target_sr / 2 if self.fmax is None else self.fmax


@dataclass
class FeatureTensor:
    """Stacked (log-mel, delta, delta-delta) features for one clip.

    values has shape (3, T, F) and dtype float32. clip_duration is the
    decoded audio length in seconds; downstream timing is derived from it.
    """

    clip_id: str
    values: np.ndarray = field(repr=False)
    clip_duration: float = 0.0

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float32)
        if self.values.ndim != 3:
            raise ValueError("values must have shape (channels, T, F)")
        if not np.all(np.isfinite(self.values)):
            raise ValueError(f"non-finite feature values for {self.clip_id!r}")

    @property
    def n_channels(self) -> int:
        return self.values.shape[0]

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]

    @property
    def n_bands(self) -> int:
        return self.values.shape[2]


def resample(signal: np.ndarray, sr_in: int, sr_out: int) -> np.ndarray:
    """Band-limited (polyphase windowed-sinc) resampling.

    Output length is round(len * sr_out / sr_in); scipy's polyphase result
    is trimmed or zero-padded by at most one sample to honor that.
    """
    if sr_in <= 0 or sr_out <= 0:
        raise ValueError("sample rates must be positive")
    signal = np.asarray(signal, dtype=np.float64)
    if signal.ndim != 1:
        raise ValueError("signal must be mono (1-D)")
    if signal.size == 0:
        return signal.copy()
    if not np.all(np.isfinite(signal)):
        raise ValueError("signal contains non-finite samples")
    if sr_in == sr_out:
        return signal.copy()
    g = math.gcd(sr_in, sr_out)
    out = resample_poly(signal, sr_out // g, sr_in // g)
    n_target = int(round(signal.size * sr_out / sr_in))
    if out.size > n_target:
        out = out[:n_target]
    elif out.size < n_target:
        out = np.pad(out, (0, n_target - out.size))
    return out


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(sr: int, n_fft: int, n_mels: int, fmin: float, fmax: float) -> np.ndarray:
    """Triangular mel filterbank, (n_mels, n_fft//2 + 1), area-normalized.

    Triangle m spans [edge_m, edge_{m+2}] with peak at edge_{m+1}, edges
    equally spaced on the mel scale; each triangle is scaled by
    2 / (upper - lower) Hz so it integrates to roughly unit area.
    """
    edges_hz = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    fft_freqs = np.fft.rfftfreq(n_fft, d=1.0 / sr)
    weights = np.zeros((n_mels, fft_freqs.size), dtype=np.float64)
    for m in range(n_mels):
        lower, center, upper = edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]
        up = (fft_freqs - lower) / (center - lower)
        down = (upper - fft_freqs) / (upper - center)
        tri = np.maximum(0.0, np.minimum(up, down))
        weights[m] = tri * (2.0 / (upper - lower))
    return weights


def frame_count(n_samples: int, cfg: FeatureConfig) -> int:
    """T = 1 + floor((len - n_fft) / hop); signals shorter than one window
    are zero-padded to exactly one frame."""
    if n_samples < cfg.n_fft:
        return 1
    return 1 + (n_samples - cfg.n_fft) // cfg.hop


def logmel(signal: np.ndarray, cfg: FeatureConfig) -> np.ndarray:
    """Log-mel energy matrix (T, n_mels) of a mono signal at cfg.target_sr.

    Per frame: Hann window, power spectrum, mel filterbank, then
    ln(energy + log_floor). No centering; frames start at t*hop.
    """
    signal = np.asarray(signal, dtype=np.float64)
    if signal.ndim != 1:
        raise ValueError("signal must be mono (1-D)")
    if not np.all(np.isfinite(signal)):
        raise ValueError("signal contains non-finite samples")
    if signal.size < cfg.n_fft:
        signal = np.pad(signal, (0, cfg.n_fft - signal.size))
    n_frames = frame_count(signal.size, cfg)
    window = np.hanning(cfg.n_fft)
    fbank = mel_filterbank(
        cfg.target_sr, cfg.n_fft, cfg.n_mels, cfg.fmin, cfg.resolved_fmax
    )
    idx = np.arange(cfg.n_fft)[None, :] + cfg.hop * np.arange(n_frames)[:, None]
    frames = signal[idx] * window[None, :]
    power = np.abs(np.fft.rfft(frames, axis=1)) ** 2
    mel_energy = power @ fbank.T
    return np.log(mel_energy + cfg.log_floor)


def delta(matrix: np.ndarray, n: int = 2) -> np.ndarray:
    """Regression delta with half-width n and edge-replicated frames:

        d_t = sum_{k=1..n} k * (M[t+k] - M[t-k]) / (2 * sum_{k} k^2)
    """
    if n < 1:
        raise ValueError("delta half-width must be >= 1")
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[0] < 1:
        raise ValueError("matrix must be (T, F) with T >= 1")
    padded = np.pad(matrix, ((n, n), (0, 0)), mode="edge")
    denom = 2.0 * sum(k * k for k in range(1, n + 1))
    t = matrix.shape[0]
    out = np.zeros_like(matrix)
    for k in range(1, n + 1):
        out += k * (padded[n + k : n + k + t] - padded[n - k : n - k + t])
    return out / denom


def featurize_signal(
    signal: np.ndarray, sr: int, cfg: FeatureConfig, clip_id: str = ""
) -> FeatureTensor:
    """Resample, extract log-mel, stack first and second order deltas."""
    duration = len(signal) / sr
    wave = resample(signal, sr, cfg.target_sr)
    base = logmel(wave, cfg)
    d1 = delta(base, cfg.delta_window)
    d2 = delta(d1, cfg.delta_window)
    values = np.stack([base, d1, d2]).astype(np.float32)
    return FeatureTensor(clip_id, values, clip_duration=duration)


def load_wav(path: str | Path) -> tuple[np.ndarray, int]:
    """Read a 16/24/32-bit or float PCM WAV as mono float64 in [-1, 1].

    Multi-channel audio is downmixed by averaging.
    """
    path = Path(path)
    try:
        sr, data = wavfile.read(str(path))
    except (ValueError, OSError) as exc:
        raise CorpusFormatError(f"cannot decode audio {path}: {exc}") from exc
    data = np.asarray(data)
    if data.ndim == 2:
        data = data.mean(axis=1)
    if data.dtype == np.int16:
        wave = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        # scipy left-justifies 24-bit samples into int32
        wave = data.astype(np.float64) / 2147483648.0
    elif data.dtype == np.uint8:
        wave = (data.astype(np.float64) - 128.0) / 128.0
    elif data.dtype in (np.float32, np.float64):
        wave = data.astype(np.float64)
    else:
        raise CorpusFormatError(f"unsupported WAV sample format {data.dtype} in {path}")
    return wave, int(sr)


def featurize_clip(path: str | Path, cfg: FeatureConfig) -> FeatureTensor:
    """Decode one WAV file and extract its 3-channel feature tensor."""
    wave, sr = load_wav(path)
    return featurize_signal(wave, sr, cfg, clip_id=Path(path).name)


# ---------------------------------------------------------------------------
# binary feature container (same framing as the posterior file, magic 'SEDF',
# dims are channels/T/F and the payload is channel-major float32)

def write_feature(tensor: FeatureTensor, sink: BinaryIO) -> None:
    cid = tensor.clip_id.encode("utf-8")
    ch, t, f = tensor.values.shape
    if len(cid) > _U32_MAX or max(ch, t, f) > _U32_MAX:
        raise CorpusFormatError("dimension overflow")
    sink.write(FEATURE_MAGIC)
    sink.write(struct.pack("<I", FORMAT_VERSION))
    sink.write(struct.pack("<I", len(cid)))
    sink.write(cid)
    sink.write(struct.pack("<d", tensor.clip_duration))
    sink.write(struct.pack("<III", ch, t, f))
    sink.write(tensor.values.astype("<f4", copy=False).tobytes(order="C"))


def read_feature(source: BinaryIO) -> FeatureTensor:
    magic = _read_exact(source, 4)
    if magic != FEATURE_MAGIC:
        raise CorpusFormatError(f"bad magic {magic!r}, expected {FEATURE_MAGIC!r}")
    (version,) = struct.unpack("<I", _read_exact(source, 4))
    if version != FORMAT_VERSION:
        raise CorpusFormatError(f"unsupported version {version}")
    (id_len,) = struct.unpack("<I", _read_exact(source, 4))
    clip_id = _read_exact(source, id_len).decode("utf-8")
    (duration,) = struct.unpack("<d", _read_exact(source, 8))
    ch, t, f = struct.unpack("<III", _read_exact(source, 12))
    if ch < 1 or t < 1 or f < 1 or ch * t * f * 4 > 2**40:
        raise CorpusFormatError(f"implausible dimensions ({ch}, {t}, {f})")
    raw = _read_exact(source, ch * t * f * 4)
    values = np.frombuffer(raw, dtype="<f4").reshape(ch, t, f)
    return FeatureTensor(clip_id, values, clip_duration=duration)
