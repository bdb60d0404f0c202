"""Log-mel spectrogram (LMS) feature extraction and standardization.

Reference configuration: 16 kHz mono PCM, 40 ms Hann window every 20 ms,
64 mel bands spanning 0 Hz to Nyquist on the HTK mel scale
(m = 2595*log10(1 + f/700)). Feature matrices are frames-by-bands (T x D).

File formats (little-endian):
  LMSF  magic "LMSF", u32 version=1, u32 T, u32 D, T*D float32 row-major
  LMST  magic "LMST", u32 version=1, u32 D, D float32 means, D float32 stds
"""

from __future__ import annotations

import wave
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .binio import read_f32_array, read_magic, read_u32, write_f32_array, write_magic, write_u32

LMSF_MAGIC = b"LMSF"
LMST_MAGIC = b"LMST"

ENERGY_FLOOR = 1e-10
STD_FLOOR = 1e-5


class InvalidParam(ValueError):
    """Non-positive window/hop/band count, or window shorter than hop."""


class ClipTooShort(ValueError):
    """Clip has fewer samples than one analysis window."""


class EmptyCollection(ValueError):
    """Statistics requested over an empty feature collection."""


class DimensionMismatch(ValueError):
    """Feature dimension does not match the statistics dimension."""


@dataclass(frozen=True)
class AudioClip:
    """Mono audio: amplitudes in [-1, 1] and the sample rate in Hz."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise InvalidParam("clip samples must be a non-empty 1-D array")
        if self.sample_rate < 8000:
            raise InvalidParam(f"sample_rate {self.sample_rate} below 8000 Hz")


@dataclass(frozen=True)
class FeatureStats:
    """Per-band mean and standard deviation pooled over a training set."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        if self.mean.shape != self.std.shape or self.mean.ndim != 1:
            raise DimensionMismatch("mean and std must be 1-D vectors of equal length")
        if not np.all(self.std > 0):
            raise InvalidParam("std entries must be positive")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def load_wav(path) -> AudioClip:
    """Read a 16-bit PCM WAV file; stereo is averaged down to mono."""
    with wave.open(str(path), "rb") as wf:
        if wf.getsampwidth() != 2:
            raise InvalidParam(f"{path}: only 16-bit PCM supported, got {8 * wf.getsampwidth()}-bit")
        n_channels = wf.getnchannels()
        rate = wf.getframerate()
        raw = wf.readframes(wf.getnframes())
    pcm = np.frombuffer(raw, dtype="<i2").astype(np.float64)
    if n_channels > 1:
        pcm = pcm.reshape(-1, n_channels).mean(axis=1)
    return AudioClip(samples=pcm / 32768.0, sample_rate=rate)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int) -> np.ndarray:
    """Triangular mel filters from 0 Hz to Nyquist, sampled at rfft bin centers.

    Returns an (n_mels, n_fft//2 + 1) weight matrix.
    """
    nyquist = sample_rate / 2.0
    mel_points = np.linspace(hz_to_mel(0.0), hz_to_mel(nyquist), n_mels + 2)
    hz_points = mel_to_hz(mel_points)
    bin_freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft

    fb = np.zeros((n_mels, n_fft // 2 + 1))
    for m in range(n_mels):
        left, center, right = hz_points[m], hz_points[m + 1], hz_points[m + 2]
        rising = (bin_freqs - left) / max(center - left, 1e-12)
        falling = (right - bin_freqs) / max(right - center, 1e-12)
        fb[m] = np.maximum(0.0, np.minimum(rising, falling))
    return fb


def _next_pow2(n: int) -> int:
    p = 1
    while p < n:
        p *= 2
    return p


def extract_lms(clip: AudioClip, window_ms: float = 40.0, hop_ms: float = 20.0,
                n_mels: int = 64) -> np.ndarray:
    """Extract a T x n_mels log-mel spectrogram from one clip.

    T = 1 + floor((N - window_len) / hop_len); energies are floored at
    ENERGY_FLOOR before the natural log. Returns float32.
    """
    if window_ms <= 0 or hop_ms <= 0 or n_mels <= 0:
        raise InvalidParam("window_ms, hop_ms and n_mels must all be positive")
    if window_ms < hop_ms:
        raise InvalidParam("window_ms must be >= hop_ms")

    win_len = int(round(clip.sample_rate * window_ms / 1000.0))
    hop_len = int(round(clip.sample_rate * hop_ms / 1000.0))
    n = clip.samples.shape[0]
    if n < win_len:
        raise ClipTooShort(f"clip of {n} samples shorter than one {win_len}-sample window")

    n_frames = 1 + (n - win_len) // hop_len
    starts = np.arange(n_frames) * hop_len
    frames = np.stack([clip.samples[s:s + win_len] for s in starts]).astype(np.float64)
    frames *= np.hanning(win_len)

    n_fft = _next_pow2(win_len)
    power = np.abs(np.fft.rfft(frames, n_fft, axis=1)) ** 2
    fb = mel_filterbank(n_mels, n_fft, clip.sample_rate)
    energies = power @ fb.T
    return np.log(np.maximum(energies, ENERGY_FLOOR)).astype(np.float32)


def compute_stats(features: Iterable[np.ndarray]) -> FeatureStats:
    """Pool all frames of all matrices and compute per-band mean/std.

    Population variance; std floored at STD_FLOOR.
    """
    mats = [np.asarray(f, dtype=np.float64) for f in features]
    if not mats:
        raise EmptyCollection("no feature matrices given")
    dim = mats[0].shape[1]
    for f in mats:
        if f.ndim != 2 or f.shape[1] != dim:
            raise DimensionMismatch("all feature matrices must share one band count")
    pooled = np.concatenate(mats, axis=0)
    mean = pooled.mean(axis=0)
    std = np.sqrt(np.mean((pooled - mean) ** 2, axis=0))
    return FeatureStats(mean=mean, std=np.maximum(std, STD_FLOOR))


def standardize(f: np.ndarray, stats: FeatureStats) -> np.ndarray:
    """Per-band centering and scaling: (f - mean) / std."""
    f = np.asarray(f)
    if f.ndim != 2 or f.shape[1] != stats.dim:
        raise DimensionMismatch(f"feature dim {f.shape} vs stats dim {stats.dim}")
    return (f - stats.mean) / stats.std


def write_features(f: np.ndarray, path) -> None:
    f = np.asarray(f)
    if f.ndim != 2 or f.shape[0] < 1 or f.shape[1] < 1:
        raise InvalidParam("feature matrix must be 2-D and non-empty")
    with open(path, "wb") as fh:
        write_magic(fh, LMSF_MAGIC)
        write_u32(fh, f.shape[0])
        write_u32(fh, f.shape[1])
        write_f32_array(fh, f)


def read_features(path) -> np.ndarray:
    with open(path, "rb") as fh:
        read_magic(fh, LMSF_MAGIC)
        t = read_u32(fh)
        d = read_u32(fh)
        data = read_f32_array(fh, t * d)
    return data.reshape(t, d)


def write_stats(stats: FeatureStats, path) -> None:
    with open(path, "wb") as fh:
        write_magic(fh, LMST_MAGIC)
        write_u32(fh, stats.dim)
        write_f32_array(fh, stats.mean)
        write_f32_array(fh, stats.std)


def read_stats(path) -> FeatureStats:
    with open(path, "rb") as fh:
        read_magic(fh, LMST_MAGIC)
        d = read_u32(fh)
        mean = read_f32_array(fh, d)
        std = read_f32_array(fh, d)
    return FeatureStats(mean=mean.astype(np.float64), std=std.astype(np.float64))
