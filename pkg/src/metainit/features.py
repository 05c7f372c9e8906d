"""Log-mel filterbank front end, frame stacking, and the binary feature file format."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

FLOOR_EPS = 1e-10
PREEMPHASIS = 0.97
FEATURE_MAGIC = b"MIFB"
FEATURE_VERSION = 1


@dataclass(frozen=True, eq=False)
class Waveform:
    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", np.asarray(self.samples, dtype=np.float64))

    def __len__(self) -> int:
        return self.samples.shape[0]


@dataclass(frozen=True, eq=False)
class MelFilterbank:
    n_mels: int
    n_fft: int
    sample_rate: int
    warp_factor: float
    center_freqs: np.ndarray
    weights: np.ndarray  # (n_mels, n_fft // 2 + 1)


@dataclass(frozen=True)
class FeatureConfig:
    sample_rate: int = 16000
    n_mels: int = 80
    n_fft: int = 512
    frame_shift_ms: float = 10.0
    frame_length_ms: float = 25.0
    n_append: int = 1
    mean_norm: bool = False

    @property
    def dim(self) -> int:
        return self.n_mels * (1 + self.n_append)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_corner_freqs(n_mels: int, sample_rate: int) -> np.ndarray:
    """The n_mels + 2 filter corner frequencies, equally spaced in mel over [0, Nyquist]."""
    corners = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_mels + 2))
    corners[0], corners[-1] = 0.0, sample_rate / 2.0
    return corners


def build_mel_filterbank(
    n_mels: int = 80, n_fft: int = 512, sample_rate: int = 16000, warp_factor: float = 1.0
) -> MelFilterbank:
    """Triangular mel filters, with corner frequencies optionally passed through the VTLP warp."""
    from .augment import VTLP_KNEE_RATIO, check_factor, piecewise_warp

    if n_fft < 64 or n_fft & (n_fft - 1):
        raise ValueError(f"n_fft must be a power of two >= 64, got {n_fft}")
    n_bins = n_fft // 2 + 1
    if not 1 <= n_mels <= n_bins:
        raise ValueError(f"n_mels={n_mels} must be in [1, {n_bins}] for n_fft={n_fft}")
    check_factor(warp_factor)

    nyquist = sample_rate / 2.0
    corners = mel_corner_freqs(n_mels, sample_rate)
    if warp_factor != 1.0:
        corners = piecewise_warp(corners, warp_factor, VTLP_KNEE_RATIO * nyquist, nyquist)
    bin_freqs = np.arange(n_bins) * sample_rate / n_fft

    lo, mid, hi = corners[:-2, None], corners[1:-1, None], corners[2:, None]
    rise = (bin_freqs - lo) / (mid - lo)
    fall = (hi - bin_freqs) / (hi - mid)
    weights = np.maximum(0.0, np.minimum(rise, fall))
    return MelFilterbank(n_mels, n_fft, sample_rate, float(warp_factor), corners[1:-1].copy(), weights)


def num_frames(n_samples: int, frame_length: int, frame_shift: int) -> int:
    return (n_samples - frame_length) // frame_shift + 1


def compute_logmel(
    waveform: Waveform,
    filterbank: MelFilterbank,
    frame_shift_ms: float = 10.0,
    frame_length_ms: float = 25.0,
    mean_norm: bool = False,
) -> np.ndarray:
    """Pre-emphasis, Hamming-windowed power spectra, and log filterbank energies (T, n_mels)."""
    if waveform.sample_rate != filterbank.sample_rate:
        raise ValueError(f"sample rate {waveform.sample_rate} != filterbank rate {filterbank.sample_rate}")
    x = waveform.samples
    if np.isnan(x).any():
        raise ValueError("waveform contains NaN")
    sr = waveform.sample_rate
    length = int(round(frame_length_ms * sr / 1000.0))
    shift = int(round(frame_shift_ms * sr / 1000.0))
    if length > filterbank.n_fft:
        raise ValueError(f"frame length {length} exceeds n_fft {filterbank.n_fft}")
    if x.shape[0] < length:
        raise ValueError(f"waveform of {x.shape[0]} samples is shorter than one {length}-sample frame")

    emphasized = np.concatenate([x[:1], x[1:] - PREEMPHASIS * x[:-1]])
    T = num_frames(x.shape[0], length, shift)
    frames = np.lib.stride_tricks.sliding_window_view(emphasized, length)[::shift][:T]
    spec = np.fft.rfft(frames * np.hamming(length), n=filterbank.n_fft)
    power = spec.real**2 + spec.imag**2
    feats = np.log(power @ filterbank.weights.T + FLOOR_EPS)
    if mean_norm:
        feats = feats - feats.mean(axis=0)
    return feats


def stack_frames(features: np.ndarray, n_append: int = 1) -> np.ndarray:
    """Concatenate each frame with the following ``n_append`` frames, repeating the last frame at the end."""
    if n_append < 0:
        raise ValueError(f"n_append must be >= 0, got {n_append}")
    if features.shape[0] == 0:
        raise ValueError("cannot stack an empty feature matrix")
    T = features.shape[0]
    idx = np.minimum(np.arange(T)[:, None] + np.arange(n_append + 1)[None, :], T - 1)
    return features[idx].reshape(T, -1)


@lru_cache(maxsize=64)
def cached_filterbank(n_mels: int, n_fft: int, sample_rate: int, warp_factor: float) -> MelFilterbank:
    return build_mel_filterbank(n_mels, n_fft, sample_rate, warp_factor)


def featurize(waveform: Waveform, config: FeatureConfig = FeatureConfig(), warp_factor: float = 1.0) -> np.ndarray:
    return stack_frames(logmel(waveform, config, warp_factor), config.n_append)


def logmel(waveform: Waveform, config: FeatureConfig = FeatureConfig(), warp_factor: float = 1.0) -> np.ndarray:
    fb = cached_filterbank(config.n_mels, config.n_fft, config.sample_rate, float(warp_factor))
    return compute_logmel(waveform, fb, config.frame_shift_ms, config.frame_length_ms, config.mean_norm)


# ------------------------------------------------------------------ file I/O


def write_features(features: np.ndarray, path: str | Path) -> None:
    arr = np.ascontiguousarray(features, dtype="<f4")
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D feature matrix, got shape {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC + struct.pack("<III", FEATURE_VERSION, *arr.shape))
        fh.write(arr.tobytes())


def read_features(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != FEATURE_MAGIC:
        raise ValueError(f"{path}: bad magic {data[:4]!r}")
    version, T, D = struct.unpack_from("<III", data, 4)
    if version != FEATURE_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    if len(data) != 16 + 4 * T * D:
        raise ValueError(f"{path}: truncated payload")
    return np.frombuffer(data, dtype="<f4", offset=16).reshape(T, D).astype(np.float32)
