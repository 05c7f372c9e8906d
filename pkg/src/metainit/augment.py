"""Speed perturbation, VTLP and SpecAug."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special

from .features import FeatureConfig, Waveform, featurize

FACTOR_RANGE = (0.5, 2.0)
DEFAULT_FACTORS = (0.9, 1.0, 1.1)
# VTLP knee as a fraction of Nyquist
VTLP_KNEE_RATIO = 0.85

METHODS = ("sp", "vtlp", "specaug", "none")
WARP_METHODS = ("sp", "vtlp")

RESAMPLE_TAPS = 16
KAISER_BETA = 8.0


def check_factor(factor: float) -> float:
    lo, hi = FACTOR_RANGE
    if not lo <= factor <= hi:
        raise ValueError(f"warp factor {factor} outside [{lo}, {hi}]")
    return float(factor)


@dataclass(frozen=True)
class SpecAugParams:
    freq_mask_width_max: int = 5
    freq_mask_count: int = 2
    time_mask_width_max: int = 8
    time_mask_count: int = 2
    mask_value: float = 0.0


@dataclass(frozen=True)
class AugmentSpec:
    method: str = "none"
    factor: float | None = None
    spec_params: SpecAugParams | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown augmentation method {self.method!r}")
        if self.method in WARP_METHODS:
            if self.factor is None:
                raise ValueError(f"{self.method} needs a warp factor")
            check_factor(self.factor)
            if self.spec_params is not None:
                raise ValueError(f"{self.method} takes no mask parameters")
        elif self.factor is not None:
            raise ValueError(f"{self.method} takes no warp factor")
        if self.method == "specaug" and self.spec_params is None:
            object.__setattr__(self, "spec_params", SpecAugParams())


def piecewise_warp(freq_hz, factor: float, f_boundary_hz: float, nyquist_hz: float):
    """Scale frequencies by ``factor`` up to a knee, then interpolate linearly so Nyquist stays fixed."""
    check_factor(factor)
    if not 0 < f_boundary_hz < nyquist_hz:
        raise ValueError(f"knee {f_boundary_hz} must lie in (0, {nyquist_hz})")
    f = np.asarray(freq_hz, dtype=np.float64)
    if np.any(f < 0) or np.any(f > nyquist_hz):
        raise ValueError(f"frequencies must lie in [0, {nyquist_hz}]")
    if factor == 1.0:
        return f.copy() if f.ndim else float(f)
    knee_in = f_boundary_hz / max(factor, 1.0)
    knee_out = factor * knee_in
    slope = (nyquist_hz - knee_out) / (nyquist_hz - knee_in)
    out = np.where(f <= knee_in, factor * f, knee_out + (f - knee_in) * slope)
    out = np.where(f == nyquist_hz, nyquist_hz, out)
    return out if out.ndim else float(out)


def inverse_warp(freq_hz, factor: float, f_boundary_hz: float, nyquist_hz: float):
    check_factor(factor)
    f = np.asarray(freq_hz, dtype=np.float64)
    if factor == 1.0:
        return f.copy() if f.ndim else float(f)
    knee_in = f_boundary_hz / max(factor, 1.0)
    knee_out = factor * knee_in
    slope = (nyquist_hz - knee_out) / (nyquist_hz - knee_in)
    out = np.where(f <= knee_out, f / factor, knee_in + (f - knee_out) / slope)
    out = np.where(f == nyquist_hz, nyquist_hz, out)
    return out if out.ndim else float(out)


def _sinc_kernel(d: np.ndarray, cutoff: float) -> np.ndarray:
    half = RESAMPLE_TAPS / 2
    window = special.i0(KAISER_BETA * np.sqrt(np.clip(1.0 - (d / half) ** 2, 0.0, 1.0))) / special.i0(KAISER_BETA)
    return cutoff * np.sinc(cutoff * d) * window


def speed_perturb(waveform: Waveform, factor: float) -> Waveform:
    """Resample so playback runs ``factor`` times faster (duration and spectrum both scale).

    Band-limited interpolation with a Kaiser-windowed sinc over 16 input taps;
    the cutoff drops to Nyquist/factor when speeding up, to avoid aliasing.
    """
    if factor <= 0:
        raise ValueError(f"speed factor must be positive, got {factor}")
    check_factor(factor)
    x = waveform.samples
    if factor == 1.0:
        return Waveform(x.copy(), waveform.sample_rate)
    n_out = int(round(x.shape[0] / factor))
    pos = np.arange(n_out) * factor
    base = np.floor(pos).astype(np.int64)
    taps = np.arange(-RESAMPLE_TAPS // 2 + 1, RESAMPLE_TAPS // 2 + 1)
    idx = base[:, None] + taps[None, :]
    w = _sinc_kernel(pos[:, None] - idx, min(1.0, 1.0 / factor))
    w /= w.sum(axis=1, keepdims=True)
    valid = (idx >= 0) & (idx < x.shape[0])
    y = np.where(valid, x[np.clip(idx, 0, x.shape[0] - 1)], 0.0)
    return Waveform((w * y).sum(axis=1), waveform.sample_rate)


def spec_augment(features: np.ndarray, rng: np.random.Generator, spec_params: SpecAugParams = SpecAugParams()):
    """Return a copy with random frequency and time bands set to the mask value."""
    T, D = features.shape
    if T == 0:
        raise ValueError("cannot mask an empty feature matrix")
    p = spec_params
    if p.freq_mask_width_max > D or p.time_mask_width_max > T:
        raise ValueError(f"mask widths ({p.freq_mask_width_max}, {p.time_mask_width_max}) exceed shape {(T, D)}")
    out = np.array(features, copy=True)
    for _ in range(p.freq_mask_count):
        w = int(rng.integers(0, p.freq_mask_width_max + 1))
        start = int(rng.integers(0, D - w + 1))
        out[:, start : start + w] = p.mask_value
    for _ in range(p.time_mask_count):
        w = int(rng.integers(0, p.time_mask_width_max + 1))
        start = int(rng.integers(0, T - w + 1))
        out[start : start + w, :] = p.mask_value
    return out


def apply_augment(
    data: Waveform | np.ndarray,
    spec: AugmentSpec | None,
    rng: np.random.Generator | None = None,
    config: FeatureConfig = FeatureConfig(),
) -> np.ndarray:
    """Augment and featurize.

    Warping methods need a waveform: SP resamples before featurizing, VTLP
    featurizes through a warped filterbank. SpecAug needs a feature matrix.
    """
    method = "none" if spec is None else spec.method
    if method == "none":
        return featurize(data, config) if isinstance(data, Waveform) else data
    if method in WARP_METHODS:
        if not isinstance(data, Waveform):
            raise TypeError(f"{method} needs waveform input, got {type(data).__name__}")
        if method == "sp":
            return featurize(speed_perturb(data, spec.factor), config)
        return featurize(data, config, warp_factor=spec.factor)
    if rng is None:
        raise ValueError("specaug needs an rng")
    if not isinstance(data, np.ndarray):
        raise TypeError(f"specaug needs a feature matrix, got {type(data).__name__}")
    return spec_augment(data, rng, spec.spec_params)
