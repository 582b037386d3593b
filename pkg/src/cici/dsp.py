"""Spectral and rhythm analysis for pulse signals.

The periodogram is an explicit DFT-matrix product so that it is an ordinary
linear layer on the autograd graph. Frequencies are carried in beats per
minute throughout.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.signal import find_peaks

from . import autograd as ag
from .autograd import Tensor

HR_BAND_BPM = (42.0, 180.0)
LF_BAND_HZ = (0.04, 0.15)
HF_BAND_HZ = (0.15, 0.4)
DEFAULT_TEMPERATURE_SCALE = 0.05
IBI_RESAMPLE_HZ = 4.0
MAX_HR_BPM = 200.0


class DegenerateSignalError(ValueError):
    """The spectrum has no positive power to locate a peak in."""


class InsufficientBeatsError(ValueError):
    pass


class EmptyBandWarning(UserWarning):
    pass


@dataclass
class Psd:
    """One-sided power spectrum restricted to a band.

    ``power`` is a graph tensor so downstream peak surrogates stay
    differentiable.
    """

    freqs_bpm: np.ndarray
    power: Tensor
    frame_rate_hz: float

    @property
    def bin_width_bpm(self) -> float:
        if len(self.freqs_bpm) > 1:
            return float(self.freqs_bpm[1] - self.freqs_bpm[0])
        return float("nan")

    def power_array(self) -> np.ndarray:
        return self.power.data


@dataclass
class HrvMetrics:
    lf_power: float
    hf_power: float
    lfnu: float
    hfnu: float
    lf_hf_ratio: float


@lru_cache(maxsize=32)
def _dft_basis(n: int, frame_rate_hz: float, lo_bpm: float, hi_bpm: float):
    k = np.arange(n // 2 + 1)
    freqs = k * frame_rate_hz / n * 60.0
    keep = (freqs >= lo_bpm) & (freqs <= hi_bpm)
    k = k[keep]
    t = np.arange(n)
    angle = 2.0 * np.pi * np.outer(k, t) / n
    cos, sin = np.cos(angle), np.sin(angle)
    cos.setflags(write=False)
    sin.setflags(write=False)
    return freqs[keep], cos, sin


def psd(bvp, frame_rate_hz: float = 30.0, band_bpm=HR_BAND_BPM) -> Psd:
    """Periodogram |X_k|^2 of the mean-removed signal for bins inside ``band_bpm``.

    Accepts a 1-D tensor or array. No window and no normalisation by length:
    with every bin from 1 to n/2 kept (Nyquist weighted by one half) the
    powers sum to n/2 times the signal energy.
    """
    x = bvp if isinstance(bvp, Tensor) else Tensor(bvp)
    if x.ndim != 1:
        raise ag.ShapeError(f"psd expects a 1-D signal, got shape {x.shape}")
    n = x.shape[0]
    if n < 64:
        raise ValueError(f"psd needs at least 64 samples, got {n}")
    lo, hi = float(band_bpm[0]), float(band_bpm[1])
    if not 0 < lo < hi <= frame_rate_hz * 30.0:
        raise ValueError(f"band {band_bpm} bpm must satisfy 0 < lo < hi <= {frame_rate_hz * 30.0}")
    freqs, cos, sin = _dft_basis(n, float(frame_rate_hz), lo, hi)
    if len(freqs) == 0:
        raise ValueError(f"band {band_bpm} bpm contains no DFT bin at n={n}")
    centered = ag.sub(x, ag.mean(x)).reshape(n, 1)
    re = ag.matmul(Tensor(cos), centered)
    im = ag.matmul(Tensor(sin), centered)
    power = ag.add(ag.square(re), ag.square(im)).reshape(len(freqs))
    if np.ptp(x.data) == 0:
        # mean removal leaves roundoff on a constant; its exact power (and gradient) is zero
        power = ag.scalar_mul(power, 0.0)
    return Psd(freqs_bpm=freqs, power=power, frame_rate_hz=float(frame_rate_hz))


def peak_hr_bpm(spec: Psd) -> float:
    """Frequency of the strongest bin; ties resolve to the lower frequency."""
    p = spec.power_array()
    if not (p > 0).any():
        raise DegenerateSignalError("degenerate signal: spectrum has no positive power")
    return float(spec.freqs_bpm[int(np.argmax(p))])


def soft_peak_bpm(spec: Psd, temperature: float | None = None,
                  temperature_scale: float = DEFAULT_TEMPERATURE_SCALE) -> Tensor:
    """Softmax-weighted mean frequency, a differentiable stand-in for the peak.

    With ``temperature=None`` the temperature is ``temperature_scale`` times
    the band's maximum power, and that maximum stays on the graph, which
    keeps the result invariant to the signal's amplitude.
    """
    p = spec.power_array()
    if not (p > 0).any():
        raise DegenerateSignalError("degenerate signal: spectrum has no positive power")
    freqs = Tensor(spec.freqs_bpm)
    if temperature is None:
        if not temperature_scale > 0:
            raise ValueError(f"temperature_scale must be positive, got {temperature_scale}")
        scaled = ag.div(spec.power, ag.max_(spec.power))
        weights = ag.softmax(scaled, temperature=temperature_scale)
    else:
        weights = ag.softmax(spec.power, temperature=temperature)
    return ag.sum_(ag.mul(weights, freqs))


def band_power(spec: Psd, lo_hz: float, hi_hz: float) -> float:
    """Sum of power over bins with frequency in [lo_hz, hi_hz)."""
    if not lo_hz < hi_hz:
        raise ValueError(f"band must satisfy lo < hi, got [{lo_hz}, {hi_hz})")
    f_hz = spec.freqs_bpm / 60.0
    inside = (f_hz >= lo_hz) & (f_hz < hi_hz)
    if not inside.any():
        warnings.warn(f"no spectral bin in [{lo_hz}, {hi_hz}) Hz", EmptyBandWarning, stacklevel=2)
        return 0.0
    return float(spec.power_array()[inside].sum())


def detect_beats(bvp, frame_rate_hz: float = 30.0, max_hr_bpm: float = MAX_HR_BPM) -> np.ndarray:
    """Indices of pulse peaks.

    A sample is a candidate when it is a local maximum above the one-second
    moving mean. Candidates closer than 60/max_hr seconds are thinned, taller
    peaks first.
    """
    x = np.asarray(bvp.data if isinstance(bvp, Tensor) else bvp, dtype=np.float64)
    n = len(x)
    if n < 2 * frame_rate_hz:
        raise ValueError(f"need at least 2 s of signal, got {n} samples at {frame_rate_hz} Hz")
    win = max(int(round(frame_rate_hz)), 1)
    kernel = np.ones(win) / win
    pad = win // 2
    padded = np.pad(x, (pad, win - 1 - pad), mode="edge")
    baseline = np.convolve(padded, kernel, mode="valid")
    min_sep = 60.0 / max_hr_bpm * frame_rate_hz
    beats, _ = find_peaks(x, height=baseline, distance=max(int(np.ceil(min_sep)), 1))
    if len(beats) < 3:
        raise InsufficientBeatsError(f"insufficient beats: found {len(beats)}, need at least 3")
    return beats


def hrv_metrics(beat_indices, frame_rate_hz: float = 30.0) -> HrvMetrics:
    """LF/HF balance of the inter-beat-interval series.

    IBIs are linearly resampled at 4 Hz before the periodogram.
    """
    beats = np.asarray(beat_indices)
    if len(beats) < 30:
        raise InsufficientBeatsError(f"HRV needs at least 30 beats, got {len(beats)}")
    t = beats / frame_rate_hz
    ibi = np.diff(t)
    t_ibi = t[1:]
    grid = np.arange(t_ibi[0], t_ibi[-1], 1.0 / IBI_RESAMPLE_HZ)
    series = np.interp(grid, t_ibi, ibi)
    if len(series) < 64:
        raise InsufficientBeatsError(f"IBI series spans only {len(series)} samples at 4 Hz; need 64")
    if np.ptp(series) < 1e-9:
        raise DegenerateSignalError("degenerate IBI spectrum: intervals are constant")
    spec = psd(series, IBI_RESAMPLE_HZ, band_bpm=(1e-9, IBI_RESAMPLE_HZ * 30.0))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", EmptyBandWarning)
        lf = band_power(spec, *LF_BAND_HZ)
        hf = band_power(spec, *HF_BAND_HZ)
    total = lf + hf
    if total <= 0:
        raise DegenerateSignalError("degenerate IBI spectrum: LF + HF power is zero")
    return HrvMetrics(lf_power=lf, hf_power=hf, lfnu=lf / total, hfnu=hf / total,
                      lf_hf_ratio=lf / hf if hf > 0 else float("inf"))


def metrics(pred_hr, true_hr) -> dict:
    """MAE, RMSE and Pearson r between predicted and reference heart rates.

    ``pearson`` is None when either side has zero variance.
    """
    p = np.asarray(pred_hr, dtype=np.float64)
    t = np.asarray(true_hr, dtype=np.float64)
    if p.shape != t.shape or p.ndim != 1 or len(p) == 0:
        raise ValueError(f"need equal nonzero lengths, got {p.shape} and {t.shape}")
    err = p - t
    out = {"mae": float(np.mean(np.abs(err))), "rmse": float(np.sqrt(np.mean(err ** 2)))}
    pc, tc = p - p.mean(), t - t.mean()
    denom = np.sqrt((pc @ pc) * (tc @ tc))
    out["pearson"] = float(pc @ tc / denom) if denom > 0 else None
    return out
