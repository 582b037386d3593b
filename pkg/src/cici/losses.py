"""Frequency-domain consistency and time-domain inconsistency objectives."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .dsp import DEFAULT_TEMPERATURE_SCALE, HR_BAND_BPM, psd, soft_peak_bpm

DEFAULT_WINDOW = 32


@dataclass(frozen=True)
class StfcConfig:
    """``psi`` is the gate threshold in bpm. ``temperature`` fixes an absolute
    softmax temperature; when None it is ``temperature_scale`` times the
    band's peak power."""

    psi: float = 1.0
    temperature: float | None = None
    temperature_scale: float = DEFAULT_TEMPERATURE_SCALE
    band_bpm: tuple[float, float] = HR_BAND_BPM
    frame_rate_hz: float = 30.0

    def __post_init__(self):
        if self.psi < 0:
            raise ValueError(f"psi must be nonnegative, got {self.psi}")


@dataclass
class StfcTerms:
    loss: Tensor
    peak_bpm: float
    peak_a_bpm: float
    delta_bpm: float
    gate: bool


def _rows(x: Tensor) -> list[Tensor]:
    if x.ndim == 1:
        return [x]
    if x.ndim == 2:
        return [x[i] for i in range(x.shape[0])]
    raise ag.ShapeError(f"expected a signal or a batch of signals, got shape {x.shape}")


def stfc_terms(bvp: Tensor, bvp_a: Tensor, config: StfcConfig = StfcConfig()) -> StfcTerms:
    """Gated absolute soft-peak shift between two views, averaged over a batch.

    The gate is evaluated on plain values, so a closed gate contributes an
    exact zero gradient. For a batch the reported peaks and shift are those of
    the first pair.
    """
    if bvp.shape != bvp_a.shape:
        raise ag.ShapeError(f"stfc: shapes {bvp.shape} and {bvp_a.shape} differ")
    terms = []
    first = None
    for x, xa in zip(_rows(bvp), _rows(bvp_a)):
        p = soft_peak_bpm(psd(x, config.frame_rate_hz, config.band_bpm),
                          config.temperature, config.temperature_scale)
        pa = soft_peak_bpm(psd(xa, config.frame_rate_hz, config.band_bpm),
                           config.temperature, config.temperature_scale)
        delta = ag.abs_(ag.sub(pa, p))
        gate = delta.item() >= config.psi
        terms.append(ag.scalar_mul(delta, 1.0 if gate else 0.0))
        if first is None:
            first = (p.item(), pa.item(), delta.item(), gate)
    loss = terms[0] if len(terms) == 1 else ag.mean(ag.concat([t.reshape(1) for t in terms]))
    return StfcTerms(loss, *first)


def stfc_loss(bvp: Tensor, bvp_a: Tensor, config: StfcConfig = StfcConfig()) -> Tensor:
    return stfc_terms(bvp, bvp_a, config).loss


def window_index(n: int, s: int) -> np.ndarray:
    return np.arange(n - s + 1)[:, None] + np.arange(s)[None, :]


def self_sim_matrix(bvp: Tensor, s: int = DEFAULT_WINDOW) -> Tensor:
    """Cosine similarity between every pair of stride-1 windows of length ``s``.

    Window norms are clamped below at 1e-12 so all-zero windows give zero
    rows instead of NaN.
    """
    bvp = bvp if isinstance(bvp, Tensor) else Tensor(bvp)
    if bvp.ndim != 1:
        raise ag.ShapeError(f"self_sim_matrix expects a 1-D signal, got shape {bvp.shape}")
    n = bvp.shape[0]
    if not 2 <= s <= n:
        raise ValueError(f"window length must satisfy 2 <= s <= T={n}, got {s}")
    windows = ag.take(bvp, window_index(n, s))
    norms = ag.maximum(ag.l2_norm(windows, axis=1, keepdims=True), ag.COS_EPS)
    unit = ag.div(windows, norms)
    return ag.matmul(unit, ag.transpose(unit))


def stti_loss(m: Tensor, m_a: Tensor) -> Tensor:
    """Cosine similarity of the flattened matrices; a leading batch axis is averaged."""
    if m.shape != m_a.shape:
        raise ag.ShapeError(f"stti: matrix shapes {m.shape} and {m_a.shape} differ")
    if m.ndim == 3:
        sims = [ag.cosine_similarity(m[i], m_a[i]).reshape(1) for i in range(m.shape[0])]
        return ag.mean(ag.concat(sims))
    return ag.cosine_similarity(m, m_a)
