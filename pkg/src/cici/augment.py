"""Spatio-temporal augmentation of raw STMap windows.

The augmented view starts ``delta_t`` frames later and has its region columns
shuffled independently in every frame. The original view keeps frame 0 and
the region order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .synth import MAX_SHIFT, Stmap, normalize


@dataclass
class AugmentMeta:
    permutations: np.ndarray  # (T, W) int, row t is the column order used at frame t
    delta_t: int
    rng_seed: int | None = None

    def __post_init__(self):
        perms = np.asarray(self.permutations)
        if perms.ndim != 2:
            raise ValueError(f"permutations must be (T, W), got {perms.shape}")
        if not (np.sort(perms, axis=1) == np.arange(perms.shape[1])).all():
            raise ValueError("every row of permutations must be a permutation of 0..W-1")


def _rng(rng) -> tuple[np.random.Generator, int | None]:
    if isinstance(rng, np.random.Generator):
        return rng, None
    return np.random.default_rng(rng), (None if rng is None else int(rng))


def sample_meta(rng, n_frames: int, width: int, max_shift: int = MAX_SHIFT) -> AugmentMeta:
    """delta_t uniform on {0..max_shift}; one uniform permutation per frame."""
    gen, seed = _rng(rng)
    delta_t = int(gen.integers(0, max_shift + 1))
    perms = gen.permuted(np.tile(np.arange(width), (n_frames, 1)), axis=1)
    return AugmentMeta(permutations=perms, delta_t=delta_t, rng_seed=seed)


def apply_meta(raw: np.ndarray, meta: AugmentMeta, window: int) -> np.ndarray:
    """The augmented window before normalisation."""
    shifted = raw[meta.delta_t:meta.delta_t + window]
    rows = np.arange(window)[:, None]
    return shifted[rows, meta.permutations]


def augment(raw, rng=None, max_shift: int = MAX_SHIFT, frame_rate_hz: float = 30.0,
            t0: int = 0, meta: AugmentMeta | None = None,
            window: int | None = None) -> tuple[Stmap, Stmap, AugmentMeta]:
    """Split a raw (T + max_shift) x W x 3 window into the original and augmented views.

    ``rng`` may be a seed or a Generator. Pass ``meta`` to replay a fixed
    augmentation, and ``window`` to insist on an exact raw length.
    """
    if isinstance(raw, Stmap):
        frame_rate_hz, t0, raw = raw.frame_rate_hz, raw.t0, raw.raw
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 3 or raw.shape[0] <= max_shift:
        raise ValueError(f"raw window must be (T + {max_shift}) x W x C, got shape {raw.shape}")
    if window is not None and raw.shape[0] != window + max_shift:
        raise ValueError(f"raw window has {raw.shape[0]} frames, expected {window} + {max_shift}")
    window = raw.shape[0] - max_shift
    if meta is None:
        meta = sample_meta(rng, window, raw.shape[1], max_shift)
    elif meta.permutations.shape != (window, raw.shape[1]) or not 0 <= meta.delta_t <= max_shift:
        raise ValueError("augmentation metadata does not match the raw window")
    x = Stmap(normalize(raw[:window]), frame_rate_hz, t0)
    x_a = Stmap(normalize(apply_meta(raw, meta, window)), frame_rate_hz, t0 + meta.delta_t)
    return x, x_a, meta


def identity_meta(window: int, width: int) -> AugmentMeta:
    return AugmentMeta(np.tile(np.arange(width), (window, 1)), 0)
