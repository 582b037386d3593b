"""Input checks shared by the estimator and the CLI."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array


def check_stmaps(X, *, name: str = "X", min_frames: int = 64) -> np.ndarray:
    """Coerce to float64 (n, T, W, 3); a single map (T, W, 3) gets a batch axis."""
    X = check_array(X, allow_nd=True, ensure_2d=False, dtype=np.float64, input_name=name)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[-1] != 3:
        raise ValueError(f"{name} must have shape (n, T, W, 3), got {X.shape}")
    if X.shape[1] < min_frames:
        raise ValueError(f"{name} needs at least {min_frames} frames, got {X.shape[1]}")
    return X


def check_signals(y, n: int, length: int, *, name: str = "y") -> np.ndarray:
    y = check_array(y, ensure_2d=False, dtype=np.float64, input_name=name)
    if y.ndim == 1:
        y = y[None]
    if y.shape != (n, length):
        raise ValueError(f"{name} must have shape ({n}, {length}), got {y.shape}")
    return y
