"""Gradient dynamic control: conflict test, inverse-norm weighting, SGD with momentum."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor


@dataclass
class GradientBundle:
    vector: np.ndarray
    norm: float
    disconnected: bool = False

    def __len__(self):
        return len(self.vector)


@dataclass
class Combined:
    gradient: np.ndarray | None
    lambda_stti: float
    lambda_stfc: float
    degenerate: bool = False


@dataclass
class OptimState:
    buffers: list[np.ndarray]
    lr: float = 1e-4
    momentum: float = 0.9
    lambda_hp: float = 0.01
    step: int = 0
    skipped: int = 0

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **kw) -> "OptimState":
        return cls(buffers=[np.zeros_like(p.data) for p in params], **kw)


def flatten(arrays: Sequence[np.ndarray]) -> np.ndarray:
    return np.concatenate([np.asarray(a, dtype=np.float64).reshape(-1) for a in arrays])


def unflatten(vector: np.ndarray, params: Sequence[Tensor]) -> list[np.ndarray]:
    total = sum(p.size for p in params)
    if len(vector) != total:
        raise ag.ShapeError(f"gradient has {len(vector)} entries, parameters have {total}")
    out, start = [], 0
    for p in params:
        out.append(vector[start:start + p.size].reshape(p.shape))
        start += p.size
    return out


def grads_for(loss: Tensor, params: Sequence[Tensor]) -> GradientBundle:
    """One backward pass, flattened in parameter order."""
    grads = ag.backward(loss, params)
    vec = flatten([grads[p.id] for p in params])
    return GradientBundle(vec, float(np.linalg.norm(vec)), disconnected=not loss.requires_grad)


def detect_conflict(g_stfc: GradientBundle, g_stti: GradientBundle) -> bool:
    """True iff the two gradients have a strictly negative inner product."""
    if len(g_stfc) != len(g_stti):
        raise ag.ShapeError(f"bundle lengths differ: {len(g_stfc)} vs {len(g_stti)}")
    return float(g_stfc.vector @ g_stti.vector) < 0.0


def combine(g_stfc: GradientBundle, g_stti: GradientBundle, conflict: bool,
            lambda_hp: float = 0.01) -> Combined:
    """Total gradient.

    Under conflict each loss is weighted by the other's gradient norm over
    the sum of both, so the larger gradient is damped. Otherwise the
    inconsistency term gets the fixed weight ``lambda_hp``.
    """
    if conflict:
        g1, g2 = g_stti.norm, g_stfc.norm
        total = g1 + g2
        if total <= 0:
            return Combined(None, float("nan"), float("nan"), degenerate=True)
        lam1, lam2 = g2 / total, g1 / total
        return Combined(lam1 * g_stti.vector + lam2 * g_stfc.vector, lam1, lam2)
    return Combined(lambda_hp * g_stti.vector + g_stfc.vector, lambda_hp, 1.0)


def sgd_momentum_step(state: OptimState, params: Sequence[Tensor], gradient: np.ndarray) -> bool:
    """v <- momentum * v + g; theta <- theta - lr * v. Returns False when skipped."""
    gradient = np.asarray(gradient, dtype=np.float64)
    pieces = unflatten(gradient, params)
    if not np.isfinite(gradient).all():
        state.skipped += 1
        return False
    for p, buf, g in zip(params, state.buffers, pieces):
        if buf.shape != p.shape:
            raise ag.ShapeError(f"momentum buffer {buf.shape} does not match parameter {p.shape}")
        buf *= state.momentum
        buf += g
        p.data -= state.lr * buf
    state.step += 1
    return True
