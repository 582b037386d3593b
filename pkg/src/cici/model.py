"""BvpNetMini: a compact pulse estimator on the autograd engine.

Layout::

    conv2d stem   3 -> C channels, kernel (K, W) spans every region column
    tanh
    2 x residual  h + conv1d(tanh(conv1d(h)))      kernel K over time
    head          1 x C time-distributed linear    -> one sample per frame
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .synth import STMAP_WIDTH

SCHEMA_VERSION = 1


class CheckpointError(ValueError):
    pass


class BvpNetMini:
    def __init__(self, width: int = STMAP_WIDTH, channels: int = 8, kernel: int = 5,
                 n_blocks: int = 2, seed: int = 0):
        self.width = width
        self.channels = channels
        self.kernel = kernel
        self.n_blocks = n_blocks
        self.seed = seed
        rng = np.random.default_rng(seed)
        shapes = {"stem.w": (channels, 3, kernel, width), "stem.b": (channels,)}
        for i in range(n_blocks):
            for j in (1, 2):
                shapes[f"block{i}.conv{j}.w"] = (channels, channels, kernel)
                # no bias where it could only shift the output by a constant
                if j == 1 or i < n_blocks - 1:
                    shapes[f"block{i}.conv{j}.b"] = (channels,)
        shapes["head.w"] = (1, channels)
        self.params: dict[str, Tensor] = {}
        for name, shape in shapes.items():
            if name.endswith(".b"):
                self.params[name] = ag.parameter(np.zeros(shape))
                continue
            fan_in = int(np.prod(shape[1:]))
            bound = 1.0 / np.sqrt(fan_in)
            self.params[name] = ag.parameter(rng.uniform(-bound, bound, shape))
        # residual branches start small so the initial map is close to the stem
        for i in range(n_blocks):
            self.params[f"block{i}.conv2.w"].data *= 0.1

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.params.items())

    @property
    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        missing = set(self.params) ^ set(state)
        if missing:
            raise CheckpointError(f"parameter names differ: {sorted(missing)}")
        for k, v in state.items():
            v = np.asarray(v, dtype=np.float64)
            if v.shape != self.params[k].shape:
                raise CheckpointError(f"{k}: shape {v.shape}, expected {self.params[k].shape}")
            self.params[k].data = v.copy()

    def clone(self) -> "BvpNetMini":
        other = BvpNetMini(self.width, self.channels, self.kernel, self.n_blocks, self.seed)
        other.load_state_dict(self.state_dict())
        return other

    def forward(self, stmap) -> Tensor:
        """Length-T pulse estimate for a normalised T x W x 3 map."""
        x = np.asarray(getattr(stmap, "data", stmap), dtype=np.float64)
        if x.ndim != 3 or x.shape[1] != self.width or x.shape[2] != 3:
            raise ag.ShapeError(f"expected a T x {self.width} x 3 STMap, got shape {x.shape}")
        n = x.shape[0]
        p = self.params
        pad = self.kernel // 2
        h = ag.conv2d(Tensor(x.transpose(2, 0, 1)), p["stem.w"], p["stem.b"], padding=(pad, 0))
        h = ag.tanh(h.reshape(self.channels, n))
        for i in range(self.n_blocks):
            r = ag.tanh(ag.conv1d(h, p[f"block{i}.conv1.w"], p[f"block{i}.conv1.b"], padding=pad))
            r = ag.conv1d(r, p[f"block{i}.conv2.w"], p.get(f"block{i}.conv2.b"), padding=pad)
            h = ag.add(h, r)
        return ag.matmul(p["head.w"], h).reshape(n)

    __call__ = forward


def init(seed: int = 0, **kw) -> BvpNetMini:
    return BvpNetMini(seed=seed, **kw)


def negative_pearson(pred: Tensor, target: np.ndarray) -> Tensor:
    t = np.asarray(target, dtype=np.float64)
    tc = t - t.mean()
    tc = tc / max(np.sqrt(tc @ tc), 1e-12)
    pc = ag.sub(pred, ag.mean(pred))
    r = ag.div(ag.dot(pc, Tensor(tc)), ag.maximum(ag.l2_norm(pc), 1e-12))
    return ag.sub(1.0, r)


def supervised_loss(pred: Tensor, target: np.ndarray, mse_weight: float = 0.1) -> Tensor:
    """(1 - Pearson) plus a small MSE anchor on amplitude."""
    mse = ag.mean(ag.square(ag.sub(pred, Tensor(target))))
    return ag.add(negative_pearson(pred, target), ag.scalar_mul(mse, mse_weight))


@dataclass
class PretrainResult:
    model: BvpNetMini
    loss_trace: list[float]
    momentum_buffers: list[np.ndarray] = field(default_factory=list)
    meta: dict = field(default_factory=dict)


def suite_digest(instances) -> str:
    h = hashlib.sha256()
    for inst in instances:
        h.update(np.ascontiguousarray(inst.stmap.data).tobytes())
        h.update(np.ascontiguousarray(inst.gt_bvp).tobytes())
    return h.hexdigest()[:16]


def pretrain(model: BvpNetMini, instances: Sequence, epochs: int = 20, lr: float = 0.01,
             momentum: float = 0.9, seed: int = 0, mse_weight: float = 0.1,
             grad_clip: float = 5.0) -> PretrainResult:
    """Supervised SGD-momentum training on labelled source windows, one window per step.

    Each epoch visits the windows in a seeded random order. Gradients with
    norm above ``grad_clip`` are rescaled to it.
    """
    if len(instances) == 0:
        raise ValueError("pretraining needs at least one labelled instance")
    params = model.parameters()
    buffers = [np.zeros_like(p.data) for p in params]
    rng = np.random.default_rng([seed, 31337])
    trace = []
    for _ in range(epochs):
        total = 0.0
        for i in rng.permutation(len(instances)):
            inst = instances[i]
            loss = supervised_loss(model.forward(inst.stmap), inst.gt_bvp, mse_weight)
            grads = ag.backward(loss, params)
            norm = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            scale = grad_clip / norm if norm > grad_clip else 1.0
            for p, buf in zip(params, buffers):
                buf *= momentum
                buf += scale * grads[p.id]
                p.data -= lr * buf
            total += loss.item()
        trace.append(total / len(instances))
    meta = {"seed": seed, "epochs": epochs, "lr": lr, "source_digest": suite_digest(instances)}
    return PretrainResult(model, trace, buffers, meta)


# ---------------------------------------------------------------------------
# checkpoint
# ---------------------------------------------------------------------------

def save(path, model: BvpNetMini, momentum_buffers: Sequence[np.ndarray] | None = None,
         meta: dict | None = None):
    """Write a JSON checkpoint.

    Fields, in order: schema_version, architecture, parameters (name ->
    {shape, values}), momentum (list aligned with parameters, or empty),
    meta. Floats are written with full round-trip precision.
    """
    doc = {
        "schema_version": SCHEMA_VERSION,
        "architecture": {"width": model.width, "channels": model.channels, "kernel": model.kernel,
                         "n_blocks": model.n_blocks, "seed": model.seed},
        "parameters": {k: {"shape": list(v.shape), "values": v.data.reshape(-1).tolist()}
                       for k, v in model.params.items()},
        "momentum": [b.reshape(-1).tolist() for b in (momentum_buffers or [])],
        "meta": meta or {},
    }
    Path(path).write_text(json.dumps(doc))


def load(path) -> tuple[BvpNetMini, list[np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint header: {exc}") from None
    if not isinstance(doc, dict) or "schema_version" not in doc:
        raise CheckpointError(f"{path}: corrupt checkpoint header: no schema_version")
    if doc["schema_version"] != SCHEMA_VERSION:
        raise CheckpointError(f"{path}: checkpoint schema version {doc['schema_version']} "
                              f"is not supported (expected {SCHEMA_VERSION})")
    try:
        model = BvpNetMini(**doc["architecture"])
        state = {k: np.asarray(v["values"], dtype=np.float64).reshape(v["shape"])
                 for k, v in doc["parameters"].items()}
        model.load_state_dict(state)
        buffers = [np.asarray(b, dtype=np.float64).reshape(p.shape)
                   for b, p in zip(doc.get("momentum", []), model.parameters())]
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: malformed checkpoint: {exc}") from None
    return model, buffers, doc.get("meta", {})
