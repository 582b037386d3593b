"""scikit-learn style wrapper: ``fit`` pretrains, ``partial_fit`` adapts online."""

from __future__ import annotations

from types import SimpleNamespace

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import dsp, gdc, harness, model as model_mod
from ._validation import check_signals, check_stmaps
from .synth import MAX_SHIFT


class CiCiAdapter(TransformerMixin, BaseEstimator):
    """BVP estimator adapted at test time.

    ``transform`` maps STMaps (n, T, W, 3) to BVP signals (n, T); ``predict``
    returns one heart rate per map. ``partial_fit`` consumes raw windows of
    T + max_shift frames and takes ``steps_per_instance`` adaptation steps on
    each, in order.
    """

    def __init__(self, mode="cici", lr=5e-7, momentum=0.9, lambda_hp=0.01, psi=1.0, s=32,
                 temperature_scale=dsp.DEFAULT_TEMPERATURE_SCALE, max_shift=MAX_SHIFT,
                 steps_per_instance=1, frame_rate_hz=30.0, channels=8, kernel=5,
                 pretrain_epochs=15, pretrain_lr=0.01, random_state=0):
        self.mode = mode
        self.lr = lr
        self.momentum = momentum
        self.lambda_hp = lambda_hp
        self.psi = psi
        self.s = s
        self.temperature_scale = temperature_scale
        self.max_shift = max_shift
        self.steps_per_instance = steps_per_instance
        self.frame_rate_hz = frame_rate_hz
        self.channels = channels
        self.kernel = kernel
        self.pretrain_epochs = pretrain_epochs
        self.pretrain_lr = pretrain_lr
        self.random_state = random_state

    @classmethod
    def from_model(cls, net: model_mod.BvpNetMini, **params) -> "CiCiAdapter":
        """Wrap an already trained network without refitting."""
        est = cls(channels=net.channels, kernel=net.kernel, **params)
        est._attach(net.clone())
        return est

    def _run_config(self, window: int) -> harness.RunConfig:
        return harness.RunConfig(mode=self.mode, lr=self.lr, momentum=self.momentum,
                                 lambda_hp=self.lambda_hp, psi=self.psi, s=self.s,
                                 temperature_scale=self.temperature_scale, max_shift=self.max_shift,
                                 window=window, steps_per_instance=self.steps_per_instance)

    def _attach(self, net):
        self.model_ = net
        self.n_features_in_ = net.width
        self.optim_state_ = gdc.OptimState.for_params(net.parameters(), lr=self.lr,
                                                      momentum=self.momentum, lambda_hp=self.lambda_hp)
        self.n_steps_ = 0
        self.history_ = []

    def fit(self, X, y):
        """Pretrain from scratch on maps ``X`` with reference BVP ``y`` of shape (n, T)."""
        X = check_stmaps(X)
        y = check_signals(y, X.shape[0], X.shape[1])
        net = model_mod.BvpNetMini(width=X.shape[2], channels=self.channels, kernel=self.kernel,
                                   seed=self.random_state)
        data = [SimpleNamespace(stmap=x, gt_bvp=t) for x, t in zip(X, y)]
        res = model_mod.pretrain(net, data, epochs=self.pretrain_epochs, lr=self.pretrain_lr,
                                 seed=self.random_state)
        self._attach(res.model)
        self.loss_curve_ = res.loss_trace
        return self

    def partial_fit(self, X_raw, y=None):
        """Adapt on raw windows of T + max_shift frames. ``y`` (reference HR) is only logged."""
        check_is_fitted(self, "model_")
        X_raw = check_stmaps(X_raw, name="X_raw", min_frames=64 + self.max_shift)
        if X_raw.shape[2] != self.n_features_in_:
            raise ValueError(f"X_raw has {X_raw.shape[2]} regions, model expects {self.n_features_in_}")
        gt = np.full(len(X_raw), np.nan) if y is None else np.asarray(y, dtype=np.float64).reshape(-1)
        if len(gt) != len(X_raw):
            raise ValueError(f"y has {len(gt)} entries for {len(X_raw)} windows")
        cfg = self._run_config(X_raw.shape[1] - self.max_shift)
        self.optim_state_.lr = self.lr
        for raw, hr in zip(X_raw, gt):
            for _ in range(self.steps_per_instance):
                row = harness.adapt_step(self.model_, self.optim_state_, raw, cfg,
                                         harness.step_seed(self.random_state, self.n_steps_),
                                         self.frame_rate_hz)
                row.update(step=self.n_steps_, gt_hr=float(hr))
                self.history_.append(row)
                self.n_steps_ += 1
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        X = check_stmaps(X)
        return np.stack([self.model_.forward(x).data for x in X])

    def predict(self, X):
        bvp = self.transform(X)
        return np.array([dsp.peak_hr_bpm(dsp.psd(b, self.frame_rate_hz)) for b in bvp])

    def score(self, X, y):
        """Negative heart-rate MAE, so larger is better."""
        return -dsp.metrics(self.predict(X), np.asarray(y, dtype=np.float64).reshape(-1))["mae"]
