"""Online test-time adaptation loop, ablation modes, multi-seed runner and reports."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import autograd as ag
from . import dsp, gdc, losses, synth
from .augment import augment
from .model import BvpNetMini

log = logging.getLogger(__name__)

MODES = ("no-adapt", "stfc-only", "stti-only", "both-no-gdc", "cici")

REPORT_COLUMNS = (
    "step", "cycle", "instance", "t0", "gt_hr", "pre_hr", "post_hr",
    "loss_stfc", "loss_stti", "peak", "peak_a", "gate", "conflict", "dot",
    "g_stti", "g_stfc", "lambda_stti", "lambda_stfc", "updated", "flag",
)


class ConfigError(ValueError):
    """Invalid run configuration; ``key`` names the offending field."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class RunConfig:
    mode: str = "cici"
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    source_seed: int = 0
    source_subjects: int = 12
    target_seed: int = 0
    target_subjects: int = 5
    duration_frames: int = 1800
    window: int = synth.WINDOW
    max_shift: int = synth.MAX_SHIFT
    stride: int | None = None
    steps_per_instance: int = 1
    cycles: int = 1
    lr: float = 5e-7
    momentum: float = 0.9
    lambda_hp: float = 0.01
    psi: float = 1.0
    s: int = losses.DEFAULT_WINDOW
    temperature_scale: float = dsp.DEFAULT_TEMPERATURE_SCALE
    band_bpm: tuple[float, float] = dsp.HR_BAND_BPM
    stti_weight: float = 1.0
    model_seed: int = 0
    pretrain_epochs: int = 15
    pretrain_lr: float = 0.01
    output_dir: str = "runs"

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        self.band_bpm = tuple(float(b) for b in self.band_bpm)
        self.validate()

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError("mode", f"must be one of {MODES}, got {self.mode!r}")
        if not self.seeds:
            raise ConfigError("seeds", "must be nonempty")
        for key in ("steps_per_instance", "cycles", "window", "target_subjects", "source_subjects"):
            if getattr(self, key) < 1:
                raise ConfigError(key, "must be at least 1")
        for key in ("lr", "momentum", "lambda_hp", "psi", "stti_weight", "max_shift"):
            if getattr(self, key) < 0:
                raise ConfigError(key, "must be nonnegative")
        if not 2 <= self.s <= self.window:
            raise ConfigError("s", f"must lie in [2, window={self.window}]")
        if self.temperature_scale <= 0:
            raise ConfigError("temperature_scale", "must be positive")

    @classmethod
    def from_dict(cls, doc: dict, **overrides) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        merged = {**doc, **{k: v for k, v in overrides.items() if v is not None}}
        for key in merged:
            if key not in known:
                raise ConfigError(key, "unknown configuration key")
        try:
            return cls(**merged)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(next(iter(merged), "config"), str(exc)) from None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        d["band_bpm"] = list(self.band_bpm)
        return d

    def stfc_config(self, frame_rate_hz: float = 30.0) -> losses.StfcConfig:
        return losses.StfcConfig(psi=self.psi, temperature_scale=self.temperature_scale,
                                 band_bpm=self.band_bpm, frame_rate_hz=frame_rate_hz)


@dataclass
class TtaReport:
    rows: list[dict]
    summary: dict
    mode: str = "cici"
    seed: int = 0
    model: BvpNetMini | None = field(default=None, repr=False)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=float)

    def write_csv(self, path):
        write_report_csv(path, self.rows)


# ---------------------------------------------------------------------------
# streams
# ---------------------------------------------------------------------------

def source_stream(config: RunConfig) -> list[synth.LabeledInstance]:
    suite = synth.source_suite(config.source_seed, config.source_subjects, config.duration_frames)
    return synth.gen_stream(suite, config.window, config.max_shift, config.stride)


def target_stream(config: RunConfig) -> list[synth.LabeledInstance]:
    suite = synth.target_suite(config.target_seed, config.target_subjects, config.duration_frames)
    return synth.gen_stream(suite, config.window, config.max_shift, config.stride)


def predict_hr(model: BvpNetMini, stmap, band_bpm=dsp.HR_BAND_BPM) -> float:
    data = getattr(stmap, "data", stmap)
    fs = getattr(stmap, "frame_rate_hz", 30.0)
    return dsp.peak_hr_bpm(dsp.psd(model.forward(data).data, fs, band_bpm))


# ---------------------------------------------------------------------------
# one adaptation step
# ---------------------------------------------------------------------------

def _direction(mode: str, g_stfc, g_stti, conflict: bool, lambda_hp: float) -> gdc.Combined:
    if mode == "stfc-only":
        return gdc.Combined(g_stfc.vector, 0.0, 1.0)
    if mode == "stti-only":
        return gdc.Combined(g_stti.vector, 1.0, 0.0)
    if mode == "both-no-gdc":
        return gdc.combine(g_stfc, g_stti, False, lambda_hp)
    return gdc.combine(g_stfc, g_stti, conflict, lambda_hp)


def adapt_step(model: BvpNetMini, state: gdc.OptimState, raw: np.ndarray, config: RunConfig,
               aug_seed, frame_rate_hz: float = 30.0) -> dict:
    """Augment one raw window, evaluate both losses and update per ``config.mode``.

    Returns a partial report row (no bookkeeping columns).
    """
    params = model.parameters()
    x, x_a, _ = augment(raw, aug_seed, config.max_shift, frame_rate_hz)
    y = model.forward(x)
    y_a = model.forward(x_a)
    row = {"updated": 0, "flag": ""}
    pre_spec = dsp.psd(y.data, frame_rate_hz, config.band_bpm)
    try:
        row["pre_hr"] = dsp.peak_hr_bpm(pre_spec)
        stfc = losses.stfc_terms(y, y_a, config.stfc_config(frame_rate_hz))
    except dsp.DegenerateSignalError:
        row["pre_hr"] = row["post_hr"] = float("nan")
        row["flag"] = "degenerate signal"
        return row
    stti = losses.stti_loss(losses.self_sim_matrix(y, config.s), losses.self_sim_matrix(y_a, config.s))
    g_stfc = gdc.grads_for(stfc.loss, params)
    g_stti = gdc.grads_for(ag.scalar_mul(stti, config.stti_weight), params)
    dot = float(g_stfc.vector @ g_stti.vector)
    conflict = gdc.detect_conflict(g_stfc, g_stti)
    row.update(loss_stfc=stfc.loss.item(), loss_stti=stti.item(), peak=stfc.peak_bpm,
               peak_a=stfc.peak_a_bpm, gate=int(stfc.gate), conflict=int(conflict), dot=dot,
               g_stti=g_stti.norm, g_stfc=g_stfc.norm)
    if config.mode == "no-adapt":
        row.update(lambda_stti=0.0, lambda_stfc=0.0, post_hr=row["pre_hr"])
        return row
    comb = _direction(config.mode, g_stfc, g_stti, conflict, config.lambda_hp)
    row.update(lambda_stti=comb.lambda_stti, lambda_stfc=comb.lambda_stfc)
    if comb.degenerate:
        row["flag"] = "degenerate gradients"
    elif not gdc.sgd_momentum_step(state, params, comb.gradient):
        row["flag"] = "non-finite gradient"
    else:
        row["updated"] = 1
    row["post_hr"] = predict_hr(model, x, config.band_bpm) if row["updated"] else row["pre_hr"]
    return row


def step_seed(seed: int, step: int) -> int:
    """Augmentation seed for one step of one run."""
    return int(np.random.SeedSequence([seed, step]).generate_state(1)[0])


def _blank_row() -> dict:
    row = {k: float("nan") for k in REPORT_COLUMNS}
    row.update(gate=0, conflict=0, updated=0, flag="")
    return row


def run_tta(model: BvpNetMini, stream: Sequence, config: RunConfig, seed: int = 0,
            copy_model: bool = True) -> TtaReport:
    """Adapt ``model`` online over ``stream`` (batch size 1, never reset).

    ``stream`` items are LabeledInstance objects or Stmap objects carrying a
    raw window (ground truth then reads as NaN). The model is cloned unless
    ``copy_model`` is False.
    """
    if len(stream) == 0:
        raise ValueError("target stream is empty")
    model = model.clone() if copy_model else model
    state = gdc.OptimState.for_params(model.parameters(), lr=config.lr, momentum=config.momentum,
                                      lambda_hp=config.lambda_hp)
    rows: list[dict] = []
    preds: list[np.ndarray] = []
    step = 0
    for cycle in range(config.cycles):
        for idx, item in enumerate(stream):
            stmap = getattr(item, "stmap", item)
            gt = float(getattr(item, "gt_hr_bpm", float("nan")))
            for _ in range(config.steps_per_instance):
                row = _blank_row()
                row.update(step=step, cycle=cycle, instance=idx, t0=stmap.t0, gt_hr=gt)
                row.update(adapt_step(model, state, stmap.raw, config, step_seed(seed, step), stmap.frame_rate_hz))
                rows.append(row)
                step += 1
            if cycle == 0:
                preds.append(model.forward(stmap.data).data)
    return TtaReport(rows, summarize(rows, preds, len(stream)), config.mode, seed, model)


def running_mae(rows: Sequence[dict], window: int, column: str = "post_hr") -> np.ndarray:
    """Trailing-window MAE; entry i covers rows (i - window, i]. Starts once the window is full."""
    err = np.array([abs(r[column] - r["gt_hr"]) for r in rows], dtype=float)
    if len(err) < window:
        return np.array([np.nanmean(err)]) if len(err) else np.array([])
    c = np.concatenate([[0.0], np.cumsum(err)])
    return (c[window:] - c[:-window]) / window


def summarize(rows: Sequence[dict], preds: Sequence[np.ndarray] = (), n_instances: int | None = None) -> dict:
    gt = np.array([r["gt_hr"] for r in rows], dtype=float)
    out: dict = {"rows": len(rows), "updates": int(sum(r["updated"] for r in rows)),
                 "conflicts": int(sum(r["conflict"] for r in rows))}
    for tag in ("pre", "post"):
        pred = np.array([r[f"{tag}_hr"] for r in rows], dtype=float)
        ok = np.isfinite(pred) & np.isfinite(gt)
        out[tag] = dsp.metrics(pred[ok], gt[ok]) if ok.any() else None
    if n_instances and len(rows) >= n_instances:
        curve = running_mae(rows, n_instances)
        out["running_mae_final"] = float(curve[-1])
        out["running_mae_min"] = float(np.min(curve))
    out["hrv"] = None
    if preds:
        sig = np.concatenate([(p - p.mean()) / (p.std() or 1.0) for p in preds])
        try:
            hrv = dsp.hrv_metrics(dsp.detect_beats(sig))
            out["hrv"] = asdict(hrv)
        except (dsp.InsufficientBeatsError, dsp.DegenerateSignalError, ValueError):
            pass
    return out


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_report_csv(path, rows: Iterable[dict]):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_COLUMNS)
        for r in rows:
            writer.writerow([_fmt(r[k]) for k in REPORT_COLUMNS])


def read_report_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != REPORT_COLUMNS:
            raise ValueError(f"{path}: unexpected report columns {reader.fieldnames}")
        rows = []
        for r in reader:
            row = {}
            for k, v in r.items():
                if k == "flag":
                    row[k] = v
                elif k in ("step", "cycle", "instance", "t0", "gate", "conflict", "updated"):
                    row[k] = int(v)
                else:
                    row[k] = float(v)
            rows.append(row)
        return rows


def _json_safe(obj):
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    if isinstance(obj, np.generic):
        return _json_safe(obj.item())
    return obj


def run_suite(model: BvpNetMini, configs: Sequence[RunConfig], seeds: Sequence[int] | None = None,
              output_dir=None, stream: Sequence | None = None) -> dict:
    """Every config under every seed; per-run CSV reports plus summary.csv / summary.json.

    A failing run is recorded under ``failures`` and the suite carries on.
    """
    if not configs:
        raise ValueError("run_suite needs at least one config")
    out_dir = Path(output_dir or configs[0].output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    streams: dict = {}
    runs, failures = [], []
    for cfg in configs:
        key = (cfg.target_seed, cfg.target_subjects, cfg.duration_frames, cfg.window, cfg.max_shift, cfg.stride)
        if stream is None and key not in streams:
            streams[key] = target_stream(cfg)
        data = stream if stream is not None else streams[key]
        for seed in (seeds if seeds is not None else cfg.seeds):
            name = f"report_{cfg.mode}_seed{seed}.csv"
            started = time.perf_counter()
            try:
                report = run_tta(model, data, cfg, seed)
            except Exception as exc:  # recorded, suite continues
                log.exception("run %s seed %s failed", cfg.mode, seed)
                failures.append({"mode": cfg.mode, "seed": seed, "error": repr(exc)})
                continue
            report.write_csv(out_dir / name)
            log.info("%s seed %s: %.1fs", cfg.mode, seed, time.perf_counter() - started)
            runs.append({"mode": cfg.mode, "seed": seed, "report": name, **_flat_summary(report.summary)})
    aggregate = _aggregate(runs)
    summary = {"runs": runs, "aggregate": aggregate, "failures": failures,
               "configs": [c.to_dict() for c in configs]}
    _write_summary_csv(out_dir / "summary.csv", runs)
    (out_dir / "summary.json").write_text(json.dumps(_json_safe(summary), indent=2, sort_keys=True))
    return summary


_SUMMARY_KEYS = ("mae_pre", "rmse_pre", "pearson_pre", "mae_post", "rmse_post", "pearson_post",
                 "running_mae_final", "running_mae_min", "conflicts", "updates")


def _flat_summary(s: dict) -> dict:
    out = {}
    for tag in ("pre", "post"):
        m = s.get(tag) or {}
        for k in ("mae", "rmse", "pearson"):
            v = m.get(k)
            out[f"{k}_{tag}"] = float("nan") if v is None else v
    for k in ("running_mae_final", "running_mae_min", "conflicts", "updates"):
        out[k] = s.get(k, float("nan"))
    return out


def _aggregate(runs: Sequence[dict]) -> dict:
    agg = {}
    for mode in dict.fromkeys(r["mode"] for r in runs):
        sel = [r for r in runs if r["mode"] == mode]
        entry = {"n": len(sel)}
        for k in ("mae_pre", "rmse_pre", "pearson_pre", "mae_post", "rmse_post", "pearson_post",
                  "running_mae_final", "running_mae_min"):
            vals = np.array([r[k] for r in sel], dtype=float)
            entry[f"{k}_mean"] = float(np.mean(vals))
            entry[f"{k}_std"] = float(np.std(vals))
        agg[mode] = entry
    return agg


def _write_summary_csv(path, runs: Sequence[dict]):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("mode", "seed", "report") + _SUMMARY_KEYS)
        for r in runs:
            writer.writerow([r["mode"], r["seed"], r["report"]] + [_fmt(r[k]) for k in _SUMMARY_KEYS])
