"""Synthetic ROI traces, STMap construction and file formats.

Each region of a simulated face carries the same underlying pulse phase,
shifted by a per-region transit delay and given its own amplitude and
harmonic morphology. Noise is drawn once per (seed, region[, channel]) over
the whole stream, so overlapping windows see the same samples.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

N_REGIONS = 25
STMAP_WIDTH = 64
WINDOW = 256
MAX_SHIFT = 30
HR_RANGE_BPM = (45.0, 170.0)
MAX_DELAY_FRAMES = 10.0
STM_MAGIC = b"STM1"
_STM_HEADER = struct.Struct("<4sIIId")
_CHANNELS = "RGB"


class StmapFormatError(ValueError):
    pass


@dataclass(frozen=True)
class ScenarioConfig:
    """Parameters of one simulated recording.

    ``hr_knots`` are (frame, bpm) points of a piecewise-linear heart-rate
    trajectory; ``hrv_modulation`` adds (frequency_hz, depth_bpm) sinusoidal
    rate modulation on top. Delays are in frames. ``noise_sigma`` is the
    per-region pulse noise and ``channel_noise_sigma`` independent sensor
    noise per region and channel, both relative to a unit pulse.
    """

    seed: int = 0
    duration_frames: int = 1800
    frame_rate_hz: float = 30.0
    hr_knots: tuple[tuple[float, float], ...] = ((0.0, 72.0),)
    hrv_modulation: tuple[tuple[float, float], ...] = ()
    n_regions: int = N_REGIONS
    region_delays: tuple[float, ...] | None = None
    region_amplitudes: tuple[float, ...] | None = None
    harmonics: tuple[float, ...] = (1.0, 0.5, 0.25)
    morphology_jitter: float = 0.0
    resp_freq_hz: float = 0.25
    resp_depth: float = 0.0
    noise_sigma: float = 0.0
    channel_noise_sigma: float = 0.0
    channel_gains: tuple[float, float, float] = (0.35, 1.0, 0.55)
    ambient: tuple[float, float, float] = (1.0, 1.0, 1.0)
    illumination_ramp: float = 0.0

    def __post_init__(self):
        if self.duration_frames < 1:
            raise ValueError("duration_frames must be positive")
        lo, hi = HR_RANGE_BPM
        knots = np.asarray(self.hr_knots, dtype=float)
        depth = sum(abs(d) for _, d in self.hrv_modulation)
        if knots.ndim != 2 or knots.shape[1] != 2 or len(knots) == 0:
            raise ValueError("hr_knots must be a nonempty sequence of (frame, bpm) pairs")
        if knots[:, 1].min() - depth < lo or knots[:, 1].max() + depth > hi:
            raise ValueError(f"heart-rate trajectory leaves [{lo}, {hi}] bpm")
        for name in ("region_delays", "region_amplitudes"):
            vals = getattr(self, name)
            if vals is not None and len(vals) != self.n_regions:
                raise ValueError(f"{name} needs {self.n_regions} values, got {len(vals)}")
        if any(not 0 <= d <= MAX_DELAY_FRAMES for d in self.delays):
            raise ValueError(f"region delays must lie in [0, {MAX_DELAY_FRAMES}] frames")
        if any(a <= 0 for a in self.amplitudes):
            raise ValueError("region amplitudes must be positive")

    @property
    def delays(self) -> np.ndarray:
        if self.region_delays is None:
            return np.zeros(self.n_regions)
        return np.asarray(self.region_delays, dtype=float)

    @property
    def amplitudes(self) -> np.ndarray:
        if self.region_amplitudes is None:
            return np.ones(self.n_regions)
        return np.asarray(self.region_amplitudes, dtype=float)


@dataclass
class Stmap:
    """Normalised T x W x 3 map plus, when known, the longer raw window behind it."""

    data: np.ndarray
    frame_rate_hz: float = 30.0
    t0: int = 0
    raw: np.ndarray | None = field(default=None, repr=False)

    @property
    def shape(self):
        return self.data.shape


@dataclass
class LabeledInstance:
    stmap: Stmap
    gt_bvp: np.ndarray
    gt_hr_bpm: float
    roi: np.ndarray = field(repr=False)

    @property
    def raw(self) -> np.ndarray:
        return self.stmap.raw


# ---------------------------------------------------------------------------
# generator
# ---------------------------------------------------------------------------

def hr_curve(config: ScenarioConfig, frames: np.ndarray) -> np.ndarray:
    """Instantaneous heart rate (bpm) at (possibly fractional) frames."""
    knots = np.asarray(config.hr_knots, dtype=float)
    hr = np.interp(frames, knots[:, 0], knots[:, 1])
    for f_mod, depth in config.hrv_modulation:
        hr = hr + depth * np.sin(2 * np.pi * f_mod * frames / config.frame_rate_hz)
    return hr


def _phase_grid(config: ScenarioConfig):
    start = -int(np.ceil(MAX_DELAY_FRAMES)) - 1
    grid = np.arange(start, config.duration_frames, dtype=float)
    rate_hz = hr_curve(config, grid) / 60.0
    phase = 2 * np.pi * np.concatenate([[0.0], np.cumsum(rate_hz[:-1])]) / config.frame_rate_hz
    # anchor phase zero at frame 0
    phase -= phase[-start]
    return grid, phase


def _pulse_phase(config: ScenarioConfig, frames: np.ndarray) -> np.ndarray:
    grid, phase = _phase_grid(config)
    return np.interp(frames, grid, phase)


def _morphology(config: ScenarioConfig, region: int) -> np.ndarray:
    offsets = np.zeros(len(config.harmonics))
    if config.morphology_jitter > 0 and len(offsets) > 1:
        rng = np.random.default_rng([config.seed, region, 7919])
        offsets[1:] = rng.normal(0.0, config.morphology_jitter, len(offsets) - 1)
    return offsets


def _waveform(phase: np.ndarray, harmonics: Sequence[float], offsets: np.ndarray) -> np.ndarray:
    out = np.zeros_like(phase)
    for k, (a, phi) in enumerate(zip(harmonics, offsets), start=1):
        out += a * np.sin(k * phase + phi)
    return out


def _check_window(config: ScenarioConfig, t0: int, length: int):
    if t0 < 0 or length < 1 or t0 + length > config.duration_frames:
        raise ValueError(f"window [{t0}, {t0 + length}) outside the {config.duration_frames}-frame scenario")


def gen_bvp(config: ScenarioConfig, region: int, t0: int, length: int) -> np.ndarray:
    """Pulse trace of one region over frames [t0, t0 + length)."""
    if not 0 <= region < config.n_regions:
        raise ValueError(f"region {region} out of range [0, {config.n_regions})")
    _check_window(config, t0, length)
    frames = np.arange(t0, t0 + length, dtype=float)
    phase = _pulse_phase(config, frames - config.delays[region])
    sig = config.amplitudes[region] * _waveform(phase, config.harmonics, _morphology(config, region))
    if config.resp_depth:
        sig = sig + config.resp_depth * np.sin(2 * np.pi * config.resp_freq_hz * frames / config.frame_rate_hz)
    if config.noise_sigma:
        noise = np.random.default_rng([config.seed, region]).normal(0.0, config.noise_sigma, config.duration_frames)
        sig = sig + noise[t0:t0 + length]
    return sig


def gt_bvp(config: ScenarioConfig, t0: int, length: int) -> np.ndarray:
    """Delay-free, noise-free reference pulse, standardised to zero mean and unit variance."""
    _check_window(config, t0, length)
    frames = np.arange(t0, t0 + length, dtype=float)
    sig = _waveform(_pulse_phase(config, frames), config.harmonics, np.zeros(len(config.harmonics)))
    sd = sig.std()
    return (sig - sig.mean()) / sd if sd > 0 else sig - sig.mean()


def beat_frames(config: ScenarioConfig, t0: int, length: int) -> np.ndarray:
    """Frames (rounded) where the fundamental of the reference pulse peaks."""
    _check_window(config, t0, length)
    grid, phase = _phase_grid(config)
    lo, hi = _pulse_phase(config, np.array([t0, t0 + length - 1.0]))
    ks = np.arange(np.ceil((lo - np.pi / 2) / (2 * np.pi)), np.floor((hi - np.pi / 2) / (2 * np.pi)) + 1)
    targets = np.pi / 2 + 2 * np.pi * ks
    times = np.interp(targets, phase, grid)
    return np.round(times).astype(int) - t0


def roi_traces(config: ScenarioConfig, t0: int, length: int) -> np.ndarray:
    """Per-region RGB means, shape (length, n_regions, 3)."""
    _check_window(config, t0, length)
    frames = np.arange(t0, t0 + length, dtype=float)
    gains = np.asarray(config.channel_gains, dtype=float)
    ambient = np.asarray(config.ambient, dtype=float)
    illum = 1.0 + config.illumination_ramp * frames / config.duration_frames
    out = np.empty((length, config.n_regions, 3))
    for w in range(config.n_regions):
        pulse = gen_bvp(config, w, t0, length)
        out[:, w, :] = illum[:, None] * ambient[None, :] + pulse[:, None] * gains[None, :]
        if config.channel_noise_sigma:
            for c in range(3):
                noise = np.random.default_rng([config.seed, w, 1 + c]).normal(
                    0.0, config.channel_noise_sigma, config.duration_frames)
                out[:, w, c] += noise[t0:t0 + length]
    return out


def resize_regions(x: np.ndarray, width: int = STMAP_WIDTH) -> np.ndarray:
    """Linear interpolation along the region axis (axis 1)."""
    n = x.shape[1]
    if n == width:
        return x.astype(np.float64, copy=True)
    pos = np.linspace(0.0, n - 1.0, width)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n - 1)
    frac = (pos - lo)[None, :, None]
    # a + (b - a) f keeps equal neighbours bit-exact
    return x[:, lo, :] + (x[:, hi, :] - x[:, lo, :]) * frac


def normalize(x: np.ndarray) -> np.ndarray:
    """Min-max scale every (region, channel) column over time; constant columns become 0.5."""
    x = np.asarray(x, dtype=np.float64)
    lo = x.min(axis=0, keepdims=True)
    span = x.max(axis=0, keepdims=True) - lo
    flat = span <= 0
    out = (x - lo) / np.where(flat, 1.0, span)
    return np.where(flat, 0.5, out)


def build_stmap(roi: np.ndarray, frame_rate_hz: float, t0: int = 0, window: int = WINDOW,
                width: int = STMAP_WIDTH) -> Stmap:
    """Resize ROI traces to ``width`` columns and normalise the first ``window`` frames."""
    if roi.shape[0] < window:
        raise ValueError(f"window longer than stream: need {window} frames, have {roi.shape[0]}")
    raw = resize_regions(roi, width)
    return Stmap(data=normalize(raw[:window]), frame_rate_hz=float(frame_rate_hz), t0=int(t0), raw=raw)


def gen_instance(config: ScenarioConfig, t0: int, window: int = WINDOW,
                 max_shift: int = MAX_SHIFT, width: int = STMAP_WIDTH) -> LabeledInstance:
    roi = roi_traces(config, t0, window + max_shift)
    stmap = build_stmap(roi, config.frame_rate_hz, t0, window, width)
    frames = np.arange(t0, t0 + window, dtype=float)
    return LabeledInstance(stmap=stmap, gt_bvp=gt_bvp(config, t0, window),
                           gt_hr_bpm=float(hr_curve(config, frames).mean()), roi=roi)


def window_starts(duration: int, window: int = WINDOW, max_shift: int = MAX_SHIFT,
                  stride: int | None = None) -> range:
    stride = stride or window // 2
    return range(0, duration - (window + max_shift) + 1, stride)


def gen_stream(configs: Sequence[ScenarioConfig], window: int = WINDOW, max_shift: int = MAX_SHIFT,
               stride: int | None = None) -> list[LabeledInstance]:
    """Sliding windows over each scenario, concatenated in order."""
    return [gen_instance(cfg, t0, window, max_shift)
            for cfg in configs
            for t0 in window_starts(cfg.duration_frames, window, max_shift, stride)]


# ---------------------------------------------------------------------------
# scenario suites
# ---------------------------------------------------------------------------

def _subject(rng: np.random.Generator, seed: int, duration: int, hr_range, delay_max,
             amp_spread, **kw) -> ScenarioConfig:
    n_knots = 4
    frames = np.linspace(0, duration, n_knots)
    start = rng.uniform(*hr_range)
    drift = rng.normal(0.0, 4.0, n_knots).cumsum()
    bpm = np.clip(start + drift, *hr_range)
    return ScenarioConfig(
        seed=seed,
        duration_frames=duration,
        hr_knots=tuple(zip(frames.tolist(), bpm.tolist())),
        region_delays=tuple(rng.uniform(0.0, delay_max, N_REGIONS).tolist()),
        region_amplitudes=tuple(rng.uniform(1 - amp_spread, 1 + amp_spread, N_REGIONS).tolist()),
        resp_freq_hz=float(rng.uniform(0.15, 0.35)),
        **kw,
    )


SOURCE_DEFAULTS = dict(
    hr_range=(55.0, 110.0), delay_max=1.0, amp_spread=0.1,
    morphology_jitter=0.2, resp_depth=0.1, noise_sigma=0.05, channel_noise_sigma=0.05,
    channel_gains=(0.35, 1.0, 0.55), illumination_ramp=0.0,
)

TARGET_DEFAULTS = dict(
    hr_range=(50.0, 140.0), delay_max=8.0, amp_spread=0.5,
    morphology_jitter=0.6, resp_depth=0.3, noise_sigma=4.0, channel_noise_sigma=4.0,
    channel_gains=(0.6, 0.8, 0.3), illumination_ramp=0.3,
)


def make_suite(seed: int, n_subjects: int, duration_frames: int = 1800, **overrides) -> list[ScenarioConfig]:
    """A list of subjects drawn around the given defaults (``**overrides``)."""
    params = dict(SOURCE_DEFAULTS)
    params.update(overrides)
    rng = np.random.default_rng([seed, 104729])
    hr_range = params.pop("hr_range")
    delay_max = params.pop("delay_max")
    amp_spread = params.pop("amp_spread")
    return [_subject(rng, seed * 1000 + i, duration_frames, hr_range, delay_max, amp_spread, **params)
            for i in range(n_subjects)]


def source_suite(seed: int = 0, n_subjects: int = 12, duration_frames: int = 1800, **kw):
    return make_suite(seed, n_subjects, duration_frames, **{**SOURCE_DEFAULTS, **kw})


def target_suite(seed: int = 0, n_subjects: int = 5, duration_frames: int = 1800, **kw):
    return make_suite(10_000 + seed, n_subjects, duration_frames, **{**TARGET_DEFAULTS, **kw})


def with_(config: ScenarioConfig, **changes) -> ScenarioConfig:
    return replace(config, **changes)


# ---------------------------------------------------------------------------
# ROI-trace CSV
# ---------------------------------------------------------------------------

def write_roi_csv(path, roi: np.ndarray, frame_rate_hz: float, start_frame: int = 0):
    """Frame index followed by W x 3 region-channel means; frame rate in a leading comment row."""
    roi = np.asarray(roi, dtype=np.float64)
    n_frames, n_reg, _ = roi.shape
    with open(path, "w", newline="") as fh:
        fh.write(f"# frame_rate_hz={float(frame_rate_hz)!r}\n")
        writer = csv.writer(fh)
        writer.writerow(["frame"] + [f"r{w:02d}_{c}" for w in range(n_reg) for c in _CHANNELS])
        for t in range(n_frames):
            writer.writerow([start_frame + t] + [repr(float(v)) for v in roi[t].reshape(-1)])


def read_roi_csv(path) -> tuple[np.ndarray, np.ndarray, float]:
    """Returns (frame indices, ROI array (n, W, 3), frame rate)."""
    with open(path, newline="") as fh:
        lines = fh.read().splitlines()
    if not lines or not any(line.strip() for line in lines):
        raise StmapFormatError(f"{path}: no data")
    head = lines[0].strip()
    if not head.startswith("# frame_rate_hz="):
        raise StmapFormatError(f"{path}: row 1: missing '# frame_rate_hz=' header")
    try:
        frame_rate = float(head.split("=", 1)[1])
    except ValueError:
        raise StmapFormatError(f"{path}: row 1: bad frame rate {head!r}") from None
    rows = list(csv.reader(lines[1:]))
    if len(rows) < 2:
        raise StmapFormatError(f"{path}: no data")
    header = rows[0]
    n_cols = len(header)
    if n_cols < 4 or (n_cols - 1) % 3:
        raise StmapFormatError(f"{path}: row 2: expected frame + W*3 columns, got {n_cols}")
    frames, values = [], []
    for lineno, row in enumerate(rows[1:], start=3):
        if len(row) != n_cols:
            raise StmapFormatError(f"{path}: row {lineno}: ragged row ({len(row)} columns, expected {n_cols})")
        try:
            frame = int(row[0])
            vals = [float(v) for v in row[1:]]
        except ValueError:
            raise StmapFormatError(f"{path}: row {lineno}: non-numeric value") from None
        if frames and frame <= frames[-1]:
            raise StmapFormatError(f"{path}: row {lineno}: frame index {frame} not increasing")
        frames.append(frame)
        values.append(vals)
    roi = np.asarray(values, dtype=np.float64).reshape(len(frames), (n_cols - 1) // 3, 3)
    return np.asarray(frames), roi, frame_rate


def load_roi_csv(path, window: int = WINDOW, stride: int | None = None, max_shift: int = MAX_SHIFT,
                 width: int = STMAP_WIDTH) -> Iterator[Stmap]:
    """Sliding (window + max_shift)-frame windows over a ROI-trace CSV."""
    frames, roi, fs = read_roi_csv(path)
    need = window + max_shift
    if len(frames) < need:
        raise StmapFormatError(f"{path}: window longer than stream ({need} frames needed, {len(frames)} present)")
    stride = stride or window // 2
    for start in range(0, len(frames) - need + 1, stride):
        yield build_stmap(roi[start:start + need], fs, int(frames[start]), window, width)


# ---------------------------------------------------------------------------
# STM1 binary container
# ---------------------------------------------------------------------------

def stmap_write(path, stmap: Stmap):
    """``STM1`` | T, W, C as uint32 LE | frame rate float64 LE | float32 LE row-major data."""
    data = np.asarray(stmap.data)
    if data.ndim != 3:
        raise StmapFormatError(f"STMap must be 3-D, got shape {data.shape}")
    t, w, c = data.shape
    with open(path, "wb") as fh:
        fh.write(_STM_HEADER.pack(STM_MAGIC, t, w, c, float(stmap.frame_rate_hz)))
        fh.write(data.astype("<f4").tobytes(order="C"))


def stmap_read(path) -> Stmap:
    blob = Path(path).read_bytes()
    if len(blob) < _STM_HEADER.size:
        raise StmapFormatError(f"{path}: truncated header ({len(blob)} bytes, expected {_STM_HEADER.size})")
    magic, t, w, c, fs = _STM_HEADER.unpack_from(blob)
    if magic != STM_MAGIC:
        raise StmapFormatError(f"{path}: bad magic {magic!r}, expected {STM_MAGIC!r}")
    expected = t * w * c * 4
    actual = len(blob) - _STM_HEADER.size
    if actual != expected:
        raise StmapFormatError(f"{path}: truncated payload: expected {expected} bytes, got {actual}")
    data = np.frombuffer(blob, dtype="<f4", offset=_STM_HEADER.size).reshape(t, w, c)
    return Stmap(data=data.astype(np.float64), frame_rate_hz=fs)
