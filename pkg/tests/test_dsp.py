import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cici import dsp, synth
from cici.autograd import Tensor, backward, parameter

FS = 30.0
T = 256
TONE_BPM = 12 * FS / T * 60  # 84.375, bin aligned


def tone(bpm, n=T, amp=1.0, phase=0.0):
    return amp * np.sin(2 * np.pi * bpm / 60 * np.arange(n) / FS + phase)


def naive_psd(x, fs=FS, band=dsp.HR_BAND_BPM):
    """Direct double-sum DFT."""
    n = len(x)
    x = x - x.mean()
    freqs, power = [], []
    for k in range(n // 2 + 1):
        f = k * fs / n * 60
        if band[0] <= f <= band[1]:
            re = sum(x[t] * np.cos(2 * np.pi * k * t / n) for t in range(n))
            im = sum(x[t] * np.sin(2 * np.pi * k * t / n) for t in range(n))
            freqs.append(f)
            power.append(re * re + im * im)
    return np.array(freqs), np.array(power)


def test_bin_aligned_tone():
    spec = dsp.psd(tone(TONE_BPM))
    assert TONE_BPM == 84.375
    assert spec.freqs_bpm[np.argmax(spec.power.data)] == TONE_BPM
    assert dsp.peak_hr_bpm(spec) == TONE_BPM
    others = np.delete(spec.power.data, np.argmax(spec.power.data))
    assert others.max() < 1e-18 * spec.power.data.max() + 1e-9


def test_constant_signal_zero_power_then_degenerate():
    spec = dsp.psd(np.full(T, 3.7))
    assert np.all(spec.power.data == 0)
    with pytest.raises(dsp.DegenerateSignalError, match="degenerate signal"):
        dsp.peak_hr_bpm(spec)
    with pytest.raises(dsp.DegenerateSignalError):
        dsp.soft_peak_bpm(spec)


@pytest.mark.parametrize("seed", range(5))
def test_matches_naive_dft(seed):
    x = np.random.default_rng(seed).normal(size=96)
    freqs, ref = naive_psd(x)
    spec = dsp.psd(x)
    assert np.allclose(spec.freqs_bpm, freqs)
    assert np.allclose(spec.power.data, ref, rtol=1e-6, atol=0)


def test_psd_type_invariants():
    spec = dsp.psd(np.random.default_rng(1).normal(size=T))
    assert np.all(spec.power.data >= 0)
    assert np.all(np.diff(spec.freqs_bpm) > 0)
    assert np.allclose(np.diff(spec.freqs_bpm), FS / T * 60)
    assert spec.bin_width_bpm == pytest.approx(7.03125)
    assert spec.freqs_bpm[0] >= 42 and spec.freqs_bpm[-1] <= 180


@given(st.integers(0, 2**32 - 1), st.sampled_from([64, 100, 128, 256]))
def test_parseval(seed, n):
    x = np.random.default_rng(seed).normal(size=n)
    spec = dsp.psd(x, FS, band_bpm=(1e-9, FS * 30))
    p = spec.power.data.copy()
    if n % 2 == 0:
        p[-1] *= 0.5
    energy = np.sum((x - x.mean()) ** 2)
    assert p.sum() == pytest.approx(n / 2 * energy, rel=1e-9)


def test_psd_preconditions():
    with pytest.raises(ValueError, match="64"):
        dsp.psd(np.ones(32))
    with pytest.raises(ValueError):
        dsp.psd(np.ones(T), band_bpm=(100, 50))
    with pytest.raises(ValueError):
        dsp.psd(np.ones(T), band_bpm=(10, 2000))
    with pytest.raises(dsp.ag.ShapeError):
        dsp.psd(np.ones((T, 2)))


def test_peak_dominant_component():
    x = tone(84.375, amp=2) + tone(140.625, amp=1)
    assert dsp.peak_hr_bpm(dsp.psd(x)) == 84.375


def test_peak_tie_goes_low():
    x = tone(84.375) + tone(140.625, phase=0.0)
    spec = dsp.psd(x)
    p = spec.power.data
    i, j = np.searchsorted(spec.freqs_bpm, [84.375, 140.625])
    assert p[i] == pytest.approx(p[j])
    spec.power.data[j] = spec.power.data[i]
    assert dsp.peak_hr_bpm(spec) == 84.375


@pytest.mark.parametrize("seed", range(4))
def test_noisy_tone_matches_bruteforce_argmax(seed):
    rng = np.random.default_rng(seed)
    s = tone(90.0)
    noise = rng.normal(size=T) * np.sqrt(np.mean(s ** 2) / 10)  # 10 dB
    freqs, ref = naive_psd(s + noise)
    best = max(range(len(ref)), key=lambda k: (ref[k], -k))
    assert dsp.peak_hr_bpm(dsp.psd(s + noise)) == freqs[best]


def test_soft_peak_limit():
    spec = dsp.psd(tone(TONE_BPM))
    val = dsp.soft_peak_bpm(spec, temperature=1e-6 * spec.power.data.max()).item()
    assert abs(val - dsp.peak_hr_bpm(spec)) <= 0.01


def test_soft_peak_uniform_power_is_mean_frequency():
    spec = dsp.psd(tone(TONE_BPM))
    spec.power = Tensor(np.full(len(spec.freqs_bpm), 2.5))
    assert dsp.soft_peak_bpm(spec).item() == pytest.approx(spec.freqs_bpm.mean(), abs=1e-9)
    assert dsp.soft_peak_bpm(spec, temperature=0.3).item() == pytest.approx(spec.freqs_bpm.mean(), abs=1e-9)


@pytest.mark.parametrize("seed", range(3))
def test_soft_peak_matches_explicit_oracle(seed):
    x = tone(100.0) + np.random.default_rng(seed).normal(size=T)
    spec = dsp.psd(x)
    p, f = spec.power.data, spec.freqs_bpm
    for temp in (0.5 * p.max(), 0.05 * p.max(), None):
        tau = 0.05 * p.max() if temp is None else temp
        w = np.exp((p - p.max()) / tau)
        w /= w.sum()
        got = dsp.soft_peak_bpm(spec, temperature=temp).item()
        assert got == pytest.approx(float(w @ f), rel=1e-9, abs=1e-9)


def test_soft_peak_monotone_convergence():
    x = tone(110.0) + 0.3 * np.random.default_rng(0).normal(size=T)
    spec = dsp.psd(x)
    target = dsp.peak_hr_bpm(spec)
    errs = [abs(dsp.soft_peak_bpm(spec, temperature_scale=s).item() - target)
            for s in (1.0, 0.5, 0.2, 0.1, 0.05, 0.02, 0.01)]
    assert all(b <= a + 1e-12 for a, b in zip(errs, errs[1:]))
    assert errs[-1] < 0.5


def test_soft_peak_amplitude_invariant_and_differentiable():
    x0 = tone(95.0) + 0.5 * tone(150.0)
    a = dsp.soft_peak_bpm(dsp.psd(x0)).item()
    b = dsp.soft_peak_bpm(dsp.psd(50 * x0)).item()
    assert a == pytest.approx(b, rel=1e-12)
    x = parameter(x0)
    g = backward(dsp.soft_peak_bpm(dsp.psd(x)), [x])[x.id]
    assert np.isfinite(g).all() and np.abs(g).max() > 0
    with pytest.raises(ValueError):
        dsp.soft_peak_bpm(dsp.psd(x0), temperature_scale=0)


def test_band_power_cases():
    spec = dsp.psd(tone(TONE_BPM))
    total = spec.power.data.sum()
    assert dsp.band_power(spec, 1.0, 2.0) == pytest.approx(total)
    assert dsp.band_power(spec, 2.0, 2.9) == pytest.approx(0.0, abs=1e-9 * total)
    two = dsp.psd(tone(84.375) + 0.7 * tone(140.625) + 0.1 * np.random.default_rng(2).normal(size=T))
    for lo, hi in [(1.0, 2.0), (1.2, 2.5), (0.7, 3.0), (2.34375, 2.5)]:
        f_hz = two.freqs_bpm / 60
        ref = sum(p for f, p in zip(f_hz, two.power.data) if lo <= f < hi)
        assert dsp.band_power(two, lo, hi) == pytest.approx(ref, rel=1e-12)
    with pytest.raises(ValueError):
        dsp.band_power(spec, 2.0, 1.0)


def test_band_power_empty_band_warns():
    spec = dsp.psd(tone(TONE_BPM))
    with pytest.warns(dsp.EmptyBandWarning):
        assert dsp.band_power(spec, 0.01, 0.02) == 0.0


def test_detect_beats_sinusoid():
    x = np.sin(2 * np.pi * 1.5 * np.arange(300) / FS)
    assert abs(len(dsp.detect_beats(x)) - 15) <= 1


def test_detect_beats_constant_and_short():
    with pytest.raises(dsp.InsufficientBeatsError, match="insufficient beats"):
        dsp.detect_beats(np.zeros(300))
    with pytest.raises(ValueError):
        dsp.detect_beats(np.ones(40))


@pytest.mark.parametrize("bpm", [55.0, 80.0, 130.0])
def test_detect_beats_exact_recovery(bpm):
    cfg = synth.ScenarioConfig(seed=1, duration_frames=600, hr_knots=((0, bpm),), noise_sigma=0.0,
                               harmonics=(1.0, 0.0, 0.0), resp_depth=0.0, morphology_jitter=0.0)
    ref = synth.beat_frames(cfg, 0, 600)
    got = dsp.detect_beats(synth.gt_bvp(cfg, 0, 600))
    inner = got[(got > 2) & (got < 597)]
    ref_inner = ref[(ref > 2) & (ref < 597)]
    assert np.array_equal(inner, ref_inner)


def _ibi_beats(mods, n=400, base=0.8, fs=FS):
    t = [0.0]
    while len(t) < n:
        x = t[-1]
        t.append(x + base + sum(a * np.sin(2 * np.pi * f * x) for f, a in mods))
    return np.array(t) * fs


def test_hrv_lf_only():
    m = dsp.hrv_metrics(_ibi_beats([(0.10, 0.05)]))
    assert m.lfnu >= 0.9


def test_hrv_hf_only():
    m = dsp.hrv_metrics(_ibi_beats([(0.30, 0.05)]))
    assert m.hfnu >= 0.9


@pytest.mark.xfail(strict=True, reason="linear 4 Hz resampling of beat-sampled IBIs attenuates 0.30 Hz; "
                                       "measured LF/HF about 1.40")
def test_hrv_equal_modulation_balanced():
    m = dsp.hrv_metrics(_ibi_beats([(0.10, 0.05), (0.30, 0.05)]))
    assert 0.8 <= m.lf_hf_ratio <= 1.25


@given(st.floats(0.01, 0.08), st.floats(0.0, 0.08), st.floats(0.05, 0.35))
def test_hrv_normalized_units_sum_to_one(a1, a2, f2):
    m = dsp.hrv_metrics(_ibi_beats([(0.1, a1), (f2, a2)], n=120))
    assert m.lfnu + m.hfnu == pytest.approx(1.0, abs=1e-9)
    assert 0 <= m.lfnu <= 1 and m.lf_hf_ratio >= 0


def test_hrv_errors():
    with pytest.raises(dsp.InsufficientBeatsError):
        dsp.hrv_metrics(np.arange(10) * 25)
    with pytest.raises(dsp.DegenerateSignalError, match="degenerate IBI"):
        dsp.hrv_metrics(np.arange(200) * 25)


def test_metrics_examples():
    t = np.array([60.0, 75.0, 90.0, 100.0])
    m = dsp.metrics(t, t)
    assert (m["mae"], m["rmse"]) == (0.0, 0.0) and m["pearson"] == pytest.approx(1.0)
    m = dsp.metrics(t + 2, t)
    assert m["mae"] == pytest.approx(2) and m["rmse"] == pytest.approx(2) and m["pearson"] == pytest.approx(1.0)
    assert dsp.metrics([1, 2, 3], [3, 2, 1])["pearson"] == pytest.approx(-1.0)
    m = dsp.metrics([5, 5, 5], [1, 2, 3])
    assert m["pearson"] is None and m["mae"] == pytest.approx(3.0)
    with pytest.raises(ValueError):
        dsp.metrics([1, 2], [1])


@given(st.integers(0, 10_000))
def test_dsp_deterministic(seed):
    x = np.random.default_rng(seed).normal(size=128)
    a, b = dsp.psd(x), dsp.psd(x.copy())
    assert np.array_equal(a.power.data, b.power.data)
    assert dsp.soft_peak_bpm(a).item() == dsp.soft_peak_bpm(b).item()


def test_no_warning_on_regular_band():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        dsp.band_power(dsp.psd(tone(TONE_BPM)), 0.7, 3.0)
