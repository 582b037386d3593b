import numpy as np
import pytest
from hypothesis import given, strategies as st

from cici import autograd as ag
from cici import losses
from cici.autograd import Tensor, parameter
from cici.losses import StfcConfig

FS = 30.0


def tone(bpm, n=256, phase=0.0):
    return np.sin(2 * np.pi * bpm / 60 * np.arange(n) / FS + phase)


def test_stfc_identity_zero_with_zero_gradient():
    x = parameter(tone(90) + 0.1 * np.random.default_rng(0).normal(size=256))
    terms = losses.stfc_terms(x, x)
    assert terms.loss.item() == 0.0 and not terms.gate
    assert np.all(ag.backward(terms.loss, [x])[x.id] == 0)


@pytest.mark.parametrize("scale", [0.05, 0.01])
def test_stfc_tone_pair(scale):
    loss = losses.stfc_loss(Tensor(tone(84.375)), Tensor(tone(98.4375)), StfcConfig(temperature_scale=scale))
    assert loss.item() == pytest.approx(14.0625, abs=0.05)


def test_stfc_gate_closed_at_psi_20():
    a, b = parameter(tone(84.375)), parameter(tone(98.4375))
    terms = losses.stfc_terms(a, b, StfcConfig(psi=20))
    assert terms.loss.item() == 0.0 and not terms.gate
    assert terms.delta_bpm == pytest.approx(14.0625, abs=0.05)
    g = ag.backward(terms.loss, [a, b])
    assert np.all(g[a.id] == 0) and np.all(g[b.id] == 0)


def test_stfc_gate_open_has_gradient():
    rng = np.random.default_rng(1)
    a = parameter(tone(80) + 0.5 * rng.normal(size=256))
    b = parameter(tone(120) + 0.5 * rng.normal(size=256))
    terms = losses.stfc_terms(a, b)
    assert terms.gate and terms.loss.item() >= 1.0
    g = ag.backward(terms.loss, [a, b])
    assert np.abs(g[a.id]).max() > 0


@given(st.integers(0, 10_000))
def test_stfc_symmetric(seed):
    rng = np.random.default_rng(seed)
    a, b = Tensor(rng.normal(size=128)), Tensor(rng.normal(size=128))
    assert losses.stfc_loss(a, b).item() == losses.stfc_loss(b, a).item()


def test_stfc_batch_mean_and_errors():
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=(3, 128)), rng.normal(size=(3, 128))
    batch = losses.stfc_loss(Tensor(a), Tensor(b)).item()
    single = [losses.stfc_loss(Tensor(a[i]), Tensor(b[i])).item() for i in range(3)]
    assert batch == pytest.approx(np.mean(single), rel=1e-12)
    with pytest.raises(ag.ShapeError):
        losses.stfc_loss(Tensor(a[0]), Tensor(b[0, :100]))
    with pytest.raises(ValueError, match="psi"):
        StfcConfig(psi=-1)


def test_ssm_constant_signal():
    m = losses.self_sim_matrix(Tensor(np.ones(10)), s=3)
    assert m.shape == (8, 8)
    assert np.allclose(m.data, 1.0, atol=1e-12)


@pytest.mark.parametrize("s", [2, 4, 8])
def test_ssm_alternating(s):
    x = np.array([(-1.0) ** t for t in range(20)])
    m = losses.self_sim_matrix(Tensor(x), s=s).data
    i, j = np.indices(m.shape)
    assert np.allclose(m, (-1.0) ** np.abs(i - j), atol=1e-12)


def brute_ssm(x, s):
    n = len(x) - s + 1
    m = np.empty((n, n))
    for i in range(n):
        for j in range(n):
            a, b = x[i:i + s], x[j:j + s]
            m[i, j] = sum(a[k] * b[k] for k in range(s)) / max(np.sqrt(sum(v * v for v in a)), 1e-12) \
                / max(np.sqrt(sum(v * v for v in b)), 1e-12)
    return m


@pytest.mark.parametrize("seed", range(2))
def test_ssm_matches_double_loop(seed):
    x = np.random.default_rng(seed).normal(size=128)
    assert np.allclose(losses.self_sim_matrix(Tensor(x), 32).data, brute_ssm(x, 32), rtol=0, atol=1e-6)


@given(st.integers(0, 10_000), st.integers(2, 16))
def test_ssm_type_invariants(seed, s):
    x = np.random.default_rng(seed).normal(size=40)
    m = losses.self_sim_matrix(Tensor(x), s).data
    assert m.shape == (41 - s, 41 - s)
    assert np.all(np.abs(m) <= 1 + 1e-12)
    assert np.allclose(m, m.T, atol=1e-15)
    assert np.allclose(np.diag(m), 1.0, atol=1e-9)


def test_ssm_zero_window_well_defined():
    x = np.concatenate([np.zeros(10), np.ones(10)])
    m = losses.self_sim_matrix(Tensor(x), 4).data
    assert np.isfinite(m).all() and m[0, 0] == 0.0


def test_ssm_errors():
    with pytest.raises(ValueError, match="2 <= s"):
        losses.self_sim_matrix(Tensor(np.ones(10)), s=11)
    with pytest.raises(ValueError):
        losses.self_sim_matrix(Tensor(np.ones(10)), s=1)
    with pytest.raises(ag.ShapeError):
        losses.self_sim_matrix(Tensor(np.ones((4, 4))), s=2)


def test_stti_examples():
    m = Tensor(np.random.default_rng(3).normal(size=(6, 6)))
    assert losses.stti_loss(m, m).item() == pytest.approx(1.0, abs=1e-12)
    assert losses.stti_loss(m, -m).item() == pytest.approx(-1.0, abs=1e-12)
    e1, e2 = np.zeros((3, 3)), np.zeros((3, 3))
    e1[0, 1], e2[2, 0] = 1.0, 4.0
    assert losses.stti_loss(Tensor(e1), Tensor(e2)).item() == 0.0
    with pytest.raises(ag.ShapeError, match="differ"):
        losses.stti_loss(Tensor(e1), Tensor(np.zeros((2, 2))))


def test_stti_flattens_whole_matrix():
    rng = np.random.default_rng(4)
    a, b = rng.normal(size=(5, 5)), rng.normal(size=(5, 5))
    ref = a.ravel() @ b.ravel() / np.linalg.norm(a) / np.linalg.norm(b)
    assert losses.stti_loss(Tensor(a), Tensor(b)).item() == pytest.approx(ref, abs=1e-12)
    batch = losses.stti_loss(Tensor(np.stack([a, a])), Tensor(np.stack([b, a]))).item()
    assert batch == pytest.approx((ref + 1) / 2, abs=1e-12)


@given(st.integers(0, 10_000))
def test_stti_bounded(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=64), rng.normal(size=64)
    v = losses.stti_loss(losses.self_sim_matrix(Tensor(a), 8), losses.self_sim_matrix(Tensor(b), 8)).item()
    assert -1 - 1e-12 <= v <= 1 + 1e-12


@given(st.integers(0, 10_000), st.floats(0.01, 100))
def test_stti_scale_invariant(seed, c):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=64), rng.normal(size=64)
    m, ma = losses.self_sim_matrix(Tensor(a), 8), losses.self_sim_matrix(Tensor(b), 8)
    mc, mac = losses.self_sim_matrix(Tensor(c * a), 8), losses.self_sim_matrix(Tensor(c * b), 8)
    assert np.allclose(m.data, mc.data, atol=1e-9)
    assert losses.stti_loss(m, ma).item() == pytest.approx(losses.stti_loss(mc, mac).item(), abs=1e-9)


@pytest.mark.parametrize("k", [1, 5, 13])
def test_circular_shift_translates_ssm(k):
    x = tone(84.375, n=128)
    m = losses.self_sim_matrix(Tensor(x), 32).data
    ms = losses.self_sim_matrix(Tensor(np.roll(x, -k)), 32).data
    n = m.shape[0]
    assert np.allclose(ms[:n - k, :n - k], m[k:, k:], atol=1e-12)


def test_stti_gradient_through_ssm():
    rng = np.random.default_rng(5)
    a = parameter(rng.normal(size=48))
    b = Tensor(rng.normal(size=48))

    def f():
        return losses.stti_loss(losses.self_sim_matrix(a, 8), losses.self_sim_matrix(b, 8))

    assert ag.finite_diff_check(f, [a]) <= 1e-6
