import hashlib
from collections import Counter
from itertools import permutations

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cici import augment, synth
from cici.augment import AugmentMeta

# produced by the first run of augment(raw, rng=42) on target subject 0, t0=0
GOLDEN_DELTA_T = 2
GOLDEN_SHA256 = "e812c9d2f1e8eacee78733c39cca408b3d071a4c1d014eadd3fd8bb96a57ad17"


@pytest.fixture(scope="module")
def raw():
    return synth.gen_instance(synth.target_suite(0, 1)[0], 0).raw


def test_identity_case(raw):
    x, x_a, meta = augment.augment(raw, meta=augment.identity_meta(256, 64))
    assert np.array_equal(x.data, x_a.data)
    assert meta.delta_t == 0


@given(st.integers(0, 2**31 - 1))
def test_permutation_preserves_multisets(seed):
    rng = np.random.default_rng(seed)
    raw = rng.normal(size=(40, 7, 3))
    meta = augment.sample_meta(seed, 10, 7, max_shift=30)
    pre = augment.apply_meta(raw, meta, 10)
    d = meta.delta_t
    assert np.array_equal(np.sort(pre, axis=1), np.sort(raw[d:d + 10], axis=1))
    assert all(sorted(row) == list(range(7)) for row in meta.permutations)


def test_golden_seed_42(raw):
    _, x_a, meta = augment.augment(raw, rng=42)
    digest = hashlib.sha256(x_a.data.tobytes() + meta.permutations.astype("<i8").tobytes()).hexdigest()
    assert meta.delta_t == GOLDEN_DELTA_T
    assert digest == GOLDEN_SHA256
    assert meta.rng_seed == 42


def test_same_seed_same_meta():
    a, b = augment.sample_meta(7, 20, 9), augment.sample_meta(7, 20, 9)
    assert a.delta_t == b.delta_t and np.array_equal(a.permutations, b.permutations)
    c = augment.sample_meta(8, 20, 9)
    assert not np.array_equal(a.permutations, c.permutations)


def test_delta_t_uniform():
    gen = np.random.default_rng(2024)
    counts = Counter(augment.sample_meta(gen, 1, 2).delta_t for _ in range(100_000))
    assert set(counts) == set(range(31))
    expected = 100_000 / 31
    assert all(abs(c - expected) <= 0.05 * expected for c in counts.values())


def test_permutations_uniform_w4():
    meta = augment.sample_meta(11, 100_000, 4)
    counts = Counter(map(tuple, meta.permutations.tolist()))
    assert set(counts) == set(permutations(range(4)))
    expected = 100_000 / 24
    assert all(abs(c - expected) <= 0.10 * expected for c in counts.values())


@given(st.integers(0, 2**31 - 1))
def test_region_average_is_shifted_average(seed):
    raw = np.random.default_rng(seed).uniform(size=(286, 64, 3))
    meta = augment.sample_meta(seed, 256, 64)
    pre = augment.apply_meta(raw, meta, 256)
    d = meta.delta_t
    assert np.allclose(pre.mean(axis=1), raw[d:d + 256].mean(axis=1), rtol=0, atol=1e-12)


@given(st.integers(0, 1000), st.integers(64, 100), st.integers(2, 12), st.integers(0, 30))
def test_shapes_preserved(seed, t, w, shift):
    raw = np.random.default_rng(seed).normal(size=(t + shift, w, 3))
    x, x_a, meta = augment.augment(raw, rng=seed, max_shift=shift)
    assert x.data.shape == x_a.data.shape == (t, w, 3)
    assert 0 <= meta.delta_t <= shift
    assert x_a.t0 == x.t0 + meta.delta_t


def test_original_view_keeps_order(raw):
    x, _, _ = augment.augment(raw, rng=3)
    assert np.array_equal(x.data, synth.normalize(raw[:256]))


def test_accepts_stmap_and_generator(raw):
    inst = synth.gen_instance(synth.target_suite(0, 1)[0], 128)
    x, x_a, _ = augment.augment(inst.stmap, rng=np.random.default_rng(0))
    assert np.array_equal(x.data, inst.stmap.data)
    assert x.t0 == 128


def test_wrong_length_rejected(raw):
    with pytest.raises(ValueError, match="expected 256 \\+ 30"):
        augment.augment(raw[:-1], rng=0, window=256)
    with pytest.raises(ValueError, match="raw window"):
        augment.augment(raw[:20], rng=0)
    with pytest.raises(ValueError, match="metadata"):
        augment.augment(raw, meta=augment.identity_meta(100, 64))


def test_meta_validation():
    with pytest.raises(ValueError, match="permutation"):
        AugmentMeta(np.array([[0, 0, 1]]), 0)
    with pytest.raises(ValueError):
        AugmentMeta(np.arange(4), 0)
