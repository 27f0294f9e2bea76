import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from restoregrad.signals import (
    DatasetSpec,
    build_split,
    envelope,
    generate_pair,
    make_pair,
    mse,
    read_dataset,
    si_snr,
    snr_db,
    ssnr,
    write_dataset,
)


def test_noiseless_sentinel():
    x0, y, _ = make_pair(np.random.default_rng(0), 128, math.inf)
    assert np.array_equal(x0, y)


@pytest.mark.parametrize("kind", ["white", "pink"])
def test_realized_snr(kind):
    spec = DatasetSpec(n_train=40, n_test=40, d=256, noise_kind=kind, seed=3)
    for i in range(80):
        p = generate_pair(spec, i)
        sig = sum(v * v for v in p.x0)
        err = sum((a - b) ** 2 for a, b in zip(p.y, p.x0))
        assert abs(10 * math.log10(sig / err) - p.snr_db) < 0.1
        assert p.snr_db in (spec.train_snrs if i < 40 else spec.test_snrs)


def test_pair_determinism_and_disjoint_splits():
    spec = DatasetSpec(n_train=8, n_test=8)
    a, b = generate_pair(spec, 5), generate_pair(spec, 5)
    assert np.array_equal(a.x0, b.x0) and np.array_equal(a.y, b.y)
    assert not np.array_equal(generate_pair(spec, 0).x0, generate_pair(spec, 8).x0)
    with pytest.raises(IndexError):
        generate_pair(spec, 16)


def test_clean_signal_shape():
    x0, _, _ = build_split(DatasetSpec(n_train=32, n_test=0), "train")
    assert x0.shape == (32, 256)
    assert np.allclose(np.abs(x0).max(1), 1.0)
    # envelopes vary: some stretch of every signal is much quieter than its peak
    env = envelope(x0)
    assert np.all(env.min(1) < 0.5 * env.max(1))


def test_si_snr_cases(rng):
    x = rng.normal(size=64)
    assert si_snr(3.0 * x, x) == si_snr(x, x) == 100.0
    assert si_snr(np.array([1.0, 1.0]), np.array([1.0, 0.0])) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        si_snr(x, np.zeros(64))
    with pytest.raises(ValueError):
        si_snr(x, x[:10])


def test_si_snr_monotone_in_noise(rng):
    x = rng.normal(size=128)
    n = rng.normal(size=128)
    n -= (n @ x) / (x @ x) * x
    vals = [si_snr(x + s * n, x) for s in (1e-3, 1e-2, 0.1, 1.0, 10.0)]
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_ssnr_clipping(rng):
    x = rng.normal(size=256)
    assert ssnr(x, x) == 35.0
    assert ssnr(x + 1e6 * rng.normal(size=256), x) == -10.0
    with pytest.raises(ValueError):
        ssnr(x[:16], x[:16], seg_len=32)


def test_ssnr_brute_force(rng):
    x = rng.normal(size=300)
    e = x + 0.5 * rng.normal(size=300)
    vals = []
    start = 0
    while start + 32 <= 300:
        s = sum(v * v for v in x[start : start + 32])
        n = sum((a - b) ** 2 for a, b in zip(x[start : start + 32], e[start : start + 32]))
        vals.append(min(35.0, max(-10.0, 10 * math.log10(s / n))))
        start += 8
    assert abs(ssnr(e, x) - sum(vals) / len(vals)) < 1e-9


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 100), st.integers(0, 2**31))
def test_si_snr_scale_invariant(c, seed):
    r = np.random.default_rng(seed)
    x, e = r.normal(size=(2, 32))
    assert si_snr(c * e, x) == pytest.approx(si_snr(e, x), abs=1e-9)


def test_snr_and_mse(rng):
    x = rng.normal(size=50)
    e = x + 0.1
    assert mse(e, x) == pytest.approx(0.01)
    assert snr_db(x, e) == pytest.approx(10 * math.log10(np.sum(x**2) / 0.5))


def test_dataset_dump_round_trip(tmp_path):
    spec = DatasetSpec(n_train=4, n_test=2, d=64, seed=9)
    path = tmp_path / "ds.bin"
    write_dataset(path, spec)
    spec2, snrs, x0, y = read_dataset(path)
    assert spec2 == spec
    assert x0.shape == (6, 64)
    p = generate_pair(spec, 5)
    assert np.array_equal(x0[5], p.x0.astype(np.float32))
    assert np.array_equal(y[5], p.y.astype(np.float32))
    assert snrs[5] == p.snr_db
    raw = path.read_bytes()
    (tmp_path / "bad.bin").write_bytes(raw[:-4])
    with pytest.raises(ValueError):
        read_dataset(tmp_path / "bad.bin")
