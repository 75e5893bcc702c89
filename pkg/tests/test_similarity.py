"""Cosine and bucketization against direct formulas and grid properties."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_corpus
from semrec.errors import ConfigError, SemrecError
from semrec.similarity import (BucketConfig, SimRange, bucket_embedding,
                               bucketize, bucketize_many, calibrate_range,
                               cosine, cosine_many, zero_norm_counter)


def test_cosine_matches_formula():
    rng = np.random.default_rng(0)
    for _ in range(50):
        a, b = rng.normal(size=8), rng.normal(size=8)
        want = float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))
        assert cosine(a, b) == pytest.approx(want, abs=1e-12)


def test_cosine_clamped_and_zero_norm():
    a = np.ones(4)
    assert cosine(a, a) == 1.0
    assert cosine(a, -a) == -1.0
    before = zero_norm_counter.count
    assert cosine(np.zeros(4), a) == 0.0
    assert cosine(a, np.zeros(4)) == 0.0
    assert zero_norm_counter.count == before + 2


def test_cosine_many_matches_scalar_loop():
    rng = np.random.default_rng(1)
    rows = rng.normal(size=(40, 6))
    rows[7] = 0.0
    target = rng.normal(size=6)
    got = cosine_many(rows, target)
    want = np.array([cosine(r, target) for r in rows])
    assert np.allclose(got, want, atol=1e-12)
    assert got[7] == 0.0
    # precomputed norms take the same path
    got2 = cosine_many(rows, target, row_norms=np.linalg.norm(rows, axis=1))
    assert np.array_equal(got, got2)


def test_calibrate_range_deterministic_and_ordered():
    corpus = make_corpus(seed=2, n_items=40, n_users=8, seq_len=15)
    a = calibrate_range(corpus, sample_size=4000, seed=3)
    b = calibrate_range(corpus, sample_size=4000, seed=3)
    assert (a.s_min, a.s_max, a.sample_size, a.degenerate) == \
        (b.s_min, b.s_max, b.sample_size, b.degenerate)
    assert -1.0 <= a.s_min < a.s_max <= 1.0
    assert not a.degenerate


def test_calibrate_range_degenerate_widens():
    corpus = make_corpus(seed=3, n_items=10, n_users=4)
    vec = corpus.items[0].mm_embedding
    for item in corpus.items.values():
        item.mm_embedding = vec.copy()
    r = calibrate_range(corpus, sample_size=500, seed=0)
    assert r.degenerate
    assert r.s_min < r.s_max
    # identical embeddings give cosine 1 everywhere; widening straddles it
    assert r.s_min < 1.0 <= r.s_max + 1e-12


def test_bucket_config_validation():
    with pytest.raises(ConfigError):
        BucketConfig(n_buckets=0)
    with pytest.raises(ConfigError):
        bucketize_many(np.zeros(3), BucketConfig(n_buckets=4))
    empty = BucketConfig(n_buckets=4, sim_range=SimRange(0.5, 0.5, 10))
    with pytest.raises(ConfigError):
        bucketize_many(np.zeros(3), empty)


@pytest.mark.parametrize("n_buckets", [1, 7, 40])
def test_bucketize_grid_properties(n_buckets):
    cfg = BucketConfig(n_buckets=n_buckets,
                       sim_range=SimRange(-0.35, 0.8, 1000))
    grid = np.linspace(-1.0, 1.0, 2001)
    q = bucketize_many(grid, cfg)
    assert q.min() >= 0 and q.max() <= n_buckets - 1          # totality
    assert (np.diff(q) >= 0).all()                            # monotone in s
    assert bucketize(-0.35, cfg) == 0
    assert bucketize(-0.9, cfg) == 0                          # below range
    assert bucketize(0.8, cfg) == n_buckets - 1               # s = s_max clips
    assert bucketize(0.99, cfg) == n_buckets - 1              # above range
    if n_buckets > 1:
        width = (0.8 - -0.35) / n_buckets
        assert bucketize(-0.35 + 1.5 * width, cfg) == 1


def test_bucketize_matches_affine_formula_interior():
    cfg = BucketConfig(n_buckets=20, sim_range=SimRange(-0.5, 0.75, 1000))
    rng = np.random.default_rng(4)
    s = rng.uniform(-0.5, 0.75, size=500)
    want = np.floor((s - -0.5) / (0.75 - -0.5) * 20).astype(int)
    want = np.clip(want, 0, 19)
    assert np.array_equal(bucketize_many(s, cfg), want)


@given(st.floats(-1.0, 1.0), st.integers(1, 100))
@settings(max_examples=200)
def test_bucketize_total_on_any_input(s, n_buckets):
    cfg = BucketConfig(n_buckets=n_buckets, sim_range=SimRange(-0.2, 0.6, 10))
    assert 0 <= bucketize(s, cfg) < n_buckets


def test_bucket_embedding_bounds():
    table = np.arange(12.0).reshape(4, 3)
    assert np.array_equal(bucket_embedding(table, 2), table[2])
    with pytest.raises(SemrecError):
        bucket_embedding(table, 4)
    with pytest.raises(SemrecError):
        bucket_embedding(table, -1)
