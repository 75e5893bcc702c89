"""Information measures, groupings, dispersion, and the bucket sweep."""

from __future__ import annotations

import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import entropy as scipy_entropy
from sklearn.metrics import mutual_info_score

from conftest import make_corpus
from semrec.analysis import (DiscreteJoint, bucket_sweep, conditional_entropy,
                             entropy, gain_report, impression_groups,
                             information_gain, merge_groups, mi_vs_clusters,
                             mutual_information, permutation_null,
                             sim_bucket_groups, target_semid_groups,
                             within_bucket_dispersion)
from semrec.data import SplitPolicy
from semrec.errors import ConfigError, DataError
from semrec.model import ModelConfig
from semrec.similarity import BucketConfig, bucketize
from semrec.training import (QuantizerConfig, SimilarityConfig, TrainConfig,
                             build_context, fit_from_context, prepared_buckets)

MODEL = ModelConfig(item_feature_width=4, user_feature_width=3,
                    context_feature_width=3, prefix_depth=2, prefix_width=3,
                    bucket_width=3, n_buckets=5, n_heads=2, head_dim=4,
                    mlp_hidden=(8, 6))


@pytest.fixture(scope="module")
def ctx():
    corpus = make_corpus(seed=21, n_items=60, n_users=12, seq_len=16,
                         n_impressions=10)
    tc = TrainConfig(batch_size=32, epochs=1, k_ret=6, seed=2, log_every=1000)
    return build_context(corpus, SplitPolicy(kind="user", eval_fraction=0.3, seed=2),
                         tc, QuantizerConfig(levels=3, codebook_size=4, seed=2),
                         SimilarityConfig(calib_sample=500)), tc


def random_joint(rng, shape=(4, 2)):
    return DiscreteJoint(counts=rng.integers(0, 30, size=shape) + rng.integers(0, 2, size=shape))


def mi_oracle(counts):
    """Definitional double loop over the contingency table, in nats."""
    c = np.asarray(counts, dtype=np.float64)
    n = c.sum()
    pg = c.sum(axis=1) / n
    py = c.sum(axis=0) / n
    out = 0.0
    for g in range(c.shape[0]):
        for y in range(c.shape[1]):
            pij = c[g, y] / n
            if pij > 0:
                out += pij * math.log(pij / (pg[g] * py[y]))
    return out


def test_mutual_information_matches_sklearn_and_oracle():
    rng = np.random.default_rng(0)
    for _ in range(50):
        g = rng.integers(0, 5, size=200)
        y = rng.integers(0, 2, size=200)
        joint = DiscreteJoint.from_arrays(g, y)
        got = mutual_information(joint)
        assert got == pytest.approx(mutual_info_score(g, y), abs=1e-12)
        assert got == pytest.approx(mi_oracle(joint.counts), abs=1e-12)


def test_exhaustive_small_tables_match_oracle():
    """Every 2x2 table with counts <= 3."""
    for cells in itertools.product(range(4), repeat=4):
        if sum(cells) == 0:
            continue
        counts = np.array(cells, dtype=float).reshape(2, 2)
        assert mutual_information(DiscreteJoint(counts=counts)) == pytest.approx(
            mi_oracle(counts), abs=1e-12)


def test_information_gain_equals_mi_by_identity():
    rng = np.random.default_rng(1)
    for _ in range(50):
        joint = random_joint(rng, shape=(rng.integers(1, 6), rng.integers(1, 4)))
        if joint.total == 0:
            continue
        assert information_gain(joint) == pytest.approx(
            mutual_information(joint), abs=1e-12)
        assert conditional_entropy(joint) == pytest.approx(
            entropy(joint.p_label()) - mutual_information(joint), abs=1e-12)


def test_entropy_matches_scipy():
    rng = np.random.default_rng(2)
    for _ in range(20):
        p = rng.dirichlet(np.ones(6))
        assert entropy(p) == pytest.approx(scipy_entropy(p), abs=1e-12)
    assert entropy(np.array([1.0, 0.0])) == 0.0
    assert entropy(np.array([0.5, 0.5])) == pytest.approx(math.log(2), abs=1e-15)


def test_conditional_entropy_manual_two_rows():
    joint = DiscreteJoint(counts=np.array([[3.0, 1.0], [2.0, 2.0]]))
    h_row0 = -(0.75 * math.log(0.75) + 0.25 * math.log(0.25))
    want = 0.5 * h_row0 + 0.5 * math.log(2)
    assert conditional_entropy(joint) == pytest.approx(want, abs=1e-14)


@given(st.lists(st.tuples(st.integers(0, 8), st.integers(0, 8)), min_size=2, max_size=6),
       st.data())
@settings(max_examples=80, deadline=None)
def test_merging_groups_never_increases_mi(rows, data):
    counts = np.array(rows, dtype=float)
    if counts.sum() == 0:
        counts[0, 0] = 1.0
    joint = DiscreteJoint(counts=counts)
    i = data.draw(st.integers(0, len(rows) - 1))
    j = data.draw(st.integers(0, len(rows) - 1).filter(lambda x: x != i))
    merged = merge_groups(joint, i, j)
    assert merged.counts.shape[0] == counts.shape[0] - 1
    assert merged.counts.sum() == counts.sum()
    assert mutual_information(merged) <= mutual_information(joint) + 1e-12


def test_merge_groups_validation():
    joint = DiscreteJoint(counts=np.ones((3, 2)))
    for i, j in [(0, 0), (-1, 1), (0, 3)]:
        with pytest.raises(DataError):
            merge_groups(joint, i, j)


def test_joint_validation_and_from_arrays():
    with pytest.raises(DataError, match="2-d"):
        DiscreteJoint(counts=np.ones(3))
    with pytest.raises(DataError, match="non-negative"):
        DiscreteJoint(counts=np.array([[1.0, -1.0]]))
    with pytest.raises(DataError, match="finite"):
        DiscreteJoint(counts=np.array([[np.inf, 1.0]]))
    with pytest.raises(DataError, match="equal length"):
        DiscreteJoint.from_arrays(np.arange(3), np.arange(4))
    with pytest.raises(DataError, match="zero observations"):
        DiscreteJoint.from_arrays(np.empty(0), np.empty(0))
    joint = DiscreteJoint.from_arrays(np.array([7, 3, 7, 7]), np.array([1, 0, 0, 1]))
    assert joint.counts.tolist() == [[1.0, 0.0], [1.0, 2.0]]


def test_permutation_null_is_seeded_and_positive():
    rng = np.random.default_rng(3)
    groups = rng.integers(0, 6, size=300)
    labels = rng.integers(0, 2, size=300)
    a = permutation_null(groups, labels, 100, seed=5)
    assert a == permutation_null(groups, labels, 100, seed=5)
    assert a != permutation_null(groups, labels, 100, seed=6)
    assert a >= 0.0
    # p99 of the null sits above the typical permuted MI
    med = permutation_null(groups, labels, 100, seed=5, percentile=50.0)
    assert a >= med
    with pytest.raises(ConfigError):
        permutation_null(groups, labels, 0, seed=0)


def test_semid_groups_partition_by_level_prefix(ctx):
    context, _ = ctx
    prep = context.eval_prep
    codes = context.semid_codes
    for level in (1, 2):
        groups = target_semid_groups(prep, codes, level=level)
        prefixes = [tuple(codes[r, :level]) for r in prep.target_rows]
        seen = {}
        for g, pref in zip(groups.tolist(), prefixes):
            assert seen.setdefault(pref, g) == g
        assert len(set(seen.values())) == len(seen)
    with pytest.raises(ConfigError):
        target_semid_groups(prep, codes, level=0)
    with pytest.raises(ConfigError):
        target_semid_groups(prep, codes, level=codes.shape[1] + 1)


def test_sim_bucket_groups_match_scalar_bucketize(ctx):
    context, _ = ctx
    prep = context.eval_prep
    cfg = BucketConfig(n_buckets=8, sim_range=context.sim_range)
    groups = sim_bucket_groups(prep, cfg)
    for i in range(len(prep)):
        if np.isfinite(prep.max_sims[i]):
            assert groups[i] == bucketize(float(prep.max_sims[i]), cfg)
        else:
            assert groups[i] == -1


def test_impression_groups_dispatch_and_errors(ctx):
    context, _ = ctx
    prep = context.eval_prep
    cfg = BucketConfig(n_buckets=8, sim_range=context.sim_range)
    assert np.array_equal(
        impression_groups(prep, "semid_level1", semid_codes=context.semid_codes),
        target_semid_groups(prep, context.semid_codes, level=1))
    assert np.array_equal(impression_groups(prep, "sim_bucket", bucket_cfg=cfg),
                          sim_bucket_groups(prep, cfg))
    custom = np.arange(len(prep)) % 3
    assert np.array_equal(impression_groups(prep, "custom", custom=custom), custom)
    with pytest.raises(ConfigError, match="unknown grouping"):
        impression_groups(prep, "ctr")
    with pytest.raises(ConfigError):
        impression_groups(prep, "semid_level1")
    with pytest.raises(ConfigError):
        impression_groups(prep, "sim_bucket")
    with pytest.raises(ConfigError):
        impression_groups(prep, "custom")
    with pytest.raises(DataError):
        impression_groups(prep, "custom", custom=np.arange(3))


def test_gain_report_matches_direct_computation(ctx):
    context, _ = ctx
    prep = context.eval_prep
    rep = gain_report(prep, "semid_level1", semid_codes=context.semid_codes)
    groups = target_semid_groups(prep, context.semid_codes, level=1)
    joint = DiscreteJoint.from_arrays(groups, prep.labels)
    assert rep["gain_nats"] == pytest.approx(information_gain(joint), abs=1e-15)
    assert rep["mi_nats"] == pytest.approx(mutual_information(joint), abs=1e-15)
    assert rep["n_impressions"] == len(prep)
    assert rep["n_ungrouped"] == 0
    assert rep["n_groups"] == len(np.unique(groups))


def test_mi_vs_clusters_records(ctx):
    context, tc = ctx
    fit = fit_from_context(context, MODEL, tc)
    buckets = prepared_buckets(context.eval_prep, fit.bucket_cfg)
    recs = mi_vs_clusters(fit.params, fit.feats, context.eval_prep, buckets,
                          ks=[2, 4], seed=9, n_permutations=20, subsample=20)
    again = mi_vs_clusters(fit.params, fit.feats, context.eval_prep, buckets,
                           ks=[2, 4], seed=9, n_permutations=20, subsample=20)
    assert recs == again
    assert [r["k"] for r in recs] == [2, 4]
    for r in recs:
        assert set(r) == {"k", "mi_nats", "perm_p99_nats", "n_points"}
        assert r["n_points"] == 20
        assert r["mi_nats"] >= 0.0
    full = mi_vs_clusters(fit.params, fit.feats, context.eval_prep, buckets,
                          ks=[2], seed=9, n_permutations=20, subsample=None)
    assert full[0]["n_points"] == len(context.eval_prep)
    with pytest.raises(ConfigError):
        mi_vs_clusters(fit.params, fit.feats, context.eval_prep, buckets, ks=[])


def naive_dispersion(prep, cfg, groups, min_support, pairing):
    """Recount (bucket, group) cells with plain loops."""
    tallies = {}
    for i in range(len(prep)):
        if groups[i] < 0:
            continue
        if pairing == "max":
            if not np.isfinite(prep.max_sims[i]):
                continue
            sims = [float(prep.max_sims[i])]
        else:
            sims = [float(s) for s in prep.behav_sims[i, :prep.lengths[i]]]
        for s in sims:
            key = (bucketize(s, cfg), int(groups[i]))
            cnt, clk = tallies.get(key, (0, 0.0))
            tallies[key] = (cnt + 1, clk + prep.labels[i])
    return {k: v for k, v in tallies.items() if v[0] >= min_support}


@pytest.mark.parametrize("pairing", ["max", "per_pair"])
def test_dispersion_cells_match_naive_recount(ctx, pairing):
    context, _ = ctx
    prep = context.eval_prep
    cfg = BucketConfig(n_buckets=4, sim_range=context.sim_range)
    groups = target_semid_groups(prep, context.semid_codes, level=1)
    rep = within_bucket_dispersion(prep, cfg, groups, min_support=2, pairing=pairing)
    want = naive_dispersion(prep, cfg, groups, 2, pairing)
    got = {(c.bucket, c.group): (c.count, c.ctr) for c in rep.cells}
    assert set(got) == set(want)
    for key, (cnt, clk) in want.items():
        assert got[key][0] == cnt
        assert got[key][1] == pytest.approx(clk / cnt, abs=1e-15)
    assert rep.pairing == pairing
    assert rep.n_impressions == len(prep)
    assert rep.n_ungrouped == 0
    if pairing == "max":
        assert rep.n_pairs == int(np.isfinite(prep.max_sims).sum())
    else:
        assert rep.n_pairs == int(prep.lengths.sum())


def test_dispersion_bucket_stats_recompute(ctx):
    context, _ = ctx
    prep = context.eval_prep
    cfg = BucketConfig(n_buckets=4, sim_range=context.sim_range)
    groups = target_semid_groups(prep, context.semid_codes, level=1)
    rep = within_bucket_dispersion(prep, cfg, groups, min_support=2)
    assert not rep.empty
    for b in rep.buckets:
        cells = [c for c in rep.cells if c.bucket == b.bucket]
        assert b.n_groups == len(cells)
        assert b.dof == len(cells) - 1
        n_g = np.array([c.count for c in cells], dtype=float)
        p_g = np.array([c.ctr for c in cells])
        clicks = n_g * p_g
        p_b = clicks.sum() / n_g.sum()
        assert b.count == int(n_g.sum())
        assert b.pooled_ctr == pytest.approx(p_b, abs=1e-15)
        assert b.ctr_min == p_g.min() and b.ctr_max == p_g.max()
        assert b.ctr_std == pytest.approx(p_g.std(), abs=1e-15)
        want_noise = math.sqrt(max(p_b * (1 - p_b) * (1.0 / n_g).mean(), 0.0))
        assert b.noise_std == pytest.approx(want_noise, abs=1e-15)
        denom = p_b * (1 - p_b)
        want_chi2 = float((n_g * (p_g - p_b) ** 2).sum() / denom) if denom > 0 else 0.0
        assert b.chi2 == pytest.approx(want_chi2, abs=1e-12)
    total, dof = rep.total_chi2()
    assert total == pytest.approx(sum(b.chi2 for b in rep.buckets))
    assert dof == sum(b.dof for b in rep.buckets)
    table = rep.format_table()
    assert table.splitlines()[0].startswith("bucket")
    assert len(table.splitlines()) == len(rep.buckets) + 1


def test_dispersion_min_support_and_empty(ctx):
    context, _ = ctx
    prep = context.eval_prep
    cfg = BucketConfig(n_buckets=4, sim_range=context.sim_range)
    groups = target_semid_groups(prep, context.semid_codes, level=1)
    loose = within_bucket_dispersion(prep, cfg, groups, min_support=1)
    strict = within_bucket_dispersion(prep, cfg, groups, min_support=10 ** 6)
    assert strict.empty
    assert strict.total_chi2() == (0.0, 0)
    assert strict.n_cells_below_support == len(loose.cells)
    assert loose.n_cells_below_support == 0
    ungrouped = groups.copy()
    ungrouped[:5] = -1
    rep = within_bucket_dispersion(prep, cfg, ungrouped, min_support=1)
    assert rep.n_ungrouped == 5


def test_dispersion_validation(ctx):
    context, _ = ctx
    prep = context.eval_prep
    cfg = BucketConfig(n_buckets=4, sim_range=context.sim_range)
    groups = np.zeros(len(prep), dtype=np.int64)
    with pytest.raises(ConfigError, match="pairing"):
        within_bucket_dispersion(prep, cfg, groups, pairing="mean")
    with pytest.raises(ConfigError, match="min_support"):
        within_bucket_dispersion(prep, cfg, groups, min_support=0)
    with pytest.raises(DataError, match="length"):
        within_bucket_dispersion(prep, cfg, groups[:-1])


def test_bucket_sweep_retrains_per_count(ctx):
    context, tc = ctx
    curve, fits = bucket_sweep(context, MODEL, tc, [1, 3])
    assert [c["n_buckets"] for c in curve] == [1, 3]
    assert len(fits) == 2
    for c, fit in zip(curve, fits):
        assert fit.params.config.n_buckets == c["n_buckets"]
        assert c["gauc"] == fit.eval_metrics["gauc"]
    direct = fit_from_context(
        context, ModelConfig(**{**MODEL.__dict__, "n_buckets": 3}), tc)
    assert curve[1]["gauc"] == direct.eval_metrics["gauc"]
    with pytest.raises(ConfigError):
        bucket_sweep(context, MODEL, tc, [])
    with pytest.raises(ConfigError):
        bucket_sweep(context, MODEL, tc, [0])
