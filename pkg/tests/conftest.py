"""Shared fixtures: hand-rolled corpora, a small planted corpus, and the
acceptance-criterion result recorder printed in the terminal summary."""

from __future__ import annotations

import numpy as np
import pytest

from semrec.data import (BehaviorEvent, BehaviorSequence, Corpus, CorpusMeta,
                         Impression, ItemRecord)
from semrec.synth import SynthConfig, generate_synthetic_with_truth


def make_corpus(seed=0, n_items=30, n_users=6, seq_len=12, n_impressions=4,
                dim=8, slot_sizes=(7, 5), user_sizes=(3,), ctx_sizes=(4,),
                zero_norm_item=None):
    """Random corpus built by hand, independent of the planted generator."""
    rng = np.random.default_rng(seed)
    items = {}
    for i in range(n_items):
        emb = rng.normal(size=dim).astype(np.float32)
        if i == zero_norm_item:
            emb = np.zeros(dim, dtype=np.float32)
        items[i] = ItemRecord(
            item_id=i,
            id_features=[int(rng.integers(s)) for s in slot_sizes],
            mm_embedding=emb,
        )
    sequences = {}
    impressions = []
    for u in range(n_users):
        ts = np.sort(rng.integers(1, 500, size=seq_len))
        events = [BehaviorEvent(int(rng.integers(n_items)), int(t)) for t in ts]
        sequences[u] = BehaviorSequence(user_id=u, events=events)
        for _ in range(n_impressions):
            impressions.append(Impression(
                user_id=u,
                target_item_id=int(rng.integers(n_items)),
                context_features=[int(rng.integers(s)) for s in ctx_sizes],
                user_features=[int(rng.integers(s)) for s in user_sizes],
                label=int(rng.integers(2)),
                event_time=int(rng.integers(1, 600)),
            ))
    meta = CorpusMeta(embed_dim=dim, item_feature_vocab_sizes=list(slot_sizes),
                      user_feature_vocab_sizes=list(user_sizes),
                      context_feature_vocab_sizes=list(ctx_sizes), seed=seed)
    return Corpus(items=items, sequences=sequences, impressions=impressions, meta=meta)


SMALL_SYNTH = SynthConfig(seed=7, n_users=60, n_items=120, n_clusters=4,
                          embed_dim=16, id_hash_buckets=11, n_item_categories=5,
                          seq_len_min=8, seq_len_max=20, impressions_per_user=8)


@pytest.fixture(scope="session")
def small_planted():
    """A small planted corpus with its hidden truth, shared across modules."""
    return generate_synthetic_with_truth(SMALL_SYNTH)


@pytest.fixture(scope="session")
def small_corpus(small_planted):
    return small_planted[0]


# --- acceptance-criterion reporting ---

CRITERION_LINES: list[str] = []


@pytest.fixture(scope="session")
def criterion_log():
    """Record one pass/fail line per acceptance criterion for the summary."""
    def log(num: int, name: str, passed: bool, detail: str) -> None:
        status = "PASS" if passed else "FAIL"
        CRITERION_LINES.append(f"criterion {num:2d} [{status}] {name}: {detail}")
    return log


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if CRITERION_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERION_LINES):
            terminalreporter.write_line(line)
