"""First-stage retrieval of target-relevant behavior subsequences.

Two interchangeable strategies produce the same output type:

* soft: exact top-K by cosine similarity over all visible events;
* hard: candidates share the target's top-level semantic code, served from a
  per-user inverted index so cost scales with the posting length, not the
  history length.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass

import numpy as np

from .data import Corpus, BehaviorSequence
from .errors import ConfigError, DataError, ParseError
from .quantizer import SemIdMap
from .similarity import BucketConfig, bucketize_many, cosine_many

FALLBACK_POLICIES = ("recency", "none")


@dataclass
class RetrievedSequence:
    """Target-relevant events in ascending timestamp order."""
    user_id: int
    target_item_id: int
    item_ids: np.ndarray      # int64 [L]
    timestamps: np.ndarray    # int64 [L]
    similarities: np.ndarray  # float64 [L]
    buckets: np.ndarray       # int32 [L]
    strategy: str             # "soft" | "hard" | "fallback"

    def __len__(self) -> int:
        return len(self.item_ids)


def top_k_positions(sims: np.ndarray, timestamps: np.ndarray, item_ids: np.ndarray,
                    k: int) -> np.ndarray:
    """Positions of the K most similar events, in ascending timestamp order.

    Selection ties break by similarity desc, then timestamp desc, then
    item id asc; the surviving positions are then re-sorted by (timestamp,
    position) so downstream attention sees a chronological sequence.
    """
    n = len(sims)
    if n == 0 or k <= 0:
        return np.empty(0, dtype=np.int64)
    order = np.lexsort((item_ids, -timestamps, -sims))
    keep = order[: min(k, n)]
    chrono = np.lexsort((keep, timestamps[keep]))
    return keep[chrono]


def soft_retrieve(corpus: Corpus, user_id: int, target_item_id: int, event_time: int,
                  k: int, bucket_cfg: BucketConfig) -> RetrievedSequence:
    """Exact top-K cosine retrieval over the visible history prefix."""
    if k < 1:
        raise ConfigError(f"retrieval size k must be >= 1, got {k}")
    rows, item_ids, timestamps = corpus.sequence_arrays(user_id)
    vis = corpus.visible_count(user_id, event_time)
    emb = corpus.embedding_matrix()
    norms = corpus.embedding_norms()
    target_row = corpus.item_row(target_item_id)
    sims = cosine_many(emb[rows[:vis]], emb[target_row], row_norms=norms[rows[:vis]])
    pos = top_k_positions(sims, timestamps[:vis], item_ids[:vis], k)
    sel = sims[pos]
    return RetrievedSequence(
        user_id=user_id,
        target_item_id=target_item_id,
        item_ids=item_ids[pos],
        timestamps=timestamps[pos],
        similarities=sel,
        buckets=bucketize_many(sel, bucket_cfg),
        strategy="soft",
    )


@dataclass
class InvertedIndex:
    """Per-user map from top-level semantic code to event positions (ascending)."""
    user_id: int
    postings: dict[int, np.ndarray]
    n_events: int

    def payload_bytes(self) -> int:
        return sum(p.nbytes for p in self.postings.values())


def build_index(sequence: BehaviorSequence, semid_map: SemIdMap) -> InvertedIndex:
    """Index a behavior sequence by the level-1 semantic code of each event."""
    codes = np.empty(len(sequence.events), dtype=np.int64)
    missing = []
    for i, ev in enumerate(sequence.events):
        c = semid_map.codes_for(ev.item_id)
        if c is None:
            missing.append(ev.item_id)
        else:
            codes[i] = int(c[0])
    if missing:
        uniq = sorted(set(missing))
        raise DataError(
            f"user {sequence.user_id}: {len(missing)} events reference items with no "
            f"semantic id (first few: {uniq[:5]})")
    postings: dict[int, np.ndarray] = {}
    for code in np.unique(codes):
        postings[int(code)] = np.flatnonzero(codes == code).astype(np.int64)
    return InvertedIndex(user_id=sequence.user_id, postings=postings,
                         n_events=len(sequence.events))


def hard_posting_positions(index: InvertedIndex, target_code: int, vis: int, k: int,
                           fallback: str) -> tuple[np.ndarray, str]:
    """Visible posting positions for a target code, most recent K, plus strategy tag."""
    posting = index.postings.get(int(target_code))
    if posting is not None:
        cut = int(np.searchsorted(posting, vis))
        cand = posting[:cut]
    else:
        cand = np.empty(0, dtype=np.int64)
    if len(cand) > 0:
        return cand[-k:], "hard"
    if fallback == "recency":
        start = max(vis - k, 0)
        return np.arange(start, vis, dtype=np.int64), "fallback"
    return np.empty(0, dtype=np.int64), "hard"


def hard_retrieve(corpus: Corpus, index: InvertedIndex, target_item_id: int,
                  event_time: int, k: int, bucket_cfg: BucketConfig,
                  semid_map: SemIdMap, fallback: str = "recency") -> RetrievedSequence:
    """Retrieve events whose level-1 semantic code matches the target's."""
    if k < 1:
        raise ConfigError(f"retrieval size k must be >= 1, got {k}")
    if fallback not in FALLBACK_POLICIES:
        raise ConfigError(f"unknown fallback policy {fallback!r}; expected one of {FALLBACK_POLICIES}")
    target_codes = semid_map.codes_for(target_item_id)
    if target_codes is None:
        raise DataError(f"target item {target_item_id} has no semantic id")
    user_id = index.user_id
    rows, item_ids, timestamps = corpus.sequence_arrays(user_id)
    if index.n_events != len(item_ids):
        raise DataError(f"index for user {user_id} covers {index.n_events} events, "
                        f"sequence has {len(item_ids)}")
    vis = corpus.visible_count(user_id, event_time)
    pos, strategy = hard_posting_positions(index, int(target_codes[0]), vis, k, fallback)
    emb = corpus.embedding_matrix()
    norms = corpus.embedding_norms()
    target_row = corpus.item_row(target_item_id)
    sims = cosine_many(emb[rows[pos]], emb[target_row], row_norms=norms[rows[pos]])
    return RetrievedSequence(
        user_id=user_id,
        target_item_id=target_item_id,
        item_ids=item_ids[pos],
        timestamps=timestamps[pos],
        similarities=sims,
        buckets=bucketize_many(sims, bucket_cfg),
        strategy=strategy,
    )


def save_indexes(indexes: dict[int, InvertedIndex], path) -> None:
    """One JSON line per user: id, event count, code -> ascending positions."""
    with open(path, "w") as fh:
        for uid in sorted(indexes):
            idx = indexes[uid]
            fh.write(json.dumps({
                "user_id": int(uid),
                "n_events": int(idx.n_events),
                "postings": {str(c): idx.postings[c].tolist() for c in sorted(idx.postings)},
            }, sort_keys=True, separators=(",", ":")) + "\n")


def load_indexes(path) -> dict[int, InvertedIndex]:
    out: dict[int, InvertedIndex] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                idx = InvertedIndex(
                    user_id=int(rec["user_id"]),
                    postings={int(c): np.array(p, dtype=np.int64)
                              for c, p in rec["postings"].items()},
                    n_events=int(rec["n_events"]),
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ParseError(str(path), lineno, f"bad index record: {exc}") from exc
            out[idx.user_id] = idx
    return out


def build_all_indexes(corpus: Corpus, semid_map: SemIdMap) -> dict[int, InvertedIndex]:
    """Index every user's history; deterministic user order."""
    return {uid: build_index(corpus.sequences[uid], semid_map)
            for uid in sorted(corpus.sequences)}


# --- cost benchmark ---

@dataclass
class CostReport:
    strategy: str
    n_queries: int
    mean_ns: float
    p50_ns: float
    p99_ns: float
    bytes_touched: int
    bytes_per_query: float
    index_bytes: int = 0

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "n_queries": self.n_queries,
            "mean_ns": self.mean_ns,
            "p50_ns": self.p50_ns,
            "p99_ns": self.p99_ns,
            "bytes_touched": self.bytes_touched,
            "bytes_per_query": self.bytes_per_query,
            "index_bytes": self.index_bytes,
        }


@dataclass
class _Query:
    rows: np.ndarray
    item_ids: np.ndarray
    timestamps: np.ndarray
    vis: int
    target_row: int
    index: InvertedIndex | None = None
    target_code: int = -1


def bench_retrieval(corpus: Corpus, k: int, semid_map: SemIdMap | None = None,
                    strategies: tuple[str, ...] = ("soft", "hard"),
                    fallback: str = "recency",
                    embedding_bytes_per_value: int = 4) -> list[CostReport]:
    """Measure per-query latency and bytes touched for each retrieval strategy.

    Bytes touched counts the data a strategy must read per query: for soft,
    the stored embeddings of every visible event plus the target; for hard,
    the posting-list entries scanned plus the target's code. Index build cost
    is excluded from timings and reported as resident index bytes.
    """
    if not corpus.impressions:
        raise DataError("benchmark needs impressions to form queries")
    if "hard" in strategies and semid_map is None:
        raise DataError("hard retrieval benchmark needs a semantic-id map")
    emb = corpus.embedding_matrix()
    norms = corpus.embedding_norms()
    d = emb.shape[1]

    queries: list[_Query] = []
    indexes: dict[int, InvertedIndex] = {}
    index_bytes = 0
    if "hard" in strategies:
        for uid in sorted(corpus.sequences):
            indexes[uid] = build_index(corpus.sequences[uid], semid_map)
            index_bytes += indexes[uid].payload_bytes()
    for imp in corpus.impressions:
        rows, item_ids, timestamps = corpus.sequence_arrays(imp.user_id)
        q = _Query(rows=rows, item_ids=item_ids, timestamps=timestamps,
                   vis=corpus.visible_count(imp.user_id, imp.event_time),
                   target_row=corpus.item_row(imp.target_item_id))
        if "hard" in strategies:
            codes = semid_map.codes_for(imp.target_item_id)
            if codes is None:
                raise DataError(f"target item {imp.target_item_id} has no semantic id")
            q.index = indexes[imp.user_id]
            q.target_code = int(codes[0])
        queries.append(q)

    reports = []
    for strategy in strategies:
        times = np.empty(len(queries), dtype=np.float64)
        total_bytes = 0
        if strategy == "soft":
            for i, q in enumerate(queries):
                t0 = time.perf_counter_ns()
                sims = cosine_many(emb[q.rows[:q.vis]], emb[q.target_row],
                                   row_norms=norms[q.rows[:q.vis]])
                top_k_positions(sims, q.timestamps[:q.vis], q.item_ids[:q.vis], k)
                times[i] = time.perf_counter_ns() - t0
                total_bytes += (q.vis + 1) * d * embedding_bytes_per_value
        elif strategy == "hard":
            for i, q in enumerate(queries):
                t0 = time.perf_counter_ns()
                pos, tag = hard_posting_positions(q.index, q.target_code, q.vis, k, fallback)
                times[i] = time.perf_counter_ns() - t0
                posting = q.index.postings.get(q.target_code)
                scanned = int(np.searchsorted(posting, q.vis)) if posting is not None else 0
                total_bytes += scanned * 8 + 4
                if tag == "fallback":
                    total_bytes += len(pos) * 8  # fallback walked the recency tail
        else:
            raise ConfigError(f"unknown retrieval strategy {strategy!r}")
        reports.append(CostReport(
            strategy=strategy,
            n_queries=len(queries),
            mean_ns=float(times.mean()),
            p50_ns=float(np.percentile(times, 50)),
            p99_ns=float(np.percentile(times, 99)),
            bytes_touched=total_bytes,
            bytes_per_query=float(total_bytes) / len(queries),
            index_bytes=index_bytes if strategy == "hard" else 0,
        ))
    return reports
