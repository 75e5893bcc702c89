"""Cosine similarity and its discretization into relevance buckets.

The bucket index is a fixed affine quantization of similarity over a range
calibrated from sampled (behavior, target) pairs, so a bucket keeps the same
meaning across users and requests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, SemrecError
from .data import Corpus


class DiagnosticCounter:
    """Process-wide tally of a degenerate-input condition."""

    def __init__(self, name: str):
        self.name = name
        self.count = 0

    def bump(self, n: int = 1) -> None:
        self.count += int(n)

    def reset(self) -> None:
        self.count = 0


zero_norm_counter = DiagnosticCounter("zero_norm_cosine")


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity clamped to [-1, 1]; zero-norm inputs map to 0."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        zero_norm_counter.bump()
        return 0.0
    return float(np.clip(float(a @ b) / (na * nb), -1.0, 1.0))


def cosine_many(rows: np.ndarray, target: np.ndarray,
                row_norms: np.ndarray | None = None) -> np.ndarray:
    """Cosine of each row against a single target vector."""
    rows = np.asarray(rows, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if row_norms is None:
        row_norms = np.linalg.norm(rows, axis=1)
    tn = float(np.linalg.norm(target))
    if tn == 0.0:
        zero_norm_counter.bump(rows.shape[0])
        return np.zeros(rows.shape[0], dtype=np.float64)
    zero = row_norms == 0.0
    n_zero = int(zero.sum())
    if n_zero:
        zero_norm_counter.bump(n_zero)
    denom = np.where(zero, 1.0, row_norms) * tn
    sims = (rows @ target) / denom
    sims[zero] = 0.0
    return np.clip(sims, -1.0, 1.0)


@dataclass
class SimRange:
    s_min: float
    s_max: float
    sample_size: int
    degenerate: bool = False


@dataclass
class BucketConfig:
    n_buckets: int = 40
    sim_range: SimRange | None = None

    def __post_init__(self) -> None:
        if self.n_buckets < 1:
            raise ConfigError(f"bucket count must be >= 1, got {self.n_buckets}")


def calibrate_range(corpus: Corpus, sample_size: int = 20000, seed: int = 0,
                    lo_pct: float = 0.5, hi_pct: float = 99.5) -> SimRange:
    """Estimate the working similarity range from sampled behavior/target pairs.

    Draws impressions uniformly with replacement, pairs each with one
    uniformly drawn visible behavior event, and takes robust percentiles of
    the resulting cosines.
    """
    if sample_size < 2:
        raise ConfigError(f"calibration sample size must be >= 2, got {sample_size}")
    if not corpus.impressions:
        raise DataError("cannot calibrate similarity range: corpus has no impressions")
    rng = np.random.default_rng(seed)
    emb = corpus.embedding_matrix()
    norms = np.linalg.norm(emb, axis=1)
    imp_idx = rng.integers(0, len(corpus.impressions), size=sample_size)
    event_u = rng.random(sample_size)
    sims = []
    for j in range(sample_size):
        imp = corpus.impressions[int(imp_idx[j])]
        rows, _, _ = corpus.sequence_arrays(imp.user_id)
        vis = corpus.visible_count(imp.user_id, imp.event_time)
        if vis == 0:
            continue
        pos = min(int(event_u[j] * vis), vis - 1)
        b_row = rows[pos]
        t_row = corpus.item_row(imp.target_item_id)
        nb, nt = norms[b_row], norms[t_row]
        if nb == 0.0 or nt == 0.0:
            zero_norm_counter.bump()
            sims.append(0.0)
        else:
            sims.append(float(np.clip(emb[b_row] @ emb[t_row] / (nb * nt), -1.0, 1.0)))
    if not sims:
        raise DataError("cannot calibrate similarity range: no visible behavior events")
    lo, hi = np.percentile(np.array(sims, dtype=np.float64), [lo_pct, hi_pct])
    s_min, s_max = float(lo), float(hi)
    degenerate = s_min == s_max
    if degenerate:
        # Widen inside [-1, 1] so the range invariant still holds at the edges.
        s_min = max(s_min - 5e-7, -1.0)
        s_max = min(s_max + 5e-7, 1.0)
    return SimRange(s_min=s_min, s_max=s_max, sample_size=len(sims), degenerate=degenerate)


def bucketize(s: float, cfg: BucketConfig) -> int:
    """Affine quantization of a similarity into [0, n_buckets)."""
    return int(bucketize_many(np.array([s], dtype=np.float64), cfg)[0])


def bucketize_many(s: np.ndarray, cfg: BucketConfig) -> np.ndarray:
    if cfg.sim_range is None:
        raise ConfigError("bucketize requires a calibrated similarity range")
    r = cfg.sim_range
    width = r.s_max - r.s_min
    if width <= 0.0:
        raise ConfigError(f"similarity range is empty: [{r.s_min}, {r.s_max}]")
    q = np.floor((np.asarray(s, dtype=np.float64) - r.s_min) / width * cfg.n_buckets)
    return np.clip(q, 0, cfg.n_buckets - 1).astype(np.int32)


def bucket_embedding(table: np.ndarray, q: int) -> np.ndarray:
    """Row q of the bucket embedding table."""
    if not 0 <= q < table.shape[0]:
        raise SemrecError(
            f"bucket index {q} outside [0, {table.shape[0]}): internal invariant violation")
    return table[q]
