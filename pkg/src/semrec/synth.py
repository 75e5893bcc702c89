"""Synthetic corpus generator with a planted, recoverable interest signal.

Items live on the unit sphere in ``embed_dim`` dimensions, grouped into
``n_clusters`` equiangular interest clusters. Every user has a dominant
cluster; the first behavior in each history (the anchor) always belongs to
it. Click labels follow a logistic model on top of two planted channels:

* a similarity channel: cosine between the anchor embedding and the target
  embedding, scaled by ``sim_weight``;
* an affinity channel on the (dominant cluster, target cluster) pair,
  scaled by ``affinity_weight`` and split into a per-target-cluster offset
  (``affinity_col_scale``, visible in target marginals) and a
  double-centered interaction (``affinity_int_scale``, invisible in both
  marginals by construction).

The split matters for analysis: marginal offsets give the target's cluster
identity real mutual information with the label, while the interaction part
only rewards models that combine user history with the target.

A ``history_target_fraction`` of impression targets is re-drawn from the
user's own visible history, mimicking re-impression traffic. Those targets
mostly come from the dominant cluster, so "target already seen" correlates
with the planted channels without adding any new label term.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .data import (
    BehaviorEvent,
    BehaviorSequence,
    Corpus,
    CorpusMeta,
    Impression,
    ItemRecord,
)
from .errors import ConfigError


@dataclass
class SynthConfig:
    """Knobs for the planted-signal generator. Defaults make a small corpus."""

    seed: int = 0
    n_users: int = 200
    n_items: int = 400
    n_clusters: int = 6
    embed_dim: int = 128
    id_hash_buckets: int = 50
    n_item_categories: int = 20
    n_context_values: int = 8
    seq_len_min: int = 40
    seq_len_max: int = 120
    impressions_per_user: int = 30
    dominant_fraction: float = 0.9
    within_cluster_noise: float = 0.45
    bias: float = -1.0
    sim_weight: float = 1.0
    affinity_weight: float = 2.0
    affinity_col_scale: float = 0.4
    affinity_int_scale: float = 1.0
    label_noise: float = 0.5
    sim_feature: str = "anchor"
    history_target_fraction: float = 0.0


@dataclass
class PlantedTruth:
    """Ground truth kept out of the corpus, for oracle checks in tests."""

    centers: np.ndarray
    item_cluster: np.ndarray
    user_cluster: np.ndarray
    anchor_item: np.ndarray
    col_offsets: np.ndarray
    interaction: np.ndarray
    affinity_logit: np.ndarray
    sim_values: np.ndarray
    logits: np.ndarray
    probs: np.ndarray


def check_synth(config: SynthConfig) -> None:
    """Validate generator settings; raises ConfigError on bad combinations."""
    if config.n_clusters < 2:
        raise ConfigError("n_clusters must be at least 2")
    if config.n_clusters > config.embed_dim:
        raise ConfigError("n_clusters cannot exceed embed_dim")
    if config.n_items < config.n_clusters:
        raise ConfigError("need at least one item per cluster")
    if not 1 <= config.seq_len_min <= config.seq_len_max:
        raise ConfigError("need 1 <= seq_len_min <= seq_len_max")
    if config.n_users < 1 or config.impressions_per_user < 1:
        raise ConfigError("n_users and impressions_per_user must be positive")
    if not 0.0 <= config.dominant_fraction <= 1.0:
        raise ConfigError("dominant_fraction must lie in [0, 1]")
    if config.id_hash_buckets < 1:
        raise ConfigError("id_hash_buckets must be positive")
    if config.n_item_categories < 1 or config.n_context_values < 1:
        raise ConfigError("category and context vocab sizes must be positive")
    if config.sim_feature not in ("anchor", "max_visible"):
        raise ConfigError(f"unknown sim_feature: {config.sim_feature!r}")
    if config.within_cluster_noise < 0 or config.label_noise < 0:
        raise ConfigError("noise scales must be non-negative")
    if not 0.0 <= config.history_target_fraction <= 1.0:
        raise ConfigError("history_target_fraction must lie in [0, 1]")


def _unit_rows(mat: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(mat, axis=1, keepdims=True)
    return mat / np.maximum(norms, 1e-12)


def _equiangular_centers(n_clusters: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    """Unit cluster centers with identical pairwise cosine -1/(n_clusters-1).

    Built from a centered simplex and then randomly rotated so no center is
    axis-aligned. Equal pairwise angles keep the generator symmetric across
    clusters, which keeps cluster identity out of any channel that is not
    planted explicitly.
    """
    basis = np.eye(n_clusters, dim)
    simplex = basis - basis.mean(axis=0, keepdims=True)
    simplex = _unit_rows(simplex)
    gauss = rng.standard_normal((dim, dim))
    q, r = np.linalg.qr(gauss)
    q = q * np.sign(np.diag(r))
    return simplex @ q.T


def _double_centered(matrix: np.ndarray) -> np.ndarray:
    """Center a square matrix so both marginals and the diagonal mean vanish.

    Flat row and column means keep cluster identity out of the label
    marginals; a zero diagonal mean additionally makes "target from the
    user's own dominant cluster" neutral on average across users, so
    re-impression traffic carries no population-level CTR offset.
    """
    g = matrix.shape[0]
    centered = matrix - matrix.mean(axis=1, keepdims=True)
    centered = centered - centered.mean(axis=0, keepdims=True)
    if g > 1:
        lam = np.trace(centered) / (g - 1)
        centered = centered - lam * (np.eye(g) - 1.0 / g)
    scale = centered.std()
    if scale < 1e-12:
        return np.zeros_like(centered)
    return centered / scale


def generate_synthetic_with_truth(config: SynthConfig) -> tuple[Corpus, PlantedTruth]:
    """Build a corpus plus the hidden variables that generated it."""
    check_synth(config)
    rng = np.random.default_rng(config.seed)
    g = config.n_clusters

    centers = _equiangular_centers(g, config.embed_dim, rng)

    item_cluster = rng.permutation(np.arange(config.n_items) % g)
    noise = rng.standard_normal((config.n_items, config.embed_dim))
    noise *= config.within_cluster_noise / np.sqrt(config.embed_dim)
    item_emb = _unit_rows(centers[item_cluster] + noise)
    item_category = rng.integers(0, config.n_item_categories, size=config.n_items)

    items = {
        i: ItemRecord(
            item_id=i,
            id_features=(int(i % config.id_hash_buckets), int(item_category[i])),
            mm_embedding=item_emb[i].astype(np.float64),
        )
        for i in range(config.n_items)
    }
    cluster_pool = [np.flatnonzero(item_cluster == c) for c in range(g)]

    user_cluster = rng.permutation(np.arange(config.n_users) % g)

    col_offsets = rng.permutation(np.linspace(-1.0, 1.0, g))
    interaction = _double_centered(rng.standard_normal((g, g)))
    affinity_logit = config.affinity_weight * (
        config.affinity_int_scale * interaction
        + config.affinity_col_scale * col_offsets[None, :]
    )

    sequences: dict[int, BehaviorSequence] = {}
    anchor_item = np.zeros(config.n_users, dtype=np.int64)
    for u in range(config.n_users):
        dom = int(user_cluster[u])
        length = int(rng.integers(config.seq_len_min, config.seq_len_max + 1))
        from_dom = rng.random(length) < config.dominant_fraction
        from_dom[0] = True
        other = [c for c in range(g) if c != dom]
        ids = np.empty(length, dtype=np.int64)
        for t in range(length):
            pool = cluster_pool[dom if from_dom[t] else int(rng.choice(other))]
            ids[t] = int(rng.choice(pool))
        anchor_item[u] = ids[0]
        events = [BehaviorEvent(item_id=int(ids[t]), timestamp=t + 1) for t in range(length)]
        sequences[u] = BehaviorSequence(user_id=u, events=tuple(events))

    n_total = config.n_users * config.impressions_per_user
    impressions: list[Impression] = []
    sim_values = np.zeros(n_total)
    logits = np.zeros(n_total)
    row = 0
    for u in range(config.n_users):
        seq = sequences[u]
        length = len(seq.events)
        seq_ids = np.array([e.item_id for e in seq.events], dtype=np.int64)
        dom = int(user_cluster[u])
        anchor_vec = item_emb[anchor_item[u]]
        targets = rng.integers(0, config.n_items, size=config.impressions_per_user)
        times = rng.integers(length // 2 + 1, length + 2, size=config.impressions_per_user)
        seen = rng.random(config.impressions_per_user) < config.history_target_fraction
        ctx = rng.integers(0, config.n_context_values, size=config.impressions_per_user)
        eps = rng.standard_normal(config.impressions_per_user)
        for j in range(config.impressions_per_user):
            t_item = int(targets[j])
            if seen[j]:
                n_seen = min(int(times[j]) - 1, length)
                if n_seen > 0:
                    t_item = int(seq_ids[rng.integers(n_seen)])
            t_vec = item_emb[t_item]
            if config.sim_feature == "anchor":
                sim = float(anchor_vec @ t_vec)
            else:
                n_vis = min(int(times[j]) - 1, length)
                sim = float(np.max(item_emb[seq_ids[:n_vis]] @ t_vec)) if n_vis else 0.0
            logit = (
                config.bias
                + config.sim_weight * sim
                + affinity_logit[dom, item_cluster[t_item]]
                + config.label_noise * float(eps[j])
            )
            sim_values[row] = sim
            logits[row] = logit
            row += 1
            impressions.append(
                Impression(
                    user_id=u,
                    target_item_id=t_item,
                    context_features=(int(ctx[j]),),
                    user_features=(dom,),
                    label=0,
                    event_time=int(times[j]),
                )
            )
    probs = expit(logits)
    labels = (rng.random(n_total) < probs).astype(np.int64)
    impressions = [
        Impression(
            user_id=imp.user_id,
            target_item_id=imp.target_item_id,
            context_features=imp.context_features,
            user_features=imp.user_features,
            label=int(labels[i]),
            event_time=imp.event_time,
        )
        for i, imp in enumerate(impressions)
    ]

    meta = CorpusMeta(
        embed_dim=config.embed_dim,
        item_feature_vocab_sizes=(config.id_hash_buckets, config.n_item_categories),
        user_feature_vocab_sizes=(g,),
        context_feature_vocab_sizes=(config.n_context_values,),
        seed=config.seed,
    )
    corpus = Corpus(items=items, sequences=sequences, impressions=impressions, meta=meta)
    corpus.validate()
    truth = PlantedTruth(
        centers=centers,
        item_cluster=item_cluster,
        user_cluster=user_cluster,
        anchor_item=anchor_item,
        col_offsets=col_offsets,
        interaction=interaction,
        affinity_logit=affinity_logit,
        sim_values=sim_values,
        logits=logits,
        probs=probs,
    )
    return corpus, truth


def generate_synthetic(config: SynthConfig) -> Corpus:
    """Build just the corpus; the planted truth is discarded."""
    corpus, _ = generate_synthetic_with_truth(config)
    return corpus
