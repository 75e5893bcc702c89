"""Target-conditioned attention ranker over retrieved behavior sequences.

Every behavior and the target share one unified item representation: the
concatenation of per-slot id-feature embeddings and, when enabled, the
embeddings of the item's semantic-id prefixes. Attention queries and keys
additionally see a similarity-bucket embedding per behavior (a learned
self-similarity vector on the target side), so bucketized similarities
steer the attention weights but the pooled values stay the plain unified
representations. Per-head softmax scores average into a single attention
weight per position, and the pooled interest vector interacts element-wise
with the unified target before a ReLU MLP produces the click probability.

All tensors are float64 numpy arrays and every gradient is written by hand;
`backward_batch` mirrors `forward_batch` exactly and is verified against
finite differences in the test suite.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .data import Corpus
from .errors import ConfigError, DataError, NumericError, ParseError, SchemaError
from .quantizer import PrefixVocab, pack_prefix_matrix
from .similarity import DiagnosticCounter

oov_counter = DiagnosticCounter("feature_oov")


@dataclass
class ModelConfig:
    item_feature_width: int = 16
    user_feature_width: int = 8
    context_feature_width: int = 8
    prefix_depth: int = 3
    prefix_width: int = 8
    bucket_width: int = 8
    n_buckets: int = 40
    n_heads: int = 2
    head_dim: int = 16
    mlp_hidden: tuple[int, int] = (256, 64)
    use_semid: bool = True
    use_simbucket: bool = True
    use_target_interaction: bool = True

    def validate(self) -> None:
        positive = {
            "item_feature_width": self.item_feature_width,
            "user_feature_width": self.user_feature_width,
            "context_feature_width": self.context_feature_width,
            "prefix_depth": self.prefix_depth,
            "prefix_width": self.prefix_width,
            "bucket_width": self.bucket_width,
            "n_buckets": self.n_buckets,
            "n_heads": self.n_heads,
            "head_dim": self.head_dim,
        }
        for name, value in positive.items():
            if int(value) < 1:
                raise ConfigError(f"model.{name} must be >= 1, got {value}")
        if len(self.mlp_hidden) != 2 or any(int(h) < 1 for h in self.mlp_hidden):
            raise ConfigError(f"model.mlp_hidden must be two positive sizes, got {self.mlp_hidden}")


@dataclass
class ModelParams:
    config: ModelConfig
    item_vocab_sizes: list[int]
    user_vocab_sizes: list[int]
    context_vocab_sizes: list[int]
    codebook_size: int
    prefix_vocab: PrefixVocab | None
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    tensor_order: list[str] = field(default_factory=list)

    @property
    def unified_width(self) -> int:
        d = len(self.item_vocab_sizes) * self.config.item_feature_width
        if self.config.use_semid:
            d += self.config.prefix_depth * self.config.prefix_width
        return d

    @property
    def key_width(self) -> int:
        return self.unified_width + (self.config.bucket_width if self.config.use_simbucket else 0)

    @property
    def user_width(self) -> int:
        return len(self.user_vocab_sizes) * self.config.user_feature_width

    @property
    def context_width(self) -> int:
        return len(self.context_vocab_sizes) * self.config.context_feature_width

    @property
    def mlp_input_width(self) -> int:
        return 2 * self.unified_width + self.user_width + self.context_width

    @property
    def sparse_names(self) -> list[str]:
        return [n for n in self.tensor_order if n.endswith("_table")]

    @property
    def dense_names(self) -> list[str]:
        return [n for n in self.tensor_order if not n.endswith("_table")]

    def n_parameters(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))


def _block_rng(seed: int, name: str, block: str = "") -> np.random.Generator:
    """Generator keyed by (seed, tensor name, column block).

    Keying draws by name and block rather than creation order makes the
    shared parts of every ablation variant identical at init: disabling
    semantic ids or sim buckets removes columns without re-rolling the rest.
    """
    key = (int(seed), zlib.crc32(name.encode()), zlib.crc32(block.encode()))
    return np.random.default_rng(np.random.SeedSequence(key))


def init_params(config: ModelConfig, item_vocab_sizes: list[int],
                user_vocab_sizes: list[int], context_vocab_sizes: list[int],
                seed: int, prefix_vocab: PrefixVocab | None = None,
                codebook_size: int = 0) -> ModelParams:
    """Seeded parameter init, matched across ablation variants.

    Two deliberate choices make every variant compute the same function at
    init regardless of which switches are on:
      - side-information tables (semantic-id prefixes, sim buckets) start at
        zero, so enabled blocks contribute nothing until training moves them,
        only opening extra gradient paths;
      - dense weights are drawn per column block with scales set by the
        full-architecture widths, so shared columns are bit-identical whether
        or not the optional blocks exist.
    """
    config.validate()
    if config.use_semid and prefix_vocab is None:
        raise ConfigError("use_semid requires a prefix vocabulary")
    params = ModelParams(
        config=config,
        item_vocab_sizes=[int(v) for v in item_vocab_sizes],
        user_vocab_sizes=[int(v) for v in user_vocab_sizes],
        context_vocab_sizes=[int(v) for v in context_vocab_sizes],
        codebook_size=int(codebook_size),
        prefix_vocab=prefix_vocab if config.use_semid else None,
    )
    seed = int(seed)

    def add(name: str, shape: tuple[int, ...], scale: float | None) -> None:
        if scale is None:
            params.tensors[name] = np.zeros(shape, dtype=np.float64)
        else:
            params.tensors[name] = _block_rng(seed, name).uniform(-scale, scale, size=shape)
        params.tensor_order.append(name)

    def add_blocked(name: str, rows: tuple[int, ...], blocks: list[tuple[str, int]],
                    scale: float) -> None:
        parts = [_block_rng(seed, name, label).uniform(-scale, scale, size=rows + (w,))
                 for label, w in blocks]
        params.tensors[name] = np.concatenate(parts, axis=-1)
        params.tensor_order.append(name)

    emb = 0.01
    for f, v in enumerate(params.item_vocab_sizes):
        add(f"item_{f}_table", (v + 1, config.item_feature_width), emb)
    if config.use_semid:
        add("prefix_table", (params.prefix_vocab.n_rows, config.prefix_width), None)
    for f, v in enumerate(params.user_vocab_sizes):
        add(f"user_{f}_table", (v + 1, config.user_feature_width), emb)
    for f, v in enumerate(params.context_vocab_sizes):
        add(f"context_{f}_table", (v + 1, config.context_feature_width), emb)
    if config.use_simbucket:
        add("bucket_table", (config.n_buckets, config.bucket_width), None)
        add("target_sim", (config.bucket_width,), None)

    # column blocks of the unified item representation, in layout order;
    # keys and queries append the similarity-bucket slot
    item_blocks = [(f"item_{f}", config.item_feature_width)
                   for f in range(len(params.item_vocab_sizes))]
    if config.use_semid:
        item_blocks.append(("prefix", config.prefix_depth * config.prefix_width))
    key_blocks = list(item_blocks)
    if config.use_simbucket:
        key_blocks.append(("bucket", config.bucket_width))

    # full-architecture widths, so scales do not depend on the switches
    d_full = (len(params.item_vocab_sizes) * config.item_feature_width
              + config.prefix_depth * config.prefix_width)
    kw_full = d_full + config.bucket_width
    m_in_full = 2 * d_full + params.user_width + params.context_width

    h = config.n_heads
    dh = config.head_dim
    add_blocked("attn_query", (h, dh), key_blocks, 1.0 / np.sqrt(kw_full))
    add_blocked("attn_key", (h, dh), key_blocks, 1.0 / np.sqrt(kw_full))
    h1, h2 = (int(x) for x in config.mlp_hidden)
    mlp_blocks = ([(f"interest_{b}", w) for b, w in item_blocks]
                  + [(f"target_{b}", w) for b, w in item_blocks]
                  + [(f"user_{f}", config.user_feature_width)
                     for f in range(len(params.user_vocab_sizes))]
                  + [(f"context_{f}", config.context_feature_width)
                     for f in range(len(params.context_vocab_sizes))])
    add_blocked("mlp_w1", (h1,), mlp_blocks, 1.0 / np.sqrt(m_in_full))
    add("mlp_b1", (h1,), None)
    add("mlp_w2", (h2, h1), 1.0 / np.sqrt(h1))
    add("mlp_b2", (h2,), None)
    add("mlp_w3", (h2,), 1.0 / np.sqrt(h2))
    add("mlp_b3", (1,), None)
    return params


def safe_rows(values: np.ndarray, vocab_size: int) -> np.ndarray:
    """Map raw feature values to table rows; out-of-vocabulary goes to the last row."""
    values = np.asarray(values)
    ok = (values >= 0) & (values < vocab_size)
    bad = values.size - int(ok.sum())
    if bad:
        oov_counter.bump(bad)
    return np.where(ok, values, vocab_size).astype(np.int32)


@dataclass
class ItemFeatures:
    """Per-item table rows, aligned with the corpus item-row order."""
    slot_rows: np.ndarray               # [n_items, F] int32, already OOV-mapped
    prefix_rows: np.ndarray | None      # [n_items, K] int32 into prefix_table


def build_item_features(corpus: Corpus, params: ModelParams,
                        semid_codes: np.ndarray | None = None) -> ItemFeatures:
    raw = corpus.item_feature_matrix()
    if raw.shape[1] != len(params.item_vocab_sizes):
        raise DataError(f"corpus has {raw.shape[1]} item feature slots, "
                        f"model expects {len(params.item_vocab_sizes)}")
    slot_rows = np.column_stack([
        safe_rows(raw[:, f], v) for f, v in enumerate(params.item_vocab_sizes)
    ])
    prefix_rows = None
    if params.config.use_semid:
        if semid_codes is None:
            raise DataError("use_semid requires semantic-id codes for every item")
        if semid_codes.shape[0] != raw.shape[0]:
            raise DataError(f"semantic-id codes cover {semid_codes.shape[0]} items, "
                            f"corpus has {raw.shape[0]}")
        keys = pack_prefix_matrix(semid_codes, params.config.prefix_depth, params.codebook_size)
        prefix_rows = params.prefix_vocab.lookup(keys)
    return ItemFeatures(slot_rows=slot_rows, prefix_rows=prefix_rows)


@dataclass
class Batch:
    """Dense mini-batch of impressions with pre-retrieved behavior sequences."""
    target_rows: np.ndarray    # [n] int32 corpus item rows
    behav_rows: np.ndarray     # [n, L] int32 corpus item rows, -1 pad
    behav_buckets: np.ndarray  # [n, L] int32, pad 0
    lengths: np.ndarray        # [n] int32
    user_feats: np.ndarray     # [n, Fu] raw values
    ctx_feats: np.ndarray      # [n, Fc] raw values
    labels: np.ndarray | None = None  # [n] float64

    def __len__(self) -> int:
        return len(self.target_rows)


def embed_items(params: ModelParams, feats: ItemFeatures, rows: np.ndarray) -> np.ndarray:
    """Unified representation h for item rows of shape [...]; output [..., D]."""
    rows = np.asarray(rows)
    flat = rows.reshape(-1)
    parts = []
    for f in range(len(params.item_vocab_sizes)):
        parts.append(params.tensors[f"item_{f}_table"][feats.slot_rows[flat, f]])
    if params.config.use_semid:
        k = params.config.prefix_depth
        pr = feats.prefix_rows[flat]  # [m, K]
        parts.append(params.tensors["prefix_table"][pr].reshape(len(flat), k * params.config.prefix_width))
    out = np.concatenate(parts, axis=1)
    return out.reshape(*rows.shape, params.unified_width)


def forward_batch(params: ModelParams, feats: ItemFeatures, batch: Batch,
                  want_cache: bool = False) -> tuple[np.ndarray, dict | None]:
    """Click probabilities for a batch; optionally returns the backward cache."""
    cfg = params.config
    t = params.tensors
    n = len(batch)
    L = batch.behav_rows.shape[1]
    D = params.unified_width

    mask = np.arange(L)[None, :] < batch.lengths[:, None]  # [n, L]
    b_rows = np.where(mask, batch.behav_rows, 0)
    h_t = embed_items(params, feats, batch.target_rows)     # [n, D]
    h = embed_items(params, feats, b_rows)                  # [n, L, D]

    if cfg.use_simbucket:
        q_b = np.where(mask, batch.behav_buckets, 0)
        if q_b.size and (q_b.min() < 0 or q_b.max() >= cfg.n_buckets):
            raise DataError("bucket index outside table range")
        x_t = np.concatenate([h_t, np.broadcast_to(t["target_sim"], (n, cfg.bucket_width))], axis=1)
        x_i = np.concatenate([h, t["bucket_table"][q_b]], axis=2)
    else:
        q_b = np.zeros((n, L), dtype=np.int32)
        x_t = h_t
        x_i = h

    H, dh, kw = cfg.n_heads, cfg.head_dim, params.key_width
    wq = t["attn_query"].reshape(H * dh, kw)
    wk = t["attn_key"].reshape(H * dh, kw)
    q = (x_t @ wq.T).reshape(n, H, dh)
    if L > 0:
        k = (x_i.reshape(n * L, kw) @ wk.T).reshape(n, L, H, dh)
        raw = np.einsum("nhd,nlhd->nhl", q, k)
        scores = raw / np.sqrt(dh)
        scores = np.where(mask[:, None, :], scores, -np.inf)
        smax = scores.max(axis=2, keepdims=True)
        e = np.exp(scores - np.where(np.isfinite(smax), smax, 0.0))
        e *= mask[:, None, :]
        denom = e.sum(axis=2, keepdims=True)
        alpha_h = e / np.maximum(denom, 1e-300)             # [n, H, L]
        alpha = alpha_h.mean(axis=1)                        # [n, L]
        u = np.einsum("nl,nld->nd", alpha, h)
    else:
        k = np.zeros((n, 0, H, dh))
        alpha_h = np.zeros((n, H, 0))
        alpha = np.zeros((n, 0))
        u = np.zeros((n, D))

    interest = u * h_t if cfg.use_target_interaction else u

    def feat_rows(values: np.ndarray, sizes: list[int]) -> np.ndarray:
        if not sizes:
            return np.zeros((n, 0), dtype=np.int32)
        return np.column_stack([safe_rows(values[:, f], v) for f, v in enumerate(sizes)])

    def feat_embed(rows: np.ndarray, prefix: str, sizes: list[int], width: int) -> np.ndarray:
        if not sizes:
            return np.zeros((n, 0))
        return np.concatenate(
            [t[f"{prefix}_{f}_table"][rows[:, f]] for f in range(len(sizes))], axis=1)

    user_rows = feat_rows(batch.user_feats, params.user_vocab_sizes)
    ctx_rows = feat_rows(batch.ctx_feats, params.context_vocab_sizes)
    e_user = feat_embed(user_rows, "user", params.user_vocab_sizes, cfg.user_feature_width)
    e_ctx = feat_embed(ctx_rows, "context", params.context_vocab_sizes, cfg.context_feature_width)

    x = np.concatenate([interest, h_t, e_user, e_ctx], axis=1)
    z1 = x @ t["mlp_w1"].T + t["mlp_b1"]
    if not np.isfinite(z1).all():
        raise NumericError("non-finite activation at mlp layer 1")
    a1 = np.maximum(z1, 0.0)
    z2 = a1 @ t["mlp_w2"].T + t["mlp_b2"]
    if not np.isfinite(z2).all():
        raise NumericError("non-finite activation at mlp layer 2")
    a2 = np.maximum(z2, 0.0)
    logit = a2 @ t["mlp_w3"] + t["mlp_b3"][0]
    if not np.isfinite(logit).all():
        raise NumericError("non-finite activation at output layer")
    p = expit(logit)

    cache = None
    if want_cache:
        cache = {
            "mask": mask, "b_rows": b_rows, "q_b": q_b,
            "h_t": h_t, "h": h, "x_t": x_t, "x_i": x_i,
            "q": q, "k": k, "alpha_h": alpha_h, "alpha": alpha, "u": u,
            "user_rows": user_rows, "ctx_rows": ctx_rows,
            "x": x, "z1": z1, "a1": a1, "z2": z2, "a2": a2,
            "logit": logit, "p": p, "target_rows": batch.target_rows,
        }
    return p, cache


def backward_batch(params: ModelParams, feats: ItemFeatures, cache: dict,
                   labels: np.ndarray) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Gradients of mean binary cross-entropy wrt every parameter tensor.

    Returns (grads, touched): full-shape gradient arrays plus, for each
    embedding table, the sorted unique row indices that received gradient.
    """
    cfg = params.config
    t = params.tensors
    mask = cache["mask"]
    n, L = mask.shape
    D = params.unified_width
    H, dh, kw = cfg.n_heads, cfg.head_dim, params.key_width
    y = np.asarray(labels, dtype=np.float64)

    grads: dict[str, np.ndarray] = {}
    touched: dict[str, np.ndarray] = {}

    dlogit = (cache["p"] - y) / n                           # [n]
    a2, a1, x = cache["a2"], cache["a1"], cache["x"]
    grads["mlp_w3"] = a2.T @ dlogit
    grads["mlp_b3"] = np.array([dlogit.sum()])
    da2 = dlogit[:, None] * t["mlp_w3"][None, :]
    dz2 = da2 * (cache["z2"] > 0)
    grads["mlp_w2"] = dz2.T @ a1
    grads["mlp_b2"] = dz2.sum(axis=0)
    da1 = dz2 @ t["mlp_w2"]
    dz1 = da1 * (cache["z1"] > 0)
    grads["mlp_w1"] = dz1.T @ x
    grads["mlp_b1"] = dz1.sum(axis=0)
    dx = dz1 @ t["mlp_w1"]                                  # [n, mlp_in]

    uw = params.user_width
    d_interest = dx[:, :D]
    dh_t = dx[:, D:2 * D].copy()
    d_user = dx[:, 2 * D:2 * D + uw]
    d_ctx = dx[:, 2 * D + uw:]

    if cfg.use_target_interaction:
        du = d_interest * cache["h_t"]
        dh_t += d_interest * cache["u"]
    else:
        du = d_interest.copy()

    h = cache["h"]
    alpha_h = cache["alpha_h"]
    if L > 0:
        dalpha = np.einsum("nd,nld->nl", du, h)
        d_h = cache["alpha"][:, :, None] * du[:, None, :]   # [n, L, D]
        dalpha_h = np.broadcast_to(dalpha[:, None, :] / H, (n, H, L))
        inner = (alpha_h * dalpha_h).sum(axis=2, keepdims=True)
        ds = alpha_h * (dalpha_h - inner)                   # [n, H, L], zero on pads
        draw = ds / np.sqrt(dh)
        dq = np.einsum("nhl,nlhd->nhd", draw, cache["k"])
        dk = np.einsum("nhl,nhd->nlhd", draw, cache["q"])
        x_t, x_i = cache["x_t"], cache["x_i"]
        dq_flat = dq.reshape(n, H * dh)
        grads["attn_query"] = (dq_flat.T @ x_t).reshape(H, dh, kw)
        dx_t = dq_flat @ t["attn_query"].reshape(H * dh, kw)
        dk_flat = dk.reshape(n * L, H * dh)
        xi_flat = x_i.reshape(n * L, kw)
        grads["attn_key"] = (dk_flat.T @ xi_flat).reshape(H, dh, kw)
        dx_i = (dk_flat @ t["attn_key"].reshape(H * dh, kw)).reshape(n, L, kw)
        d_h += dx_i[:, :, :D]
        dh_t += dx_t[:, :D]
        if cfg.use_simbucket:
            grads["target_sim"] = dx_t[:, D:].sum(axis=0)
            d_bucket_vals = dx_i[:, :, D:]
    else:
        d_h = np.zeros((n, 0, D))
        grads["attn_query"] = np.zeros_like(t["attn_query"])
        grads["attn_key"] = np.zeros_like(t["attn_key"])
        if cfg.use_simbucket:
            grads["target_sim"] = np.zeros(cfg.bucket_width)
            d_bucket_vals = np.zeros((n, 0, cfg.bucket_width))

    # scatter into embedding tables
    flat_mask = mask.reshape(-1)
    b_flat = cache["b_rows"].reshape(-1)[flat_mask]
    dh_flat = d_h.reshape(n * L, D)[flat_mask]
    t_rows = np.asarray(cache["target_rows"])

    off = 0
    w = cfg.item_feature_width
    for f in range(len(params.item_vocab_sizes)):
        name = f"item_{f}_table"
        g = np.zeros_like(t[name])
        rows_t = feats.slot_rows[t_rows, f]
        np.add.at(g, rows_t, dh_t[:, off:off + w])
        rows_b = feats.slot_rows[b_flat, f]
        np.add.at(g, rows_b, dh_flat[:, off:off + w])
        grads[name] = g
        touched[name] = np.unique(np.concatenate([rows_t, rows_b]))
        off += w
    if cfg.use_semid:
        w = cfg.prefix_width
        g = np.zeros_like(t["prefix_table"])
        all_rows = []
        for kdx in range(cfg.prefix_depth):
            rows_t = feats.prefix_rows[t_rows, kdx]
            np.add.at(g, rows_t, dh_t[:, off:off + w])
            rows_b = feats.prefix_rows[b_flat, kdx]
            np.add.at(g, rows_b, dh_flat[:, off:off + w])
            all_rows.extend([rows_t, rows_b])
            off += w
        grads["prefix_table"] = g
        touched["prefix_table"] = np.unique(np.concatenate(all_rows))

    if cfg.use_simbucket:
        g = np.zeros_like(t["bucket_table"])
        rows_q = cache["q_b"].reshape(-1)[flat_mask]
        np.add.at(g, rows_q, d_bucket_vals.reshape(n * L, cfg.bucket_width)[flat_mask])
        grads["bucket_table"] = g
        touched["bucket_table"] = np.unique(rows_q)

    off = 0
    w = cfg.user_feature_width
    for f in range(len(params.user_vocab_sizes)):
        name = f"user_{f}_table"
        g = np.zeros_like(t[name])
        rows = cache["user_rows"][:, f]
        np.add.at(g, rows, d_user[:, off:off + w])
        grads[name] = g
        touched[name] = np.unique(rows)
        off += w
    off = 0
    w = cfg.context_feature_width
    for f in range(len(params.context_vocab_sizes)):
        name = f"context_{f}_table"
        g = np.zeros_like(t[name])
        rows = cache["ctx_rows"][:, f]
        np.add.at(g, rows, d_ctx[:, off:off + w])
        grads[name] = g
        touched[name] = np.unique(rows)
        off += w

    return grads, touched


# --- single-sample contract operations ---

def unify(params: ModelParams, id_features: list[int], semid_codes=None) -> np.ndarray:
    """Unified representation of one item from raw features and semantic codes."""
    parts = []
    for f, v in enumerate(params.item_vocab_sizes):
        row = int(safe_rows(np.array([id_features[f]]), v)[0])
        parts.append(params.tensors[f"item_{f}_table"][row])
    if params.config.use_semid:
        if semid_codes is None:
            raise DataError("use_semid requires semantic-id codes")
        codes = np.asarray(semid_codes, dtype=np.int64)[None, :]
        keys = pack_prefix_matrix(codes, params.config.prefix_depth, params.codebook_size)
        rows = params.prefix_vocab.lookup(keys)[0]
        for r in rows:
            parts.append(params.tensors["prefix_table"][int(r)])
    return np.concatenate(parts)


def target_attention(params: ModelParams, behaviors: np.ndarray, buckets: np.ndarray,
                     target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pooled interest vector and per-position attention weights.

    behaviors: [L, D] unified representations; buckets: [L] bucket indices;
    target: [D]. Bucket embeddings steer the scores through queries and
    keys; the pooled interest is the alpha-weighted sum of the plain
    behavior representations. An empty sequence yields a zero vector.
    """
    cfg = params.config
    t = params.tensors
    L = behaviors.shape[0]
    if behaviors.ndim != 2 or behaviors.shape[1] != params.unified_width:
        raise DataError(f"behaviors must be [L, {params.unified_width}]")
    if L == 0:
        return np.zeros(params.unified_width), np.zeros(0)
    if cfg.use_simbucket:
        x_t = np.concatenate([target, t["target_sim"]])
        x_i = np.concatenate([behaviors, t["bucket_table"][np.asarray(buckets, dtype=np.int32)]], axis=1)
    else:
        x_t = target
        x_i = behaviors
    H, dh, kw = cfg.n_heads, cfg.head_dim, params.key_width
    q = (t["attn_query"].reshape(H * dh, kw) @ x_t).reshape(H, dh)
    k = (x_i @ t["attn_key"].reshape(H * dh, kw).T).reshape(L, H, dh)
    scores = np.einsum("hd,lhd->hl", q, k) / np.sqrt(dh)
    scores -= scores.max(axis=1, keepdims=True)
    e = np.exp(scores)
    alpha_h = e / e.sum(axis=1, keepdims=True)
    alpha = alpha_h.mean(axis=0)
    return alpha @ behaviors, alpha


def target_interaction(u: np.ndarray, h_t: np.ndarray) -> np.ndarray:
    """Element-wise product of interest and target representations."""
    if u.shape != h_t.shape:
        raise DataError(f"width mismatch: interest {u.shape} vs target {h_t.shape}")
    return u * h_t


def predict(params: ModelParams, interest: np.ndarray, h_t: np.ndarray,
            user_features: list[int], context_features: list[int]) -> float:
    """Click probability from an interest vector, target, and request features."""
    t = params.tensors
    e_user = np.concatenate([
        t[f"user_{f}_table"][int(safe_rows(np.array([user_features[f]]), v)[0])]
        for f, v in enumerate(params.user_vocab_sizes)
    ]) if params.user_vocab_sizes else np.zeros(0)
    e_ctx = np.concatenate([
        t[f"context_{f}_table"][int(safe_rows(np.array([context_features[f]]), v)[0])]
        for f, v in enumerate(params.context_vocab_sizes)
    ]) if params.context_vocab_sizes else np.zeros(0)
    x = np.concatenate([interest, h_t, e_user, e_ctx])
    if x.shape[0] != params.mlp_input_width:
        raise DataError(f"prediction input width {x.shape[0]} != {params.mlp_input_width}")
    z1 = t["mlp_w1"] @ x + t["mlp_b1"]
    if not np.isfinite(z1).all():
        raise NumericError("non-finite activation at mlp layer 1")
    a1 = np.maximum(z1, 0.0)
    z2 = t["mlp_w2"] @ a1 + t["mlp_b2"]
    if not np.isfinite(z2).all():
        raise NumericError("non-finite activation at mlp layer 2")
    a2 = np.maximum(z2, 0.0)
    logit = float(a2 @ t["mlp_w3"] + t["mlp_b3"][0])
    if not np.isfinite(logit):
        raise NumericError("non-finite activation at output layer")
    return float(expit(logit))


# --- checkpoint io: JSON header line + raw little-endian float64 payload ---

_CKPT_MAGIC = "semrec-checkpoint-v1"


def save_params(params: ModelParams, path: str | Path, extra: dict | None = None) -> None:
    """Write a deterministic checkpoint: one JSON header line, then raw float64.

    `extra` lands under the header's "run" key; the CLI uses it to record the
    config hash and seeds next to the tensor widths already in the config.
    """
    cfg = params.config
    header = {
        "format": _CKPT_MAGIC,
        "run": extra or {},
        "config": {
            "item_feature_width": cfg.item_feature_width,
            "user_feature_width": cfg.user_feature_width,
            "context_feature_width": cfg.context_feature_width,
            "prefix_depth": cfg.prefix_depth,
            "prefix_width": cfg.prefix_width,
            "bucket_width": cfg.bucket_width,
            "n_buckets": cfg.n_buckets,
            "n_heads": cfg.n_heads,
            "head_dim": cfg.head_dim,
            "mlp_hidden": list(cfg.mlp_hidden),
            "use_semid": cfg.use_semid,
            "use_simbucket": cfg.use_simbucket,
            "use_target_interaction": cfg.use_target_interaction,
        },
        "item_vocab_sizes": params.item_vocab_sizes,
        "user_vocab_sizes": params.user_vocab_sizes,
        "context_vocab_sizes": params.context_vocab_sizes,
        "codebook_size": params.codebook_size,
        "prefix_vocab_len": 0 if params.prefix_vocab is None else len(params.prefix_vocab.keys),
        "tensors": [
            {"name": n, "shape": list(params.tensors[n].shape)} for n in params.tensor_order
        ],
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")).encode() + b"\n")
        if params.prefix_vocab is not None:
            fh.write(np.asarray(params.prefix_vocab.keys, dtype="<i8").tobytes())
        for name in params.tensor_order:
            fh.write(np.asarray(params.tensors[name], dtype="<f8").tobytes())


def read_checkpoint_header(path: str | Path) -> dict:
    """Parse and return just the JSON header of a checkpoint."""
    with open(path, "rb") as fh:
        header_line = fh.readline()
    try:
        header = json.loads(header_line)
    except json.JSONDecodeError as exc:
        raise ParseError(str(path), 1, "invalid checkpoint header") from exc
    if header.get("format") != _CKPT_MAGIC:
        raise SchemaError(f"{path}: not a checkpoint file")
    return header


def load_params(path: str | Path) -> ModelParams:
    with open(path, "rb") as fh:
        header_line = fh.readline()
        payload = fh.read()
    try:
        header = json.loads(header_line)
    except json.JSONDecodeError as exc:
        raise ParseError(str(path), 1, "invalid checkpoint header") from exc
    if header.get("format") != _CKPT_MAGIC:
        raise SchemaError(f"{path}: not a checkpoint file")
    c = header["config"]
    config = ModelConfig(
        item_feature_width=c["item_feature_width"],
        user_feature_width=c["user_feature_width"],
        context_feature_width=c["context_feature_width"],
        prefix_depth=c["prefix_depth"],
        prefix_width=c["prefix_width"],
        bucket_width=c["bucket_width"],
        n_buckets=c["n_buckets"],
        n_heads=c["n_heads"],
        head_dim=c["head_dim"],
        mlp_hidden=tuple(c["mlp_hidden"]),
        use_semid=c["use_semid"],
        use_simbucket=c["use_simbucket"],
        use_target_interaction=c["use_target_interaction"],
    )
    offset = 0
    n_keys = int(header["prefix_vocab_len"])
    expect = n_keys * 8 + sum(
        int(np.prod([int(s) for s in entry["shape"]] or [1])) * 8
        for entry in header["tensors"]
    )
    if len(payload) != expect:
        raise SchemaError(f"{path}: payload is {len(payload)} bytes, expected {expect}")
    prefix_vocab = None
    if config.use_semid:
        keys = np.frombuffer(payload, dtype="<i8", count=n_keys, offset=offset).copy()
        prefix_vocab = PrefixVocab(keys=keys)
        offset += n_keys * 8
    params = ModelParams(
        config=config,
        item_vocab_sizes=[int(v) for v in header["item_vocab_sizes"]],
        user_vocab_sizes=[int(v) for v in header["user_vocab_sizes"]],
        context_vocab_sizes=[int(v) for v in header["context_vocab_sizes"]],
        codebook_size=int(header["codebook_size"]),
        prefix_vocab=prefix_vocab,
    )
    for spec_entry in header["tensors"]:
        name = spec_entry["name"]
        shape = tuple(int(s) for s in spec_entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(payload, dtype="<f8", count=size, offset=offset).copy().reshape(shape)
        offset += size * 8
        params.tensors[name] = arr
        params.tensor_order.append(name)
    if offset != len(payload):
        raise SchemaError(f"{path}: payload has {len(payload)} bytes, consumed {offset}")
    return params
