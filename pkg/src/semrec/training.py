"""Training loop, optimizer, and evaluation metrics.

Dense tensors update with decoupled-weight-decay Adam at a small learning
rate; embedding tables update with per-row Adam at a larger rate, touching
only rows that received gradient. Evaluation reports impression-weighted
per-user AUC (GAUC), the ranking metric the model is trained to move.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.stats import rankdata

from .data import Corpus, Impression, SplitPolicy, split
from .errors import ConfigError, DataError, UndefinedMetricError
from .model import (Batch, ItemFeatures, ModelConfig, ModelParams, backward_batch,
                    build_item_features, forward_batch, init_params)
from .quantizer import (Codebooks, SemIdMap, build_prefix_vocab, encode_batch,
                        train_codebooks)
from .retrieval import build_index, hard_posting_positions, top_k_positions
from .similarity import BucketConfig, SimRange, bucketize_many, calibrate_range, cosine_many


def bce_loss(predictions: np.ndarray, labels: np.ndarray, eps: float = 1e-12) -> float:
    """Mean binary cross-entropy; probabilities are clamped to [eps, 1-eps]."""
    p = np.clip(np.asarray(predictions, dtype=np.float64), eps, 1.0 - eps)
    y = np.asarray(labels, dtype=np.float64)
    return float(-(y * np.log(p) + (1.0 - y) * np.log1p(-p)).mean())


# --- optimizer ---

@dataclass
class AdamConfig:
    lr_dense: float = 2e-4
    lr_sparse: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    rejected: int = 0


def init_adam(params: ModelParams) -> AdamState:
    return AdamState(
        m={n: np.zeros_like(t) for n, t in params.tensors.items()},
        v={n: np.zeros_like(t) for n, t in params.tensors.items()},
    )


def adam_step(params: ModelParams, grads: dict[str, np.ndarray],
              touched: dict[str, np.ndarray], state: AdamState, cfg: AdamConfig) -> bool:
    """One optimizer step; rejects the whole step if any gradient is non-finite.

    Sparse tables use the global step count for bias correction, the usual
    row-wise Adam approximation.
    """
    for g in grads.values():
        if not np.isfinite(g).all():
            state.rejected += 1
            return False
    state.step += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    sparse = set(params.sparse_names)
    for name in params.tensor_order:
        if name not in grads:
            continue
        g = grads[name]
        p = params.tensors[name]
        m, v = state.m[name], state.v[name]
        if name in sparse:
            rows = touched.get(name)
            if rows is None or len(rows) == 0:
                continue
            gr = g[rows]
            m[rows] = b1 * m[rows] + (1.0 - b1) * gr
            v[rows] = b2 * v[rows] + (1.0 - b2) * gr * gr
            p[rows] -= cfg.lr_sparse * (m[rows] / c1) / (np.sqrt(v[rows] / c2) + cfg.eps)
        else:
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if cfg.weight_decay > 0.0:
                p *= 1.0 - cfg.lr_dense * cfg.weight_decay
            p -= cfg.lr_dense * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
    return True


# --- GAUC ---

def auc_midrank(labels: np.ndarray, scores: np.ndarray) -> float:
    """ROC AUC via midranks; requires both classes present."""
    y = np.asarray(labels)
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC undefined: needs both classes")
    ranks = rankdata(np.asarray(scores, dtype=np.float64), method="average")
    return float((ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


@dataclass
class GaucResult:
    value: float
    n_users_scored: int
    n_users_excluded: int
    n_impressions_scored: int


def gauc(user_ids: np.ndarray, labels: np.ndarray, scores: np.ndarray) -> GaucResult:
    """Impression-weighted mean of per-user AUC.

    Users whose eval impressions are single-class contribute neither to the
    numerator nor to the weight.
    """
    user_ids = np.asarray(user_ids)
    labels = np.asarray(labels)
    scores = np.asarray(scores)
    if not (len(user_ids) == len(labels) == len(scores)):
        raise DataError("gauc inputs must be equal length")
    order = np.argsort(user_ids, kind="mergesort")
    uid = user_ids[order]
    y = labels[order]
    s = scores[order]
    starts = np.flatnonzero(np.r_[True, uid[1:] != uid[:-1]])
    ends = np.r_[starts[1:], len(uid)]
    num = 0.0
    weight = 0
    excluded = 0
    for a, b in zip(starts, ends):
        yy = y[a:b]
        if yy.min() == yy.max():
            excluded += 1
            continue
        num += (b - a) * auc_midrank(yy, s[a:b])
        weight += b - a
    if weight == 0:
        raise UndefinedMetricError("GAUC undefined: every user is single-class")
    return GaucResult(value=float(num / weight), n_users_scored=int(len(starts) - excluded),
                      n_users_excluded=int(excluded), n_impressions_scored=int(weight))


# --- retrieval precomputation ---

@dataclass
class PreparedData:
    """Impressions with retrieved behavior rows, ready for batched scoring."""
    target_rows: np.ndarray   # [n] int32
    behav_rows: np.ndarray    # [n, L] int32, -1 pad
    behav_sims: np.ndarray    # [n, L] float64, 0 pad
    lengths: np.ndarray       # [n] int32
    user_ids: np.ndarray      # [n] int64
    user_feats: np.ndarray    # [n, Fu] int32
    ctx_feats: np.ndarray     # [n, Fc] int32
    labels: np.ndarray        # [n] float64
    max_sims: np.ndarray      # [n] float64, nan when nothing retrieved
    n_fallback: int = 0
    n_empty: int = 0

    def __len__(self) -> int:
        return len(self.target_rows)


def prepare_impressions(corpus: Corpus, impressions: list[Impression], k: int,
                        strategy: str = "soft", semid_map: SemIdMap | None = None,
                        fallback: str = "recency") -> PreparedData:
    """Run first-stage retrieval for every impression and pack the results."""
    if strategy not in ("soft", "hard"):
        raise ConfigError(f"unknown retrieval strategy {strategy!r}")
    if strategy == "hard" and semid_map is None:
        raise DataError("hard retrieval needs a semantic-id map")
    n = len(impressions)
    emb = corpus.embedding_matrix()
    norms = corpus.embedding_norms()

    by_user: dict[int, list[int]] = {}
    for i, imp in enumerate(impressions):
        by_user.setdefault(imp.user_id, []).append(i)

    rows_out = [np.empty(0, dtype=np.int32)] * n
    sims_out = [np.empty(0, dtype=np.float64)] * n
    n_fallback = 0
    n_empty = 0
    for uid in sorted(by_user):
        idxs = by_user[uid]
        seq_rows, seq_ids, seq_ts = corpus.sequence_arrays(uid)
        index = build_index(corpus.sequences[uid], semid_map) if strategy == "hard" else None
        user_emb = emb[seq_rows]
        user_norms = norms[seq_rows]
        for i in idxs:
            imp = impressions[i]
            vis = corpus.visible_count(uid, imp.event_time)
            t_row = corpus.item_row(imp.target_item_id)
            if strategy == "soft":
                sims = cosine_many(user_emb[:vis], emb[t_row], row_norms=user_norms[:vis])
                pos = top_k_positions(sims, seq_ts[:vis], seq_ids[:vis], k)
                sel_sims = sims[pos]
            else:
                codes = semid_map.codes_for(imp.target_item_id)
                if codes is None:
                    raise DataError(f"target item {imp.target_item_id} has no semantic id")
                pos, tag = hard_posting_positions(index, int(codes[0]), vis, k, fallback)
                if tag == "fallback":
                    n_fallback += 1
                sel_sims = cosine_many(user_emb[pos], emb[t_row], row_norms=user_norms[pos])
            if len(pos) == 0:
                n_empty += 1
            rows_out[i] = seq_rows[pos].astype(np.int32)
            sims_out[i] = sel_sims

    L = max((len(r) for r in rows_out), default=0)
    behav_rows = np.full((n, L), -1, dtype=np.int32)
    behav_sims = np.zeros((n, L), dtype=np.float64)
    lengths = np.zeros(n, dtype=np.int32)
    max_sims = np.full(n, np.nan)
    for i in range(n):
        m = len(rows_out[i])
        lengths[i] = m
        if m:
            behav_rows[i, :m] = rows_out[i]
            behav_sims[i, :m] = sims_out[i]
            max_sims[i] = sims_out[i].max()
    return PreparedData(
        target_rows=np.array([corpus.item_row(imp.target_item_id) for imp in impressions],
                             dtype=np.int32),
        behav_rows=behav_rows,
        behav_sims=behav_sims,
        lengths=lengths,
        user_ids=np.array([imp.user_id for imp in impressions], dtype=np.int64),
        user_feats=np.array([imp.user_features for imp in impressions],
                            dtype=np.int32).reshape(n, -1),
        ctx_feats=np.array([imp.context_features for imp in impressions],
                           dtype=np.int32).reshape(n, -1),
        labels=np.array([imp.label for imp in impressions], dtype=np.float64),
        max_sims=max_sims,
        n_fallback=n_fallback,
        n_empty=n_empty,
    )


def prepared_buckets(prep: PreparedData, bucket_cfg: BucketConfig) -> np.ndarray:
    """Bucketize stored similarities; pad positions stay bucket 0."""
    flat = bucketize_many(prep.behav_sims.reshape(-1), bucket_cfg)
    buckets = flat.reshape(prep.behav_sims.shape)
    mask = np.arange(buckets.shape[1])[None, :] < prep.lengths[:, None]
    return np.where(mask, buckets, 0).astype(np.int32)


def make_batch(prep: PreparedData, buckets: np.ndarray, idx: np.ndarray) -> Batch:
    return Batch(
        target_rows=prep.target_rows[idx],
        behav_rows=prep.behav_rows[idx],
        behav_buckets=buckets[idx],
        lengths=prep.lengths[idx],
        user_feats=prep.user_feats[idx],
        ctx_feats=prep.ctx_feats[idx],
        labels=prep.labels[idx],
    )


# --- experiment orchestration ---

@dataclass
class TrainConfig:
    """Optimization settings plus the ablation switches for one training run.

    The three use_* switches override the matching fields on ModelConfig at
    fit time, so variants of one architecture are expressed purely through
    the training config.
    """
    lr_dense: float = 2e-4
    lr_sparse: float = 2e-3
    batch_size: int = 1000
    epochs: int = 1
    seed: int = 0
    weight_decay: float = 0.0
    log_every: int = 20
    strategy: str = "soft"
    k_ret: int = 50
    fallback: str = "recency"
    use_semid: bool = True
    use_simbucket: bool = True
    use_target_interaction: bool = True

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr_dense <= 0 or self.lr_sparse <= 0:
            raise ConfigError("learning rates must be positive")
        if self.strategy not in ("soft", "hard"):
            raise ConfigError(f"unknown retrieval strategy {self.strategy!r}")
        if self.k_ret < 1:
            raise ConfigError(f"k_ret must be >= 1, got {self.k_ret}")
        if self.fallback not in ("recency", "none"):
            raise ConfigError(f"unknown fallback policy {self.fallback!r}")


@dataclass
class QuantizerConfig:
    levels: int = 3
    codebook_size: int = 256
    seed: int = 0

    def validate(self) -> None:
        if self.levels < 1:
            raise ConfigError(f"quantizer.levels must be >= 1, got {self.levels}")
        if self.codebook_size < 1:
            raise ConfigError(f"quantizer.codebook_size must be >= 1, got {self.codebook_size}")


@dataclass
class SimilarityConfig:
    calib_sample: int = 20000
    calib_seed: int = 0
    lo_pct: float = 0.5
    hi_pct: float = 99.5

    def validate(self) -> None:
        if self.calib_sample < 2:
            raise ConfigError(f"similarity.calib_sample must be >= 2, got {self.calib_sample}")
        if not 0.0 <= self.lo_pct < self.hi_pct <= 100.0:
            raise ConfigError("similarity percentiles must satisfy 0 <= lo < hi <= 100")


@dataclass
class ExperimentContext:
    """Shared artifacts reused across model variants on one corpus split."""
    corpus: Corpus
    train_impressions: list[Impression]
    eval_impressions: list[Impression]
    codebooks: Codebooks | None
    semid_codes: np.ndarray | None  # [n_items, M], corpus item-row order
    semid_map: SemIdMap | None
    sim_range: SimRange
    train_prep: PreparedData
    eval_prep: PreparedData


def quantize_corpus(corpus: Corpus, qcfg: QuantizerConfig) -> tuple[Codebooks, np.ndarray, SemIdMap]:
    codebooks = train_codebooks(corpus.embedding_matrix(), qcfg.levels,
                                qcfg.codebook_size, qcfg.seed)
    codes = encode_batch(codebooks, corpus.embedding_matrix())
    return codebooks, codes, SemIdMap(item_ids=corpus.item_ids, codes=codes)


def context_from_artifacts(corpus: Corpus, split_policy: SplitPolicy,
                           train_cfg: TrainConfig, sim_cfg: SimilarityConfig,
                           codebooks: Codebooks | None = None,
                           semid_codes: np.ndarray | None = None,
                           semid_map: SemIdMap | None = None) -> ExperimentContext:
    """Split, calibrate, and run retrieval once, with quantization given."""
    train_corpus, eval_corpus = split(corpus, split_policy)
    if train_cfg.strategy == "hard" and semid_map is None:
        raise DataError("hard retrieval needs semantic-id artifacts")
    sim_range = calibrate_range(train_corpus, sample_size=sim_cfg.calib_sample,
                                seed=sim_cfg.calib_seed, lo_pct=sim_cfg.lo_pct,
                                hi_pct=sim_cfg.hi_pct)
    train_prep = prepare_impressions(corpus, train_corpus.impressions, train_cfg.k_ret,
                                     strategy=train_cfg.strategy, semid_map=semid_map,
                                     fallback=train_cfg.fallback)
    eval_prep = prepare_impressions(corpus, eval_corpus.impressions, train_cfg.k_ret,
                                    strategy=train_cfg.strategy, semid_map=semid_map,
                                    fallback=train_cfg.fallback)
    return ExperimentContext(
        corpus=corpus,
        train_impressions=train_corpus.impressions,
        eval_impressions=eval_corpus.impressions,
        codebooks=codebooks,
        semid_codes=semid_codes,
        semid_map=semid_map,
        sim_range=sim_range,
        train_prep=train_prep,
        eval_prep=eval_prep,
    )


def build_context(corpus: Corpus, split_policy: SplitPolicy, train_cfg: TrainConfig,
                  qcfg: QuantizerConfig, sim_cfg: SimilarityConfig,
                  need_semid: bool = True) -> ExperimentContext:
    """Split, quantize, calibrate, and run retrieval once for a corpus."""
    codebooks = None
    semid_codes = None
    semid_map = None
    if need_semid or train_cfg.strategy == "hard":
        codebooks, semid_codes, semid_map = quantize_corpus(corpus, qcfg)
    return context_from_artifacts(corpus, split_policy, train_cfg, sim_cfg,
                                  codebooks=codebooks, semid_codes=semid_codes,
                                  semid_map=semid_map)


@dataclass
class FitResult:
    params: ModelParams
    feats: ItemFeatures
    bucket_cfg: BucketConfig
    history: list[dict]
    eval_metrics: dict
    optimizer_rejected: int = 0


def fit_from_context(ctx: ExperimentContext, model_cfg: ModelConfig,
                     train_cfg: TrainConfig) -> FitResult:
    """Train one model variant on prepared data.

    The training config's ablation switches override the model config's, so
    one base architecture plus several TrainConfigs gives matched variants.
    """
    train_cfg.validate()
    model_cfg = replace(model_cfg,
                        use_semid=train_cfg.use_semid,
                        use_simbucket=train_cfg.use_simbucket,
                        use_target_interaction=train_cfg.use_target_interaction)
    model_cfg.validate()
    corpus = ctx.corpus
    if model_cfg.use_semid and ctx.semid_codes is None:
        raise DataError("model variant needs semantic ids, context was built without them")
    prefix_vocab = None
    codebook_size = 0
    if model_cfg.use_semid:
        codebook_size = ctx.codebooks.codebook_size
        prefix_vocab = build_prefix_vocab(ctx.semid_codes, model_cfg.prefix_depth,
                                          codebook_size)
    shuffle_ss = np.random.SeedSequence((train_cfg.seed, 1))
    params = init_params(model_cfg, corpus.meta.item_feature_vocab_sizes,
                         corpus.meta.user_feature_vocab_sizes,
                         corpus.meta.context_feature_vocab_sizes,
                         seed=train_cfg.seed, prefix_vocab=prefix_vocab,
                         codebook_size=codebook_size)
    feats = build_item_features(corpus, params, ctx.semid_codes)
    bucket_cfg = BucketConfig(n_buckets=model_cfg.n_buckets, sim_range=ctx.sim_range)
    train_buckets = prepared_buckets(ctx.train_prep, bucket_cfg)
    eval_buckets = prepared_buckets(ctx.eval_prep, bucket_cfg)

    adam_cfg = AdamConfig(lr_dense=train_cfg.lr_dense, lr_sparse=train_cfg.lr_sparse,
                          weight_decay=train_cfg.weight_decay)
    state = init_adam(params)
    rng = np.random.default_rng(shuffle_ss)
    n = len(ctx.train_prep)
    bs = train_cfg.batch_size
    history: list[dict] = []
    step = 0
    metrics: dict = {}
    for epoch in range(train_cfg.epochs):
        perm = rng.permutation(n)
        for lo in range(0, n, bs):
            idx = perm[lo:lo + bs]
            batch = make_batch(ctx.train_prep, train_buckets, idx)
            p, cache = forward_batch(params, feats, batch, want_cache=True)
            grads, touched = backward_batch(params, feats, cache, batch.labels)
            adam_step(params, grads, touched, state, adam_cfg)
            step += 1
            if step % train_cfg.log_every == 0 or lo + bs >= n:
                history.append({"step": step, "epoch": epoch,
                                "loss": bce_loss(p, batch.labels)})
        metrics = evaluate(params, feats, ctx.eval_prep, eval_buckets,
                           batch_size=train_cfg.batch_size)
        history.append({"step": step, "epoch": epoch, "eval_gauc": metrics["gauc"],
                        "eval_loss": metrics["loss"]})
    return FitResult(params=params, feats=feats, bucket_cfg=bucket_cfg, history=history,
                     eval_metrics=metrics, optimizer_rejected=state.rejected)


def train_model(corpus: Corpus, model_cfg: ModelConfig, train_cfg: TrainConfig,
                split_policy: SplitPolicy | None = None,
                qcfg: QuantizerConfig | None = None,
                sim_cfg: SimilarityConfig | None = None,
                ) -> tuple[FitResult, ExperimentContext]:
    """End-to-end convenience: split, quantize, retrieve, then fit one model."""
    split_policy = split_policy or SplitPolicy()
    qcfg = qcfg or QuantizerConfig()
    sim_cfg = sim_cfg or SimilarityConfig()
    qcfg.validate()
    sim_cfg.validate()
    ctx = build_context(corpus, split_policy, train_cfg, qcfg, sim_cfg,
                        need_semid=train_cfg.use_semid or train_cfg.strategy == "hard")
    return fit_from_context(ctx, model_cfg, train_cfg), ctx


def predict_scores(params: ModelParams, feats: ItemFeatures, prep: PreparedData,
                   buckets: np.ndarray, batch_size: int = 1000) -> np.ndarray:
    out = np.empty(len(prep), dtype=np.float64)
    for lo in range(0, len(prep), batch_size):
        idx = np.arange(lo, min(lo + batch_size, len(prep)))
        p, _ = forward_batch(params, feats, make_batch(prep, buckets, idx))
        out[idx] = p
    return out


def collect_interest(params: ModelParams, feats: ItemFeatures, prep: PreparedData,
                     buckets: np.ndarray, batch_size: int = 1000) -> np.ndarray:
    """Interest representations (after target interaction when enabled)."""
    out = np.empty((len(prep), params.unified_width), dtype=np.float64)
    for lo in range(0, len(prep), batch_size):
        idx = np.arange(lo, min(lo + batch_size, len(prep)))
        _, cache = forward_batch(params, feats, make_batch(prep, buckets, idx),
                                 want_cache=True)
        u = cache["u"]
        out[idx] = u * cache["h_t"] if params.config.use_target_interaction else u
    return out


def evaluate(params: ModelParams, feats: ItemFeatures, prep: PreparedData,
             buckets: np.ndarray, batch_size: int = 1000) -> dict:
    if len(prep) == 0:
        raise DataError("cannot evaluate on an empty impression set")
    scores = predict_scores(params, feats, prep, buckets, batch_size=batch_size)
    g = gauc(prep.user_ids, prep.labels, scores)
    return {
        "gauc": g.value,
        "loss": bce_loss(scores, prep.labels),
        "n_impressions": int(len(prep)),
        "n_impressions_scored": g.n_impressions_scored,
        "n_users_scored": g.n_users_scored,
        "n_users_excluded": g.n_users_excluded,
        "mean_prediction": float(scores.mean()),
        "ctr": float(prep.labels.mean()),
    }
