"""Representation and label-structure analyses over frozen models and corpora.

Three questions, one toolkit: how much label information a discrete grouping
carries (plug-in mutual information, nats), whether click rates inside one
similarity bucket still vary across semantic-id groups (dispersion report
with a binomial noise baseline), and how bucket granularity moves eval GAUC
(matched-seed sweep). Everything here is read-only over its inputs and
deterministic given seeds.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, DataError
from .kmeans import kmeans_fit
from .model import ItemFeatures, ModelConfig, ModelParams
from .quantizer import pack_prefix_matrix
from .similarity import BucketConfig, bucketize_many
from .training import (ExperimentContext, FitResult, PreparedData, TrainConfig,
                       collect_interest, fit_from_context)


# --- discrete joints and information measures ---

@dataclass(frozen=True)
class DiscreteJoint:
    """Contingency counts over (group, label), labels along columns."""

    counts: np.ndarray

    def __post_init__(self) -> None:
        c = np.asarray(self.counts, dtype=np.float64)
        if c.ndim != 2:
            raise DataError(f"joint counts must be 2-d, got shape {c.shape}")
        if (c < 0).any():
            raise DataError("joint counts must be non-negative")
        if not np.isfinite(c).all():
            raise DataError("joint counts must be finite")
        object.__setattr__(self, "counts", c)

    @classmethod
    def from_arrays(cls, groups: np.ndarray, labels: np.ndarray) -> "DiscreteJoint":
        """Count (group, label) pairs; group/label ids are densified."""
        g = np.asarray(groups).reshape(-1)
        y = np.asarray(labels).reshape(-1)
        if len(g) != len(y):
            raise DataError("groups and labels must be equal length")
        if len(g) == 0:
            raise DataError("cannot build a joint from zero observations")
        g_ids, g_idx = np.unique(g, return_inverse=True)
        y_ids, y_idx = np.unique(y, return_inverse=True)
        counts = np.zeros((len(g_ids), len(y_ids)), dtype=np.float64)
        np.add.at(counts, (g_idx, y_idx), 1.0)
        return cls(counts=counts)

    @property
    def total(self) -> float:
        return float(self.counts.sum())

    def p_joint(self) -> np.ndarray:
        return self.counts / self.total

    def p_group(self) -> np.ndarray:
        return self.counts.sum(axis=1) / self.total

    def p_label(self) -> np.ndarray:
        return self.counts.sum(axis=0) / self.total


def entropy(p: np.ndarray) -> float:
    """Shannon entropy in nats with the 0*ln(0) = 0 convention."""
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    nz = p[p > 0.0]
    return float(-(nz * np.log(nz)).sum())


def mutual_information(joint: DiscreteJoint) -> float:
    """Plug-in I(G;Y) in nats from the contingency counts."""
    n = joint.total
    if n < 1:
        raise DataError("mutual information needs total count >= 1")
    c = joint.counts
    row = c.sum(axis=1, keepdims=True)
    col = c.sum(axis=0, keepdims=True)
    mask = c > 0.0
    ratio = np.ones_like(c)
    np.divide(c * n, row @ col, out=ratio, where=mask)
    return max(float((c[mask] / n * np.log(ratio[mask])).sum()), 0.0)


def conditional_entropy(joint: DiscreteJoint) -> float:
    """H(Y|G) in nats."""
    n = joint.total
    if n < 1:
        raise DataError("conditional entropy needs total count >= 1")
    out = 0.0
    for row in joint.counts:
        n_g = row.sum()
        if n_g > 0:
            out += (n_g / n) * entropy(row / n_g)
    return out


def information_gain(joint: DiscreteJoint) -> float:
    """H(Y) - H(Y|G); equals mutual_information by a second code path."""
    return max(entropy(joint.p_label()) - conditional_entropy(joint), 0.0)


def merge_groups(joint: DiscreteJoint, i: int, j: int) -> DiscreteJoint:
    """Pool rows i and j into one group; MI can only drop or stay equal."""
    k = joint.counts.shape[0]
    if not (0 <= i < k and 0 <= j < k) or i == j:
        raise DataError(f"cannot merge rows {i} and {j} of a {k}-row joint")
    keep = [r for r in range(k) if r != j]
    merged = joint.counts[keep].copy()
    merged[keep.index(i)] += joint.counts[j]
    return DiscreteJoint(counts=merged)


# --- groupings over prepared impressions ---

GROUPINGS = ("semid_level1", "sim_bucket", "custom")


def target_semid_groups(prep: PreparedData, semid_codes: np.ndarray,
                        level: int = 1) -> np.ndarray:
    """Group each impression by its target's semantic-id prefix of `level` codes."""
    codes = np.asarray(semid_codes)
    if not 1 <= level <= codes.shape[1]:
        raise ConfigError(f"semid grouping level must be in [1, {codes.shape[1]}]")
    prefix = codes[prep.target_rows, :level].astype(np.int64)
    base = int(codes.max()) + 1 if codes.size else 1
    return pack_prefix_matrix(prefix, level, max(base, 2))[:, level - 1]


def sim_bucket_groups(prep: PreparedData, bucket_cfg: BucketConfig) -> np.ndarray:
    """Group each impression by the bucket of its best retrieved similarity.

    Impressions with nothing retrieved get group -1 and should be dropped by
    the caller.
    """
    groups = np.full(len(prep), -1, dtype=np.int64)
    valid = np.isfinite(prep.max_sims)
    if valid.any():
        groups[valid] = bucketize_many(prep.max_sims[valid], bucket_cfg)
    return groups


def impression_groups(prep: PreparedData, grouping: str,
                      semid_codes: np.ndarray | None = None,
                      bucket_cfg: BucketConfig | None = None,
                      custom: np.ndarray | None = None,
                      semid_level: int = 1) -> np.ndarray:
    """Dispatch to one of the supported groupings; -1 marks ungroupable rows."""
    if grouping == "semid_level1":
        if semid_codes is None:
            raise ConfigError("semid grouping needs semantic-id codes")
        return target_semid_groups(prep, semid_codes, level=semid_level)
    if grouping == "sim_bucket":
        if bucket_cfg is None:
            raise ConfigError("sim_bucket grouping needs a bucket config")
        return sim_bucket_groups(prep, bucket_cfg)
    if grouping == "custom":
        if custom is None:
            raise ConfigError("custom grouping needs an explicit group array")
        arr = np.asarray(custom).reshape(-1)
        if len(arr) != len(prep):
            raise DataError("custom grouping length mismatch")
        return arr.astype(np.int64)
    raise ConfigError(f"unknown grouping {grouping!r}; expected one of {GROUPINGS}")


def gain_report(prep: PreparedData, grouping: str, **kwargs) -> dict:
    """Information gain of a grouping against click labels on one eval set."""
    if len(prep) == 0:
        raise DataError("information gain needs a non-empty eval set")
    groups = impression_groups(prep, grouping, **kwargs)
    valid = groups >= 0
    if not valid.any():
        raise DataError(f"grouping {grouping!r} left no groupable impressions")
    joint = DiscreteJoint.from_arrays(groups[valid], prep.labels[valid])
    gain = information_gain(joint)
    return {
        "grouping": grouping,
        "gain_nats": gain,
        "mi_nats": mutual_information(joint),
        "n_impressions": int(valid.sum()),
        "n_ungrouped": int((~valid).sum()),
        "n_groups": int(joint.counts.shape[0]),
    }


# --- clustered-representation mutual information ---

def kmeans_assignments(vectors: np.ndarray, k: int, seed: int) -> np.ndarray:
    """Cluster rows and return assignments; seeded and deterministic."""
    return kmeans_fit(np.asarray(vectors, dtype=np.float64), k, seed).assignments


def permutation_null(groups: np.ndarray, labels: np.ndarray, n_permutations: int,
                     seed: int, percentile: float = 99.0) -> float:
    """Percentile of MI under label permutation with fixed groups."""
    if n_permutations < 1:
        raise ConfigError("permutation_null needs at least one permutation")
    rng = np.random.default_rng(seed)
    labels = np.asarray(labels)
    vals = np.empty(n_permutations, dtype=np.float64)
    for i in range(n_permutations):
        vals[i] = mutual_information(
            DiscreteJoint.from_arrays(groups, rng.permutation(labels)))
    return float(np.percentile(vals, percentile))


def mi_vs_clusters(params: ModelParams, feats: ItemFeatures, prep: PreparedData,
                   buckets: np.ndarray, ks: list[int], seed: int = 0,
                   n_permutations: int = 200, subsample: int | None = None,
                   batch_size: int = 1000) -> list[dict]:
    """Cluster the model's interest representations and score MI with labels.

    One record per cluster count k: the plug-in MI plus the label-permutation
    99th percentile computed on the same cluster assignment, so "real signal"
    means mi_nats above perm_p99_nats.
    """
    if not ks:
        raise ConfigError("mi_vs_clusters needs at least one cluster count")
    reps = collect_interest(params, feats, prep, buckets, batch_size=batch_size)
    labels = prep.labels
    if subsample is not None and subsample < len(reps):
        pick = np.random.default_rng(seed).choice(len(reps), size=subsample, replace=False)
        reps = reps[pick]
        labels = labels[pick]
    out = []
    for k in ks:
        assign = kmeans_assignments(reps, int(k), seed)
        joint = DiscreteJoint.from_arrays(assign, labels)
        out.append({
            "k": int(k),
            "mi_nats": mutual_information(joint),
            "perm_p99_nats": permutation_null(assign, labels, n_permutations, seed),
            "n_points": int(len(labels)),
        })
    return out


# --- within-bucket CTR dispersion ---

@dataclass(frozen=True)
class DispersionCell:
    bucket: int
    group: int
    count: int
    ctr: float


@dataclass(frozen=True)
class BucketDispersion:
    bucket: int
    n_groups: int
    count: int
    pooled_ctr: float
    ctr_min: float
    ctr_max: float
    ctr_std: float
    noise_std: float
    chi2: float
    dof: int


@dataclass(frozen=True)
class DispersionReport:
    """Per-bucket spread of group CTRs, with a binomial noise baseline.

    noise_std is the std the group CTRs would show if every group inside the
    bucket shared one click rate; chi2/dof give the matching homogeneity
    statistic so tests can compare against an exact null.
    """

    cells: tuple[DispersionCell, ...]
    buckets: tuple[BucketDispersion, ...]
    n_impressions: int
    n_pairs: int
    n_ungrouped: int
    n_cells_below_support: int
    min_support: int
    pairing: str

    @property
    def empty(self) -> bool:
        return len(self.buckets) == 0

    def total_chi2(self) -> tuple[float, int]:
        return (float(sum(b.chi2 for b in self.buckets)),
                int(sum(b.dof for b in self.buckets)))

    def format_table(self) -> str:
        """Fig-style text table: buckets as rows, groups as columns."""
        groups = sorted({c.group for c in self.cells})
        by_key = {(c.bucket, c.group): c for c in self.cells}
        header = ["bucket"] + [f"g{g}" for g in groups] + ["std", "noise"]
        lines = ["\t".join(header)]
        for b in self.buckets:
            row = [str(b.bucket)]
            for g in groups:
                cell = by_key.get((b.bucket, g))
                row.append(f"{cell.ctr:.4f}" if cell is not None else ".")
            row.append(f"{b.ctr_std:.4f}")
            row.append(f"{b.noise_std:.4f}")
            lines.append("\t".join(row))
        return "\n".join(lines)


PAIRINGS = ("max", "per_pair")


def within_bucket_dispersion(prep: PreparedData, bucket_cfg: BucketConfig,
                             groups: np.ndarray, min_support: int = 50,
                             pairing: str = "max") -> DispersionReport:
    """Cross click rates by (similarity bucket, group) and measure spread.

    pairing="max" pairs each impression with its best retrieved similarity;
    "per_pair" lets every retrieved behavior vote with its own similarity.
    Cells under min_support are excluded from the per-bucket statistics but
    counted. If nothing qualifies the report is empty rather than an error.
    """
    if pairing not in PAIRINGS:
        raise ConfigError(f"unknown pairing {pairing!r}; expected one of {PAIRINGS}")
    if min_support < 1:
        raise ConfigError("min_support must be at least 1")
    groups = np.asarray(groups).reshape(-1)
    if len(groups) != len(prep):
        raise DataError("group array length mismatch")

    if pairing == "max":
        valid = np.isfinite(prep.max_sims) & (groups >= 0)
        buckets = bucketize_many(prep.max_sims[valid], bucket_cfg)
        cell_groups = groups[valid]
        labels = prep.labels[valid]
        n_pairs = int(valid.sum())
    else:
        lengths = prep.lengths
        rows = np.repeat(np.arange(len(prep)), lengths)
        keep = groups[rows] >= 0
        rows = rows[keep]
        mask = np.arange(prep.behav_sims.shape[1])[None, :] < lengths[:, None]
        sims = prep.behav_sims[mask][keep]
        buckets = bucketize_many(sims, bucket_cfg)
        cell_groups = groups[rows]
        labels = prep.labels[rows]
        n_pairs = int(len(rows))
    n_ungrouped = int(len(prep) - (groups >= 0).sum())

    cells: list[DispersionCell] = []
    per_bucket: list[BucketDispersion] = []
    below = 0
    if n_pairs:
        b_ids, b_idx = np.unique(buckets, return_inverse=True)
        g_ids, g_idx = np.unique(cell_groups, return_inverse=True)
        counts = np.zeros((len(b_ids), len(g_ids)))
        clicks = np.zeros((len(b_ids), len(g_ids)))
        np.add.at(counts, (b_idx, g_idx), 1.0)
        np.add.at(clicks, (b_idx, g_idx), labels)
        for bi, b in enumerate(b_ids):
            ok = counts[bi] >= min_support
            below += int(((counts[bi] > 0) & ~ok).sum())
            for gi in np.flatnonzero(ok):
                cells.append(DispersionCell(
                    bucket=int(b), group=int(g_ids[gi]),
                    count=int(counts[bi, gi]),
                    ctr=float(clicks[bi, gi] / counts[bi, gi])))
            if ok.sum() == 0:
                continue
            n_g = counts[bi, ok]
            p_g = clicks[bi, ok] / n_g
            n_b = n_g.sum()
            p_b = clicks[bi, ok].sum() / n_b
            # Group-CTR std expected from binomial noise alone, and the
            # matching homogeneity chi-square.
            noise_var = p_b * (1.0 - p_b) * (1.0 / n_g).mean()
            denom = p_b * (1.0 - p_b)
            chi2 = float((n_g * (p_g - p_b) ** 2).sum() / denom) if denom > 0 else 0.0
            per_bucket.append(BucketDispersion(
                bucket=int(b), n_groups=int(ok.sum()), count=int(n_b),
                pooled_ctr=float(p_b),
                ctr_min=float(p_g.min()), ctr_max=float(p_g.max()),
                ctr_std=float(p_g.std()),
                noise_std=float(np.sqrt(max(noise_var, 0.0))),
                chi2=chi2, dof=int(ok.sum()) - 1))
    return DispersionReport(
        cells=tuple(cells), buckets=tuple(per_bucket),
        n_impressions=int(len(prep)), n_pairs=n_pairs, n_ungrouped=n_ungrouped,
        n_cells_below_support=below, min_support=min_support, pairing=pairing)


# --- bucket-granularity sweep ---

def bucket_sweep(ctx: ExperimentContext, model_cfg: ModelConfig,
                 train_cfg: TrainConfig, bucket_counts: list[int],
                 ) -> tuple[list[dict], list[FitResult]]:
    """Retrain the same seed at each bucket count and report eval GAUC.

    Retrieval and calibration come frozen from the context, so the only
    moving part across points is bucket granularity.
    """
    if not bucket_counts:
        raise ConfigError("bucket_sweep needs at least one bucket count")
    curve = []
    fits = []
    for b in bucket_counts:
        if int(b) < 1:
            raise ConfigError(f"bucket counts must be >= 1, got {b}")
        fit = fit_from_context(ctx, replace(model_cfg, n_buckets=int(b)), train_cfg)
        curve.append({
            "n_buckets": int(b),
            "gauc": fit.eval_metrics["gauc"],
            "eval_loss": fit.eval_metrics["loss"],
        })
        fits.append(fit)
    return curve, fits
