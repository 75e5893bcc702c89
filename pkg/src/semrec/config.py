"""Experiment configuration: one JSON file drives the whole pipeline.

The schema is a tree of dataclasses. Loading rejects unknown keys with a
field path, applies dotted-path overrides, threads the global seed into
every sub-seed left unset, and validates cross-module width algebra before
any command does work. `to_dict` echoes every defaulted value back out, so
manifests never contain silent defaults.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields, is_dataclass
from pathlib import Path

from .analysis import PAIRINGS
from .data import SplitPolicy
from .errors import ConfigError
from .model import ModelConfig
from .synth import SynthConfig, check_synth
from .training import QuantizerConfig, SimilarityConfig, TrainConfig


@dataclass
class CorpusSection:
    """Where impressions come from: a saved corpus file or the generator."""
    path: str | None = None
    synth: SynthConfig = field(default_factory=SynthConfig)


@dataclass
class SimilaritySection:
    n_buckets: int = 40
    calib_sample: int = 20000
    calib_seed: int = 0
    lo_pct: float = 0.5
    hi_pct: float = 99.5


@dataclass
class RetrievalSection:
    strategy: str = "soft"
    k_ret: int = 50
    fallback: str = "recency"


@dataclass
class ArchitectureSection:
    item_feature_width: int = 16
    user_feature_width: int = 8
    context_feature_width: int = 8
    prefix_depth: int = 3
    prefix_width: int = 8
    bucket_width: int = 8
    n_heads: int = 2
    head_dim: int = 16
    mlp_hidden: tuple[int, ...] = (256, 64)


@dataclass
class TrainingSection:
    lr_dense: float = 2e-4
    lr_sparse: float = 2e-3
    batch_size: int = 1000
    epochs: int = 1
    seed: int = 0
    weight_decay: float = 0.0
    log_every: int = 20
    use_semid: bool = True
    use_simbucket: bool = True
    use_target_interaction: bool = True


@dataclass
class SplitSection:
    kind: str = "user"
    eval_fraction: float = 0.2
    cut_time: int | None = None
    seed: int = 0


@dataclass
class AnalysisSection:
    cluster_counts: tuple[int, ...] = (8, 32, 128)
    n_permutations: int = 200
    mi_subsample: int | None = 2000
    min_support: int = 50
    semid_level: int = 1
    pairing: str = "max"
    dispersion_buckets: int | None = None
    sweep_buckets: tuple[int, ...] = (1, 10, 20, 40)


@dataclass
class ExperimentConfig:
    seed: int = 0
    corpus: CorpusSection = field(default_factory=CorpusSection)
    quantizer: QuantizerConfig = field(default_factory=QuantizerConfig)
    similarity: SimilaritySection = field(default_factory=SimilaritySection)
    retrieval: RetrievalSection = field(default_factory=RetrievalSection)
    model: ArchitectureSection = field(default_factory=ArchitectureSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    split: SplitSection = field(default_factory=SplitSection)
    analysis: AnalysisSection = field(default_factory=AnalysisSection)

    # --- derived, per-module configs ---

    def model_config(self) -> ModelConfig:
        m = self.model
        return ModelConfig(
            item_feature_width=m.item_feature_width,
            user_feature_width=m.user_feature_width,
            context_feature_width=m.context_feature_width,
            prefix_depth=m.prefix_depth,
            prefix_width=m.prefix_width,
            bucket_width=m.bucket_width,
            n_buckets=self.similarity.n_buckets,
            n_heads=m.n_heads,
            head_dim=m.head_dim,
            mlp_hidden=tuple(m.mlp_hidden),
            use_semid=self.training.use_semid,
            use_simbucket=self.training.use_simbucket,
            use_target_interaction=self.training.use_target_interaction,
        )

    def train_config(self) -> TrainConfig:
        t = self.training
        r = self.retrieval
        return TrainConfig(
            lr_dense=t.lr_dense, lr_sparse=t.lr_sparse, batch_size=t.batch_size,
            epochs=t.epochs, seed=t.seed, weight_decay=t.weight_decay,
            log_every=t.log_every, strategy=r.strategy, k_ret=r.k_ret,
            fallback=r.fallback, use_semid=t.use_semid, use_simbucket=t.use_simbucket,
            use_target_interaction=t.use_target_interaction,
        )

    def similarity_config(self) -> SimilarityConfig:
        s = self.similarity
        return SimilarityConfig(calib_sample=s.calib_sample, calib_seed=s.calib_seed,
                                lo_pct=s.lo_pct, hi_pct=s.hi_pct)

    def split_policy(self) -> SplitPolicy:
        s = self.split
        return SplitPolicy(kind=s.kind, cut_time=s.cut_time,
                           eval_fraction=s.eval_fraction, seed=s.seed)

    def validate(self) -> None:
        self.model_config().validate()
        self.train_config().validate()
        self.quantizer.validate()
        self.similarity_config().validate()
        check_synth(self.corpus.synth)
        s = self.similarity
        if s.n_buckets < 1:
            raise ConfigError(f"similarity.n_buckets must be >= 1, got {s.n_buckets}")
        if self.model.prefix_depth > self.quantizer.levels:
            raise ConfigError(
                f"model.prefix_depth={self.model.prefix_depth} exceeds "
                f"quantizer.levels={self.quantizer.levels}")
        if self.split.kind not in ("user", "time"):
            raise ConfigError(f"unknown split.kind {self.split.kind!r}")
        if not 0.0 < self.split.eval_fraction < 1.0:
            raise ConfigError("split.eval_fraction must be in (0, 1)")
        a = self.analysis
        if not a.cluster_counts or any(int(k) < 1 for k in a.cluster_counts):
            raise ConfigError("analysis.cluster_counts must be positive integers")
        if a.n_permutations < 1:
            raise ConfigError("analysis.n_permutations must be >= 1")
        if a.mi_subsample is not None and a.mi_subsample < 2:
            raise ConfigError("analysis.mi_subsample must be >= 2 or null")
        if a.min_support < 1:
            raise ConfigError("analysis.min_support must be >= 1")
        if not 1 <= a.semid_level <= self.quantizer.levels:
            raise ConfigError(
                f"analysis.semid_level must be in [1, {self.quantizer.levels}]")
        if a.pairing not in PAIRINGS:
            raise ConfigError(f"analysis.pairing must be one of {PAIRINGS}")
        if a.dispersion_buckets is not None and a.dispersion_buckets < 1:
            raise ConfigError("analysis.dispersion_buckets must be >= 1 or null")
        if not a.sweep_buckets or any(int(b) < 1 for b in a.sweep_buckets):
            raise ConfigError("analysis.sweep_buckets must be positive integers")

    def to_dict(self) -> dict:
        return _jsonable(dataclasses.asdict(self))

    def config_hash(self) -> str:
        return hashlib.sha256(canonical_json(self.to_dict()).encode()).hexdigest()


def canonical_json(obj) -> str:
    """Stable serialization: sorted keys, compact separators."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


# --- loading ---

def _nested_type(f: dataclasses.Field):
    factory = f.default_factory
    if factory is not dataclasses.MISSING and is_dataclass(factory):
        return factory
    return None


def _coerce(value, default, path: str):
    """Light type coercion from JSON values toward the default's type."""
    if value is None or default is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            if isinstance(value, float) and value.is_integer():
                return int(value)
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        return tuple(value)
    return value


def _build(cls, raw: dict, path: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{path or 'config'}: expected an object, got {raw!r}")
    by_name = {f.name: f for f in fields(cls)}
    unknown = sorted(set(raw) - set(by_name))
    if unknown:
        where = path or "top level"
        raise ConfigError(f"unknown config key(s) {unknown} at {where}")
    kwargs = {}
    for name, f in by_name.items():
        if name not in raw:
            continue
        sub_path = f"{path}.{name}" if path else name
        nested = _nested_type(f)
        if nested is not None:
            kwargs[name] = _build(nested, raw[name], sub_path)
        else:
            default = (f.default if f.default is not dataclasses.MISSING
                       else f.default_factory())
            kwargs[name] = _coerce(raw[name], default, sub_path)
    return cls(**kwargs)


def _seed_defaults(cfg: ExperimentConfig, raw: dict) -> None:
    """Sub-seeds not given explicitly inherit the global seed."""
    g = int(cfg.seed)
    if "seed" not in raw.get("corpus", {}).get("synth", {}):
        cfg.corpus.synth.seed = g
    if "seed" not in raw.get("quantizer", {}):
        cfg.quantizer.seed = g
    if "calib_seed" not in raw.get("similarity", {}):
        cfg.similarity.calib_seed = g
    if "seed" not in raw.get("split", {}):
        cfg.split.seed = g
    if "seed" not in raw.get("training", {}):
        cfg.training.seed = g


def config_from_dict(raw: dict, overrides: list[str] | None = None) -> ExperimentConfig:
    raw = json.loads(json.dumps(raw))  # defensive copy, JSON types only
    for assignment in overrides or []:
        _apply_override(raw, assignment)
    cfg = _build(ExperimentConfig, raw, "")
    _seed_defaults(cfg, raw)
    cfg.validate()
    return cfg


def load_config(path: str | Path, overrides: list[str] | None = None) -> ExperimentConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: line {exc.lineno}: invalid JSON: {exc.msg}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{p}: config root must be a JSON object")
    return config_from_dict(raw, overrides)


def _apply_override(raw: dict, assignment: str) -> None:
    """Apply one `a.b.c=value` override; values parse as JSON, else strings."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key.path=value")
    key, text = assignment.split("=", 1)
    parts = [p for p in key.strip().split(".") if p]
    if not parts:
        raise ConfigError(f"override {assignment!r} has an empty key path")
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        value = text
    node = raw
    for part in parts[:-1]:
        nxt = node.get(part)
        if nxt is None:
            nxt = node[part] = {}
        elif not isinstance(nxt, dict):
            raise ConfigError(f"override {assignment!r}: {part} is not a section")
        node = nxt
    node[parts[-1]] = value
