"""Domain types, corpus file format, and train/eval splitting.

A corpus is a directory of line-delimited JSON files plus a meta file:

    items.jsonl        {"item_id", "id_features": [...], "embedding": base64 LE float32}
    sequences.jsonl    {"user_id", "events": [[item_id, timestamp], ...]}
    impressions.jsonl  {"user_id", "target_item_id", "context_features": [...],
                        "user_features": [...], "label", "event_time"}
    meta.json          dimensions, vocab sizes, generation seed, record counts

All counts and dimensions are declared in meta.json and validated on load.
"""

from __future__ import annotations

import base64
import bisect
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, ParseError, SchemaError


@dataclass
class ItemRecord:
    item_id: int
    id_features: list[int]
    mm_embedding: np.ndarray  # float32 [d]


@dataclass
class BehaviorEvent:
    item_id: int
    timestamp: int


@dataclass
class BehaviorSequence:
    user_id: int
    events: list[BehaviorEvent]  # timestamp ascending, ties by insertion order


@dataclass
class Impression:
    user_id: int
    target_item_id: int
    context_features: list[int]
    user_features: list[int]
    label: int
    event_time: int


@dataclass
class CorpusMeta:
    embed_dim: int
    item_feature_vocab_sizes: list[int]
    user_feature_vocab_sizes: list[int]
    context_feature_vocab_sizes: list[int]
    seed: int


@dataclass
class Corpus:
    items: dict[int, ItemRecord]
    sequences: dict[int, BehaviorSequence]
    impressions: list[Impression]
    meta: CorpusMeta
    _caches: dict = field(default_factory=dict, repr=False, compare=False)

    # --- dense views used by the numeric pipeline ---

    @property
    def item_ids(self) -> np.ndarray:
        """Sorted item ids; defines the row order of every per-item matrix."""
        if "item_ids" not in self._caches:
            self._caches["item_ids"] = np.array(sorted(self.items), dtype=np.int64)
        return self._caches["item_ids"]

    def item_row(self, item_id: int) -> int:
        return int(np.searchsorted(self.item_ids, item_id))

    def item_rows(self, item_ids: np.ndarray) -> np.ndarray:
        return np.searchsorted(self.item_ids, item_ids).astype(np.int32)

    def embedding_matrix(self) -> np.ndarray:
        """[n_items, d] float64, row order = sorted item ids."""
        if "emb" not in self._caches:
            mat = np.stack([self.items[i].mm_embedding for i in self.item_ids.tolist()])
            self._caches["emb"] = mat.astype(np.float64)
        return self._caches["emb"]

    def embedding_norms(self) -> np.ndarray:
        """Per-item L2 norms aligned with embedding_matrix rows."""
        if "emb_norms" not in self._caches:
            self._caches["emb_norms"] = np.linalg.norm(self.embedding_matrix(), axis=1)
        return self._caches["emb_norms"]

    def item_feature_matrix(self) -> np.ndarray:
        """[n_items, n_slots] int32, row order = sorted item ids."""
        if "feat" not in self._caches:
            mat = np.array(
                [self.items[i].id_features for i in self.item_ids.tolist()], dtype=np.int32
            ).reshape(len(self.items), -1)
            self._caches["feat"] = mat
        return self._caches["feat"]

    def sequence_arrays(self, user_id: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(item_rows int32, item_ids int64, timestamps int64) for one user's history."""
        key = ("seq", user_id)
        if key not in self._caches:
            events = self.sequences[user_id].events
            ids = np.array([e.item_id for e in events], dtype=np.int64)
            ts = np.array([e.timestamp for e in events], dtype=np.int64)
            self._caches[key] = (self.item_rows(ids), ids, ts)
        return self._caches[key]

    def visible_count(self, user_id: int, event_time: int) -> int:
        """Number of history events strictly before event_time."""
        if user_id not in self.sequences:
            return 0
        _, _, ts = self.sequence_arrays(user_id)
        return int(bisect.bisect_left(ts, event_time))

    def validate(self) -> None:
        d = self.meta.embed_dim
        n_slots = len(self.meta.item_feature_vocab_sizes)
        for item in self.items.values():
            if item.mm_embedding.shape != (d,):
                raise SchemaError(
                    f"item {item.item_id}: embedding dimension {item.mm_embedding.shape} != ({d},)"
                )
            if not np.isfinite(item.mm_embedding).all():
                raise SchemaError(f"item {item.item_id}: non-finite embedding")
            if len(item.id_features) != n_slots:
                raise SchemaError(
                    f"item {item.item_id}: {len(item.id_features)} id features, expected {n_slots}"
                )
        for seq in self.sequences.values():
            last = None
            for ev in seq.events:
                if ev.item_id not in self.items:
                    raise DataError(f"user {seq.user_id}: unknown item {ev.item_id} in history")
                if last is not None and ev.timestamp < last:
                    raise DataError(f"user {seq.user_id}: timestamps not non-decreasing")
                last = ev.timestamp
        for k, imp in enumerate(self.impressions):
            if imp.target_item_id not in self.items:
                raise DataError(f"impression {k}: unknown target item {imp.target_item_id}")
            if imp.label not in (0, 1):
                raise DataError(f"impression {k}: label {imp.label} not in {{0, 1}}")
            if len(imp.user_features) != len(self.meta.user_feature_vocab_sizes):
                raise SchemaError(f"impression {k}: wrong user feature count")
            if len(imp.context_features) != len(self.meta.context_feature_vocab_sizes):
                raise SchemaError(f"impression {k}: wrong context feature count")


# --- serialization ---

def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def encode_embedding(vec: np.ndarray) -> str:
    return base64.b64encode(np.asarray(vec, dtype="<f4").tobytes()).decode("ascii")


def decode_embedding(text: str) -> np.ndarray:
    return np.frombuffer(base64.b64decode(text), dtype="<f4").copy()


def save_corpus(corpus: Corpus, path: str | Path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {
        "embed_dim": corpus.meta.embed_dim,
        "item_feature_vocab_sizes": corpus.meta.item_feature_vocab_sizes,
        "user_feature_vocab_sizes": corpus.meta.user_feature_vocab_sizes,
        "context_feature_vocab_sizes": corpus.meta.context_feature_vocab_sizes,
        "seed": corpus.meta.seed,
        "n_items": len(corpus.items),
        "n_users": len(corpus.sequences),
        "n_impressions": len(corpus.impressions),
    }
    (path / "meta.json").write_text(_dump(meta) + "\n")
    with open(path / "items.jsonl", "w") as fh:
        for item_id in sorted(corpus.items):
            item = corpus.items[item_id]
            fh.write(_dump({
                "item_id": item.item_id,
                "id_features": item.id_features,
                "embedding": encode_embedding(item.mm_embedding),
            }) + "\n")
    with open(path / "sequences.jsonl", "w") as fh:
        for user_id in sorted(corpus.sequences):
            seq = corpus.sequences[user_id]
            fh.write(_dump({
                "user_id": seq.user_id,
                "events": [[e.item_id, e.timestamp] for e in seq.events],
            }) + "\n")
    with open(path / "impressions.jsonl", "w") as fh:
        for imp in corpus.impressions:
            fh.write(_dump({
                "user_id": imp.user_id,
                "target_item_id": imp.target_item_id,
                "context_features": imp.context_features,
                "user_features": imp.user_features,
                "label": imp.label,
                "event_time": imp.event_time,
            }) + "\n")


def _read_jsonl(path: Path):
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                yield line_no, json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(str(path), line_no, f"invalid JSON: {exc.msg}") from exc


def load_corpus(path: str | Path) -> Corpus:
    path = Path(path)
    meta_path = path / "meta.json"
    if not meta_path.exists():
        raise DataError(f"{path} is not a corpus directory (no meta.json)")
    raw_meta = json.loads(meta_path.read_text())
    meta = CorpusMeta(
        embed_dim=int(raw_meta["embed_dim"]),
        item_feature_vocab_sizes=[int(v) for v in raw_meta["item_feature_vocab_sizes"]],
        user_feature_vocab_sizes=[int(v) for v in raw_meta["user_feature_vocab_sizes"]],
        context_feature_vocab_sizes=[int(v) for v in raw_meta["context_feature_vocab_sizes"]],
        seed=int(raw_meta["seed"]),
    )

    items: dict[int, ItemRecord] = {}
    for line_no, rec in _read_jsonl(path / "items.jsonl"):
        try:
            emb = decode_embedding(rec["embedding"])
            item = ItemRecord(int(rec["item_id"]), [int(v) for v in rec["id_features"]], emb)
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(str(path / "items.jsonl"), line_no, f"bad item record: {exc}") from exc
        if emb.shape != (meta.embed_dim,):
            raise SchemaError(
                f"{path / 'items.jsonl'}:{line_no}: embedding has dimension "
                f"{emb.shape[0]}, corpus declares {meta.embed_dim}"
            )
        items[item.item_id] = item

    sequences: dict[int, BehaviorSequence] = {}
    for line_no, rec in _read_jsonl(path / "sequences.jsonl"):
        try:
            events = [BehaviorEvent(int(i), int(t)) for i, t in rec["events"]]
            seq = BehaviorSequence(int(rec["user_id"]), events)
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(str(path / "sequences.jsonl"), line_no, f"bad sequence record: {exc}") from exc
        sequences[seq.user_id] = seq

    impressions: list[Impression] = []
    imp_path = path / "impressions.jsonl"
    if imp_path.exists():
        for line_no, rec in _read_jsonl(imp_path):
            try:
                impressions.append(Impression(
                    user_id=int(rec["user_id"]),
                    target_item_id=int(rec["target_item_id"]),
                    context_features=[int(v) for v in rec["context_features"]],
                    user_features=[int(v) for v in rec["user_features"]],
                    label=int(rec["label"]),
                    event_time=int(rec["event_time"]),
                ))
            except (KeyError, TypeError, ValueError) as exc:
                raise ParseError(str(imp_path), line_no, f"bad impression record: {exc}") from exc

    for name, declared, actual in [
        ("items", raw_meta.get("n_items"), len(items)),
        ("sequences", raw_meta.get("n_users"), len(sequences)),
        ("impressions", raw_meta.get("n_impressions"), len(impressions)),
    ]:
        if declared is not None and declared != actual:
            raise SchemaError(f"meta declares {declared} {name}, files contain {actual}")

    corpus = Corpus(items=items, sequences=sequences, impressions=impressions, meta=meta)
    corpus.validate()
    return corpus


# --- splitting ---

@dataclass
class SplitPolicy:
    kind: str = "user"        # "time" or "user"
    cut_time: int | None = None  # time policy; None -> median event_time
    eval_fraction: float = 0.2   # user policy
    seed: int = 0                # user policy


def split(corpus: Corpus, policy: SplitPolicy) -> tuple[Corpus, Corpus]:
    """Partition impressions into train/eval; items and sequences are shared."""
    if not corpus.impressions:
        raise ConfigError("cannot split a corpus with no impressions")
    if policy.kind == "time":
        times = np.array([imp.event_time for imp in corpus.impressions])
        cut = int(np.median(times)) if policy.cut_time is None else int(policy.cut_time)
        train = [imp for imp in corpus.impressions if imp.event_time <= cut]
        evals = [imp for imp in corpus.impressions if imp.event_time > cut]
    elif policy.kind == "user":
        if not 0.0 < policy.eval_fraction < 1.0:
            raise ConfigError(f"eval_fraction must be in (0, 1), got {policy.eval_fraction}")
        users = sorted({imp.user_id for imp in corpus.impressions})
        rng = np.random.default_rng(policy.seed)
        perm = rng.permutation(len(users))
        n_eval = max(1, int(round(len(users) * policy.eval_fraction)))
        eval_users = {users[i] for i in perm[:n_eval]}
        train = [imp for imp in corpus.impressions if imp.user_id not in eval_users]
        evals = [imp for imp in corpus.impressions if imp.user_id in eval_users]
    else:
        raise ConfigError(f"unknown split policy {policy.kind!r}")
    if not train or not evals:
        raise ConfigError(
            f"{policy.kind} split produced an empty side (train={len(train)}, eval={len(evals)})"
        )
    make = lambda imps: Corpus(corpus.items, corpus.sequences, imps, corpus.meta, corpus._caches)
    return make(train), make(evals)
