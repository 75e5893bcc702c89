"""Residual quantization of item embeddings into hierarchical semantic IDs.

Each level fits a seeded k-means codebook on the residuals left by the
previous levels; encoding greedily assigns the nearest centroid per level.
A semantic ID's nested prefixes (c1), (c1,c2), ... pack injectively into
integer keys that feed a shared learnable lookup table.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, ParseError, SchemaError
from .kmeans import kmeans_fit


@dataclass(frozen=True)
class SemId:
    codes: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.codes)


@dataclass(frozen=True)
class PrefixToken:
    depth: int
    codes: tuple[int, ...]
    key: int


@dataclass
class Codebooks:
    centroids: list[np.ndarray]  # per level [C, d] float64
    level_mse: list[float]       # training MSE after each level's assignment

    @property
    def levels(self) -> int:
        return len(self.centroids)

    @property
    def codebook_size(self) -> int:
        return self.centroids[0].shape[0]

    @property
    def dim(self) -> int:
        return self.centroids[0].shape[1]


def train_codebooks(embeddings: np.ndarray, levels: int, codebook_size: int, seed: int) -> Codebooks:
    """Fit one k-means codebook per level on the running residuals."""
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2:
        raise DataError(f"expected [n, d] embeddings, got shape {x.shape}")
    if not np.isfinite(x).all():
        raise DataError("non-finite embedding in quantizer training input")
    if levels < 1:
        raise ConfigError(f"levels must be >= 1, got {levels}")
    if codebook_size < 1:
        raise ConfigError(f"codebook_size must be >= 1, got {codebook_size}")

    residual = x.copy()
    centroids: list[np.ndarray] = []
    level_mse: list[float] = []
    for level in range(levels):
        result = kmeans_fit(residual, codebook_size, seed=seed + level)
        centroids.append(result.centroids)
        residual = residual - result.centroids[result.assignments]
        level_mse.append(float((residual ** 2).sum(axis=1).mean()))
    return Codebooks(centroids=centroids, level_mse=level_mse)


def encode_batch(codebooks: Codebooks, embeddings: np.ndarray) -> np.ndarray:
    """Greedy residual assignment; returns [n, M] int32 codes."""
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != codebooks.dim:
        raise DataError(f"embedding dimension {x.shape[1]} != codebook dimension {codebooks.dim}")
    codes = np.empty((x.shape[0], codebooks.levels), dtype=np.int32)
    residual = x.copy()
    for m, centers in enumerate(codebooks.centroids):
        d2 = (
            (residual * residual).sum(axis=1)[:, None]
            - 2.0 * (residual @ centers.T)
            + (centers * centers).sum(axis=1)[None, :]
        )
        idx = d2.argmin(axis=1)  # lowest index on ties
        codes[:, m] = idx
        residual -= centers[idx]
    return codes


def encode(codebooks: Codebooks, embedding: np.ndarray) -> SemId:
    codes = encode_batch(codebooks, np.asarray(embedding))
    return SemId(tuple(int(c) for c in codes[0]))


def reconstruct(codebooks: Codebooks, semid: SemId) -> np.ndarray:
    vec = np.zeros(codebooks.dim, dtype=np.float64)
    for m, c in enumerate(semid.codes):
        vec += codebooks.centroids[m][c]
    return vec


# --- prefix tokens ---

def pack_prefix(codes: tuple[int, ...] | list[int], codebook_size: int) -> int:
    """Injective integer key for a code prefix.

    Uses base max(C, 2) with a leading sentinel digit so prefixes of
    different depths land in disjoint ranges.
    """
    base = max(codebook_size, 2)
    key = 1
    for c in codes:
        if not 0 <= c < codebook_size:
            raise DataError(f"code {c} outside [0, {codebook_size})")
        key = key * base + c
    return key


def prefix_tokens(semid: SemId, depth: int, codebook_size: int) -> list[PrefixToken]:
    if not 1 <= depth <= len(semid.codes):
        raise ConfigError(f"prefix depth {depth} outside [1, {len(semid.codes)}]")
    tokens = []
    for k in range(1, depth + 1):
        codes = semid.codes[:k]
        tokens.append(PrefixToken(depth=k, codes=codes, key=pack_prefix(codes, codebook_size)))
    return tokens


def pack_prefix_matrix(codes: np.ndarray, depth: int, codebook_size: int) -> np.ndarray:
    """[n, depth] int64 packed keys for every row's prefixes 1..depth."""
    codes = np.asarray(codes, dtype=np.int64)
    base = max(codebook_size, 2)
    if codes.max(initial=0) >= codebook_size or codes.min(initial=0) < 0:
        raise DataError("codes outside codebook range")
    if depth > codes.shape[1]:
        raise ConfigError(f"prefix depth {depth} exceeds {codes.shape[1]} levels")
    keys = np.empty((codes.shape[0], depth), dtype=np.int64)
    acc = np.ones(codes.shape[0], dtype=np.int64)
    for k in range(depth):
        acc = acc * base + codes[:, k]
        keys[:, k] = acc
    return keys


@dataclass
class PrefixVocab:
    """Sorted packed-key vocabulary; row len(keys) is the out-of-vocabulary row."""
    keys: np.ndarray  # sorted int64

    @property
    def n_rows(self) -> int:
        return len(self.keys) + 1  # + OOV row

    @property
    def oov_row(self) -> int:
        return len(self.keys)

    def lookup(self, keys: np.ndarray) -> np.ndarray:
        keys = np.asarray(keys, dtype=np.int64)
        if len(self.keys) == 0:
            return np.full(keys.shape, self.oov_row, dtype=np.int32)
        pos = np.searchsorted(self.keys, keys)
        pos_c = np.minimum(pos, len(self.keys) - 1)
        hit = (pos < len(self.keys)) & (self.keys[pos_c] == keys)
        return np.where(hit, pos, self.oov_row).astype(np.int32)


def build_prefix_vocab(codes: np.ndarray, depth: int, codebook_size: int) -> PrefixVocab:
    keys = pack_prefix_matrix(codes, depth, codebook_size)
    return PrefixVocab(keys=np.unique(keys.ravel()))


def semantic_embedding(table: np.ndarray, vocab: PrefixVocab, tokens: list[PrefixToken]) -> np.ndarray:
    """Concatenation of the prefix-token rows of a shared lookup table."""
    if table.shape[0] != vocab.n_rows:
        raise DataError(f"table has {table.shape[0]} rows, vocabulary needs {vocab.n_rows}")
    rows = vocab.lookup(np.array([t.key for t in tokens], dtype=np.int64))
    return table[rows].reshape(-1)


# --- semantic-id map (item -> codes), the hard-retrieval key source ---

@dataclass
class SemIdMap:
    item_ids: np.ndarray  # sorted int64
    codes: np.ndarray     # [n, M] int32, rows aligned with item_ids

    def codes_for(self, item_id: int) -> np.ndarray | None:
        pos = int(np.searchsorted(self.item_ids, item_id))
        if pos >= len(self.item_ids) or self.item_ids[pos] != item_id:
            return None
        return self.codes[pos]

    def codes_matrix(self, item_ids: np.ndarray) -> np.ndarray:
        """Codes aligned to the given item-id order; every id must be mapped."""
        ids = np.asarray(item_ids, dtype=np.int64)
        if len(self.item_ids) == 0:
            if len(ids) == 0:
                return self.codes.reshape(0, self.codes.shape[1] if self.codes.ndim == 2 else 0)
            raise DataError(f"{len(ids)} items have no semantic id (map is empty)")
        pos = np.searchsorted(self.item_ids, ids)
        ok = (pos < len(self.item_ids)) & (self.item_ids[np.minimum(pos, len(self.item_ids) - 1)] == ids)
        if not ok.all():
            missing = ids[~ok][:5].tolist()
            raise DataError(f"{int((~ok).sum())} items have no semantic id (first few: {missing})")
        return self.codes[pos]


def save_semid_map(semid_map: SemIdMap, path: str | Path) -> None:
    with open(path, "w") as fh:
        for item_id, row in zip(semid_map.item_ids.tolist(), semid_map.codes.tolist()):
            fh.write(json.dumps({"item_id": item_id, "codes": row}, sort_keys=True,
                                separators=(",", ":")) + "\n")


def load_semid_map(path: str | Path) -> SemIdMap:
    ids, codes = [], []
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                ids.append(int(rec["item_id"]))
                codes.append([int(c) for c in rec["codes"]])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ParseError(str(path), line_no, f"bad semantic-id record: {exc}") from exc
    id_arr = np.array(ids, dtype=np.int64)
    order = np.argsort(id_arr)
    return SemIdMap(item_ids=id_arr[order], codes=np.array(codes, dtype=np.int32)[order])


# --- codebook serialization: JSON header + raw little-endian float32 payload ---

_CODEBOOK_MAGIC = "semrec-codebooks-v1"


def save_codebooks(codebooks: Codebooks, path: str | Path) -> None:
    header = {
        "format": _CODEBOOK_MAGIC,
        "levels": codebooks.levels,
        "codebook_size": codebooks.codebook_size,
        "dim": codebooks.dim,
        "level_mse": codebooks.level_mse,
    }
    payload = b"".join(np.asarray(c, dtype="<f4").tobytes() for c in codebooks.centroids)
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")).encode() + b"\n")
        fh.write(payload)


def load_codebooks(path: str | Path) -> Codebooks:
    with open(path, "rb") as fh:
        header_line = fh.readline()
        payload = fh.read()
    try:
        header = json.loads(header_line)
    except json.JSONDecodeError as exc:
        raise ParseError(str(path), 1, "invalid codebook header") from exc
    if header.get("format") != _CODEBOOK_MAGIC:
        raise SchemaError(f"{path}: not a codebook file")
    levels, size, dim = header["levels"], header["codebook_size"], header["dim"]
    expect = levels * size * dim * 4
    if len(payload) != expect:
        raise SchemaError(f"{path}: payload is {len(payload)} bytes, expected {expect}")
    flat = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    centroids = [
        flat[m * size * dim:(m + 1) * size * dim].reshape(size, dim)
        for m in range(levels)
    ]
    return Codebooks(centroids=centroids, level_mse=[float(v) for v in header["level_mse"]])
