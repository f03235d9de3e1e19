"""Embedding providers, vector math, and the on-disk embedding cache.

Two providers share one interface: an HTTP provider speaking the common
/v1/embeddings wire schema, and a deterministic local mock that feature-
hashes character 3-grams (tests and offline runs). All vectors leave
this module L2-normalized, so downstream cosine similarity is a plain
dot product. The cache is content-addressed by (model_name, text) and
stores raw float64 bytes, so hits are bitwise-identical to the original
response.
"""

from __future__ import annotations

import hashlib
import json
import re
import struct
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .fsio import crc64
from .httpjson import ProviderError, post_json

PROVIDER_KINDS = ("http", "mock")


@dataclass(frozen=True)
class ProviderConfig:
    kind: str
    model_name: str
    dim: int
    endpoint: str = ""
    batch_size: int = 32
    max_input_chars: int = 8192
    auth_token: str | None = None
    max_parallel_requests: int = 8

    def __post_init__(self) -> None:
        if self.kind not in PROVIDER_KINDS:
            raise ValueError(f"provider kind must be one of {PROVIDER_KINDS}, got {self.kind!r}")
        if self.dim <= 0:
            raise ValueError("provider dim must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.kind == "http" and not self.endpoint:
            raise ValueError("http provider requires an endpoint")


class CacheCorruptionError(RuntimeError):
    """A cached embedding record failed its checksum."""


def normalize(v: np.ndarray) -> np.ndarray:
    """Return v / ||v||; rejects the zero vector."""
    v = np.asarray(v, dtype=np.float64)
    n = float(np.linalg.norm(v))
    if n == 0.0:
        raise ValueError("cannot normalize a zero vector")
    return v / n


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine undefined for the zero vector")
    return float(np.dot(a, b) / (na * nb))


def mock_embed(text: str, dim: int) -> np.ndarray:
    """Deterministic local embedding: hash character 3-grams into dim buckets.

    Bucket and sign come from SHA-256 of the gram, so the result is
    identical across processes and machines. Texts shorter than 3 chars
    hash as a single gram; the empty text (and an accumulation that
    cancels to zero) maps to the unit basis vector e1.
    """
    if dim < 8:
        raise ValueError(f"mock embedding dim must be >= 8, got {dim}")
    acc = np.zeros(dim, dtype=np.float64)
    grams = [text[i : i + 3] for i in range(len(text) - 2)] if len(text) >= 3 else ([text] if text else [])
    for gram in grams:
        digest = hashlib.sha256(gram.encode("utf-8")).digest()
        bucket = int.from_bytes(digest[:8], "big") % dim
        acc[bucket] += 1.0 if digest[8] & 1 else -1.0
    norm = float(np.linalg.norm(acc))
    if norm == 0.0:
        out = np.zeros(dim, dtype=np.float64)
        out[0] = 1.0
        return out
    return acc / norm


class EmbeddingCache:
    """Append-only binary store of normalized vectors, one pair of files per model.

    Record layout in the .bin file: u32 dim, dim little-endian f64 values,
    u64 CRC-64 of the preceding bytes. The .idx.jsonl sidecar maps the
    SHA-256 of (model_name, text) to the record's byte offset. Reads are
    lock-free; writes are serialized on an in-process lock.
    """

    def __init__(self, cache_dir: str | Path, model_name: str) -> None:
        self.cache_dir = Path(cache_dir)
        self.cache_dir.mkdir(parents=True, exist_ok=True)
        slug = re.sub(r"[^A-Za-z0-9._-]+", "_", model_name)
        tag = hashlib.sha256(model_name.encode("utf-8")).hexdigest()[:8]
        self.bin_path = self.cache_dir / f"{slug}-{tag}.bin"
        self.idx_path = self.cache_dir / f"{slug}-{tag}.idx.jsonl"
        self.model_name = model_name
        self._offsets: dict[str, int] = {}
        self._lock = threading.Lock()
        if self.idx_path.exists():
            with self.idx_path.open("r", encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        rec = json.loads(line)
                        self._offsets[rec["key"]] = rec["offset"]

    def key(self, text: str) -> str:
        return hashlib.sha256(f"{self.model_name}\x1f{text}".encode("utf-8")).hexdigest()

    def get(self, text: str) -> np.ndarray | None:
        offset = self._offsets.get(self.key(text))
        if offset is None:
            return None
        with self.bin_path.open("rb") as fh:
            fh.seek(offset)
            head = fh.read(4)
            if len(head) < 4:
                raise CacheCorruptionError(f"{self.bin_path}: truncated record at {offset}")
            (dim,) = struct.unpack("<I", head)
            payload = fh.read(8 * dim)
            tail = fh.read(8)
            if len(payload) < 8 * dim or len(tail) < 8:
                raise CacheCorruptionError(f"{self.bin_path}: truncated record at {offset}")
            (stored_crc,) = struct.unpack("<Q", tail)
        if crc64(head + payload) != stored_crc:
            raise CacheCorruptionError(f"{self.bin_path}: checksum mismatch at offset {offset}")
        return np.frombuffer(payload, dtype="<f8").copy()

    def put(self, text: str, vector: np.ndarray) -> None:
        key = self.key(text)
        record = struct.pack("<I", vector.shape[0]) + np.ascontiguousarray(
            vector, dtype="<f8"
        ).tobytes()
        record += struct.pack("<Q", crc64(record))
        with self._lock:
            if key in self._offsets:
                return
            with self.bin_path.open("ab") as fh:
                offset = fh.tell()
                fh.write(record)
            with self.idx_path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps({"key": key, "offset": offset}) + "\n")
            self._offsets[key] = offset


def _http_embed_batch(cfg: ProviderConfig, texts: list[str]) -> list[np.ndarray]:
    url = cfg.endpoint.rstrip("/") + "/v1/embeddings"
    headers = {"Authorization": f"Bearer {cfg.auth_token}"} if cfg.auth_token else None
    body = post_json(url, {"model": cfg.model_name, "input": texts}, headers=headers)
    data = body.get("data") if isinstance(body, dict) else None
    if not isinstance(data, list) or len(data) != len(texts):
        raise ProviderError(
            f"{url}: expected {len(texts)} embeddings, got "
            f"{len(data) if isinstance(data, list) else 'no data list'}"
        )
    out: list[np.ndarray | None] = [None] * len(texts)
    for item in data:
        idx = item.get("index")
        emb = item.get("embedding")
        if not isinstance(idx, int) or not 0 <= idx < len(texts) or not isinstance(emb, list):
            raise ProviderError(f"{url}: malformed embedding item {item!r:.200}")
        vec = np.asarray(emb, dtype=np.float64)
        if vec.shape != (cfg.dim,):
            raise ProviderError(
                f"{url}: embedding dimension {vec.shape[0]} does not match configured dim {cfg.dim}"
            )
        out[idx] = normalize(vec)
    if any(v is None for v in out):
        raise ProviderError(f"{url}: response is missing indices")
    return out  # type: ignore[return-value]


def embed_texts(
    cfg: ProviderConfig,
    texts: list[str],
    cache: EmbeddingCache | None = None,
) -> np.ndarray:
    """Embed texts in input order, serving repeats from the cache.

    Texts are tail-truncated to cfg.max_input_chars before dispatch and
    cache lookup. Returns an (n, dim) float64 array of unit vectors.
    """
    if not texts:
        raise ValueError("embed_texts requires at least one text")
    clipped = [t[: cfg.max_input_chars] for t in texts]
    vectors: list[np.ndarray | None] = [None] * len(clipped)
    misses: dict[str, list[int]] = {}
    for i, text in enumerate(clipped):
        if cache is not None:
            hit = cache.get(text)
            if hit is not None:
                if hit.shape != (cfg.dim,):
                    raise CacheCorruptionError(
                        f"cached vector has dim {hit.shape[0]}, expected {cfg.dim}"
                    )
                vectors[i] = hit
                continue
        misses.setdefault(text, []).append(i)

    unique = list(misses)
    if unique:
        batches = [unique[i : i + cfg.batch_size] for i in range(0, len(unique), cfg.batch_size)]
        if cfg.kind == "mock":
            results = [[mock_embed(t, cfg.dim) for t in batch] for batch in batches]
        elif len(batches) == 1:
            results = [_http_embed_batch(cfg, batches[0])]
        else:
            workers = max(1, min(cfg.max_parallel_requests, len(batches)))
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(lambda b: _http_embed_batch(cfg, b), batches))
        for batch, vecs in zip(batches, results):
            for text, vec in zip(batch, vecs):
                if cache is not None:
                    cache.put(text, vec)
                for i in misses[text]:
                    vectors[i] = vec
    return np.stack(vectors)  # type: ignore[arg-type]
