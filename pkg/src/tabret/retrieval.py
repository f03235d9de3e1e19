"""Exact-search retrieval over partial-table embeddings and R@k evaluation.

The index is an in-memory matrix of unit vectors, one row per partial
table. A query scores every row by dot product; a table's score is the
max over its rows (one strongly matching cluster is enough to retrieve
the table), with mean fusion available as an option. Ties rank by
table_id so reports are reproducible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .embed import EmbeddingCache, ProviderConfig, embed_texts
from .fsio import (
    atomic_write_bytes,
    read_jsonl,
    read_matrix_bin,
    write_jsonl,
    write_matrix_bin,
)
from .kpt import PartialTable
from .querygen import SyntheticQuery
from .train import Adapter, adapter_apply

REPRESENTATION_MODES = ("pt_only", "pt_plus_queries")
FUSIONS = ("max", "mean")


class IndexFormatError(ValueError):
    """A persisted index fails validation on load."""


@dataclass
class RetrievalIndex:
    pt_ids: list[str]
    table_ids: list[str]
    vectors: np.ndarray
    adapter: Adapter | None = None
    representation_mode: str = "pt_only"
    fusion: str = "max"

    def __post_init__(self) -> None:
        if len(self.pt_ids) != len(self.table_ids) or len(self.pt_ids) != len(self.vectors):
            raise ValueError("pt_ids, table_ids and vectors must align")
        if len(set(self.pt_ids)) != len(self.pt_ids):
            raise ValueError("pt_id entries must be unique")
        if self.representation_mode not in REPRESENTATION_MODES:
            raise ValueError(f"unknown representation mode {self.representation_mode!r}")
        if self.fusion not in FUSIONS:
            raise ValueError(f"unknown fusion {self.fusion!r}")


@dataclass
class EvalReport:
    recall: dict[int, float]
    query_count: int
    ranks: list[int] = field(default_factory=list, repr=False)

    def to_json(self) -> dict:
        return {
            "recall": {f"R@{k}": v for k, v in sorted(self.recall.items())},
            "query_count": self.query_count,
            "ranks": self.ranks,
        }


def entry_text(pt: PartialTable, queries: list[SyntheticQuery], mode: str) -> str:
    if mode == "pt_only" or not queries:
        return pt.text
    return pt.text + "\n" + "\n".join(q.text for q in queries)


def build_index(
    pts: list[PartialTable],
    queries_by_pt: dict[str, list[SyntheticQuery]] | None,
    provider: ProviderConfig,
    cache: EmbeddingCache | None = None,
    adapter: Adapter | None = None,
    mode: str = "pt_only",
    fusion: str = "max",
) -> RetrievalIndex:
    """Embed one entry per partial table, in pt_id order."""
    if not pts:
        raise ValueError("cannot build an index over zero partial tables")
    ordered = sorted(pts, key=lambda p: p.pt_id)
    texts = [
        entry_text(pt, (queries_by_pt or {}).get(pt.pt_id, []), mode) for pt in ordered
    ]
    vectors = embed_texts(provider, texts, cache)
    if adapter is not None:
        vectors = np.stack([adapter_apply(adapter, v) for v in vectors])
    return RetrievalIndex(
        pt_ids=[pt.pt_id for pt in ordered],
        table_ids=[pt.table_id for pt in ordered],
        vectors=vectors,
        adapter=adapter,
        representation_mode=mode,
        fusion=fusion,
    )


def rank_tables(index: RetrievalIndex, q_vec: np.ndarray) -> list[tuple[str, float]]:
    """Full table ranking for an embedded (and adapter-mapped) query vector."""
    scores = np.dot(index.vectors, q_vec)
    table_scores: dict[str, list[float]] = {}
    for table_id, score in zip(index.table_ids, scores):
        table_scores.setdefault(table_id, []).append(float(score))
    if index.fusion == "max":
        fused = {t: max(v) for t, v in table_scores.items()}
    else:
        fused = {t: sum(v) / len(v) for t, v in table_scores.items()}
    return sorted(fused.items(), key=lambda kv: (-kv[1], kv[0]))


def search(
    index: RetrievalIndex,
    query_text: str,
    provider: ProviderConfig,
    top_k: int = 10,
    cache: EmbeddingCache | None = None,
) -> list[tuple[str, float]]:
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    if len(index.pt_ids) == 0:
        raise ValueError("index is empty")
    q_vec = embed_texts(provider, [query_text], cache)[0]
    if index.adapter is not None:
        q_vec = adapter_apply(index.adapter, q_vec)
    return rank_tables(index, q_vec)[:top_k]


def evaluate(
    index: RetrievalIndex,
    gold: list[tuple[str, str]],
    provider: ProviderConfig,
    ks: tuple[int, ...] = (1, 5, 10),
    cache: EmbeddingCache | None = None,
) -> EvalReport:
    """R@k over (query_text, gold_table_id) pairs, as percentages.

    The rank of a gold table missing from the full ranking would be
    undefined, so unknown gold ids are an error, not a zero.
    """
    if not gold:
        raise ValueError("no evaluation queries")
    known = set(index.table_ids)
    for _, gold_id in gold:
        if gold_id not in known:
            raise ValueError(f"gold table id {gold_id!r} is not in the index")
    q_vecs = embed_texts(provider, [q for q, _ in gold], cache)
    ranks = []
    for (_, gold_id), q_vec in zip(gold, q_vecs):
        if index.adapter is not None:
            q_vec = adapter_apply(index.adapter, q_vec)
        ranking = rank_tables(index, q_vec)
        rank = next(i for i, (t, _) in enumerate(ranking, start=1) if t == gold_id)
        ranks.append(rank)
    recall = {
        k: round(100.0 * sum(1 for r in ranks if r <= k) / len(ranks), 2) for k in ks
    }
    return EvalReport(recall=recall, query_count=len(ranks), ranks=ranks)


def save_index(index: RetrievalIndex, directory: str | Path) -> None:
    """entries.jsonl + vectors.bin (count, dim, f64 rows, CRC-64) + meta.json."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_jsonl(
        d / "entries.jsonl",
        [{"pt_id": p, "table_id": t} for p, t in zip(index.pt_ids, index.table_ids)],
    )
    write_matrix_bin(d / "vectors.bin", index.vectors)
    meta = {
        "representation_mode": index.representation_mode,
        "fusion": index.fusion,
        "dim": int(index.vectors.shape[1]),
        "has_adapter": index.adapter is not None,
    }
    atomic_write_bytes(d / "meta.json", (json.dumps(meta, sort_keys=True, indent=2) + "\n").encode())


def load_index(directory: str | Path, adapter: Adapter | None = None) -> RetrievalIndex:
    d = Path(directory)
    entries = list(read_jsonl(d / "entries.jsonl"))
    try:
        vectors = read_matrix_bin(d / "vectors.bin")
    except ValueError as exc:
        raise IndexFormatError(str(exc)) from exc
    if len(vectors) != len(entries):
        raise IndexFormatError(f"{d}: entries.jsonl and vectors.bin disagree on count")
    meta = json.loads((d / "meta.json").read_text())
    return RetrievalIndex(
        pt_ids=[e["pt_id"] for e in entries],
        table_ids=[e["table_id"] for e in entries],
        vectors=vectors,
        adapter=adapter,
        representation_mode=meta.get("representation_mode", "pt_only"),
        fusion=meta.get("fusion", "max"),
    )
