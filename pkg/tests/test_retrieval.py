"""Retrieval index: fusion rules, hand-counted recall, persistence."""

import numpy as np
import pytest

import tabret.retrieval as retrieval
from tabret.embed import ProviderConfig, mock_embed
from tabret.kpt import PartialTable
from tabret.querygen import SyntheticQuery
from tabret.retrieval import (
    EvalReport,
    IndexFormatError,
    RetrievalIndex,
    build_index,
    entry_text,
    evaluate,
    load_index,
    rank_tables,
    save_index,
    search,
)
from tabret.train import Adapter, adapter_apply

MOCK = ProviderConfig(kind="mock", model_name="mock-32", dim=32)


def make_pt(pt_id: str, table_id: str, text: str) -> PartialTable:
    return PartialTable(
        pt_id=pt_id,
        table_id=table_id,
        strategy="kpt_random",
        cluster_index=0,
        row_indices=[0],
        text=text,
    )


def hand_index(rows: list[tuple[str, str, list[float]]], fusion: str = "max"):
    """Index straight from (pt_id, table_id, vector) rows."""
    return RetrievalIndex(
        pt_ids=[r[0] for r in rows],
        table_ids=[r[1] for r in rows],
        vectors=np.array([r[2] for r in rows], dtype=np.float64),
        fusion=fusion,
    )


class TestFusion:
    # table A holds two orthogonal chunks, table B one diagonal chunk;
    # for q = e1 the fusions disagree: max sees A's perfect chunk (1.0
    # vs 0.707), mean averages A down to 0.5
    rows = [
        ("A#kpt_random#0", "A", [1.0, 0.0]),
        ("A#kpt_random#1", "A", [0.0, 1.0]),
        ("B#kpt_random#0", "B", [np.sqrt(0.5), np.sqrt(0.5)]),
    ]

    def test_max_fusion_rewards_best_chunk(self):
        ranking = rank_tables(hand_index(self.rows, "max"), np.array([1.0, 0.0]))
        assert [t for t, _ in ranking] == ["A", "B"]
        assert ranking[0][1] == pytest.approx(1.0)
        assert ranking[1][1] == pytest.approx(np.sqrt(0.5))

    def test_mean_fusion_averages_chunks(self):
        ranking = rank_tables(hand_index(self.rows, "mean"), np.array([1.0, 0.0]))
        assert [t for t, _ in ranking] == ["B", "A"]
        assert dict(ranking)["A"] == pytest.approx(0.5)

    def test_score_ties_rank_by_table_id(self):
        rows = [
            ("zeta#kpt_random#0", "zeta", [1.0, 0.0]),
            ("alpha#kpt_random#0", "alpha", [1.0, 0.0]),
            ("mid#kpt_random#0", "mid", [0.5, 0.5]),
        ]
        ranking = rank_tables(hand_index(rows), np.array([1.0, 0.0]))
        assert [t for t, _ in ranking] == ["alpha", "zeta", "mid"]

    def test_ranking_covers_every_table_once(self):
        ranking = rank_tables(hand_index(self.rows), np.array([0.3, 0.7]))
        assert sorted(t for t, _ in ranking) == ["A", "B"]


class TestEvaluateHandCounted:
    def test_recall_at_k_from_planted_ranks(self, monkeypatch):
        # 12 single-chunk tables on the coordinate axes: a query's score
        # against table i is simply its i-th component, so we can plant
        # any rank we like per query
        n = 12
        rows = [
            (f"t{i:02d}#kpt_random#0", f"t{i:02d}", list(np.eye(n)[i])) for i in range(n)
        ]
        index = hand_index(rows)

        def vector_with_gold_rank(rank: int) -> list[float]:
            descending = [1.0 - 0.05 * j for j in range(n)]
            v = [0.0] * n
            v[0] = descending[rank - 1]  # gold t00 takes the rank-th value
            spare = [x for j, x in enumerate(descending) if j != rank - 1]
            for i in range(1, n):
                v[i] = spare[i - 1]
            return v

        planted = {
            f"query rank {r}": vector_with_gold_rank(r) for r in (1, 2, 6, 11)
        }
        monkeypatch.setattr(
            retrieval,
            "embed_texts",
            lambda provider, texts, cache=None: np.array([planted[t] for t in texts]),
        )
        gold = [(text, "t00") for text in planted]
        report = evaluate(index, gold, MOCK, ks=(1, 5, 10))
        assert report.ranks == [1, 2, 6, 11]
        assert report.query_count == 4
        assert report.recall == {1: 25.0, 5: 50.0, 10: 75.0}

    def test_recall_monotone_in_k(self):
        pts = [
            make_pt(f"t{i}#kpt_random#0", f"t{i}", f"h\nh: widget flavor {i}")
            for i in range(10)
        ]
        index = build_index(pts, None, MOCK)
        gold = [(f"which table holds widget flavor {i}", f"t{i}") for i in range(10)]
        report = evaluate(index, gold, MOCK, ks=(1, 2, 5, 10))
        values = [report.recall[k] for k in (1, 2, 5, 10)]
        assert values == sorted(values)
        assert all(0.0 <= v <= 100.0 for v in values)

    def test_unknown_gold_table_is_an_error(self):
        index = hand_index([("a#kpt_random#0", "a", [1.0, 0.0])])
        with pytest.raises(ValueError, match="ghost"):
            evaluate(index, [("hello", "ghost")], MOCK)

    def test_empty_gold_rejected(self):
        index = hand_index([("a#kpt_random#0", "a", [1.0, 0.0])])
        with pytest.raises(ValueError, match="no evaluation queries"):
            evaluate(index, [], MOCK)

    def test_report_json_shape(self):
        report = EvalReport(recall={1: 25.0, 5: 50.0}, query_count=4, ranks=[1, 7])
        out = report.to_json()
        assert out == {
            "recall": {"R@1": 25.0, "R@5": 50.0},
            "query_count": 4,
            "ranks": [1, 7],
        }


class TestBuildIndexAndSearch:
    def test_entries_sorted_by_pt_id(self):
        pts = [
            make_pt("b#kpt_random#0", "b", "h\nh: two"),
            make_pt("a#kpt_random#1", "a", "h\nh: three"),
            make_pt("a#kpt_random#0", "a", "h\nh: one"),
        ]
        index = build_index(pts, None, MOCK)
        assert index.pt_ids == ["a#kpt_random#0", "a#kpt_random#1", "b#kpt_random#0"]
        assert index.table_ids == ["a", "a", "b"]

    def test_self_similarity_is_one(self):
        pts = [
            make_pt(f"t{i}#kpt_random#0", f"t{i}", f"h\nh: distinct payload {i}")
            for i in range(6)
        ]
        index = build_index(pts, None, MOCK)
        for pt in pts:
            ranking = search(index, pt.text, MOCK, top_k=1)
            assert ranking[0][0] == pt.table_id
            assert ranking[0][1] == pytest.approx(1.0, abs=1e-6)

    def test_search_truncates_to_top_k(self):
        pts = [make_pt(f"t{i}#kpt_random#0", f"t{i}", f"h\nh: {i}") for i in range(7)]
        index = build_index(pts, None, MOCK)
        assert len(search(index, "anything", MOCK, top_k=3)) == 3

    def test_search_validates_arguments(self):
        pts = [make_pt("a#kpt_random#0", "a", "h\nh: x")]
        index = build_index(pts, None, MOCK)
        with pytest.raises(ValueError, match="top_k"):
            search(index, "q", MOCK, top_k=0)
        empty = RetrievalIndex(pt_ids=[], table_ids=[], vectors=np.zeros((0, 4)))
        with pytest.raises(ValueError, match="empty"):
            search(empty, "q", MOCK)

    def test_zero_pts_rejected(self):
        with pytest.raises(ValueError, match="zero partial tables"):
            build_index([], None, MOCK)

    def test_adapter_transforms_stored_vectors(self, rng):
        pts = [make_pt(f"t{i}#kpt_random#0", f"t{i}", f"h\nh: item {i}") for i in range(4)]
        base = build_index(pts, None, MOCK)
        adapter = Adapter(W=np.eye(32) + 0.2 * rng.normal(size=(32, 32)))
        adapted = build_index(pts, None, MOCK, adapter=adapter)
        expected = np.stack([adapter_apply(adapter, v) for v in base.vectors])
        np.testing.assert_allclose(adapted.vectors, expected, atol=1e-12)
        # rows stay unit-norm after adaptation
        np.testing.assert_allclose(
            np.linalg.norm(adapted.vectors, axis=1), 1.0, atol=1e-9
        )

    def test_search_maps_query_through_adapter(self, rng):
        pts = [make_pt(f"t{i}#kpt_random#0", f"t{i}", f"h\nh: item {i}") for i in range(4)]
        adapter = Adapter(W=np.eye(32) + 0.2 * rng.normal(size=(32, 32)))
        index = build_index(pts, None, MOCK, adapter=adapter)
        got = search(index, "some probe text", MOCK)
        q_vec = adapter_apply(adapter, mock_embed("some probe text", 32))
        assert got == rank_tables(index, q_vec)

    def test_identity_adapter_matches_no_adapter(self):
        pts = [make_pt(f"t{i}#kpt_random#0", f"t{i}", f"h\nh: item {i}") for i in range(4)]
        plain = build_index(pts, None, MOCK)
        via_identity = build_index(pts, None, MOCK, adapter=Adapter.identity(32))
        np.testing.assert_allclose(via_identity.vectors, plain.vectors, atol=1e-12)


class TestRepresentationModes:
    def test_entry_text_pt_only(self):
        pt = make_pt("a#kpt_random#0", "a", "h\nh: v")
        queries = [
            SyntheticQuery("a#kpt_random#0#q0", "a#kpt_random#0", "a", "who?", "en")
        ]
        assert entry_text(pt, queries, "pt_only") == "h\nh: v"

    def test_entry_text_appends_queries(self):
        pt = make_pt("a#kpt_random#0", "a", "h\nh: v")
        queries = [
            SyntheticQuery("a#kpt_random#0#q0", "a#kpt_random#0", "a", "who?", "en"),
            SyntheticQuery("a#kpt_random#0#q1", "a#kpt_random#0", "a", "what?", "en"),
        ]
        assert entry_text(pt, queries, "pt_plus_queries") == "h\nh: v\nwho?\nwhat?"

    def test_entry_text_without_queries_falls_back(self):
        pt = make_pt("a#kpt_random#0", "a", "h\nh: v")
        assert entry_text(pt, [], "pt_plus_queries") == "h\nh: v"

    def test_mode_changes_embeddings(self):
        pt = make_pt("a#kpt_random#0", "a", "h\nh: v")
        queries = {
            "a#kpt_random#0": [
                SyntheticQuery("a#kpt_random#0#q0", "a#kpt_random#0", "a", "who?", "en")
            ]
        }
        plain = build_index([pt], None, MOCK)
        enriched = build_index([pt], queries, MOCK, mode="pt_plus_queries")
        assert enriched.representation_mode == "pt_plus_queries"
        assert not np.allclose(plain.vectors, enriched.vectors)


class TestIndexValidation:
    def test_misaligned_lengths(self):
        with pytest.raises(ValueError, match="align"):
            RetrievalIndex(pt_ids=["a"], table_ids=["a", "b"], vectors=np.zeros((1, 2)))

    def test_duplicate_pt_ids(self):
        with pytest.raises(ValueError, match="unique"):
            RetrievalIndex(
                pt_ids=["a", "a"], table_ids=["t", "t"], vectors=np.zeros((2, 2))
            )

    def test_unknown_mode_and_fusion(self):
        with pytest.raises(ValueError, match="representation mode"):
            RetrievalIndex(
                pt_ids=["a"], table_ids=["t"], vectors=np.zeros((1, 2)),
                representation_mode="chunks",
            )
        with pytest.raises(ValueError, match="fusion"):
            RetrievalIndex(
                pt_ids=["a"], table_ids=["t"], vectors=np.zeros((1, 2)), fusion="sum"
            )


class TestPersistence:
    def build(self) -> RetrievalIndex:
        pts = [
            make_pt(f"t{i}#kpt_random#0", f"t{i}", f"h\nh: payload {i}") for i in range(5)
        ]
        return build_index(pts, None, MOCK, fusion="mean")

    def test_round_trip(self, tmp_path):
        index = self.build()
        save_index(index, tmp_path / "index")
        back = load_index(tmp_path / "index")
        assert back.pt_ids == index.pt_ids
        assert back.table_ids == index.table_ids
        assert np.array_equal(back.vectors, index.vectors)
        assert back.fusion == "mean"
        assert back.representation_mode == "pt_only"
        assert back.adapter is None

    def test_load_attaches_adapter(self, tmp_path):
        index = self.build()
        save_index(index, tmp_path / "index")
        adapter = Adapter.identity(32)
        back = load_index(tmp_path / "index", adapter=adapter)
        assert back.adapter is adapter

    def test_vector_corruption_detected(self, tmp_path):
        index = self.build()
        save_index(index, tmp_path / "index")
        blob = bytearray((tmp_path / "index" / "vectors.bin").read_bytes())
        blob[-12] ^= 0x40
        (tmp_path / "index" / "vectors.bin").write_bytes(bytes(blob))
        with pytest.raises(IndexFormatError):
            load_index(tmp_path / "index")

    def test_count_mismatch_detected(self, tmp_path):
        index = self.build()
        save_index(index, tmp_path / "index")
        entries = (tmp_path / "index" / "entries.jsonl").read_text().splitlines()
        (tmp_path / "index" / "entries.jsonl").write_text("\n".join(entries[:-1]) + "\n")
        with pytest.raises(IndexFormatError, match="disagree"):
            load_index(tmp_path / "index")
