"""Negative mining checked against a brute-force re-derivation."""

import numpy as np
import pytest

from tabret.embed import mock_embed
from tabret.kpt import PartialTable
from tabret.mining import (
    MiningConfig,
    MiningError,
    TrainingTriple,
    mine_all,
    mine_negatives,
    triple_from_record,
    triple_to_record,
)
from tabret.querygen import SyntheticQuery

DIM = 32


def make_pt(table: int, chunk: int, text: str | None = None) -> PartialTable:
    text = text or f"table {table} chunk {chunk} with assorted inventory words"
    pt = PartialTable(
        pt_id=f"t{table:02d}#kpt_random#{chunk}",
        table_id=f"t{table:02d}",
        strategy="kpt_random",
        cluster_index=chunk,
        row_indices=[chunk],
        text=text,
    )
    pt.embedding = mock_embed(text, DIM)
    return pt


def make_query(table: int, chunk: int = 0, ordinal: int = 0) -> SyntheticQuery:
    return SyntheticQuery(
        query_id=f"t{table:02d}#kpt_random#{chunk}#q{ordinal}",
        pt_id=f"t{table:02d}#kpt_random#{chunk}",
        table_id=f"t{table:02d}",
        text=f"what is in table {table} chunk {chunk}",
        lang="en",
    )


@pytest.fixture
def corpus_pts() -> list[PartialTable]:
    return [make_pt(t, c) for t in range(8) for c in range(2)]


def brute_force_hard(query, q_vec, all_pts, h) -> list[str]:
    """Independent re-derivation: per-candidate scalar dot products,
    explicit sort on (descending score, ascending id), then cut."""
    ranked = []
    for pt in all_pts:
        if pt.table_id == query.table_id:
            continue
        ranked.append((-float(np.dot(pt.embedding, q_vec)), pt.pt_id))
    ranked.sort()
    return [pt_id for _, pt_id in ranked[: min(h, len(ranked))]]


class TestHardMining:
    def test_matches_brute_force_ids_and_order(self, corpus_pts):
        cfg = MiningConfig(h=5, strategy="hard")
        for table in range(8):
            query = make_query(table)
            q_vec = mock_embed(query.text, DIM)
            triple = mine_negatives(query, q_vec, corpus_pts, cfg)
            assert list(triple.negative_pt_ids) == brute_force_hard(
                query, q_vec, corpus_pts, cfg.h
            )

    def test_never_selects_own_table(self, corpus_pts):
        cfg = MiningConfig(h=100, strategy="hard")
        query = make_query(3)
        triple = mine_negatives(query, mock_embed(query.text, DIM), corpus_pts, cfg)
        assert all(not pt_id.startswith("t03#") for pt_id in triple.negative_pt_ids)
        # own table has 2 of the 16 chunks; everything else is taken
        assert len(triple.negative_pt_ids) == 14

    def test_h_clamps_to_candidate_count(self, corpus_pts):
        query = make_query(0)
        q_vec = mock_embed(query.text, DIM)
        triple = mine_negatives(query, q_vec, corpus_pts, MiningConfig(h=999))
        assert len(triple.negative_pt_ids) == 14

    def test_exact_score_ties_break_by_pt_id(self):
        # two chunks in different tables share one text, hence one
        # embedding; querying with that same vector makes them tie at
        # the top and the lower id must come first
        shared = "identical chunk text"
        pts = [
            make_pt(5, 0, text=shared),
            make_pt(2, 0, text=shared),
            make_pt(7, 0),
            make_pt(9, 0),
        ]
        query = make_query(9)
        triple = mine_negatives(query, mock_embed(shared, DIM), pts, MiningConfig(h=2))
        assert list(triple.negative_pt_ids) == ["t02#kpt_random#0", "t05#kpt_random#0"]

    def test_insensitive_to_candidate_list_order(self, corpus_pts, rng):
        cfg = MiningConfig(h=6)
        query = make_query(1)
        q_vec = mock_embed(query.text, DIM)
        baseline = mine_negatives(query, q_vec, corpus_pts, cfg)
        shuffled = list(corpus_pts)
        rng.shuffle(shuffled)
        assert mine_negatives(query, q_vec, shuffled, cfg) == baseline

    def test_triple_fields(self, corpus_pts):
        query = make_query(4, chunk=1, ordinal=2)
        q_vec = mock_embed(query.text, DIM)
        triple = mine_negatives(query, q_vec, corpus_pts, MiningConfig(h=3))
        assert triple.query_id == "t04#kpt_random#1#q2"
        assert triple.positive_pt_id == "t04#kpt_random#1"
        assert triple.strategy == "hard"


class TestRandomMining:
    def test_deterministic_per_seed(self, corpus_pts):
        cfg = MiningConfig(h=5, strategy="random", seed=11)
        query = make_query(2)
        q_vec = mock_embed(query.text, DIM)
        a = mine_negatives(query, q_vec, corpus_pts, cfg)
        b = mine_negatives(query, q_vec, corpus_pts, cfg)
        assert a == b

    def test_seed_changes_draw(self, corpus_pts):
        query = make_query(2)
        q_vec = mock_embed(query.text, DIM)
        draws = {
            mine_negatives(
                query, q_vec, corpus_pts, MiningConfig(h=5, strategy="random", seed=s)
            ).negative_pt_ids
            for s in range(6)
        }
        assert len(draws) > 1

    def test_queries_get_independent_streams(self, corpus_pts):
        cfg = MiningConfig(h=5, strategy="random", seed=0)
        draws = {
            mine_negatives(
                make_query(2, ordinal=i),
                mock_embed("same text", DIM),
                corpus_pts,
                cfg,
            ).negative_pt_ids
            for i in range(6)
        }
        assert len(draws) > 1

    def test_ignores_similarity_but_respects_eligibility(self, corpus_pts):
        cfg = MiningConfig(h=100, strategy="random", seed=3)
        query = make_query(6)
        triple = mine_negatives(query, mock_embed(query.text, DIM), corpus_pts, cfg)
        assert len(triple.negative_pt_ids) == 14
        assert len(set(triple.negative_pt_ids)) == 14
        assert all(not pt_id.startswith("t06#") for pt_id in triple.negative_pt_ids)

    def test_insensitive_to_candidate_list_order(self, corpus_pts, rng):
        # the draw happens over an id-sorted pool, so shuffling the
        # candidate list cannot change the outcome
        cfg = MiningConfig(h=4, strategy="random", seed=9)
        query = make_query(1)
        q_vec = mock_embed(query.text, DIM)
        baseline = mine_negatives(query, q_vec, corpus_pts, cfg)
        shuffled = list(corpus_pts)
        rng.shuffle(shuffled)
        assert mine_negatives(query, q_vec, shuffled, cfg) == baseline


class TestEligibility:
    def test_no_candidates_raises(self):
        pts = [make_pt(1, 0), make_pt(1, 1)]
        query = make_query(1)
        with pytest.raises(MiningError, match="t01"):
            mine_negatives(query, mock_embed(query.text, DIM), pts, MiningConfig())


class TestMineAll:
    def test_sorted_by_query_id_and_aligned(self, corpus_pts):
        queries = [make_query(t, ordinal=o) for t in (5, 1, 3) for o in (1, 0)]
        vecs = np.stack([mock_embed(q.text, DIM) for q in queries])
        triples, skipped = mine_all(queries, vecs, corpus_pts, MiningConfig(h=4))
        assert skipped == []
        assert [t.query_id for t in triples] == sorted(q.query_id for q in queries)
        # each triple matches mining its own query directly
        by_id = {q.query_id: (q, v) for q, v in zip(queries, vecs)}
        for triple in triples:
            q, v = by_id[triple.query_id]
            assert triple == mine_negatives(q, v, corpus_pts, MiningConfig(h=4))

    def test_skips_queries_without_candidates(self):
        # the pool holds only the query's own table, so there is nothing
        # eligible and the query lands in the skip list instead of failing
        query = make_query(9)
        vecs = np.stack([mock_embed(query.text, DIM)])
        triples, skipped = mine_all([query], vecs, [make_pt(9, 0)], MiningConfig(h=2))
        assert triples == []
        assert skipped == ["t09#kpt_random#0#q0"]

    def test_misaligned_vectors_rejected(self, corpus_pts):
        queries = [make_query(0)]
        vecs = np.zeros((2, DIM))
        with pytest.raises(ValueError, match="align"):
            mine_all(queries, vecs, corpus_pts, MiningConfig())

    def test_missing_embedding_rejected(self, corpus_pts):
        bare = make_pt(7, 1)
        bare.embedding = None
        queries = [make_query(0)]
        vecs = np.stack([mock_embed(q.text, DIM) for q in queries])
        with pytest.raises(ValueError, match="no embedding"):
            mine_all(queries, vecs, corpus_pts + [bare], MiningConfig())


class TestConfigValidation:
    @pytest.mark.parametrize("h", [0, -2])
    def test_h_positive(self, h):
        with pytest.raises(ValueError, match="h must"):
            MiningConfig(h=h)

    def test_strategy_checked(self):
        with pytest.raises(ValueError, match="hard.*random|random.*hard"):
            MiningConfig(strategy="semi-hard")


class TestRecordRoundTrip:
    def test_round_trip(self):
        triple = TrainingTriple(
            query_id="t00#kpt_random#0#q0",
            positive_pt_id="t00#kpt_random#0",
            negative_pt_ids=("t01#kpt_random#0", "t02#kpt_random#1"),
            strategy="hard",
        )
        assert triple_from_record(triple_to_record(triple)) == triple
