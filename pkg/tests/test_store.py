import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import oracle_topk, random_table, unit_rows
from retaug.errors import (
    DimensionMismatch,
    DuplicateName,
    KTooLarge,
    NonFiniteValue,
    UnknownName,
    ZeroNormQuery,
    ZeroNormRow,
)
from retaug.store import (
    bottomk,
    build_table,
    load_table,
    save_table,
    subset,
    topk,
    union_tables,
)


class TestBuildTable:
    def test_rows_are_normalized(self, rng):
        t = build_table(["a", "b"], rng.normal(size=(2, 4)) * 7.0)
        np.testing.assert_allclose(np.linalg.norm(t.vectors, axis=1), 1.0, atol=1e-12)

    def test_normalization_is_idempotent(self, rng):
        t = build_table(["a", "b", "c"], rng.normal(size=(3, 8)))
        again = build_table(t.names, t.vectors)
        np.testing.assert_allclose(again.vectors, t.vectors, atol=1e-7)

    def test_vectors_are_read_only(self, rng):
        t = build_table(["a"], rng.normal(size=(1, 4)))
        with pytest.raises(ValueError):
            t.vectors[0, 0] = 5.0

    def test_case_folded_duplicate_rejected(self, rng):
        with pytest.raises(DuplicateName):
            build_table(["Cat", "cat"], rng.normal(size=(2, 4)))

    def test_zero_norm_row_rejected(self):
        with pytest.raises(ZeroNormRow):
            build_table(["a", "b"], [[1.0, 0.0], [0.0, 0.0]])

    def test_non_finite_rejected(self):
        with pytest.raises(NonFiniteValue):
            build_table(["a"], [[np.nan, 1.0]])

    def test_count_mismatch_rejected(self, rng):
        with pytest.raises(DimensionMismatch):
            build_table(["a", "b", "c"], rng.normal(size=(2, 4)))

    def test_ragged_input_rejected(self):
        with pytest.raises(DimensionMismatch):
            build_table(["a", "b"], [[1.0, 0.0], [1.0]])

    def test_lookup_and_membership(self, rng):
        t = build_table(["a", "b"], rng.normal(size=(2, 4)))
        assert t.index_of("b") == 1
        assert "a" in t and "z" not in t
        with pytest.raises(UnknownName):
            t.index_of("z")


class TestSearch:
    def test_topk_matches_full_sort_oracle(self, rng):
        for _ in range(25):
            count = int(rng.integers(2, 60))
            dim = int(rng.integers(2, 16))
            k = int(rng.integers(1, count + 1))
            t = random_table(rng, count, dim)
            q = rng.normal(size=dim)
            got = topk(t, q, k)
            assert got.indices.tolist() == oracle_topk(t.vectors, q, k, largest=True)

    def test_bottomk_matches_full_sort_oracle(self, rng):
        for _ in range(25):
            count = int(rng.integers(2, 60))
            dim = int(rng.integers(2, 16))
            k = int(rng.integers(1, count + 1))
            t = random_table(rng, count, dim)
            q = rng.normal(size=dim)
            got = bottomk(t, q, k)
            assert got.indices.tolist() == oracle_topk(t.vectors, q, k, largest=False)

    def test_exact_match_row_is_top1_with_unit_score(self, rng):
        t = random_table(rng, 10, 6)
        res = topk(t, t.vectors[3], 1)
        assert res.indices[0] == 3
        assert res.scores[0] == pytest.approx(1.0, abs=1e-12)

    def test_ties_break_by_ascending_index(self):
        # two identical rows: both have the same score against any query
        t = build_table(["a", "b", "c"], [[1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
        res = topk(t, [0.0, 1.0], 2)
        assert res.indices.tolist() == [1, 2]
        res = bottomk(t, [0.0, -1.0], 2)
        assert res.indices.tolist() == [1, 2]

    def test_query_is_normalized_before_scoring(self, rng):
        t = random_table(rng, 8, 5)
        q = rng.normal(size=5)
        a = topk(t, q, 8)
        b = topk(t, 10.0 * q, 8)
        assert a.indices.tolist() == b.indices.tolist()
        np.testing.assert_allclose(a.scores, b.scores, atol=1e-12)

    def test_k_of_count_returns_permutation(self, rng):
        t = random_table(rng, 12, 4)
        res = topk(t, rng.normal(size=4), 12)
        assert sorted(res.indices.tolist()) == list(range(12))
        assert all(res.scores[i] >= res.scores[i + 1] for i in range(11))

    def test_k_too_large_rejected(self, rng):
        t = random_table(rng, 3, 4)
        with pytest.raises(KTooLarge):
            topk(t, rng.normal(size=4), 4)

    def test_bad_k_rejected(self, rng):
        t = random_table(rng, 3, 4)
        with pytest.raises(ValueError):
            topk(t, rng.normal(size=4), 0)

    def test_zero_norm_query_rejected(self, rng):
        t = random_table(rng, 3, 4)
        with pytest.raises(ZeroNormQuery):
            topk(t, np.zeros(4), 1)

    def test_query_dim_mismatch_rejected(self, rng):
        t = random_table(rng, 3, 4)
        with pytest.raises(DimensionMismatch):
            topk(t, rng.normal(size=5), 1)

    @given(seed=st.integers(0, 2**32 - 1), k=st.integers(1, 20))
    @settings(max_examples=40, deadline=None)
    def test_bottomk_equals_topk_of_negated_query(self, seed, k):
        r = np.random.default_rng(seed)
        count = int(r.integers(k, 40))
        t = random_table(r, count, 6)
        q = r.normal(size=6)
        lo = bottomk(t, q, k)
        hi = topk(t, -q, k)
        assert lo.indices.tolist() == hi.indices.tolist()
        np.testing.assert_allclose(lo.scores, -hi.scores, atol=1e-12)

    @given(seed=st.integers(0, 2**32 - 1))
    @settings(max_examples=40, deadline=None)
    def test_topk_scores_descend_and_indices_unique(self, seed):
        r = np.random.default_rng(seed)
        count = int(r.integers(2, 50))
        k = int(r.integers(1, count + 1))
        t = random_table(r, count, 5)
        res = topk(t, r.normal(size=5), k)
        assert len(set(res.indices.tolist())) == k
        assert all(res.scores[i] >= res.scores[i + 1] for i in range(k - 1))


class TestCombinators:
    def test_subset_preserves_order_and_rows(self, rng):
        t = random_table(rng, 10, 4)
        s = subset(t, [7, 2, 5])
        assert s.names == (t.names[7], t.names[2], t.names[5])
        np.testing.assert_array_equal(s.vectors, t.vectors[[7, 2, 5]])

    def test_union_keeps_first_on_case_collision(self, rng):
        a = build_table(["Cat", "dog"], rng.normal(size=(2, 4)))
        b = build_table(["cat", "fox"], rng.normal(size=(2, 4)))
        u = union_tables(a, b)
        assert u.names == ("Cat", "dog", "fox")
        np.testing.assert_array_equal(u.vectors[0], a.vectors[0])

    def test_union_dim_mismatch_rejected(self, rng):
        a = build_table(["a"], rng.normal(size=(1, 4)))
        b = build_table(["b"], rng.normal(size=(1, 5)))
        with pytest.raises(DimensionMismatch):
            union_tables(a, b)


class TestPersistence:
    def test_save_load_round_trip(self, tmp_path, rng):
        t = random_table(rng, 9, 7)
        save_table(tmp_path / "t.bin", t)
        warnings: list[str] = []
        back = load_table(tmp_path / "t.bin", warnings)
        assert warnings == []
        assert back.names == t.names
        # f32 round trip then renormalization: tiny drift allowed
        np.testing.assert_allclose(back.vectors, t.vectors, atol=1e-6)
        np.testing.assert_allclose(np.linalg.norm(back.vectors, axis=1), 1.0, atol=1e-12)

    def test_load_warns_on_denormalized_rows(self, tmp_path, rng):
        from retaug import tableio

        rows = unit_rows(rng, 3, 5)
        rows[1] *= 1.01  # 1% off unit norm, beyond the 1e-4 warning tolerance
        tableio.write_matrix(tmp_path / "t.bin", ["a", "b", "c"], rows)
        warnings: list[str] = []
        t = load_table(tmp_path / "t.bin", warnings)
        assert len(warnings) == 1 and "row 1" in warnings[0]
        np.testing.assert_allclose(np.linalg.norm(t.vectors, axis=1), 1.0, atol=1e-12)
