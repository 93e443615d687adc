"""Index construction, top-k queries, positives and Recall@k."""

import numpy as np
import pytest

from otagg import (
    Descriptor,
    GeoTag,
    PreconditionError,
    UsageError,
    ValidationError,
    build_index,
    is_positive,
    query_topk,
    recall_at_k,
)
from otagg.synth import oracle_topk


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def random_unit_rows(count, dim, seed):
    rng = np.random.default_rng(seed)
    m = rng.standard_normal((count, dim))
    return m / np.linalg.norm(m, axis=1, keepdims=True)


class TestBuildIndex:
    def test_three_entries(self):
        m = random_unit_rows(3, 4, 0)
        idx = build_index(m, ["a", "b", "c"])
        assert idx.size == 3 and idx.dim == 4

    def test_duplicate_id_rejected(self):
        m = random_unit_rows(2, 4, 0)
        with pytest.raises(ValidationError):
            build_index(m, ["a", "a"])

    def test_empty_rejected(self):
        with pytest.raises(PreconditionError):
            build_index([], [])

    def test_non_unit_rejected(self):
        m = random_unit_rows(2, 4, 0)
        m[1] *= 1.001
        with pytest.raises(ValidationError):
            build_index(m, ["a", "b"])

    def test_matrix_is_frozen(self):
        idx = build_index(random_unit_rows(2, 4, 0), ["a", "b"])
        with pytest.raises(ValueError):
            idx.matrix[0, 0] = 1.0


class TestQueryTopk:
    def test_exact_match_ranks_first(self):
        m = random_unit_rows(5, 8, 1)
        idx = build_index(m, list("abcde"))
        hits = query_topk(idx, m[2], k=3)
        assert hits[0][0] == "c"
        assert hits[0][1] == pytest.approx(1.0, abs=1e-6)

    def test_k_larger_than_index(self):
        m = random_unit_rows(3, 4, 2)
        idx = build_index(m, list("abc"))
        assert len(query_topk(idx, m[0], k=10)) == 3

    def test_matches_full_sort_oracle(self):
        refs = random_unit_rows(20, 6, 3)
        ids = [f"r{i:03d}" for i in range(20)]
        idx = build_index(refs, ids)
        queries = random_unit_rows(50, 6, 4)
        for q in queries:
            got = query_topk(idx, q, k=7)
            want = oracle_topk(refs, ids, q, 7)
            assert [g[0] for g in got] == [w[0] for w in want]
            np.testing.assert_allclose([g[1] for g in got], [w[1] for w in want], rtol=1e-12)

    def test_ties_break_by_ascending_id(self):
        row = unit([1.0, 1.0])
        m = np.stack([row, row, row])
        idx = build_index(m, ["zeta", "alpha", "mid"])
        hits = query_topk(idx, row, k=3)
        assert [h[0] for h in hits] == ["alpha", "mid", "zeta"]

    def test_k_must_be_positive(self):
        idx = build_index(random_unit_rows(2, 3, 5), ["a", "b"])
        with pytest.raises(PreconditionError):
            query_topk(idx, unit([1, 0, 0]), k=0)


class TestIsPositive:
    def test_planar_strictly_below_25m(self):
        origin = GeoTag.planar(0.0, 0.0)
        assert is_positive(origin, GeoTag.planar(24.9, 0.0))
        assert not is_positive(origin, GeoTag.planar(25.0, 0.0))

    def test_frame_within_two(self):
        assert is_positive(GeoTag.at_frame(10), GeoTag.at_frame(12))
        assert not is_positive(GeoTag.at_frame(10), GeoTag.at_frame(13))

    def test_symmetry(self):
        a, b = GeoTag.planar(3.0, 4.0), GeoTag.planar(10.0, -2.0)
        assert is_positive(a, b) == is_positive(b, a)
        f, g = GeoTag.at_frame(4), GeoTag.at_frame(6)
        assert is_positive(f, g) == is_positive(g, f)

    def test_mixed_variants_rejected(self):
        with pytest.raises(UsageError):
            is_positive(GeoTag.planar(0, 0), GeoTag.at_frame(1))

    def test_mode_mismatch_rejected(self):
        with pytest.raises(UsageError):
            is_positive(GeoTag.planar(0, 0), GeoTag.planar(1, 1), mode="frame")


def planted_setup(seed, n_refs=40, n_queries=10, dim=6):
    """Queries colocated with one reference each; descriptors near-duplicates."""
    rng = np.random.default_rng(seed)
    refs = random_unit_rows(n_refs, dim, seed)
    ref_ids = [f"r{i:03d}" for i in range(n_refs)]
    ref_tags = [GeoTag.planar(1000.0 * i, 0.0) for i in range(n_refs)]
    queries = []
    for qi in range(n_queries):
        target = int(rng.integers(0, n_refs))
        noise = rng.standard_normal(dim) * 0.05
        qv = unit(refs[target] + noise)
        queries.append(
            (Descriptor(values=qv, id=f"q{qi:03d}"), GeoTag.planar(1000.0 * target + 3.0, 0.0))
        )
    return refs, ref_ids, ref_tags, queries


class TestRecallAtK:
    def test_all_positives_at_rank_one(self):
        refs, ref_ids, ref_tags, _ = planted_setup(0)
        idx = build_index(refs, ref_ids, ref_tags)
        queries = [
            (Descriptor(values=refs[i], id=f"q{i}"), ref_tags[i]) for i in range(5)
        ]
        report = recall_at_k(idx, queries, ks=[1, 5])
        assert report.recalls[1] == 1.0
        assert report.recalls[5] == 1.0
        assert report.evaluated == 5 and report.excluded == 0

    def test_two_queries_ranks_one_and_three(self):
        # three orthogonal refs; query B's positive sits at rank 3
        refs = np.eye(3)
        tags = [GeoTag.planar(0, 0), GeoTag.planar(1000, 0), GeoTag.planar(2000, 0)]
        idx = build_index(refs, ["a", "b", "c"], tags)
        q1 = (Descriptor(values=unit([1.0, 0.1, 0.1]), id="q1"), GeoTag.planar(1.0, 0))
        q2 = (Descriptor(values=unit([0.3, 0.2, 0.1]), id="q2"), GeoTag.planar(2001.0, 0))
        report = recall_at_k(idx, [q1, q2], ks=[1, 5])
        assert report.recalls[1] == 0.5
        assert report.recalls[5] == 1.0

    def test_queries_without_positive_are_excluded(self):
        refs = np.eye(2)
        tags = [GeoTag.planar(0, 0), GeoTag.planar(1000, 0)]
        idx = build_index(refs, ["a", "b"], tags)
        queries = [
            (Descriptor(values=unit([1, 0.2]), id="q1"), GeoTag.planar(3.0, 0)),
            (Descriptor(values=unit([1, 0.1]), id="q2"), GeoTag.planar(5e6, 0)),
        ]
        report = recall_at_k(idx, queries, ks=[1])
        assert report.evaluated == 1 and report.excluded == 1
        assert report.recalls[1] == 1.0

    def test_reference_sharing_query_id_is_ignored(self):
        refs = np.eye(2)
        tags = [GeoTag.planar(0, 0), GeoTag.planar(10.0, 0)]
        idx = build_index(refs, ["same", "other"], tags)
        # the identical-id reference would be the rank-1 hit; it must not count
        q = (Descriptor(values=refs[0], id="same"), GeoTag.planar(0.0, 0))
        report = recall_at_k(idx, [q], ks=[1])
        assert report.recalls[1] == 1.0  # "other" at 10 m is still a positive

    def test_monotone_in_k_and_matches_bruteforce(self):
        for seed in range(5):
            refs, ref_ids, ref_tags, queries = planted_setup(seed + 10)
            idx = build_index(refs, ref_ids, ref_tags)
            ks = [1, 2, 5, 10, 40]
            report = recall_at_k(idx, queries, ks)
            values = [report.recalls[k] for k in ks]
            assert all(a <= b + 1e-15 for a, b in zip(values, values[1:]))
            # independent full-scan computation
            for k in ks:
                hit = 0
                total = 0
                for desc, tag in queries:
                    positives = {
                        rid
                        for rid, rtag in zip(ref_ids, ref_tags)
                        if rid != desc.id and is_positive(tag, rtag)
                    }
                    if not positives:
                        continue
                    total += 1
                    ranked = oracle_topk(refs, ref_ids, desc.values, len(ref_ids))
                    ranked = [r for r, _ in ranked if r != desc.id][:k]
                    if any(r in positives for r in ranked):
                        hit += 1
                assert report.recalls[k] == pytest.approx(hit / total)

    def test_frame_mode(self):
        refs = np.eye(3)
        tags = [GeoTag.at_frame(0), GeoTag.at_frame(2), GeoTag.at_frame(50)]
        idx = build_index(refs, ["a", "b", "c"], tags)
        q = (Descriptor(values=unit([1, 0.5, 0.2]), id="q"), GeoTag.at_frame(1))
        report = recall_at_k(idx, [q], ks=[1, 2])
        assert report.recalls[1] == 1.0

    def test_empty_queries_rejected(self):
        idx = build_index(np.eye(2), ["a", "b"])
        with pytest.raises(PreconditionError):
            recall_at_k(idx, [], ks=[1])

    def test_report_lines_sorted_ascending(self):
        refs, ref_ids, ref_tags, queries = planted_setup(2)
        idx = build_index(refs, ref_ids, ref_tags)
        report = recall_at_k(idx, queries, ks=[10, 1, 5])
        lines = report.lines()
        assert [ln.split(":")[0] for ln in lines] == ["R@1", "R@5", "R@10"]
        for ln in lines:
            float(ln.split(": ")[1])  # 4-decimal values parse
