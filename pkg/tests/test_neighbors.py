import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ordbm.corpus import from_raw
from ordbm.neighbors import NeighborGraph, build_topk, correlation_matrix, pearson


def store_from_matrix(m):
    """Dense matrix with 0 = unrated; rows are users."""
    rows = [(str(u), str(i), int(v)) for u, row in enumerate(m) for i, v in enumerate(row) if v]
    return from_raw([r[0] for r in rows], [r[1] for r in rows], [r[2] for r in rows])


def exact_key(x, y):
    """sign(r) * r^2 as an exact fraction, or None when undefined."""
    n = len(x)
    sa, sb = sum(x), sum(y)
    num = n * sum(a * b for a, b in zip(x, y)) - sa * sb
    va = n * sum(a * a for a in x) - sa * sa
    vb = n * sum(b * b for b in y) - sb * sb
    if va == 0 or vb == 0:
        return None
    return Fraction(num * abs(num), va * vb)


def brute_topk(m, k_top, min_overlap):
    m = np.asarray(m)
    out = []
    for a in range(len(m)):
        cands = []
        for b in range(len(m)):
            if a == b:
                continue
            both = (m[a] > 0) & (m[b] > 0)
            if both.sum() < min_overlap:
                continue
            key = exact_key(m[a, both].tolist(), m[b, both].tolist())
            if key is not None and key > 0:
                cands.append((-key, b))
        out.append([b for _, b in sorted(cands)[:k_top]])
    return out


def test_identical_users():
    s = store_from_matrix([[1, 2, 3, 4, 5], [1, 2, 3, 4, 5]])
    assert pearson(s, "user", 0, 1) == pytest.approx(1.0, abs=1e-12)


def test_anti_correlated():
    s = store_from_matrix([[1, 2, 3], [3, 2, 1]])
    assert pearson(s, "user", 0, 1) == pytest.approx(-1.0, abs=1e-12)


def test_hand_value():
    # 5 / sqrt(30): deviations (-1.5,-.5,.5,1.5) and (-1,-1,0,2)
    s = store_from_matrix([[1, 2, 3, 4], [2, 2, 3, 5]])
    assert pearson(s, "user", 0, 1) == pytest.approx(5 / math.sqrt(30), abs=1e-12)
    assert pearson(s, "user", 0, 1) == pytest.approx(0.912871, abs=1e-6)


def test_absent_cases():
    s = store_from_matrix([[1, 2, 0, 0], [2, 3, 0, 0], [3, 3, 3, 3], [1, 2, 4, 5]])
    assert pearson(s, "user", 0, 1) is None            # overlap 2 < 3
    assert pearson(s, "user", 2, 3) is None            # constant on overlap
    with pytest.raises(ValueError):
        pearson(s, "user", 1, 1)
    with pytest.raises(ValueError):
        pearson(s, "user", 0, 1, min_overlap=1)


def test_item_axis_uses_columns():
    s = store_from_matrix([[1, 1], [2, 2], [3, 4]])
    assert pearson(s, "item", 0, 1) == pytest.approx(pearson(s.transpose(), "user", 0, 1))


def test_singleton_best_neighbour():
    m = [[1, 2, 3, 4, 5], [1, 2, 3, 4, 5], [1, 2, 3, 5, 4], [5, 4, 3, 2, 1]]
    g = build_topk(store_from_matrix(m), "user", k_top=1)
    assert g.neighbors[0][0].tolist() == [1]
    assert g.neighbors[3][0].tolist() == []


def test_all_negative_gives_empty_lists():
    g = build_topk(store_from_matrix([[1, 2, 3], [3, 2, 1]]), "user", 5)
    assert all(len(ids) == 0 for ids, _ in g.neighbors)
    assert len(g.pairs()) == 0


def test_ten_entities_match_brute_force():
    m = np.random.default_rng(7).integers(0, 6, size=(10, 12))
    g = build_topk(store_from_matrix(m), "user", k_top=3)
    assert [ids.tolist() for ids, _ in g.neighbors] == brute_topk(m, 3, 3)


@given(st.lists(st.lists(st.integers(0, 5), min_size=6, max_size=6), min_size=2, max_size=9),
       st.integers(1, 4), st.integers(2, 4))
def test_topk_matches_brute_force(rows, k_top, min_overlap):
    m = np.array(rows)
    m[:, 0] = np.maximum(m[:, 0], 1)  # every user keeps one rating
    g = build_topk(store_from_matrix(m), "user", k_top, min_overlap)
    assert [ids.tolist() for ids, _ in g.neighbors] == brute_topk(m, k_top, min_overlap)
    for e, (ids, corr) in enumerate(g.neighbors):
        assert e not in ids.tolist()
        assert np.all(corr > 0) and np.all(np.diff(corr) <= 1e-12)


@given(st.lists(st.lists(st.integers(0, 5), min_size=5, max_size=5), min_size=3, max_size=7))
def test_pearson_symmetric_bounded_and_matrix_agrees(rows):
    m = np.array(rows)
    m[:, 0] = np.maximum(m[:, 0], 1)
    s = store_from_matrix(m)
    corr, valid = correlation_matrix(s, "user")
    for a in range(s.n_users):
        for b in range(s.n_users):
            if a == b:
                continue
            r = pearson(s, "user", a, b)
            assert (r is None) == (not valid[a, b])
            if r is not None:
                assert abs(r - pearson(s, "user", b, a)) <= 1e-12
                assert abs(r) <= 1 + 1e-12
                assert abs(r - corr[a, b]) <= 1e-9


def test_csv_round_trip():
    m = np.random.default_rng(3).integers(0, 6, size=(8, 10))
    s = store_from_matrix(m)
    g = build_topk(s, "user", 3)
    back = NeighborGraph.from_csv(g.to_csv(s.user_ids), s.n_users, 3, 3, s.user_ids)
    assert back.to_csv(s.user_ids) == g.to_csv(s.user_ids)
    assert np.array_equal(back.pairs(), g.pairs())


def test_pairs_unique_and_ordered():
    m = np.random.default_rng(5).integers(0, 6, size=(9, 10))
    p = build_topk(store_from_matrix(m), "user", 4).pairs()
    assert np.all(p[:, 0] < p[:, 1])
    assert len({tuple(r) for r in p.tolist()}) == len(p)
