import numpy as np
import pytest
from hypothesis import given, strategies as st

from ordbm.corpus import RatingStore
from ordbm.features import FeatureScheme, GaussianNormalizer
from ordbm.inference import (PredictionTable, expected_energy, gaussian_prediction, meanfield_energies,
                             predict_map_exact, predict_meanfield, predict_store, predict_table,
                             predict_user_batch, rank_items)
from ordbm.user_bm import ColdStartError, UserModelParams

from oracles import random_model, random_row, target_distribution, weak_coupling_model

ORD = FeatureScheme("ordinal")


@given(st.integers(0, 2**32 - 1), st.sampled_from(["categorical", "ordinal"]))
def test_exact_matches_enumeration(seed, kind):
    rng = np.random.default_rng(seed)
    p, sch = random_model(rng, kind, n_rows=6, d=3, scale=1.0, edge_prob=0.6)
    items, levels = random_row(rng, 6, 4)
    j = int(rng.choice(np.setdiff1d(np.arange(6), items)))
    got = predict_map_exact(p, sch, items, levels, j)
    want = target_distribution(p, kind, 5, items, levels, j)
    assert np.max(np.abs(got.per_level - want)) <= 1e-12
    assert got.level == int(np.argmax(want)) + 1
    assert got.expected_value == pytest.approx(want @ np.arange(1, 6), abs=1e-12)


@given(st.integers(0, 2**32 - 1))
def test_meanfield_exact_without_coupling(seed):
    rng = np.random.default_rng(seed)
    p, sch = random_model(rng, "ordinal", n_rows=6, d=3, scale=1.0, gamma_zero=True)
    items, levels = random_row(rng, 6, 3)
    j = int(np.setdiff1d(np.arange(6), items)[0])
    a = predict_meanfield(p, sch, items, levels, j).per_level
    b = predict_map_exact(p, sch, items, levels, j).per_level
    assert np.max(np.abs(a - b)) <= 1e-12


def test_meanfield_map_mostly_agrees():
    rng = np.random.default_rng(0)
    agree = 0
    for _ in range(200):
        p, sch = weak_coupling_model(rng, "ordinal")
        items, levels = random_row(rng, 6, 4)
        j = int(rng.choice(np.setdiff1d(np.arange(6), items)))
        agree += predict_meanfield(p, sch, items, levels, j).level == predict_map_exact(p, sch, items, levels, j).level
    assert agree >= 180


def test_strong_negative_correlation_pulls_level():
    p = UserModelParams.zeros(3, 2, ORD, [(0, 2)])
    p.lam[0, 0] = -20.0
    assert predict_map_exact(p, ORD, [0], [4], 2).level == 4
    assert predict_meanfield(p, ORD, [0], [4], 2).level == 4


def test_zero_model_uniform():
    p = UserModelParams.zeros(3, 2, ORD)
    a = predict_map_exact(p, ORD, [0], [4], 2)
    assert a.level == 1 and a.confidence == pytest.approx(0.2)
    assert predict_meanfield(p, ORD, [0], [4], 2).expected_value == pytest.approx(3.0)


def test_leave_one_out_when_target_rated():
    rng = np.random.default_rng(1)
    p, sch = random_model(rng, "ordinal", n_rows=6)
    items, levels = np.array([0, 2, 4]), np.array([5, 1, 3])
    a = predict_meanfield(p, sch, items, levels, 2)
    b = predict_meanfield(p, sch, items[[0, 2]], levels[[0, 2]], 2)
    assert np.array_equal(a.per_level, b.per_level)
    c = predict_user_batch(p, sch, items, levels, [2, 1])
    assert np.array_equal(c[0].per_level, a.per_level)


def test_cold_start():
    rng = np.random.default_rng(2)
    p, sch = random_model(rng, "ordinal", n_rows=6)
    p.seen[5] = False
    with pytest.raises(ColdStartError):
        predict_meanfield(p, sch, [0, 1], [3, 3], 5)
    with pytest.raises(ColdStartError):
        predict_meanfield(p, sch, [0, 1], [3, 3], 9)
    with pytest.raises(ColdStartError):
        predict_meanfield(p, sch, [], [], 2)
    with pytest.raises(ColdStartError):
        predict_meanfield(p, sch, [2], [3], 2)


def test_batch_equals_single():
    rng = np.random.default_rng(3)
    p, sch = random_model(rng, "categorical", n_rows=8)
    items, levels = random_row(rng, 8, 4)
    targets = np.setdiff1d(np.arange(8), items)
    batch = predict_user_batch(p, sch, items, levels, targets)
    for j, b in zip(targets.tolist(), batch):
        assert np.allclose(b.per_level, predict_meanfield(p, sch, items, levels, j).per_level, atol=1e-14)


def test_rank_by_expected_energy():
    rng = np.random.default_rng(4)
    p, sch = random_model(rng, "ordinal", n_rows=10)
    items, levels = random_row(rng, 10, 4)
    cand = np.setdiff1d(np.arange(10), items)
    e = meanfield_energies(p, sch, items, levels, cand)
    q = np.exp(-e) / np.exp(-e).sum(axis=1, keepdims=True)
    score = (q * e).sum(axis=1)
    assert np.allclose(expected_energy(p, sch, items, levels, cand), score)
    ranked = rank_items(p, sch, items, levels, set(cand.tolist()))
    assert ranked.items() == cand[np.argsort(score, kind="stable")].tolist()
    assert [s for _, s in ranked.entries] == sorted(s for _, s in ranked.entries)
    down = rank_items(p, sch, items, levels, cand, descending=True)
    assert down.items() == cand[np.argsort(-score, kind="stable")].tolist()


def test_rank_ties_by_id():
    p = UserModelParams.zeros(6, 2, ORD)
    r = rank_items(p, ORD, [0], [3], {5, 1, 3, 2})
    assert r.items() == [1, 2, 3, 5]
    with pytest.raises(ValueError):
        rank_items(p, ORD, [0], [3], set())


def test_gaussian_prediction_readout():
    sch = FeatureScheme("gaussian", 5, GaussianNormalizer(3.0, 1.0))
    p = gaussian_prediction(0.6, sch)
    assert p.expected_value == pytest.approx(3.6)
    assert p.level == 4
    assert p.per_level.sum() == pytest.approx(1.0)
    assert gaussian_prediction(10.0, sch).expected_value == 5.0
    assert gaussian_prediction(-10.0, sch).level == 1


def test_gaussian_conditional_mean():
    sch = FeatureScheme("gaussian", 5, GaussianNormalizer(3.0, 1.0))
    p = UserModelParams.zeros(3, 1, sch, [(0, 2)])
    p.beta[2, 0] = 0.5
    p.lam[0, 0] = 0.25
    # mean = beta + gamma q + lambda x_neighbour; gamma is zero
    pred = predict_meanfield(p, sch, [0], [5], 2)
    assert pred.expected_value == pytest.approx(3.0 + 0.5 + 0.25 * 2.0)


def _tiny_stores():
    train = RatingStore(np.array([0, 0, 1, 1]), np.array([0, 1, 1, 2]), np.array([4, 2, 5, 3]),
                        np.array(["a", "b"], dtype=object), np.array(["x", "y", "z", "w"], dtype=object))
    test = RatingStore(np.array([0, 0, 1]), np.array([2, 3, 0]), np.array([1, 1, 2]),
                       train.user_ids, train.item_ids)
    return train, test


def test_prediction_table_and_cold_count():
    train, test = _tiny_stores()
    p = UserModelParams.zeros(4, 2, ORD)
    p.seen[3] = False
    table = predict_table(p, ORD, train, test)
    assert table.n_cold_start == 1
    assert table.items.tolist() == [2, 0]
    assert np.allclose(table.expected, 3.0)
    csv = table.to_csv(train.user_ids, train.item_ids).splitlines()
    assert csv[0] == "user,item,true_level,map_level,expected,confidence"
    assert csv[1].startswith("a,z,1,")
    pred, truth = predict_store(p, ORD, train, test, readout="map")
    assert truth.tolist() == [1.0, 2.0]
    with pytest.raises(ValueError):
        table.readout("median")
    assert isinstance(table, PredictionTable)


@given(st.integers(0, 2**32 - 1), st.floats(-3, 3), st.sampled_from(["categorical", "ordinal"]))
def test_rank_invariant_to_level_independent_bias_shift(seed, c, kind):
    """Shifting every item bias along a direction v with F v = 1 moves all energies of all
    candidates by the same -c, so the ranking is unchanged. For the categorical scheme
    v is the all-ones vector, a uniform translation of beta."""
    rng = np.random.default_rng(seed)
    p, sch = random_model(rng, kind, n_rows=8, d=3, scale=1.0)
    items, levels = random_row(rng, 8, 3)
    cand = set(np.setdiff1d(np.arange(8), items).tolist())
    v = np.ones(sch.A) if kind == "categorical" else np.linalg.lstsq(sch.unary_table, np.ones(5), rcond=None)[0]
    assert np.allclose(sch.unary_table @ v, 1.0)
    q = p.copy()
    q.beta += c * v
    a, b = rank_items(p, sch, items, levels, cand), rank_items(q, sch, items, levels, cand)
    sa, sb = np.array([s for _, s in a.entries]), np.array([s for _, s in b.entries])
    assert a.items() == b.items() or np.min(np.abs(np.diff(sa))) < 1e-9
    assert np.allclose(sb, sa - c, atol=1e-9)
