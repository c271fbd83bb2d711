import itertools

import numpy as np
import pytest

from ordbm.corpus import RatingScale, RatingStore
from ordbm.features import FeatureScheme
from ordbm.inference import predict_meanfield, predict_table, rank_items
from ordbm.joint_bm import (JointModelParams, alternating_train, clamped_field, joint_meanfield_energies,
                            joint_negative_energy, predict_joint_table, rank_items_joint, row_posteriors,
                            structured_pl_exact)
from ordbm.learning import TrainConfig, sgd_train
from ordbm.user_bm import ColdStartError, UserModelParams, hidden_posterior

from oracles import log_marginal

ORD = FeatureScheme("ordinal")


def dense_store(rng, U, I, n=5, drop=0.0):
    mask = rng.random((U, I)) >= drop
    mask[:, 0] = True
    uu, ii = np.nonzero(mask)
    return RatingStore(uu, ii, rng.integers(1, n + 1, len(uu)), np.arange(U), np.arange(I), RatingScale.integer(n))


def random_joint(rng, U, I, d, dp, scale=0.5, scheme=ORD):
    a = UserModelParams(rng.normal(0, scale, d), rng.normal(0, scale, (I, scheme.A)),
                        rng.normal(0, scale, (I, d, scheme.A)), np.zeros((0, 2), np.int64), np.zeros((0, 1)))
    b = UserModelParams(rng.normal(0, scale, dp), rng.normal(0, scale, (U, scheme.A)),
                        rng.normal(0, scale, (U, dp, scheme.A)), np.zeros((0, 2), np.int64), np.zeros((0, 1)))
    return JointModelParams(a, b)


def test_zero_item_side_field_is_zero():
    rng = np.random.default_rng(0)
    store = dense_store(rng, 6, 5, drop=0.3)
    cols = store.transpose()
    side = UserModelParams.zeros(store.n_users, 3, ORD)
    f = clamped_field(side, ORD, cols, row_posteriors(side, ORD, cols))
    assert f.shape == (store.n_ratings, 5) and np.all(f == 0.0)


def test_clamped_field_matches_energy_difference():
    """Field of a column equals the change in its negative energy at soft hidden units."""
    rng = np.random.default_rng(1)
    store = dense_store(rng, 5, 4, drop=0.2)
    joint = random_joint(rng, 5, 4, 2, 2)
    cols = store.transpose()
    q = row_posteriors(joint.item_side, ORD, cols)
    f = clamped_field(joint.item_side, ORD, cols, q)
    from ordbm.user_bm import negative_energy
    for r in range(store.n_ratings):
        i = store.items[r]
        users, levels = cols.user_row(i)
        k = int(np.flatnonzero(users == store.users[r])[0])
        vals = []
        for s in range(1, 6):
            lv = levels.copy()
            lv[k] = s
            vals.append(negative_energy(joint.item_side, ORD, users, lv, q[i]))
        vals = np.array(vals)
        assert np.allclose(f[r] - f[r][0], vals - vals[0], atol=1e-12)


def test_joint_energy_sums_sides():
    rng = np.random.default_rng(2)
    store = dense_store(rng, 3, 3)
    joint = random_joint(rng, 3, 3, 2, 2)
    hu, hi = rng.integers(0, 2, (3, 2)), rng.integers(0, 2, (3, 2))
    from ordbm.user_bm import negative_energy
    cols = store.transpose()
    want = sum(negative_energy(joint.user_side, ORD, *store.user_row(u), hu[u]) for u in range(3))
    want += sum(negative_energy(joint.item_side, ORD, *cols.user_row(i), hi[i]) for i in range(3))
    assert joint_negative_energy(joint, ORD, store, hu, hi) == pytest.approx(want, abs=1e-12)
    with pytest.raises(IndexError):
        joint_negative_energy(joint, ORD, store, hu[:2], hi)


def test_structured_pl_oracle():
    """Row and column blocks scored against an enumeration of the full joint marginal."""
    rng = np.random.default_rng(3)
    store = dense_store(rng, 2, 2)
    joint = random_joint(rng, 2, 2, 1, 1)
    cols = store.transpose()

    def free(levels):
        s = RatingStore(store.users, store.items, levels, store.user_ids, store.item_ids, store.scale)
        c = s.transpose()
        return (sum(log_marginal(joint.user_side, "ordinal", 5, *s.user_row(u)) for u in range(2))
                + sum(log_marginal(joint.item_side, "ordinal", 5, *c.user_row(i)) for i in range(2)))

    def block(idx):
        scores = {}
        for cfg in itertools.product(range(1, 6), repeat=len(idx)):
            lv = store.levels.copy()
            lv[idx] = cfg
            scores[cfg] = free(lv)
        from scipy.special import logsumexp
        return scores[tuple(store.levels[idx])] - logsumexp(list(scores.values()))

    want = 0.5 * (sum(block(store.user_rating_index(u)) for u in range(2))
                  + sum(block(store.item_rating_index(i)) for i in range(2)))
    assert structured_pl_exact(joint, ORD, store) == pytest.approx(want, abs=1e-10)
    del cols


def test_user_only_reduction_bitwise():
    rng = np.random.default_rng(4)
    store = dense_store(rng, 25, 10, drop=0.4)
    for method in ("cd", "pl"):
        cfg = TrainConfig(method=method, max_epochs=3, seed=7, block_size=6)
        a = sgd_train(cfg, store, ORD, d=4)
        j = alternating_train(cfg, store, ORD, d=4, d_prime=0, update_items=False)
        for x, y in zip(a.arrays(), j.user_side.arrays()):
            assert np.array_equal(x, y)


def test_zero_item_side_predictions_match_user_model():
    rng = np.random.default_rng(5)
    store = dense_store(rng, 8, 6, drop=0.3)
    joint = random_joint(rng, 8, 6, 3, 2)
    joint.item_side = UserModelParams.zeros(8, 2, ORD)
    for u in range(8):
        items, levels = store.user_row(u)
        for j in range(6):
            if len(items[items != j]) and len(store.transpose().user_row(j)[0]) > 1:
                e = joint_meanfield_energies(joint, ORD, store, u, j)
                p = predict_meanfield(joint.user_side, ORD, items, levels, j)
                assert np.allclose(np.exp(-e) / np.exp(-e).sum(), p.per_level, atol=1e-12)
    jt = predict_joint_table(joint, ORD, store, store)
    ut = predict_table(joint.user_side, ORD, store, store)
    assert np.allclose(jt.expected, ut.expected, atol=1e-12)


def test_joint_ranking_reduces_to_user_ranking():
    rng = np.random.default_rng(6)
    store = dense_store(rng, 6, 8, drop=0.5)
    joint = random_joint(rng, 6, 8, 3, 2)
    joint.item_side = UserModelParams.zeros(6, 2, ORD)
    u = 0
    items, levels = store.user_row(u)
    cand = [j for j in range(8) if j not in items.tolist() and len(store.transpose().user_row(j)[0])]
    a = rank_items_joint(joint, ORD, store, u, cand)
    b = rank_items(joint.user_side, ORD, items, levels, cand)
    assert a.items() == b.items()


def test_cold_start_raises():
    rng = np.random.default_rng(7)
    store = dense_store(rng, 3, 3)
    joint = random_joint(rng, 3, 3, 2, 2)
    with pytest.raises(ColdStartError):
        joint_meanfield_energies(joint, ORD, store, 5, 0)


def test_alternation_callback_and_history():
    rng = np.random.default_rng(8)
    store = dense_store(rng, 10, 6, drop=0.3)
    seen, hist = [], []
    alternating_train(TrainConfig(max_epochs=3), store, ORD, d=2, d_prime=2, history=hist,
                      on_alternation=lambda k, j: seen.append(k))
    assert seen == [1, 2, 3] and [h.epoch for h in hist] == [1, 2, 3]


def test_alternating_deterministic():
    rng = np.random.default_rng(9)
    store = dense_store(rng, 10, 6, drop=0.3)
    cfg = TrainConfig(max_epochs=2, seed=3)
    a = alternating_train(cfg, store, ORD, d=2, d_prime=2)
    b = alternating_train(cfg, store, ORD, d=2, d_prime=2)
    for x, y in zip(a.user_side.arrays() + a.item_side.arrays(), b.user_side.arrays() + b.item_side.arrays()):
        assert np.array_equal(x, y)


def test_posteriors_match_rowwise():
    rng = np.random.default_rng(10)
    store = dense_store(rng, 4, 5, drop=0.3)
    joint = random_joint(rng, 4, 5, 3, 2)
    q = row_posteriors(joint.user_side, ORD, store)
    for u in range(4):
        assert np.array_equal(q[u], hidden_posterior(joint.user_side, ORD, *store.user_row(u)).probs)


def test_joint_meanfield_mostly_matches_enumeration():
    """New rating (u, j): exact P(r_uj | rest) from the row and column marginals of the joint model."""
    from ordbm.joint_bm import _system_free
    agree = 0
    for seed in range(50):
        rng = np.random.default_rng(100 + seed)
        store = dense_store(rng, 3, 3)
        keep = ~((store.users == 0) & (store.items == 0))
        store = RatingStore(store.users[keep], store.items[keep], store.levels[keep], store.user_ids,
                            store.item_ids, store.scale)
        joint = random_joint(rng, 3, 3, 2, 2, scale=0.5)
        joint.user_side.gamma *= 0.2
        joint.item_side.gamma *= 0.2
        scores = []
        for s in range(1, 6):
            ext = RatingStore(np.append(store.users, 0), np.append(store.items, 0), np.append(store.levels, s),
                              store.user_ids, store.item_ids, store.scale)
            scores.append(_system_free(joint, ORD, ext, ext.levels))
        e = joint_meanfield_energies(joint, ORD, store, 0, 0)
        agree += int(np.argmin(e)) == int(np.argmax(scores))
    assert agree >= 40
