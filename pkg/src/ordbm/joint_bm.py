"""Joint user-item Boltzmann machine.

Every rating belongs to two rows at once: its user's row (user-side
parameters over items) and its item's column (item-side parameters over
users). The item side is just the user-centric model on the transposed store,
so both sides share :class:`~ordbm.user_bm.UserModelParams`.

Training alternates. While one side is updated, the other side's hidden units
are clamped to their posterior probabilities, which turns its whole
contribution into a fixed per-rating field (see :func:`clamped_field`). The
updating side then runs one epoch of the ordinary user-centric learner.

Gaussian ratings keep a single quadratic base term per rating, so the
conditional mean is the sum of both sides' mean contributions.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .corpus import RatingStore
from .features import FeatureScheme
from .learning import DivergenceError, EpochRecord, RowLearner, TrainConfig
from .user_bm import (ColdStartError, Tables, UserModelParams, hidden_posterior, make_view,
                      negative_energy)

ItemModelParams = UserModelParams


@dataclass(eq=False)
class JointModelParams:
    """``user_side`` rows are users over items; ``item_side`` rows are items over
    users. ``item_side`` may be ``None`` (plain user-centric model)."""

    user_side: UserModelParams
    item_side: ItemModelParams | None = None

    def copy(self) -> "JointModelParams":
        return JointModelParams(self.user_side.copy(),
                                None if self.item_side is None else self.item_side.copy())


def row_posteriors(params: UserModelParams, scheme: FeatureScheme, rows: RatingStore) -> np.ndarray:
    """(n_rows, d) hidden posteriors of every row of ``rows``; zeros for empty rows."""
    out = np.zeros((rows.n_users, params.d))
    for u in np.flatnonzero(rows.user_counts()).tolist():
        out[u] = hidden_posterior(params, scheme, *rows.user_row(u)).probs
    return out


def clamped_field(params: UserModelParams, scheme: FeatureScheme, rows: RatingStore,
                  posteriors: np.ndarray) -> np.ndarray:
    """Contribution of one side to every rating with its hidden units clamped.

    Returns ``(R, n)`` log-potentials indexed by rating index (``(R,)`` mean
    offsets for Gaussian ratings): unary biases, soft-hidden couplings and the
    correlation terms to the other observed ratings of the same row.
    """
    R = rows.n_ratings
    out = np.zeros(R) if scheme.is_gaussian else np.zeros((R, scheme.n_levels))
    for u in np.flatnonzero(rows.user_counts()).tolist():
        idx = rows.user_rating_index(u)
        view = make_view(params, rows.items[idx], rows.levels[idx])
        q = posteriors[u]
        if scheme.is_gaussian:
            x = scheme.level_values[view.levels - 1]
            mu = params.beta[view.items, 0] + params.gamma[view.items, :, 0] @ q
            e = view.local_edges
            if len(e):
                lam = params.lam[view.edge_ids, 0]
                np.add.at(mu, e[:, 0], lam * x[e[:, 1]])
                np.add.at(mu, e[:, 1], lam * x[e[:, 0]])
            out[idx] = mu
        else:
            t = Tables(params, scheme, view)
            out[idx] = (t.unary + np.einsum("k,iks->is", q, t.coupling)
                        + t.pair_logits(view.levels - 1))
    return out


def joint_negative_energy(joint: JointModelParams, scheme: FeatureScheme, store: RatingStore,
                          user_hidden, item_hidden) -> float:
    """Sum of every user row's and every item column's negative energy."""
    user_hidden = np.asarray(user_hidden, dtype=float)
    item_hidden = np.asarray(item_hidden, dtype=float)
    if user_hidden.shape != (store.n_users, joint.user_side.d):
        raise IndexError("user_hidden must be (n_users, d)")
    total = 0.0
    for u in np.flatnonzero(store.user_counts()).tolist():
        total += negative_energy(joint.user_side, scheme, *store.user_row(u), user_hidden[u])
    if joint.item_side is not None:
        if item_hidden.shape != (store.n_items, joint.item_side.d):
            raise IndexError("item_hidden must be (n_items, d_prime)")
        cols = store.transpose()
        for i in np.flatnonzero(cols.user_counts()).tolist():
            total += negative_energy(joint.item_side, scheme, *cols.user_row(i), item_hidden[i])
    return total


def _row_free(params, scheme, items, levels) -> float:
    """log sum_h exp(-E) of one row (hidden layer summed out)."""
    view = make_view(params, items, levels)
    t = Tables(params, scheme, view)
    l0 = view.levels - 1
    return float(t.unary[np.arange(view.n), l0].sum() + t.pair_energy(l0)
                 + np.logaddexp(0.0, t.hidden_act(l0)).sum())


def _system_free(joint, scheme, store, levels) -> float:
    s = RatingStore(store.users, store.items, levels, store.user_ids, store.item_ids, store.scale)
    total = sum(_row_free(joint.user_side, scheme, *s.user_row(u))
                for u in np.flatnonzero(s.user_counts()).tolist())
    if joint.item_side is not None:
        cols = s.transpose()
        total += sum(_row_free(joint.item_side, scheme, *cols.user_row(i))
                     for i in np.flatnonzero(cols.user_counts()).tolist())
    return total


def structured_pl_exact(joint: JointModelParams, scheme: FeatureScheme, store: RatingStore,
                        max_configs: int = 5000) -> float:
    """Structured pseudo-likelihood by enumeration (toy stores only).

    1/2 (sum_u log P(row u | rest) + sum_i log P(column i | rest)), with all
    hidden units of the joint model summed out exactly.
    """
    if scheme.is_gaussian:
        raise ValueError("the exact structured PL is defined for discrete schemes")
    n = scheme.n_levels
    base = store.levels.copy()

    def block_logp(idx: np.ndarray) -> float:
        if n ** len(idx) > max_configs:
            raise ValueError("row too long for exact enumeration")
        scores = []
        for cfg in np.indices((n,) * len(idx)).reshape(len(idx), -1).T:
            lv = base.copy()
            lv[idx] = cfg + 1
            scores.append(_system_free(joint, scheme, store, lv))
        scores = np.array(scores)
        own = int(np.ravel_multi_index(tuple(base[idx] - 1), (n,) * len(idx)))
        return float(scores[own] - logsumexp(scores))

    total = sum(block_logp(store.user_rating_index(u))
                for u in np.flatnonzero(store.user_counts()).tolist())
    total += sum(block_logp(store.item_rating_index(i))
                 for i in np.flatnonzero(store.item_counts()).tolist())
    return 0.5 * total


def _known_row(rows: RatingStore, r: int, what: str):
    if r < 0 or r >= rows.n_users or rows.user_ptr[r + 1] == rows.user_ptr[r]:
        raise ColdStartError(f"{what} {r} has no training ratings")
    return rows.user_row(r)


def _drop(items, levels, target):
    keep = items != target
    return items[keep], levels[keep]


def joint_meanfield_energies(joint: JointModelParams, scheme: FeatureScheme, store: RatingStore,
                             u: int, j: int, cols: RatingStore | None = None) -> np.ndarray:
    """(n,) mean-field energies of a new rating node (u, j) for every level.

    ``cols`` may pass a cached ``store.transpose()``.
    """
    return _joint_energies(joint, scheme, store, cols if cols is not None else store.transpose(), u, np.array([j]))[0]


def _joint_energies(joint, scheme, store, cols, u: int, targets: np.ndarray) -> np.ndarray:
    from .inference import meanfield_energies

    items, levels = _known_row(store, u, "user")
    keep = ~np.isin(items, targets)
    items, levels = items[keep], levels[keep]
    if not len(items) or not joint.user_side.seen[targets].all():
        raise ColdStartError(f"user {u} or one of items {targets.tolist()} unknown to the model")
    energy = meanfield_energies(joint.user_side, scheme, items, levels, targets)
    if joint.item_side is not None:
        if not joint.item_side.seen[u]:
            raise ColdStartError(f"user {u} unknown to the item-side model")
        for k, j in enumerate(targets.tolist()):
            users, ulevels = _drop(*_known_row(cols, j, "item"), u)
            if not len(users):
                raise ColdStartError(f"item {j} has no other raters")
            energy[k] += meanfield_energies(joint.item_side, scheme, users, ulevels, [u])[0]
    return energy


def joint_meanfield_energy(joint, scheme, store, u: int, j: int, level: int) -> float:
    return float(joint_meanfield_energies(joint, scheme, store, u, j)[level - 1])


def joint_gaussian_mean(joint, scheme, store, u: int, j: int, cols: RatingStore | None = None) -> float:
    from .inference import gaussian_means

    items, levels = _drop(*_known_row(store, u, "user"), j)
    if not len(items) or not joint.user_side.seen[j]:
        raise ColdStartError(f"item {j} unknown to the user-side model")
    mu = float(gaussian_means(joint.user_side, scheme, items, levels, [j])[0])
    if joint.item_side is not None:
        users, ulevels = _drop(*_known_row(cols if cols is not None else store.transpose(), j, "item"), u)
        if not len(users) or not joint.item_side.seen[u]:
            raise ColdStartError(f"user {u} unknown to the item-side model")
        mu += float(gaussian_means(joint.item_side, scheme, users, ulevels, [u])[0])
    return mu


def predict_joint_table(joint, scheme, train: RatingStore, test: RatingStore):
    """Joint mean-field predictions for every test pair (cold pairs skipped).

    Each user's targets are scored in one pass, as the user-centric table does,
    so a zero item side reproduces it bit-for-bit.
    """
    from .inference import _prediction, _softmax_rows, gaussian_prediction, table_from_rows

    cols = train.transpose()
    rows, n_cold = [], 0
    values = np.arange(1, scheme.n_levels + 1, dtype=float)

    def one(u, j):
        if scheme.is_gaussian:
            return gaussian_prediction(joint_gaussian_mean(joint, scheme, train, u, j, cols), scheme)
        return _prediction(_softmax_rows(-_joint_energies(joint, scheme, train, cols, u, np.array([j]))[0]), values)

    for u in np.unique(test.users).tolist():
        t_items, t_levels = test.user_row(u)
        preds = None
        if not scheme.is_gaussian:
            try:
                per = _softmax_rows(-_joint_energies(joint, scheme, train, cols, u, t_items))
                preds = [_prediction(q, values) for q in per]
            except ColdStartError:
                preds = None
        for k, (j, s) in enumerate(zip(t_items.tolist(), t_levels.tolist())):
            if preds is not None:
                p = preds[k]
            else:
                try:
                    p = one(u, j)
                except ColdStartError:
                    n_cold += 1
                    continue
            rows.append((u, j, s, p.level, p.expected_value, p.confidence))
    return table_from_rows(rows, n_cold)


def alternating_train(config: TrainConfig, store: RatingStore, scheme: FeatureScheme,
                      user_graph=None, item_graph=None, d: int = 20, d_prime: int = 20,
                      init: JointModelParams | None = None, update_items: bool = True,
                      validation: RatingStore | None = None, history: list | None = None,
                      on_alternation=None, readout: str = "expected") -> JointModelParams:
    """Alternate user-side and item-side epochs for ``config.max_epochs`` rounds.

    ``item_graph`` supplies the item pairs of the user side's correlation
    weights; ``user_graph`` the user pairs of the item side's (usually left
    out for user-heavy data). ``on_alternation(k, joint)`` runs after each
    round. Validation MAE early-stops as in :func:`ordbm.learning.sgd_train`.
    """
    rng_u = np.random.default_rng(config.seed)
    rng_i = np.random.default_rng([config.seed, 1])
    cols = store.transpose()
    if init is None:
        lam_edges = item_graph.pairs() if item_graph is not None else None
        omega_edges = user_graph.pairs() if user_graph is not None else None
        user_side = UserModelParams.initial(store.n_items, d, scheme, lam_edges, config.init_sigma, rng_u)
        item_side = UserModelParams.initial(store.n_users, d_prime, scheme, omega_edges,
                                            config.init_sigma, rng_i)
        joint = JointModelParams(user_side, item_side)
    else:
        joint = init
    ulearn = RowLearner(joint.user_side, scheme, store, config, rng_u)
    ilearn = RowLearner(joint.item_side, scheme, cols, config, rng_i)

    best, best_mae, stale = None, np.inf, 0
    for k in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        q_items = row_posteriors(joint.item_side, scheme, cols)
        field_u = clamped_field(joint.item_side, scheme, cols, q_items)
        ulearn.epoch(field_u)
        if not joint.user_side.all_finite():
            raise DivergenceError(k, "user-side parameters")
        if update_items:
            q_users = row_posteriors(joint.user_side, scheme, store)
            field_i = clamped_field(joint.user_side, scheme, store, q_users)
            ilearn.epoch(field_i)
            if not joint.item_side.all_finite():
                raise DivergenceError(k, "item-side parameters")
        if on_alternation is not None:
            on_alternation(k, joint)
        obj = ulearn.objective_estimate(clamped_field(joint.item_side, scheme, cols,
                                                      row_posteriors(joint.item_side, scheme, cols)))
        mae = np.nan
        if validation is not None and validation.n_ratings:
            table = predict_joint_table(joint, scheme, store, validation)
            mae = float(np.mean(np.abs(table.readout(readout) - table.truth)))
        rec = EpochRecord(k, obj, mae, time.perf_counter() - t0)
        if history is not None:
            history.append(rec)
        if validation is not None:
            if mae < best_mae - 1e-9:
                best, best_mae, stale = joint.copy(), mae, 0
            else:
                stale += 1
                if stale >= config.patience:
                    break
    return best if best is not None else joint


def rank_items_joint(joint: JointModelParams, scheme: FeatureScheme, store: RatingStore, u: int,
                     candidates, cols: RatingStore | None = None):
    """Candidates by expected joint mean-field energy, lowest first, ties by id."""
    from .inference import RankedList, _softmax_rows

    cand = np.array(sorted(candidates), dtype=np.int64)
    if len(cand) == 0:
        raise ValueError("no candidates to rank")
    if scheme.is_gaussian:
        raise ValueError("energy ranking is defined for discrete schemes")
    energy = _joint_energies(joint, scheme, store, cols if cols is not None else store.transpose(), u, cand)
    score = (_softmax_rows(-energy) * energy).sum(axis=1)
    order = np.lexsort((cand, score))
    return RankedList([(int(cand[k]), float(score[k])) for k in order])
