"""Rating prediction and item ranking for trained models.

A prediction attaches one new rating node for item ``j`` to the user's
observed ratings. :func:`predict_map_exact` sums the hidden units out exactly
(given the observed ratings the graph is a tree rooted at the new node).
:func:`predict_meanfield` replaces each hidden unit by its posterior
probability. :func:`rank_items` orders candidates by the posterior-weighted
mean of the mean-field energy, lowest first.

If ``j`` is already among the conditioning ratings it is left out of them, so
predicting a training pair gives a leave-one-out estimate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logsumexp

from .corpus import RatingStore
from .features import FeatureScheme
from .user_bm import ColdStartError, UserModelParams, _gather_ranges

READOUTS = ("expected", "map")


@dataclass(frozen=True)
class Prediction:
    level: int
    confidence: float
    expected_value: float
    per_level: np.ndarray


@dataclass(frozen=True)
class RankedList:
    entries: list

    def items(self) -> list:
        return [i for i, _ in self.entries]

    def __len__(self) -> int:
        return len(self.entries)


def _as_arrays(items, levels):
    return np.asarray(items, dtype=np.int64), np.asarray(levels, dtype=np.int64)


def _check_targets(params: UserModelParams, items: np.ndarray, targets: np.ndarray) -> None:
    if len(items) == 0:
        raise ColdStartError("user has no observed ratings")
    bad = (targets < 0) | (targets >= params.n_rows)
    if not bad.any():
        bad = ~params.seen[targets]
    if bad.any():
        raise ColdStartError(f"item {int(targets[bad][0])} has no trained parameters")


def _pair_field(params, scheme, items, levels, targets) -> np.ndarray:
    """(T, n): correlation log-potentials from observed neighbours of each target."""
    T, n = len(targets), scheme.n_levels
    out = np.zeros((T, n))
    if not len(params.edges) or not len(items):
        return out
    ptr, nbr, eid = params.adjacency
    pos = np.full(params.n_rows, -1, dtype=np.int64)
    pos[items] = np.arange(len(items))
    owner, idx = _gather_ranges(ptr, targets)
    local = pos[nbr[idx]]
    keep = local >= 0
    owner, local, e = owner[keep], local[keep], eid[idx][keep]
    if len(e):
        # P[r_i, s] for each contributing neighbour, weighted by its lambda
        contrib = np.einsum("esb,eb->es", scheme.pair_table[levels[local] - 1], params.lam[e])
        np.add.at(out, owner, contrib)
    return out


def _drop_targets(items, levels, target):
    keep = items != target
    return items[keep], levels[keep]


def meanfield_energies(params: UserModelParams, scheme: FeatureScheme, items, levels, targets,
                       field=None) -> np.ndarray:
    """(T, n) mean-field energies E_Q(r_j = s) for each target item ``j``.

    Targets must not be among ``items``.
    """
    items, levels = _as_arrays(items, levels)
    targets = np.asarray(targets, dtype=np.int64)
    F = scheme.unary_table
    coupling = params.gamma[items] @ F.T
    q = expit(params.alpha + coupling[np.arange(len(items)), :, levels - 1].sum(axis=0))
    neg = (params.beta[targets] @ F.T
           + np.einsum("k,tka,sa->ts", q, params.gamma[targets], F)
           + _pair_field(params, scheme, items, levels, targets))
    if field is not None:
        neg = neg + field
    return -neg


def exact_log_mass(params: UserModelParams, scheme: FeatureScheme, items, levels, targets,
                   field=None) -> np.ndarray:
    """(T, n) unnormalised log P(r_j = s | ratings), hidden units summed out."""
    items, levels = _as_arrays(items, levels)
    targets = np.asarray(targets, dtype=np.int64)
    F = scheme.unary_table
    coupling = params.gamma[items] @ F.T
    act = params.alpha + coupling[np.arange(len(items)), :, levels - 1].sum(axis=0)
    new = params.gamma[targets] @ F.T                     # (T, d, n)
    out = (params.beta[targets] @ F.T
           + _pair_field(params, scheme, items, levels, targets)
           + np.logaddexp(0.0, act[None, :, None] + new).sum(axis=1))
    if field is not None:
        out = out + field
    return out


def _prediction(per_level: np.ndarray, level_values: np.ndarray) -> Prediction:
    level = int(np.argmax(per_level)) + 1
    return Prediction(level, float(per_level[level - 1]), float(per_level @ level_values), per_level)


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    return np.exp(logits - logsumexp(logits, axis=-1, keepdims=True))


def predict_map_exact(params, scheme, items, levels, j: int) -> Prediction:
    if scheme.is_gaussian:
        raise ValueError("exact MAP prediction is defined for discrete schemes")
    items, levels = _drop_targets(*_as_arrays(items, levels), j)
    _check_targets(params, items, np.array([j]))
    per = _softmax_rows(exact_log_mass(params, scheme, items, levels, [j])[0])
    return _prediction(per, np.arange(1, scheme.n_levels + 1, dtype=float))


def gaussian_means(params, scheme, items, levels, targets, offset=None) -> np.ndarray:
    """Normalized conditional means of the targets under soft hidden units."""
    items, levels = _as_arrays(items, levels)
    targets = np.asarray(targets, dtype=np.int64)
    x = scheme.level_values[levels - 1]
    q = expit(params.alpha + x @ params.gamma[items, :, 0])
    mu = params.beta[targets, 0] + params.gamma[targets, :, 0] @ q
    if len(params.edges):
        ptr, nbr, eid = params.adjacency
        pos = np.full(params.n_rows, -1, dtype=np.int64)
        pos[items] = np.arange(len(items))
        owner, idx = _gather_ranges(ptr, targets)
        local = pos[nbr[idx]]
        keep = local >= 0
        np.add.at(mu, owner[keep], params.lam[eid[idx][keep], 0] * x[local[keep]])
    if offset is not None:
        mu = mu + offset
    return mu


def gaussian_prediction(mu: float, scheme: FeatureScheme) -> Prediction:
    n = scheme.n_levels
    value = float(scheme.normalizer.inverse(mu, n))
    logits = -0.5 * (scheme.level_values - mu) ** 2
    per = _softmax_rows(logits)
    level = int(np.clip(np.floor(value + 0.5), 1, n))
    return Prediction(level, float(per[level - 1]), value, per)


def predict_meanfield(params, scheme, items, levels, j: int) -> Prediction:
    items, levels = _drop_targets(*_as_arrays(items, levels), j)
    _check_targets(params, items, np.array([j]))
    if scheme.is_gaussian:
        return gaussian_prediction(float(gaussian_means(params, scheme, items, levels, [j])[0]), scheme)
    per = _softmax_rows(-meanfield_energies(params, scheme, items, levels, [j])[0])
    return _prediction(per, np.arange(1, scheme.n_levels + 1, dtype=float))


def predict_user_batch(params, scheme, items, levels, targets, method: str = "meanfield") -> list:
    """Predictions for several targets of one user in one vectorized pass."""
    items, levels = _as_arrays(items, levels)
    targets = np.asarray(targets, dtype=np.int64)
    if np.isin(targets, items).any():
        return [(predict_meanfield if method == "meanfield" else predict_map_exact)(
            params, scheme, items, levels, int(j)) for j in targets]
    _check_targets(params, items, targets)
    if scheme.is_gaussian:
        return [gaussian_prediction(m, scheme) for m in gaussian_means(params, scheme, items, levels, targets)]
    if method == "meanfield":
        per = _softmax_rows(-meanfield_energies(params, scheme, items, levels, targets))
    elif method == "exact":
        per = _softmax_rows(exact_log_mass(params, scheme, items, levels, targets))
    else:
        raise ValueError(f"unknown method {method!r}")
    values = np.arange(1, scheme.n_levels + 1, dtype=float)
    return [_prediction(p, values) for p in per]


@dataclass(frozen=True)
class PredictionTable:
    users: np.ndarray
    items: np.ndarray
    truth: np.ndarray
    map_level: np.ndarray
    expected: np.ndarray
    confidence: np.ndarray
    n_cold_start: int

    def readout(self, kind: str) -> np.ndarray:
        if kind not in READOUTS:
            raise ValueError(f"readout must be one of {READOUTS}")
        return self.expected if kind == "expected" else self.map_level.astype(float)

    def to_csv(self, user_ids=None, item_ids=None) -> str:
        lines = ["user,item,true_level,map_level,expected,confidence"]
        for u, i, t, m, e, c in zip(self.users.tolist(), self.items.tolist(), self.truth.tolist(),
                                    self.map_level.tolist(), self.expected.tolist(),
                                    self.confidence.tolist()):
            uu = u if user_ids is None else user_ids[u]
            ii = i if item_ids is None else item_ids[i]
            lines.append(f"{uu},{ii},{t},{m},{e:.6f},{c:.6f}")
        return "\n".join(lines) + "\n"


def table_from_rows(rows: list, n_cold: int) -> PredictionTable:
    cols = list(zip(*rows)) if rows else [[]] * 6
    return PredictionTable(np.array(cols[0], dtype=np.int64), np.array(cols[1], dtype=np.int64),
                           np.array(cols[2], dtype=np.int64), np.array(cols[3], dtype=np.int64),
                           np.array(cols[4], dtype=float), np.array(cols[5], dtype=float), n_cold)


def predict_table(params, scheme, train: RatingStore, test: RatingStore,
                  method: str = "meanfield") -> PredictionTable:
    """Predict every test pair from the user's training ratings.

    Pairs whose user or item is unknown to the model are counted in
    ``n_cold_start`` and left out.
    """
    rows, n_cold = [], 0
    for u in np.unique(test.users).tolist():
        items, levels = train.user_row(u) if u < train.n_users else (np.zeros(0, int), np.zeros(0, int))
        t_items, t_levels = test.user_row(u)
        ok = (t_items < params.n_rows)
        ok[ok] = params.seen[t_items[ok]]
        if len(items) == 0:
            ok[:] = False
        n_cold += int((~ok).sum())
        if not ok.any():
            continue
        preds = predict_user_batch(params, scheme, items, levels, t_items[ok], method)
        for j, s, p in zip(t_items[ok].tolist(), t_levels[ok].tolist(), preds):
            rows.append((u, j, s, p.level, p.expected_value, p.confidence))
    return table_from_rows(rows, n_cold)


def predict_store(params, scheme, train, test, readout: str = "expected", method: str = "meanfield"):
    """``(predictions, truth)`` arrays over the predictable test pairs."""
    table = predict_table(params, scheme, train, test, method)
    return table.readout(readout), table.truth.astype(float)


def candidate_items(store: RatingStore, user_graph, u: int, n_similar: int = 50) -> set:
    """Items rated by ``u``'s most similar users that ``u`` has not rated."""
    nbrs, _ = user_graph.neighbors[u]
    out: set = set()
    for v in nbrs[:n_similar].tolist():
        out.update(store.user_row(v)[0].tolist())
    return out - set(store.user_row(u)[0].tolist())


def expected_energy(params, scheme, items, levels, candidates) -> np.ndarray:
    """Sum_s Q(r_j = s) E_Q(r_j = s) for each candidate ``j``."""
    energy = meanfield_energies(params, scheme, items, levels, candidates)
    return (_softmax_rows(-energy) * energy).sum(axis=1)


def rank_items(params, scheme, items, levels, candidates, descending: bool = False) -> RankedList:
    """Candidates by expected energy, lowest first unless ``descending``."""
    cand = np.array(sorted(candidates), dtype=np.int64)
    if len(cand) == 0:
        raise ValueError("no candidates to rank")
    items, levels = _as_arrays(items, levels)
    _check_targets(params, items, cand)
    score = expected_energy(params, scheme, items, levels, cand)
    order = np.lexsort((cand, -score if descending else score))
    return RankedList([(int(cand[k]), float(score[k])) for k in order])


def predict_joint(joint, scheme, store: RatingStore, u: int, j: int) -> Prediction:
    """Mean-field prediction of rating (u, j) under the joint user-item model."""
    from .joint_bm import joint_meanfield_energies, joint_gaussian_mean

    if scheme.is_gaussian:
        return gaussian_prediction(joint_gaussian_mean(joint, scheme, store, u, j), scheme)
    per = _softmax_rows(-joint_meanfield_energies(joint, scheme, store, u, j))
    return _prediction(per, np.arange(1, scheme.n_levels + 1, dtype=float))
