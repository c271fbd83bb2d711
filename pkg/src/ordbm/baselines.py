"""Comparison systems: SGD matrix factorisation and neighbourhood popularity."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .corpus import RatingStore
from .inference import RankedList
from .learning import DivergenceError
from .user_bm import ColdStartError


@dataclass(eq=False)
class SvdFactors:
    user_factors: np.ndarray
    item_factors: np.ndarray
    global_mean: float
    n_levels: int = 5
    seen_users: np.ndarray = None
    seen_items: np.ndarray = None

    def __post_init__(self):
        if self.user_factors.shape[1] != self.item_factors.shape[1] or self.user_factors.shape[1] < 1:
            raise ValueError("factor matrices need a common rank >= 1")
        if self.seen_users is None:
            self.seen_users = np.ones(len(self.user_factors), dtype=bool)
        if self.seen_items is None:
            self.seen_items = np.ones(len(self.item_factors), dtype=bool)

    @property
    def rank(self) -> int:
        return self.user_factors.shape[1]


@njit(cache=True)
def _sgd_epoch(P, Q, users, items, values, order, mu, lr, l2):
    sq = 0.0
    rank = P.shape[1]
    for t in range(len(order)):
        k = order[t]
        u = users[k]
        i = items[k]
        pred = mu
        for f in range(rank):
            pred += P[u, f] * Q[i, f]
        err = values[k] - pred
        sq += err * err
        for f in range(rank):
            pu = P[u, f]
            qi = Q[i, f]
            P[u, f] += lr * (err * qi - l2 * pu)
            Q[i, f] += lr * (err * pu - l2 * qi)
    return sq


def svd_objective(factors: SvdFactors, store: RatingStore, l2: float) -> float:
    """Squared error on ``store`` plus the L2 penalty of every observed pair."""
    u, i = store.users, store.items
    err = store.levels - factors.global_mean - np.einsum(
        "rk,rk->r", factors.user_factors[u], factors.item_factors[i])
    pen = (factors.user_factors[u] ** 2).sum(axis=1) + (factors.item_factors[i] ** 2).sum(axis=1)
    return float((err ** 2).sum() + l2 * pen.sum())


def svd_train(store: RatingStore, rank: int = 20, learning_rate: float = 0.005, epochs: int = 100,
              l2: float = 0.02, seed: int = 0, history: list | None = None) -> SvdFactors:
    """Factorise ``levels - mean`` as ``P Q^T`` by SGD over observed entries.

    Ratings are visited in a fresh seeded permutation every epoch. ``history``
    collects the per-epoch training RMSE (measured during the pass).
    """
    if rank < 1:
        raise ValueError("rank must be >= 1")
    rng = np.random.default_rng(seed)
    values = store.levels.astype(float)
    mu = float(values.mean())
    P = rng.normal(0.0, 0.01, size=(store.n_users, rank))
    Q = rng.normal(0.0, 0.01, size=(store.n_items, rank))
    for epoch in range(1, epochs + 1):
        order = rng.permutation(store.n_ratings)
        sq = _sgd_epoch(P, Q, store.users, store.items, values, order, mu, learning_rate, l2)
        if not (np.isfinite(sq) and np.all(np.isfinite(P)) and np.all(np.isfinite(Q))):
            raise DivergenceError(epoch, "SVD factors")
        if history is not None:
            history.append(float(np.sqrt(sq / max(store.n_ratings, 1))))
    seen_u = np.zeros(store.n_users, dtype=bool)
    seen_u[store.users] = True
    seen_i = np.zeros(store.n_items, dtype=bool)
    seen_i[store.items] = True
    return SvdFactors(P, Q, mu, store.scale.n_levels, seen_u, seen_i)


def svd_predict(factors: SvdFactors, u: int, i: int) -> float:
    if not (0 <= u < len(factors.user_factors) and factors.seen_users[u]):
        raise ColdStartError(f"user {u} not in the factor model")
    if not (0 <= i < len(factors.item_factors) and factors.seen_items[i]):
        raise ColdStartError(f"item {i} not in the factor model")
    raw = factors.global_mean + float(factors.user_factors[u] @ factors.item_factors[i])
    return float(np.clip(raw, 1.0, factors.n_levels))


def svd_predict_many(factors: SvdFactors, users: np.ndarray, items: np.ndarray) -> np.ndarray:
    raw = factors.global_mean + np.einsum("rk,rk->r", factors.user_factors[users], factors.item_factors[items])
    return np.clip(raw, 1.0, factors.n_levels)


def popularity_rank(store: RatingStore, user_graph, u: int, candidates, n_similar: int = 50) -> RankedList:
    """Candidates by how many of ``u``'s top neighbours rated them (most first)."""
    counts: dict = {int(c): 0 for c in candidates}
    for v in user_graph.neighbors[u][0][:n_similar].tolist():
        for i in store.user_row(v)[0].tolist():
            if i in counts:
                counts[i] += 1
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return RankedList([(i, float(c)) for i, c in ranked])
