"""Prediction and ranking metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class RankingUtilityConfig:
    half_life: float = 5.0

    def __post_init__(self):
        if not self.half_life > 1:
            raise ValueError("half_life must exceed 1")


def mae(predicted, truth) -> float:
    predicted = np.asarray(predicted, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if predicted.shape != truth.shape:
        raise ShapeError(f"length mismatch: {predicted.shape} vs {truth.shape}")
    if predicted.size == 0:
        raise ShapeError("mae needs at least one pair")
    return float(np.mean(np.abs(predicted - truth)))


def precision_recall_at_n(recommended, relevant, n: int):
    """``(precision, recall)`` of the top ``n`` recommendations.

    Precision divides by ``min(n, len(recommended))``. Either entry is ``None``
    when undefined (empty list, empty relevant set) and should be left out of
    averages.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    relevant = set(relevant)
    top = list(recommended)[:n]
    hits = sum(1 for i in top if i in relevant)
    precision = hits / len(top) if top else None
    recall = hits / len(relevant) if relevant else None
    return precision, recall


def _decay(positions, half_life: float) -> np.ndarray:
    return 2.0 ** (-(np.asarray(positions, dtype=float) - 1.0) / (half_life - 1.0))


def user_utility(recommended, test_items, half_life: float = 5.0) -> tuple[float, float]:
    """``(pi_u, pi_u_max)``: decayed credit of test items found in the list, and
    the credit had they filled the top ``|test_items|`` slots."""
    test = set(test_items)
    hits = [p for p, i in enumerate(recommended, start=1) if i in test]
    return float(_decay(hits, half_life).sum()), float(_decay(np.arange(1, len(test) + 1), half_life).sum())


def ranking_utility(per_user_recs: dict, per_user_test_sets: dict, half_life: float = 5.0) -> float:
    """Normalised half-life utility in percent over all users with test items."""
    RankingUtilityConfig(half_life)
    num = den = 0.0
    for u, test in per_user_test_sets.items():
        if not test:
            continue
        got, best = user_utility(per_user_recs.get(u, []), test, half_life)
        num += got
        den += best
    if den == 0.0:
        raise ValueError("no user has a non-empty test set")
    return 100.0 * num / den


def ranking_curves(per_user_recs: dict, per_user_test_sets: dict, ns, half_life: float = 5.0) -> list[dict]:
    """Mean precision, mean recall and utility of the lists cut at each N."""
    rows = []
    for n in ns:
        ps, rs = [], []
        cut = {u: list(r)[:n] for u, r in per_user_recs.items()}
        for u, test in per_user_test_sets.items():
            p, r = precision_recall_at_n(cut.get(u, []), test, n)
            if p is not None and r is not None:
                ps.append(p)
                rs.append(r)
        rows.append({"n": n,
                     "precision": float(np.mean(ps)) if ps else float("nan"),
                     "recall": float(np.mean(rs)) if rs else float("nan"),
                     "utility": ranking_utility(cut, per_user_test_sets, half_life)})
    return rows


def curves_csv(rows: list[dict]) -> str:
    lines = ["n,precision,recall,utility"]
    lines += [f"{r['n']},{r['precision']:.6f},{r['recall']:.6f},{r['utility']:.6f}" for r in rows]
    return "\n".join(lines) + "\n"
