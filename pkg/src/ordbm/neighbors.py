"""Pearson neighbourhoods along the user or item axis.

The graph decides which input-layer pairs get correlation weights: each entity
keeps its ``k_top`` most positively correlated partners.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .corpus import RatingStore

AXES = ("user", "item")


def _rows(store: RatingStore, axis: str) -> RatingStore:
    if axis not in AXES:
        raise ValueError(f"axis must be one of {AXES}")
    return store if axis == "user" else store.transpose()


def pearson(store: RatingStore, axis: str, a: int, b: int, min_overlap: int = 3) -> float | None:
    """Pearson correlation of two users (or two items) over their co-rated set.

    Returns ``None`` when fewer than ``min_overlap`` co-ratings exist or either
    side is constant on the overlap.
    """
    if a == b:
        raise ValueError("pearson needs two distinct entities")
    if min_overlap < 2:
        raise ValueError("min_overlap must be at least 2")
    rows = _rows(store, axis)
    ia, la = rows.user_row(a)
    ib, lb = rows.user_row(b)
    common, ka, kb = np.intersect1d(ia, ib, assume_unique=True, return_indices=True)
    if len(common) < min_overlap:
        return None
    x = la[ka].astype(float)
    y = lb[kb].astype(float)
    x -= x.mean()
    y -= y.mean()
    sxx, syy = float(x @ x), float(y @ y)
    if sxx == 0.0 or syy == 0.0:
        return None
    return float(x @ y) / np.sqrt(sxx * syy)


@dataclass(frozen=True, eq=False)
class NeighborGraph:
    """Top-K positively correlated neighbour lists for one axis.

    ``neighbors[e]`` is an ``(ids, corr)`` pair of arrays sorted by correlation
    descending, ties by lower id.
    """

    axis: str
    k_top: int
    min_overlap: int
    neighbors: tuple

    def __len__(self) -> int:
        return len(self.neighbors)

    def of(self, e: int) -> list[tuple[int, float]]:
        ids, corr = self.neighbors[e]
        return list(zip(ids.tolist(), corr.tolist()))

    def pairs(self) -> np.ndarray:
        """Unordered edges ``(i, j)`` with ``i < j``, sorted, one row per pair."""
        src = [np.full(len(ids), e, dtype=np.int64) for e, (ids, _) in enumerate(self.neighbors)]
        if not src:
            return np.zeros((0, 2), dtype=np.int64)
        a = np.concatenate(src)
        b = np.concatenate([ids for ids, _ in self.neighbors]).astype(np.int64)
        if len(a) == 0:
            return np.zeros((0, 2), dtype=np.int64)
        lo, hi = np.minimum(a, b), np.maximum(a, b)
        return np.unique(np.stack([lo, hi], axis=1), axis=0)

    def to_csv(self, ids: np.ndarray | None = None) -> str:
        """``axis,id,neighbor,corr`` rows; ``ids`` maps dense indices to raw ids."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["axis", "id", "neighbor", "corr"])
        for e, (nbr, corr) in enumerate(self.neighbors):
            for j, c in zip(nbr.tolist(), corr.tolist()):
                w.writerow([self.axis,
                            e if ids is None else ids[e],
                            j if ids is None else ids[j],
                            repr(float(c))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, n_entities: int, k_top: int, min_overlap: int,
                 ids: np.ndarray | None = None) -> "NeighborGraph":
        lookup = None if ids is None else {str(v): k for k, v in enumerate(ids.tolist())}
        lists: list[list] = [[] for _ in range(n_entities)]
        axis = None
        for row in csv.DictReader(io.StringIO(text)):
            axis = row["axis"]
            e = int(row["id"]) if lookup is None else lookup[row["id"]]
            j = int(row["neighbor"]) if lookup is None else lookup[row["neighbor"]]
            lists[e].append((j, float(row["corr"])))
        return cls(axis or "user", k_top, min_overlap, tuple(
            (np.array([j for j, _ in lst], dtype=np.int64), np.array([c for _, c in lst]))
            for lst in lists))


def correlation_matrix(store: RatingStore, axis: str, min_overlap: int = 3,
                       chunk: int = 512) -> tuple[np.ndarray, np.ndarray]:
    """All-pairs Pearson correlations via co-rating moment sums.

    Returns ``(corr, valid)``; ``valid`` is False where :func:`pearson` would
    return ``None``. All sums are integer-valued, so the degenerate-variance
    test is exact.
    """
    rows = _rows(store, axis)
    n, m = rows.n_users, rows.n_items
    mask = np.zeros((n, m))
    x = np.zeros((n, m))
    mask[rows.users, rows.items] = 1.0
    x[rows.users, rows.items] = rows.levels
    x2 = x * x
    corr = np.zeros((n, n))
    valid = np.zeros((n, n), dtype=bool)
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        cnt = mask[lo:hi] @ mask.T
        sa = x[lo:hi] @ mask.T          # sum of a's levels over the overlap
        sb = mask[lo:hi] @ x.T          # sum of b's levels over the overlap
        saa = x2[lo:hi] @ mask.T
        sbb = mask[lo:hi] @ x2.T
        sab = x[lo:hi] @ x.T
        va = cnt * saa - sa * sa
        vb = cnt * sbb - sb * sb
        ok = (cnt >= min_overlap) & (va > 0) & (vb > 0)
        with np.errstate(invalid="ignore", divide="ignore"):
            c = (cnt * sab - sa * sb) / np.sqrt(va * vb)
        c[~ok] = 0.0
        ok[np.arange(hi - lo), np.arange(lo, hi)] = False
        corr[lo:hi] = c
        valid[lo:hi] = ok
    return corr, valid


def build_topk(store: RatingStore, axis: str, k_top: int = 100, min_overlap: int = 3) -> NeighborGraph:
    if k_top < 1:
        raise ValueError("k_top must be at least 1")
    corr, valid = correlation_matrix(store, axis, min_overlap)
    lists = []
    ids = np.arange(corr.shape[1])
    for e in range(corr.shape[0]):
        keep = valid[e] & (corr[e] > 0)
        cand, c = ids[keep], corr[e, keep]
        # rounded key: exact ties must not be split by float noise in the moment sums
        order = np.lexsort((cand, -np.round(c, 12)))[:k_top]
        lists.append((cand[order], c[order]))
    return NeighborGraph(axis, k_top, min_overlap, tuple(lists))
