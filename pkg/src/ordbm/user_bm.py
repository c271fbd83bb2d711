"""User-centric Boltzmann machine: parameters, energy, conditionals, Gibbs.

One row of the rating matrix (a user's rated items) forms the visible layer; a
``d``-dimensional binary hidden layer sits on top. Parameters are shared by all
rows. Correlation weights live on unordered item pairs taken from the item
neighbour graph, so every pair contributes exactly once to the energy.

Levels are 1-based everywhere in the public API. Internally, tables are
indexed by ``level - 1``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from numba import njit
from scipy.special import expit

from .features import FeatureScheme


class ColdStartError(KeyError):
    """Prediction requested for a user or item the model never saw."""


@dataclass(eq=False)
class UserModelParams:
    """Shared parameters of the user-centric model.

    ``alpha`` (d,) hidden biases; ``beta`` (K, A) input biases; ``gamma``
    (K, d, A) hidden-input weights; ``lam`` (E, B) correlation weights of the
    unordered pairs in ``edges`` (E, 2), stored with ``i < j``. ``seen`` marks
    the items that had training ratings.
    """

    alpha: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    edges: np.ndarray
    lam: np.ndarray
    seen: np.ndarray = None

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if self.seen is None:
            self.seen = np.ones(self.n_rows, dtype=bool)
        K, d, A = self.gamma.shape
        if self.alpha.shape != (d,) or self.beta.shape != (K, A):
            raise ValueError("inconsistent parameter shapes")
        if len(self.lam) != len(self.edges):
            raise ValueError("lam must have one row per edge")
        if len(self.edges) and np.any(self.edges[:, 0] >= self.edges[:, 1]):
            raise ValueError("edges must be stored as (i, j) with i < j")

    @property
    def d(self) -> int:
        return len(self.alpha)

    @property
    def n_rows(self) -> int:
        return len(self.beta)

    @property
    def A(self) -> int:
        return self.beta.shape[1]

    @property
    def B(self) -> int:
        return self.lam.shape[1]

    @classmethod
    def zeros(cls, n_rows: int, d: int, scheme: FeatureScheme, edges=None) -> "UserModelParams":
        edges = np.zeros((0, 2), dtype=np.int64) if edges is None else np.asarray(edges)
        return cls(np.zeros(d), np.zeros((n_rows, scheme.A)), np.zeros((n_rows, d, scheme.A)),
                   edges, np.zeros((len(edges), scheme.B)))

    @classmethod
    def initial(cls, n_rows: int, d: int, scheme: FeatureScheme, edges, sigma: float,
                rng: np.random.Generator) -> "UserModelParams":
        """Hidden-unit parameters from N(0, sigma^2); biases and correlations at zero."""
        p = cls.zeros(n_rows, d, scheme, edges)
        p.alpha = rng.normal(0.0, sigma, size=d)
        p.gamma = rng.normal(0.0, sigma, size=(n_rows, d, scheme.A))
        return p

    def copy(self) -> "UserModelParams":
        return UserModelParams(self.alpha.copy(), self.beta.copy(), self.gamma.copy(),
                               self.edges.copy(), self.lam.copy(), self.seen.copy())

    def arrays(self) -> tuple:
        return self.alpha, self.beta, self.gamma, self.lam

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())

    @cached_property
    def adjacency(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """CSR over items: ``(ptr, neighbour, edge_id)`` listing both directions."""
        e = self.edges
        src = np.concatenate([e[:, 0], e[:, 1]])
        dst = np.concatenate([e[:, 1], e[:, 0]])
        eid = np.concatenate([np.arange(len(e))] * 2)
        order = np.lexsort((dst, src))
        ptr = np.zeros(self.n_rows + 1, dtype=np.int64)
        np.cumsum(np.bincount(src, minlength=self.n_rows), out=ptr[1:])
        return ptr, dst[order], eid[order]

    def edge_index(self, i: int, j: int) -> int:
        """Row of ``lam`` holding pair {i, j}, or -1 when not connected."""
        ptr, nbr, eid = self.adjacency
        seg = nbr[ptr[i]:ptr[i + 1]]
        k = np.searchsorted(seg, j)
        if k < len(seg) and seg[k] == j:
            return int(eid[ptr[i] + k])
        return -1

    def lambda_for(self, i: int, j: int) -> np.ndarray | None:
        e = self.edge_index(min(i, j), max(i, j))
        return None if e < 0 else self.lam[e]


def edges_from_graph(graph) -> np.ndarray:
    return graph.pairs()


def _gather_ranges(ptr: np.ndarray, rows: np.ndarray):
    starts = ptr[rows]
    lens = ptr[rows + 1] - starts
    total = int(lens.sum())
    owner = np.repeat(np.arange(len(rows)), lens)
    offs = np.arange(total) - np.repeat(np.cumsum(lens) - lens, lens)
    return owner, starts[owner] + offs


@dataclass(eq=False)
class UserView:
    """A user's rated items with the correlation edges among them.

    ``local_edges`` index into ``items``; ``edge_ids`` index into ``params.lam``.
    The ``adj_*`` arrays are a both-direction CSR over local nodes.
    """

    items: np.ndarray
    levels: np.ndarray
    local_edges: np.ndarray
    edge_ids: np.ndarray
    adj_ptr: np.ndarray = field(repr=False)
    adj_nbr: np.ndarray = field(repr=False)
    adj_eid: np.ndarray = field(repr=False)

    @property
    def n(self) -> int:
        return len(self.items)


def make_view(params: UserModelParams, items, levels) -> UserView:
    items = np.asarray(items, dtype=np.int64)
    levels = np.asarray(levels, dtype=np.int64)
    if len(items) and (items.min() < 0 or items.max() >= params.n_rows):
        raise IndexError("item index outside the parameter range")
    N = len(items)
    if len(params.edges):
        ptr, nbr, eid = params.adjacency
        pos = np.full(params.n_rows, -1, dtype=np.int64)
        pos[items] = np.arange(N)
        owner, idx = _gather_ranges(ptr, items)
        other = pos[nbr[idx]]
        keep = other > owner
        a, b, ids = owner[keep], other[keep], eid[idx][keep]
    else:
        a = b = ids = np.zeros(0, dtype=np.int64)
    local = np.stack([a, b], axis=1)
    src = np.concatenate([a, b])
    dst = np.concatenate([b, a])
    lid = np.concatenate([np.arange(len(a))] * 2)
    order = np.argsort(src, kind="stable")
    aptr = np.zeros(N + 1, dtype=np.int64)
    np.cumsum(np.bincount(src, minlength=N), out=aptr[1:])
    return UserView(items, levels, local, ids, aptr, dst[order], lid[order])


class Tables:
    """Per-view tensors shared by energy, conditionals and gradients."""

    def __init__(self, params: UserModelParams, scheme: FeatureScheme, view: UserView, field=None):
        F = scheme.unary_table
        self.F = F
        self.P = scheme.pair_table
        self.view = view
        # coupling[i, k, s]: weight hidden unit k puts on item i taking level s
        self.coupling = params.gamma[view.items] @ F.T
        self.unary = params.beta[view.items] @ F.T
        if field is not None:
            self.unary = self.unary + field
        # pair_w[e, s, t]: log-potential of local edge e at levels (s, t)
        self.pair_w = np.einsum("stb,eb->est", self.P, params.lam[view.edge_ids])
        self.alpha = params.alpha

    def hidden_act(self, levels0: np.ndarray) -> np.ndarray:
        N = len(levels0)
        return self.alpha + self.coupling[np.arange(N), :, levels0].sum(axis=0)

    def pair_logits(self, levels0: np.ndarray) -> np.ndarray:
        """(N, n): summed edge log-potentials of each node at each of its levels,
        with every neighbour fixed at ``levels0``."""
        N, n = self.unary.shape
        out = np.zeros((N, n))
        e = self.view.local_edges
        if len(e):
            np.add.at(out, e[:, 0], self.pair_w[np.arange(len(e)), :, levels0[e[:, 1]]])
            np.add.at(out, e[:, 1], self.pair_w[np.arange(len(e)), levels0[e[:, 0]], :])
        return out

    def pair_energy(self, levels0: np.ndarray) -> float:
        e = self.view.local_edges
        if not len(e):
            return 0.0
        return float(self.pair_w[np.arange(len(e)), levels0[e[:, 0]], levels0[e[:, 1]]].sum())


def negative_energy(params: UserModelParams, scheme: FeatureScheme, items, levels, hidden) -> float:
    """-E(h, r) for one user's rated items; pairs counted once."""
    view = make_view(params, items, levels)
    t = Tables(params, scheme, view)
    h = np.asarray(hidden, dtype=float)
    l0 = view.levels - 1
    N = view.n
    return float(params.alpha @ h
                 + t.unary[np.arange(N), l0].sum()
                 + h @ t.coupling[np.arange(N), :, l0].sum(axis=0)
                 + t.pair_energy(l0))


@dataclass(frozen=True)
class HiddenPosterior:
    probs: np.ndarray


def hidden_posterior(params: UserModelParams, scheme: FeatureScheme, items, levels,
                     view: UserView | None = None) -> HiddenPosterior:
    """P(h_k = 1 | ratings) for every hidden unit."""
    items = np.asarray(items, dtype=np.int64)
    levels = np.asarray(levels, dtype=np.int64)
    if scheme.is_gaussian:
        x = scheme.level_values[levels - 1]
        act = params.alpha + np.einsum("ik,i->k", params.gamma[items, :, 0], x)
    else:
        coupling = params.gamma[items] @ scheme.unary_table.T
        act = params.alpha + coupling[np.arange(len(items)), :, levels - 1].sum(axis=0)
    return HiddenPosterior(expit(act))


def conditional_rating(params: UserModelParams, scheme: FeatureScheme, item: int,
                       other_items, other_levels, hidden) -> np.ndarray:
    """P(r_item | r_others, h) over the n levels."""
    F, P = scheme.unary_table, scheme.pair_table
    h = np.asarray(hidden, dtype=float)
    logits = F @ params.beta[item] + (h @ params.gamma[item]) @ F.T
    for j, s in zip(np.asarray(other_items).tolist(), np.asarray(other_levels).tolist()):
        if j == item:
            continue
        lam = params.lambda_for(item, j)
        if lam is not None:
            logits = logits + P[:, s - 1, :] @ lam
    logits = logits - logits.max()
    p = np.exp(logits)
    return p / p.sum()


@njit(cache=True)
def _sweep_visible(unary, pair_w, levels0, ptr, nbr, eid, uniforms):
    N, n = unary.shape
    logits = np.empty(n)
    for i in range(N):
        for s in range(n):
            logits[s] = unary[i, s]
        for p in range(ptr[i], ptr[i + 1]):
            rj = levels0[nbr[p]]
            e = eid[p]
            for s in range(n):
                logits[s] += pair_w[e, s, rj]
        m = logits.max()
        total = 0.0
        for s in range(n):
            logits[s] = np.exp(logits[s] - m)
            total += logits[s]
        u = uniforms[i] * total
        acc = 0.0
        pick = n - 1
        for s in range(n):
            acc += logits[s]
            if u < acc:
                pick = s
                break
        levels0[i] = pick
    return levels0


def sample_visible(t: Tables, hidden: np.ndarray, levels0: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One sequential pass resampling every rated item given ``hidden``."""
    unary = t.unary + np.einsum("k,iks->is", hidden, t.coupling)
    out = levels0.copy()
    v = t.view
    return _sweep_visible(np.ascontiguousarray(unary), np.ascontiguousarray(t.pair_w), out,
                          v.adj_ptr, v.adj_nbr, v.adj_eid, rng.random(v.n))


def sample_hidden(t: Tables, levels0: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    p = expit(t.hidden_act(levels0))
    return (rng.random(len(p)) < p).astype(float)


def gibbs_sweep(params: UserModelParams, scheme: FeatureScheme, state, rng: np.random.Generator,
                view: UserView | None = None, tables: Tables | None = None):
    """Resample ``h`` given ``r``, then each rated ``r_i`` in turn.

    ``state`` is ``(hidden, levels)`` with 1-based levels aligned with
    ``view.items``. Returns the new state.
    """
    _, levels = state
    if tables is None:
        if view is None:
            raise ValueError("gibbs_sweep needs a view or precomputed tables")
        tables = Tables(params, scheme, view)
    l0 = np.asarray(levels, dtype=np.int64) - 1
    h = sample_hidden(tables, l0, rng)
    l0 = sample_visible(tables, h, l0, rng)
    return h, l0 + 1
