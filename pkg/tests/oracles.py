"""Independent reference computations for tiny models.

Nothing here touches ``ordbm.user_bm`` tables or ``ordbm.features``: features
are re-derived from their definitions and every probability comes from
enumerating all hidden and visible configurations.
"""

from __future__ import annotations

import itertools

import numpy as np
from scipy.special import logsumexp

from ordbm.features import FeatureScheme
from ordbm.user_bm import UserModelParams


def unary(kind: str, s: int, n: int) -> np.ndarray:
    if kind == "categorical":
        return np.array([1.0 if t == s else 0.0 for t in range(1, n + 1)])
    down = [(t - s) if t < s else 0 for t in range(1, n + 1)]
    up = [(t - s) if t > s else 0 for t in range(1, n + 1)]
    return np.array(down + up, dtype=float)


def pair(kind: str, s: int, t: int) -> float:
    return float(s == t) if kind == "categorical" else float(abs(s - t))


def hidden_states(d: int) -> np.ndarray:
    return np.array(list(itertools.product([0.0, 1.0], repeat=d))).reshape(-1, d)


def neg_energy_all_h(p: UserModelParams, kind: str, n: int, items, levels) -> np.ndarray:
    """-E(h, r) for every binary h (rows ordered as :func:`hidden_states`)."""
    H = hidden_states(p.d)
    lin = p.alpha.copy()
    const = 0.0
    for i, s in zip(items, levels):
        f = unary(kind, s, n)
        const += p.beta[i] @ f
        lin = lin + p.gamma[i] @ f
    pos = {i: k for k, i in enumerate(items)}
    for e, (a, b) in enumerate(p.edges.tolist()):
        if a in pos and b in pos:
            const += p.lam[e, 0] * pair(kind, levels[pos[a]], levels[pos[b]])
    return H @ lin + const


def log_marginal(p, kind, n, items, levels) -> float:
    """log sum_h exp(-E(h, r))."""
    return float(logsumexp(neg_energy_all_h(p, kind, n, items, levels)))


def pl_by_enumeration(p, kind, n, items, levels) -> float:
    """sum_i log P(r_i | r_-i) with h summed by enumeration."""
    total = 0.0
    for k in range(len(items)):
        scores = []
        for s in range(1, n + 1):
            lv = list(levels)
            lv[k] = s
            scores.append(log_marginal(p, kind, n, items, lv))
        total += scores[levels[k] - 1] - logsumexp(scores)
    return total


def log_likelihood(p, kind, n, items, levels) -> float:
    """log P(r) over the user's items, everything enumerated."""
    scores = {cfg: log_marginal(p, kind, n, items, list(cfg))
              for cfg in itertools.product(range(1, n + 1), repeat=len(items))}
    return scores[tuple(levels)] - logsumexp(list(scores.values()))


def target_distribution(p, kind, n, items, levels, j) -> np.ndarray:
    """P(r_j = s | observed ratings) with h summed by enumeration."""
    scores = [log_marginal(p, kind, n, list(items) + [j], list(levels) + [s]) for s in range(1, n + 1)]
    return np.exp(np.array(scores) - logsumexp(scores))


def random_model(rng: np.random.Generator, kind: str = "ordinal", n_rows: int = 6, d: int = 3,
                 n: int = 5, scale: float = 0.5, edge_prob: float = 0.5, gamma_zero: bool = False):
    """Random parameters on a random edge set, plus a random scheme."""
    scheme = FeatureScheme(kind, n)
    pairs = [(i, j) for i in range(n_rows) for j in range(i + 1, n_rows) if rng.random() < edge_prob]
    edges = np.array(pairs, dtype=np.int64).reshape(-1, 2)
    p = UserModelParams(rng.normal(0, scale, d), rng.normal(0, scale, (n_rows, scheme.A)),
                        np.zeros((n_rows, d, scheme.A)) if gamma_zero
                        else rng.normal(0, scale, (n_rows, d, scheme.A)),
                        edges, rng.normal(0, scale, (len(edges), scheme.B)))
    return p, scheme


def random_row(rng: np.random.Generator, n_rows: int, n_items: int, n: int = 5):
    items = np.sort(rng.choice(n_rows, size=n_items, replace=False))
    return items, rng.integers(1, n + 1, size=n_items)


def flat_params(p: UserModelParams) -> np.ndarray:
    return np.concatenate([a.ravel() for a in p.arrays()])


def set_flat(p: UserModelParams, x: np.ndarray) -> None:
    k = 0
    for a in p.arrays():
        a.ravel()[:] = x[k:k + a.size]
        k += a.size


def finite_difference(fn, p: UserModelParams, step: float = 1e-5) -> np.ndarray:
    """Central differences of ``fn(p)`` with respect to every parameter."""
    x0 = flat_params(p).copy()
    out = np.zeros_like(x0)
    for k in range(len(x0)):
        x = x0.copy()
        x[k] += step
        set_flat(p, x)
        hi = fn(p)
        x[k] -= 2 * step
        set_flat(p, x)
        lo = fn(p)
        out[k] = (hi - lo) / (2 * step)
    set_flat(p, x0)
    return out


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def weak_coupling_model(rng: np.random.Generator, kind: str = "ordinal", n_rows: int = 6, d: int = 3,
                        scale: float = 0.5, gamma_scale: float = 0.1):
    """Random model whose hidden couplings are small next to the biases and correlations."""
    p, scheme = random_model(rng, kind, n_rows, d, scale=scale, edge_prob=0.5)
    p.gamma *= gamma_scale / scale
    return p, scheme
