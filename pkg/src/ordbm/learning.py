"""Training procedures for the user-centric model.

Three per-user gradient estimators share one sparse gradient container:

* :func:`cd_gradient` -- contrastive divergence (data term with soft hidden
  posteriors, model term from a short Gibbs chain started at the data);
* :func:`pl_gradient` -- pseudo-likelihood with the hidden layer summed out in
  closed form;
* :func:`gaussian_pl_gradient` -- mean-field reconstruction error for
  Gaussian ratings (a *descent* gradient).

:func:`exact_ml_gradient` enumerates every configuration and exists as a test
oracle for tiny models.

Every estimator accepts an optional per-rating ``field``: extra unary
log-potentials (shape ``(N, n)``; for Gaussian ratings an ``(N,)`` offset of
the conditional mean). The joint model uses it to clamp the other side's
contribution while this side is being updated.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logsumexp

from .corpus import RatingStore
from .features import FeatureScheme
from .user_bm import Tables, UserModelParams, UserView, make_view, sample_hidden, sample_visible

log = logging.getLogger(__name__)

METHODS = ("cd", "pl", "gaussian_pl")


class EnumerationTooLargeError(ValueError):
    pass


class DivergenceError(FloatingPointError):
    def __init__(self, epoch: int, what: str = "parameters"):
        super().__init__(f"non-finite {what} after epoch {epoch}")
        self.epoch = epoch


@dataclass(eq=False)
class UserGradient:
    """Gradient of one user's objective; only rated items / local edges appear."""

    alpha: np.ndarray
    items: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    edge_ids: np.ndarray
    lam: np.ndarray

    def to_dense(self, params: UserModelParams) -> "GradientAccumulator":
        acc = GradientAccumulator.zeros_like(params)
        acc.add(self)
        return acc


@dataclass(eq=False)
class GradientAccumulator:
    d_alpha: np.ndarray
    d_beta: np.ndarray
    d_gamma: np.ndarray
    d_lambda: np.ndarray
    count: int = 0

    @classmethod
    def zeros_like(cls, params: UserModelParams) -> "GradientAccumulator":
        return cls(np.zeros_like(params.alpha), np.zeros_like(params.beta),
                   np.zeros_like(params.gamma), np.zeros_like(params.lam))

    def add(self, g: UserGradient, weight: float = 1.0) -> None:
        self.d_alpha += weight * g.alpha
        np.add.at(self.d_beta, g.items, weight * g.beta)
        np.add.at(self.d_gamma, g.items, weight * g.gamma)
        if len(g.edge_ids):
            np.add.at(self.d_lambda, g.edge_ids, weight * g.lam)
        self.count += 1

    def arrays(self) -> tuple:
        return self.d_alpha, self.d_beta, self.d_gamma, self.d_lambda

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])


def _view_and_tables(params, scheme, items, levels, view, field):
    if view is None:
        view = make_view(params, items, levels)
    return view, Tables(params, scheme, view, field)


# ---------------------------------------------------------------------------
# exact maximum likelihood (enumeration oracle)


def _enumerate(t: Tables, max_configs: int):
    N, n = t.unary.shape
    if n ** N > max_configs:
        raise EnumerationTooLargeError(f"{n}^{N} configurations exceed the limit {max_configs}")
    cfg = np.indices((n,) * N).reshape(N, -1).T if N else np.zeros((1, 0), dtype=np.int64)
    logm = np.zeros(len(cfg))
    act = np.tile(t.alpha, (len(cfg), 1))
    for i in range(N):
        logm += t.unary[i, cfg[:, i]]
        act += t.coupling[i][:, cfg[:, i]].T
    e = t.view.local_edges
    for k in range(len(e)):
        logm += t.pair_w[k, cfg[:, e[k, 0]], cfg[:, e[k, 1]]]
    logm += np.logaddexp(0.0, act).sum(axis=1)
    return cfg, logm, act


def log_likelihood_exact(params, scheme, items, levels, field=None, max_configs: int = 400_000) -> float:
    """log P(ratings) with hidden units and the normaliser summed exactly."""
    view, t = _view_and_tables(params, scheme, items, levels, None, field)
    cfg, logm, _ = _enumerate(t, max_configs)
    n = t.unary.shape[1]
    code = int(np.ravel_multi_index(tuple(view.levels - 1), (n,) * view.n)) if view.n else 0
    return float(logm[code] - logsumexp(logm))


def exact_ml_gradient(params, scheme, items, levels, field=None, max_configs: int = 400_000,
                      max_hidden: int = 12) -> UserGradient:
    """Data term minus exact model expectations, by full enumeration."""
    if params.d > max_hidden:
        raise EnumerationTooLargeError(f"d={params.d} exceeds the enumeration limit {max_hidden}")
    view, t = _view_and_tables(params, scheme, items, levels, None, field)
    cfg, logm, act = _enumerate(t, max_configs)
    N, n = t.unary.shape
    prob = np.exp(logm - logsumexp(logm))
    sig = expit(act)
    F, P = t.F, t.P
    l0 = view.levels - 1
    p_data = expit(t.hidden_act(l0))

    model_h = prob @ sig
    marg = np.stack([np.bincount(cfg[:, i], weights=prob, minlength=n) for i in range(N)]) if N else np.zeros((0, n))
    # joint[i, s, k] = P(r_i = s, h_k = 1)
    joint = np.stack([
        np.stack([(prob * (cfg[:, i] == s)) @ sig for s in range(n)]) for i in range(N)
    ]) if N else np.zeros((0, n, params.d))
    e = view.local_edges
    pair_marg = np.stack([
        np.bincount(cfg[:, a] * n + cfg[:, b], weights=prob, minlength=n * n).reshape(n, n)
        for a, b in e
    ]) if len(e) else np.zeros((0, n, n))

    g_alpha = p_data - model_h
    g_beta = F[l0] - marg @ F
    g_gamma = p_data[None, :, None] * F[l0][:, None, :] - np.einsum("isk,sa->ika", joint, F)
    g_lam = P[l0[e[:, 0]], l0[e[:, 1]]] - np.einsum("est,stb->eb", pair_marg, P) if len(e) else np.zeros((0, params.B))
    return UserGradient(g_alpha, view.items, g_beta, g_gamma, view.edge_ids, g_lam)


# ---------------------------------------------------------------------------
# contrastive divergence


def cd_gradient(params, scheme, items, levels, cd_steps: int, rng: np.random.Generator,
                view: UserView | None = None, field=None) -> UserGradient:
    if cd_steps < 1:
        raise ValueError("cd_steps must be at least 1")
    view, t = _view_and_tables(params, scheme, items, levels, view, field)
    l0 = view.levels - 1
    p_data = expit(t.hidden_act(l0))
    m = l0
    for _ in range(cd_steps):
        h = sample_hidden(t, m, rng)
        m = sample_visible(t, h, m, rng)
    p_model = expit(t.hidden_act(m))
    F, P = t.F, t.P
    e = view.local_edges
    return UserGradient(
        p_data - p_model,
        view.items,
        F[l0] - F[m],
        p_data[None, :, None] * F[l0][:, None, :] - p_model[None, :, None] * F[m][:, None, :],
        view.edge_ids,
        P[l0[e[:, 0]], l0[e[:, 1]]] - P[m[e[:, 0]], m[e[:, 1]]],
    )


# ---------------------------------------------------------------------------
# pseudo-likelihood


def _pl_terms(t: Tables, l0: np.ndarray):
    N = len(l0)
    act = t.hidden_act(l0)
    own = t.coupling[np.arange(N), :, l0]
    # hidden activation with item i switched to level s: (N, d, n)
    act_is = act[None, :, None] - own[:, :, None] + t.coupling
    logz = t.unary + t.pair_logits(l0) + np.logaddexp(0.0, act_is).sum(axis=1)
    logp = logz - logsumexp(logz, axis=1, keepdims=True)
    return logp, act_is


def pl_conditionals(params, scheme, items, levels, view=None, field=None) -> np.ndarray:
    """(N, n) matrix of P(r_i = s | other observed ratings)."""
    view, t = _view_and_tables(params, scheme, items, levels, view, field)
    logp, _ = _pl_terms(t, view.levels - 1)
    return np.exp(logp)


def pl_objective(params, scheme, items, levels, view=None, field=None) -> float:
    view, t = _view_and_tables(params, scheme, items, levels, view, field)
    l0 = view.levels - 1
    logp, _ = _pl_terms(t, l0)
    return float(logp[np.arange(len(l0)), l0].sum())


def pl_gradient(params, scheme, items, levels, view=None, field=None) -> UserGradient:
    view, t = _view_and_tables(params, scheme, items, levels, view, field)
    l0 = view.levels - 1
    N = len(l0)
    logp, act_is = _pl_terms(t, l0)
    D = -np.exp(logp)
    D[np.arange(N), l0] += 1.0
    q = expit(act_is)
    F, P = t.F, t.P
    Dq = np.einsum("is,iks->ik", D, q)
    g_alpha = Dq.sum(axis=0)
    g_beta = D @ F
    Fbar = F[l0]
    g_gamma = (np.einsum("is,iks,sa->ika", D, q, F)
               - Dq[:, :, None] * Fbar[:, None, :]
               + g_alpha[None, :, None] * Fbar[:, None, :])
    e = view.local_edges
    if len(e):
        a, b = e[:, 0], e[:, 1]
        Pt = P.transpose(1, 0, 2)
        g_lam = (np.einsum("es,esb->eb", D[a], Pt[l0[b]])
                 + np.einsum("es,esb->eb", D[b], P[l0[a]]))
    else:
        g_lam = np.zeros((0, P.shape[2]))
    return UserGradient(g_alpha, view.items, g_beta, g_gamma, view.edge_ids, g_lam)


# ---------------------------------------------------------------------------
# Gaussian ratings: mean-field pseudo-likelihood


def _gaussian_terms(params, scheme, view, offset):
    x = scheme.level_values[view.levels - 1]
    g = params.gamma[view.items, :, 0]
    p = expit(params.alpha + x @ g)
    nb = np.zeros(view.n)
    e = view.local_edges
    if len(e):
        lam = params.lam[view.edge_ids, 0]
        np.add.at(nb, e[:, 0], lam * x[e[:, 1]])
        np.add.at(nb, e[:, 1], lam * x[e[:, 0]])
    mu = params.beta[view.items, 0] + g @ p + nb
    if offset is not None:
        mu = mu + offset
    return x, g, p, mu


def gaussian_reconstruction_error(params, scheme, items, levels, view=None, field=None) -> float:
    """1/2 sum_i (x_i - mu_i)^2 over the user's normalized ratings."""
    if view is None:
        view = make_view(params, items, levels)
    x, _, _, mu = _gaussian_terms(params, scheme, view, field)
    return 0.5 * float(((x - mu) ** 2).sum())


def gaussian_pl_gradient(params, scheme, items, levels, view=None, field=None,
                         printed: bool = False) -> UserGradient:
    """Gradient of the reconstruction error (descend it).

    The default returns the exact derivative. ``printed=True`` returns the
    published alpha / gamma expressions instead, which drop the logistic
    derivative factor ``p (1 - p)``; the beta and lambda blocks coincide.
    """
    if not scheme.is_gaussian:
        raise ValueError("gaussian_pl_gradient needs the gaussian scheme")
    if view is None:
        view = make_view(params, items, levels)
    x, g, p, mu = _gaussian_terms(params, scheme, view, field)
    eps = x - mu
    s = eps @ g
    if printed:
        g_alpha = -p * s
        g_gamma = -p[None, :] * (eps[:, None] + p[None, :] * x[:, None] * s[None, :])
    else:
        dp = p * (1.0 - p)
        g_alpha = -dp * s
        g_gamma = -(eps[:, None] * p[None, :] + x[:, None] * (dp * s)[None, :])
    e = view.local_edges
    g_lam = -(eps[e[:, 0]] * x[e[:, 1]] + eps[e[:, 1]] * x[e[:, 0]])
    return UserGradient(g_alpha, view.items, -eps[:, None], g_gamma[:, :, None],
                        view.edge_ids, g_lam[:, None])


# ---------------------------------------------------------------------------
# SGD driver


@dataclass
class TrainConfig:
    method: str = "cd"
    cd_steps: int = 1
    learning_rate: float = 0.1
    block_size: int = 100
    max_epochs: int = 20
    init_sigma: float = 0.01
    seed: int = 0
    l2: float = 0.0
    patience: int = 3
    probe_rows: int = 200

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.cd_steps < 1:
            raise ValueError("cd_steps must be >= 1")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if self.block_size < 1:
            raise ValueError("block_size must be >= 1")


class RowLearner:
    """Block-SGD over the rows of ``rows`` (users, or items for the item side)."""

    def __init__(self, params: UserModelParams, scheme: FeatureScheme, rows: RatingStore,
                 config: TrainConfig, rng: np.random.Generator):
        if config.method == "gaussian_pl" and not scheme.is_gaussian:
            raise ValueError("method gaussian_pl needs the gaussian scheme")
        if scheme.is_gaussian and config.method != "gaussian_pl":
            raise ValueError("the gaussian scheme is trained with method gaussian_pl")
        self.params = params
        self.scheme = scheme
        self.rows = rows
        self.config = config
        self.rng = rng
        counts = rows.user_counts()
        self.active = np.flatnonzero(counts > 0)
        self.index = {u: rows.user_rating_index(u) for u in self.active.tolist()}
        self.views = {u: make_view(params, rows.items[ix], rows.levels[ix]) for u, ix in self.index.items()}
        self.probe = self.active[:config.probe_rows]
        params.seen = np.zeros(params.n_rows, dtype=bool)
        params.seen[np.unique(rows.items)] = True

    def _row_gradient(self, u: int, field):
        v = self.views[u]
        f = None if field is None else field[self.index[u]]
        c = self.config
        if c.method == "cd":
            return cd_gradient(self.params, self.scheme, None, None, c.cd_steps, self.rng, view=v, field=f)
        if c.method == "pl":
            return pl_gradient(self.params, self.scheme, None, None, view=v, field=f)
        return gaussian_pl_gradient(self.params, self.scheme, None, None, view=v, field=f)

    def _step(self, acc: GradientAccumulator, n_rows: int) -> None:
        c = self.config
        sign = -1.0 if c.method == "gaussian_pl" else 1.0
        lr = c.learning_rate
        for p, g in zip(self.params.arrays(), acc.arrays()):
            if c.l2:
                p -= lr * c.l2 * p
            p += (sign * lr / n_rows) * g

    def epoch(self, field=None) -> None:
        order = self.rng.permutation(self.active)
        bs = self.config.block_size
        for lo in range(0, len(order), bs):
            block = order[lo:lo + bs]
            acc = GradientAccumulator.zeros_like(self.params)
            for u in block.tolist():
                acc.add(self._row_gradient(u, field))
            self._step(acc, len(block))

    def objective_estimate(self, field=None) -> float:
        """Mean per-rating PL (or reconstruction error) over the probe rows."""
        total, count = 0.0, 0
        for u in self.probe.tolist():
            v = self.views[u]
            f = None if field is None else field[self.index[u]]
            if self.config.method == "gaussian_pl":
                total += gaussian_reconstruction_error(self.params, self.scheme, None, None, view=v, field=f)
            else:
                total += pl_objective(self.params, self.scheme, None, None, view=v, field=f)
            count += v.n
        return total / max(count, 1)


@dataclass
class EpochRecord:
    epoch: int
    objective_estimate: float
    val_mae: float
    seconds: float

    def csv_row(self) -> str:
        return f"{self.epoch},{self.objective_estimate:.6f},{self.val_mae:.6f},{self.seconds:.3f}"


TRAINING_LOG_HEADER = "epoch,objective_estimate,val_mae,seconds"


def write_training_log(history: list[EpochRecord], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(TRAINING_LOG_HEADER + "\n")
        for rec in history:
            fh.write(rec.csv_row() + "\n")


def sgd_train(config: TrainConfig, store: RatingStore, scheme: FeatureScheme, neighbor_graph=None,
              d: int = 20, validation: RatingStore | None = None,
              history: list | None = None, readout: str = "expected") -> UserModelParams:
    """Train the user-centric model with block SGD.

    ``neighbor_graph`` is the item graph; ``None`` trains without input
    correlations. With ``validation`` the run stops once validation MAE has not
    improved for ``config.patience`` epochs and the best parameters are returned.
    """
    from .inference import predict_store

    if store.n_ratings == 0:
        raise ValueError("cannot train on an empty store")
    rng = np.random.default_rng(config.seed)
    edges = neighbor_graph.pairs() if neighbor_graph is not None else None
    params = UserModelParams.initial(store.n_items, d, scheme, edges, config.init_sigma, rng)
    learner = RowLearner(params, scheme, store, config, rng)
    best, best_mae, stale = None, np.inf, 0
    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        learner.epoch()
        if not params.all_finite():
            raise DivergenceError(epoch)
        obj = learner.objective_estimate()
        mae = np.nan
        if validation is not None and validation.n_ratings:
            pred, truth = predict_store(params, scheme, store, validation, readout=readout)
            mae = float(np.mean(np.abs(pred - truth)))
        rec = EpochRecord(epoch, obj, mae, time.perf_counter() - t0)
        log.info("epoch %d objective %.4f val_mae %.4f (%.1fs)", epoch, obj, mae, rec.seconds)
        if history is not None:
            history.append(rec)
        if validation is not None:
            if mae < best_mae - 1e-9:
                best, best_mae, stale = params.copy(), mae, 0
            else:
                stale += 1
                if stale >= config.patience:
                    break
    return best if best is not None else params
