"""Command-line pipeline: prepare, train, evaluate, predict, rank.

Work directory layout::

    <workdir>/data/            filtered split, neighbour graphs, stats, config echo
    <workdir>/runs/<LABEL>/    model.ordbm, training_log.csv, report.txt, curves, config echo

Every failure prints one line ``error code=<code> exit=<n> message=<json>`` on
stderr. Exit codes: 0 ok, 1 usage, 2 io or data, 3 numeric.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import warnings
from pathlib import Path

import numpy as np
from filelock import FileLock, Timeout

from . import archive as arc
from .baselines import popularity_rank, svd_predict, svd_predict_many, svd_train
from .config import ConfigError, ExperimentConfig
from .corpus import CorpusError, RatingStore, filter_min_counts, load_ratings, parse_ratings, split_per_user
from .evaluation import curves_csv, mae, ranking_curves, ranking_utility
from .features import DegenerateDataError, FeatureScheme, fit_gaussian_normalizer
from .inference import (candidate_items, gaussian_means, predict_joint, predict_meanfield, predict_table,
                        rank_items)
from .joint_bm import (JointModelParams, alternating_train, joint_gaussian_mean, predict_joint_table,
                       rank_items_joint)
from .learning import DivergenceError, EnumerationTooLargeError, sgd_train, write_training_log
from .neighbors import NeighborGraph, build_topk
from .user_bm import ColdStartError

log = logging.getLogger("ordbm")

CACHE_ENV = "ORDBM_CACHE"
EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3


class CliError(Exception):
    def __init__(self, code: str, exit_code: int, message: str):
        super().__init__(message)
        self.code = code
        self.exit_code = exit_code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", EXIT_USAGE, message)


def cache_dir() -> Path:
    return Path(os.environ.get(CACHE_ENV) or Path.home() / ".cache" / "ordbm")


# ---------------------------------------------------------------------------
# artifacts


def data_dir(workdir: Path) -> Path:
    return workdir / "data"


def run_dir(workdir: Path, cfg: ExperimentConfig) -> Path:
    return workdir / "runs" / cfg.label


def _lock(path: Path) -> FileLock:
    path.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(path / ".lock"))
    try:
        lock.acquire(timeout=0)
    except Timeout:
        raise CliError("locked", EXIT_IO, f"{path} is in use by another run") from None
    return lock


def _read(path: Path) -> str:
    try:
        return path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise CliError("missing_file", EXIT_IO, f"no such file: {path}") from None


class Prepared:
    """A split reloaded with train and test sharing one id space."""

    def __init__(self, ddir: Path):
        train_text = _read(ddir / "train.csv")
        test_text = _read(ddir / "test.csv")
        self.hash = hashlib.sha256((train_text + test_text).encode()).hexdigest()[:16]
        train = parse_ratings(train_text, "csv")
        if test_text.strip().count("\n") == 0:
            test = RatingStore(np.zeros(0), np.zeros(0), np.zeros(0), train.user_ids, train.item_ids, train.scale)
        else:
            test = parse_ratings(test_text, "csv")
        # one sorted id space for both; test pairs may repeat training pairs
        uids, iids = _union(train.user_ids, test.user_ids), _union(train.item_ids, test.item_ids)
        self.train, self.test = _reindex(train, uids, iids), _reindex(test, uids, iids)
        self.ddir = ddir

    def graph(self, axis: str, cfg: ExperimentConfig) -> NeighborGraph:
        n = self.train.n_users if axis == "user" else self.train.n_items
        ids = self.train.user_ids if axis == "user" else self.train.item_ids
        return NeighborGraph.from_csv(_read(self.ddir / f"{axis}_graph.csv"), n, cfg.k_top, cfg.min_overlap, ids)

    def dense_id(self, axis: str, raw: str) -> int:
        ids = self.train.user_ids if axis == "user" else self.train.item_ids
        key = int(raw) if ids.dtype != object else raw
        hit = np.flatnonzero(ids == key)
        if not len(hit):
            raise CliError("cold_start", EXIT_USAGE, f"{axis} {raw} is not in the prepared data")
        return int(hit[0])


def _union(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.dtype != b.dtype:
        a, b = a.astype(str).astype(object), b.astype(str).astype(object)
    return np.array(sorted(set(a.tolist()) | set(b.tolist())), dtype=a.dtype)


def _reindex(store: RatingStore, user_ids: np.ndarray, item_ids: np.ndarray) -> RatingStore:
    pos_u = {k: n for n, k in enumerate(user_ids.tolist())}
    pos_i = {k: n for n, k in enumerate(item_ids.tolist())}
    as_key = (lambda x: str(x)) if user_ids.dtype == object else (lambda x: x)
    u = np.array([pos_u[as_key(x)] for x in store.user_ids.tolist()], dtype=np.int64)
    as_key = (lambda x: str(x)) if item_ids.dtype == object else (lambda x: x)
    i = np.array([pos_i[as_key(x)] for x in store.item_ids.tolist()], dtype=np.int64)
    return RatingStore(u[store.users], i[store.items], store.levels, user_ids, item_ids, store.scale)


def _cached_graph(train: RatingStore, axis: str, cfg: ExperimentConfig) -> str:
    cdir = cache_dir()
    cdir.mkdir(parents=True, exist_ok=True)
    path = cdir / f"graph-{train.content_hash()}-{axis}-k{cfg.k_top}-m{cfg.min_overlap}.csv"
    with FileLock(str(path) + ".lock"):
        if path.exists():
            log.info("neighbour graph from cache %s", path)
            return path.read_text(encoding="utf-8")
        ids = train.user_ids if axis == "user" else train.item_ids
        text = build_topk(train, axis, cfg.k_top, cfg.min_overlap).to_csv(ids)
        path.write_text(text, encoding="utf-8")
        return text


# ---------------------------------------------------------------------------
# commands


def cmd_prepare(cfg: ExperimentConfig, workdir: Path) -> str:
    if not cfg.dataset:
        raise CliError("usage", EXIT_USAGE, "config key dataset is required for prepare")
    src = Path(cfg.dataset)
    if not src.is_file():
        raise CliError("missing_file", EXIT_IO, f"no such file: {src}")
    raw = load_ratings(src, cfg.format)
    filtered = filter_min_counts(raw, cfg.min_user_ratings, cfg.min_item_ratings)
    canonical = parse_ratings(filtered.to_csv(), "csv")
    split = split_per_user(canonical, cfg.split_fraction, cfg.split_seed)
    train, test = split.train, split.test
    ddir = data_dir(workdir)
    lock = _lock(ddir)
    try:
        (ddir / "config.ini").write_text(cfg.to_ini(), encoding="utf-8")
        (ddir / "train.csv").write_text(train.to_csv(), encoding="utf-8")
        (ddir / "test.csv").write_text(test.to_csv(), encoding="utf-8")
        for axis in ("user", "item"):
            (ddir / f"{axis}_graph.csv").write_text(_cached_graph(train, axis, cfg), encoding="utf-8")
        stats = (f"raw_users={raw.n_users}\nraw_items={raw.n_items}\nraw_ratings={raw.n_ratings}\n"
                 f"users={canonical.n_users}\nitems={canonical.n_items}\nratings={canonical.n_ratings}\n"
                 f"train_ratings={train.n_ratings}\ntest_ratings={test.n_ratings}\n")
        (ddir / "stats.txt").write_text(stats, encoding="utf-8")
    finally:
        lock.release()
    return stats


def _scheme(cfg: ExperimentConfig, train: RatingStore) -> FeatureScheme:
    norm = fit_gaussian_normalizer(train) if cfg.scheme == "gaussian" else None
    return FeatureScheme(cfg.scheme, train.scale.n_levels, norm)


def _fit(cfg: ExperimentConfig, prep: Prepared, history: list) -> arc.ModelArchive:
    train = prep.train
    validation = None
    if cfg.validation_fraction > 0 and cfg.variant != "svd":
        inner = split_per_user(train, 1.0 - cfg.validation_fraction, cfg.split_seed)
        train, validation = inner.train, inner.test
    scheme = _scheme(cfg, prep.train)
    graph = {"k_top": cfg.k_top, "min_overlap": cfg.min_overlap}
    out = arc.ModelArchive(cfg.variant, scheme, prep.train.user_ids, prep.train.item_ids, prep.hash,
                           graph, json.loads(json.dumps(vars(cfg))))
    if cfg.variant == "svd":
        out.svd = svd_train(train, cfg.svd_rank, cfg.svd_learning_rate, cfg.svd_epochs, cfg.svd_l2, cfg.seed)
        return out
    tc = cfg.train_config()
    item_graph = prep.graph("item", cfg) if cfg.uses_item_graph else None
    if cfg.is_joint:
        out.joint = alternating_train(tc, train, scheme, None, item_graph, cfg.d, cfg.d_prime,
                                      update_items=cfg.update_items, validation=validation,
                                      history=history, readout=cfg.readout)
    else:
        params = sgd_train(tc, train, scheme, item_graph, cfg.d, validation, history, cfg.readout)
        out.joint = JointModelParams(params, None)
    return out


def cmd_train(cfg: ExperimentConfig, workdir: Path) -> Path:
    prep = Prepared(data_dir(workdir))
    rdir = run_dir(workdir, cfg)
    lock = _lock(rdir)
    try:
        history: list = []
        model = _fit(cfg, prep, history)
        (rdir / "config.ini").write_text(cfg.to_ini(), encoding="utf-8")
        write_training_log(history, rdir / "training_log.csv")
        path = rdir / "model.ordbm"
        arc.save_model(model, path)
    finally:
        lock.release()
    return path


def _load_compatible(path: Path, prep: Prepared) -> arc.ModelArchive:
    try:
        model = arc.load_model(path)
    except FileNotFoundError:
        raise CliError("missing_file", EXIT_IO, f"no such file: {path}") from None
    if model.dataset_hash != prep.hash:
        raise CliError("incompatible", EXIT_IO,
                       f"model was trained on dataset {model.dataset_hash}, prepared data is {prep.hash}")
    return model


def prediction_table(model: arc.ModelArchive, train: RatingStore, test: RatingStore):
    """``(users, items, predicted, truth, n_cold)`` over the test pairs the model can score."""
    if model.svd is not None:
        s = model.svd
        ok = ((test.users < len(s.seen_users)) & (test.items < len(s.seen_items)))
        ok[ok] = s.seen_users[test.users[ok]] & s.seen_items[test.items[ok]]
        pred = svd_predict_many(s, test.users[ok], test.items[ok])
        return test.users[ok], test.items[ok], pred, test.levels[ok].astype(float), int((~ok).sum())
    readout = model.config.get("readout", "expected")
    if model.joint.item_side is None:
        table = predict_table(model.joint.user_side, model.scheme, train, test)
    else:
        table = predict_joint_table(model.joint, model.scheme, train, test)
    return table.users, table.items, table.readout(readout), table.truth.astype(float), table.n_cold_start


def _rank_for(model: arc.ModelArchive, train: RatingStore, u: int, candidates,
              cols: RatingStore | None = None) -> list:
    if model.svd is not None:
        cand = np.array(sorted(candidates), dtype=np.int64)
        cand = cand[model.svd.seen_items[cand]]
        score = svd_predict_many(model.svd, np.full(len(cand), u), cand)
        return cand[np.lexsort((cand, -score))].tolist()
    params, scheme = model.joint.user_side, model.scheme
    cand = [c for c in sorted(candidates) if params.seen[c]]
    if not cand:
        return []
    items, levels = train.user_row(u)
    if scheme.is_gaussian:
        # continuous levels have no finite energy table; order by predicted mean
        cand = np.array(cand, dtype=np.int64)
        if model.joint.item_side is not None:
            cols = cols if cols is not None else train.transpose()
            mu = np.array([joint_gaussian_mean(model.joint, scheme, train, u, j, cols) for j in cand.tolist()])
        else:
            mu = gaussian_means(params, scheme, items, levels, cand)
        return cand[np.lexsort((cand, -mu))].tolist()
    if model.joint.item_side is not None:
        return rank_items_joint(model.joint, scheme, train, u, cand, cols).items()
    return rank_items(params, scheme, items, levels, cand).items()


def cmd_evaluate(cfg: ExperimentConfig, workdir: Path, model_path: Path | None = None) -> str:
    prep = Prepared(data_dir(workdir))
    if prep.test.n_ratings == 0:
        raise CliError("empty_test", EXIT_IO, "the test split holds no ratings")
    rdir = run_dir(workdir, cfg)
    model = _load_compatible(model_path or rdir / "model.ordbm", prep)
    train, test = prep.train, prep.test
    lines = [f"label={cfg.label}", f"dataset_hash={prep.hash}"]
    lock = _lock(rdir)
    try:
        if "mae" in cfg.metric_list:
            users, items, pred, truth, n_cold = prediction_table(model, train, test)
            if len(pred) == 0:
                raise CliError("empty_test", EXIT_IO, "no test pair can be predicted")
            lines += [f"mae={mae(pred, truth):.6f}", f"n_predicted={len(pred)}", f"n_cold_start={n_cold}"]
        if "ranking" in cfg.metric_list:
            ugraph = prep.graph("user", cfg)
            users = np.unique(test.users)
            if cfg.ranking_users:
                users = users[:cfg.ranking_users]
            recs, pops, tests = {}, {}, {}
            cols = train.transpose()
            for u in users.tolist():
                cand = candidate_items(train, ugraph, u, cfg.n_similar)
                tests[u] = set(test.user_row(u)[0].tolist())
                recs[u] = _rank_for(model, train, u, cand, cols) if cand else []
                pops[u] = popularity_rank(train, ugraph, u, cand, cfg.n_similar).items() if cand else []
            util = ranking_utility(recs, tests, cfg.half_life)
            pop_util = ranking_utility(pops, tests, cfg.half_life)
            lines += [f"utility={util:.6f}", f"popularity_utility={pop_util:.6f}", f"ranked_users={len(users)}"]
            (rdir / "curves.csv").write_text(curves_csv(ranking_curves(recs, tests, cfg.ns, cfg.half_life)),
                                             encoding="utf-8")
            (rdir / "popularity_curves.csv").write_text(
                curves_csv(ranking_curves(pops, tests, cfg.ns, cfg.half_life)), encoding="utf-8")
        report = "\n".join(lines) + "\n"
        (rdir / "config.ini").write_text(cfg.to_ini(), encoding="utf-8")
        (rdir / "report.txt").write_text(report, encoding="utf-8")
    finally:
        lock.release()
    return report


def cmd_predict(cfg: ExperimentConfig, workdir: Path, user: str, item: str, model_path: Path | None = None) -> str:
    prep = Prepared(data_dir(workdir))
    model = _load_compatible(model_path or run_dir(workdir, cfg) / "model.ordbm", prep)
    u, j = prep.dense_id("user", user), prep.dense_id("item", item)
    if model.svd is not None:
        return f"user={user} item={item} expected={svd_predict(model.svd, u, j):.6f}\n"
    if model.joint.item_side is not None:
        p = predict_joint(model.joint, model.scheme, prep.train, u, j)
    else:
        items, levels = prep.train.user_row(u)
        p = predict_meanfield(model.joint.user_side, model.scheme, items, levels, j)
    per = ",".join(f"{x:.6f}" for x in p.per_level)
    return (f"user={user} item={item} level={p.level} expected={p.expected_value:.6f} "
            f"confidence={p.confidence:.6f} per_level={per}\n")


def cmd_rank(cfg: ExperimentConfig, workdir: Path, user: str, top: int, model_path: Path | None = None) -> str:
    prep = Prepared(data_dir(workdir))
    model = _load_compatible(model_path or run_dir(workdir, cfg) / "model.ordbm", prep)
    u = prep.dense_id("user", user)
    cand = candidate_items(prep.train, prep.graph("user", cfg), u, cfg.n_similar)
    ranked = _rank_for(model, prep.train, u, cand)[:top]
    ids = prep.train.item_ids
    return "".join(f"rank={k} item={ids[i]}\n" for k, i in enumerate(ranked, start=1))


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ordbm", description="Ordinal Boltzmann machine recommender pipeline.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in ("prepare", "train", "evaluate", "predict", "rank"):
        s = sub.add_parser(name)
        s.add_argument("--config", type=Path, help="experiment .ini file")
        s.add_argument("--workdir", type=Path, required=True)
        s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key (repeatable)")
        for key in ("dataset", "variant", "scheme", "seed"):
            s.add_argument(f"--{key}", help=f"shortcut for --set {key}=...")
        if name in ("evaluate", "predict", "rank"):
            s.add_argument("--model", type=Path, help="archive path (default: the run directory's)")
        if name in ("predict", "rank"):
            s.add_argument("--user", required=True)
        if name == "predict":
            s.add_argument("--item", required=True)
        if name == "rank":
            s.add_argument("--top", type=int, default=10)
    return p


def load_config(args) -> ExperimentConfig:
    text = _read(args.config) if args.config else ""
    overrides = list(args.set)
    for key in ("dataset", "variant", "scheme", "seed"):
        if getattr(args, key) is not None:
            overrides.append(f"{key}={getattr(args, key)}")
    return ExperimentConfig.from_ini(text, overrides)


def run(argv=None) -> str:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    cfg = load_config(args)
    wd = args.workdir
    if args.command == "prepare":
        return cmd_prepare(cfg, wd)
    if args.command == "train":
        return f"model={cmd_train(cfg, wd)}\n"
    if args.command == "evaluate":
        return cmd_evaluate(cfg, wd, args.model)
    if args.command == "predict":
        return cmd_predict(cfg, wd, args.user, args.item, args.model)
    return cmd_rank(cfg, wd, args.user, args.top, args.model)


def _classify(exc: BaseException) -> tuple[str, int]:
    if isinstance(exc, CliError):
        return exc.code, exc.exit_code
    if isinstance(exc, ConfigError):
        return "config", EXIT_USAGE
    if isinstance(exc, ColdStartError):
        return "cold_start", EXIT_USAGE
    if isinstance(exc, (DivergenceError, DegenerateDataError, FloatingPointError, EnumerationTooLargeError)):
        return "numeric", EXIT_NUMERIC
    if isinstance(exc, arc.ArchiveError):
        return "archive", EXIT_IO
    if isinstance(exc, CorpusError):
        return "data", EXIT_IO
    if isinstance(exc, OSError):
        return "io", EXIT_IO
    return "internal", EXIT_NUMERIC if isinstance(exc, ArithmeticError) else EXIT_IO


def main(argv=None) -> int:
    try:
        with warnings.catch_warnings():
            # overflow is reported through the divergence checks, not numpy's warnings
            warnings.simplefilter("ignore", RuntimeWarning)
            out = run(argv)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except Exception as exc:
        code, status = _classify(exc)
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else str(exc)
        print(f"error code={code} exit={status} message={json.dumps(str(msg))}", file=sys.stderr)
        return status
    sys.stdout.write(out)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
