"""Run the MovieLens-100K comparison through the ``ordbm`` command line.

Prepares the split once, then trains and evaluates each variant and prints
one row per run. Every run leaves its config, model, training log, report and
curves under ``<workdir>/runs/<LABEL>/``.

    python scripts/reproduce_ml100k.py --workdir runs/ml100k
    python scripts/reproduce_ml100k.py --workdir runs/ml100k --runs ORD-USER SVD-20 --set max_epochs=5
"""

from __future__ import annotations

import argparse
import contextlib
import io
import re
import sys
from pathlib import Path

from ordbm import cli

DEFAULT_DATA = Path(__file__).resolve().parents[1] / "data" / "ml-100k" / "u.data"

RUNS = {
    "CAT-USER": ["--scheme", "categorical", "--variant", "user"],
    "ORD-USER": ["--scheme", "ordinal", "--variant", "user"],
    "ORD-USER-CORR": ["--scheme", "ordinal", "--variant", "user_corr"],
    "ORD-USER-ITEM": ["--scheme", "ordinal", "--variant", "user_item"],
    "ORD-USER-ITEM-CORR": ["--scheme", "ordinal", "--variant", "user_item_corr"],
    "GAUSS-USER": ["--scheme", "gaussian", "--variant", "user", "--set", "method=gaussian_pl",
                   "--set", "learning_rate=0.01"],
    "SVD-20": ["--variant", "svd", "--set", "svd_rank=20"],
}


def _call(argv: list[str]) -> str:
    buf = io.StringIO()
    with contextlib.redirect_stdout(buf):
        code = cli.main(argv)
    if code != 0:
        sys.exit(code)
    return buf.getvalue()


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--workdir", type=Path, required=True)
    ap.add_argument("--dataset", type=Path, default=DEFAULT_DATA)
    ap.add_argument("--runs", nargs="+", choices=sorted(RUNS), default=list(RUNS))
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                    help="extra config override applied to every run")
    ap.add_argument("--ranking-users", type=int, default=0, help="rank only the first N test users (0: all)")
    args = ap.parse_args()

    common = ["--workdir", str(args.workdir), "--dataset", str(args.dataset),
              "--set", f"ranking_users={args.ranking_users}"]
    for kv in args.set:
        common += ["--set", kv]
    print(_call(["prepare", *common]), end="", flush=True)
    print(f"{'run':<20} {'mae':>8} {'utility':>8} {'popularity':>10}", flush=True)
    for name in args.runs:
        _call(["train", *common, *RUNS[name]])
        report = dict(re.findall(r"^(\w+)=(.*)$", _call(["evaluate", *common, *RUNS[name]]), flags=re.M))
        print(f"{report['label']:<20} {float(report['mae']):>8.4f} {float(report['utility']):>8.2f} "
              f"{float(report['popularity_utility']):>10.2f}", flush=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
