"""Reference SGD matrix factorisation in plain Python.

Deliberately shares no code with ``ordbm.baselines``: lists, the ``random``
module and explicit loops. Reads the ``train.csv``/``test.csv`` written by
``ordbm prepare`` and prints the clamped test MAE.

    python scripts/svd_oracle.py /tmp/wd/data --rank 20 --epochs 100
"""

from __future__ import annotations

import argparse
import csv
import math
import random
from pathlib import Path


def read(path: Path):
    with open(path, newline="") as fh:
        return [(r["user"], r["item"], float(r["rating"])) for r in csv.DictReader(fh)]


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("data_dir", type=Path)
    ap.add_argument("--rank", type=int, default=20)
    ap.add_argument("--lr", type=float, default=0.005)
    ap.add_argument("--l2", type=float, default=0.02)
    ap.add_argument("--epochs", type=int, default=100)
    ap.add_argument("--seed", type=int, default=12345)
    ap.add_argument("--lo", type=float, default=1.0)
    ap.add_argument("--hi", type=float, default=5.0)
    a = ap.parse_args()

    train = read(a.data_dir / "train.csv")
    test = read(a.data_dir / "test.csv")
    rnd = random.Random(a.seed)
    mu = sum(r for _, _, r in train) / len(train)
    P: dict = {}
    Q: dict = {}
    for u, i, _ in train:
        if u not in P:
            P[u] = [rnd.gauss(0.0, 0.01) for _ in range(a.rank)]
        if i not in Q:
            Q[i] = [rnd.gauss(0.0, 0.01) for _ in range(a.rank)]

    order = list(range(len(train)))
    for epoch in range(a.epochs):
        rnd.shuffle(order)
        sse = 0.0
        for t in order:
            u, i, r = train[t]
            pu, qi = P[u], Q[i]
            err = r - mu - sum(x * y for x, y in zip(pu, qi))
            sse += err * err
            for f in range(a.rank):
                x, y = pu[f], qi[f]
                pu[f] = x + a.lr * (err * y - a.l2 * x)
                qi[f] = y + a.lr * (err * x - a.l2 * y)
        print(f"epoch {epoch + 1} train_rmse {math.sqrt(sse / len(train)):.5f}", flush=True)

    total, n = 0.0, 0
    for u, i, r in test:
        if u in P and i in Q:
            pred = mu + sum(x * y for x, y in zip(P[u], Q[i]))
            total += abs(min(max(pred, a.lo), a.hi) - r)
            n += 1
    print(f"oracle_mae={total / n:.6f} n={n}")


if __name__ == "__main__":
    main()
