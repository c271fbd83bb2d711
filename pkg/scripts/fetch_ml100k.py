"""Materialise MovieLens-100K as ``data/ml-100k/u.data``.

The sandbox has no route to grouplens.org, but the ``pytorch-widedeep`` wheel
on PyPI ships the full 100,000-rating table as a parquet file. We download the
wheel (no install), pull that member out and write it back in the original
tab-separated layout.
"""

from __future__ import annotations

import argparse
import io
import subprocess
import sys
import tempfile
import zipfile
from pathlib import Path

import pandas as pd

MEMBER = "pytorch_widedeep/datasets/data/MovieLens100k_data.parquet.brotli"
DEFAULT_OUT = Path(__file__).resolve().parents[1] / "data" / "ml-100k" / "u.data"


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", type=Path, default=DEFAULT_OUT)
    args = parser.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run(
            [sys.executable, "-m", "pip", "download", "--no-deps", "-q",
             "-d", tmp, "pytorch-widedeep==1.7.0"],
            check=True,
        )
        wheel = next(Path(tmp).glob("*.whl"))
        with zipfile.ZipFile(wheel) as zf:
            df = pd.read_parquet(io.BytesIO(zf.read(MEMBER)))

    df = df[["user_id", "movie_id", "rating", "timestamp"]]
    if len(df) != 100_000:
        print(f"unexpected row count {len(df)}", file=sys.stderr)
        return 1
    args.out.parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(args.out, sep="\t", header=False, index=False, lineterminator="\n")
    print(f"wrote {len(df)} ratings to {args.out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
