"""Rating corpora: parsing, count filtering, per-user splits.

A :class:`RatingStore` keeps the triples as three parallel arrays plus two CSR
indexes (rows by user, rows by item). Stores derived from one another by
filtering re-densify their ids; train/test splits share the parent's index
space so parameters trained on one side line up with the other.
"""

from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass, field
from typing import Iterable, TextIO

import numpy as np


class CorpusError(ValueError):
    """Base class for corpus failures."""


class ParseError(CorpusError):
    pass


class LevelRangeError(CorpusError):
    pass


class DuplicateRatingError(CorpusError):
    pass


class EmptyCorpusError(CorpusError):
    pass


class SplitError(CorpusError):
    pass


FORMATS = ("ml100k_tab", "ml1m_coloncolon", "csv")


@dataclass(frozen=True)
class RatingScale:
    n_levels: int = 5
    level_values: tuple = (1, 2, 3, 4, 5)

    def __post_init__(self):
        if self.n_levels < 2:
            raise ValueError("a rating scale needs at least two levels")
        if len(self.level_values) != self.n_levels:
            raise ValueError("level_values must have n_levels entries")
        if any(b <= a for a, b in zip(self.level_values, self.level_values[1:])):
            raise ValueError("level_values must be strictly increasing")

    @classmethod
    def integer(cls, n_levels: int) -> "RatingScale":
        return cls(n_levels, tuple(range(1, n_levels + 1)))

    def level_of(self, value) -> int:
        """Map a raw rating value to its 1-based level index."""
        for k, v in enumerate(self.level_values):
            if v == value:
                return k + 1
        raise LevelRangeError(f"rating {value!r} not on scale {self.level_values}")

    def value_of(self, level: int):
        return self.level_values[level - 1]


@dataclass(frozen=True)
class RatingTriple:
    user: int
    item: int
    level: int


def _csr(keys: np.ndarray, secondary: np.ndarray, n_rows: int):
    order = np.lexsort((secondary, keys))
    counts = np.bincount(keys, minlength=n_rows)
    ptr = np.zeros(n_rows + 1, dtype=np.int64)
    np.cumsum(counts, out=ptr[1:])
    return ptr, order


@dataclass(frozen=True, eq=False)
class RatingStore:
    """Immutable sparse rating matrix with dual (user / item) indexing.

    ``users``, ``items`` and ``levels`` are parallel arrays; the position of a
    triple in them is its *rating index*, which :meth:`transpose` preserves.
    ``user_ids`` / ``item_ids`` map dense indices back to the raw ids.
    """

    users: np.ndarray
    items: np.ndarray
    levels: np.ndarray
    user_ids: np.ndarray
    item_ids: np.ndarray
    scale: RatingScale = field(default_factory=RatingScale)
    user_ptr: np.ndarray = field(init=False, repr=False)
    user_order: np.ndarray = field(init=False, repr=False)
    item_ptr: np.ndarray = field(init=False, repr=False)
    item_order: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        users = np.ascontiguousarray(self.users, dtype=np.int64)
        items = np.ascontiguousarray(self.items, dtype=np.int64)
        levels = np.ascontiguousarray(self.levels, dtype=np.int64)
        for name, arr in (("users", users), ("items", items), ("levels", levels)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if not (len(users) == len(items) == len(levels)):
            raise ValueError("users, items and levels must have equal length")
        if len(levels) and (levels.min() < 1 or levels.max() > self.scale.n_levels):
            raise LevelRangeError(f"levels must lie in 1..{self.scale.n_levels}")
        if len(users) and (users.min() < 0 or users.max() >= len(self.user_ids)):
            raise ValueError("user index outside id map")
        if len(items) and (items.min() < 0 or items.max() >= len(self.item_ids)):
            raise ValueError("item index outside id map")
        uptr, uorder = _csr(users, items, self.n_users)
        iptr, iorder = _csr(items, users, self.n_items)
        pair_key = users[uorder] * max(self.n_items, 1) + items[uorder]
        if len(pair_key) > 1 and np.any(np.diff(pair_key) == 0):
            k = int(np.flatnonzero(np.diff(pair_key) == 0)[0])
            u, i = users[uorder[k]], items[uorder[k]]
            raise DuplicateRatingError(
                f"duplicate rating for user {self.user_ids[u]!r}, item {self.item_ids[i]!r}"
            )
        object.__setattr__(self, "user_ptr", uptr)
        object.__setattr__(self, "user_order", uorder)
        object.__setattr__(self, "item_ptr", iptr)
        object.__setattr__(self, "item_order", iorder)

    # -- sizes -----------------------------------------------------------
    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    @property
    def n_ratings(self) -> int:
        return len(self.levels)

    def __len__(self) -> int:
        return self.n_ratings

    def user_counts(self) -> np.ndarray:
        return np.diff(self.user_ptr)

    def item_counts(self) -> np.ndarray:
        return np.diff(self.item_ptr)

    # -- row access ------------------------------------------------------
    def user_rating_index(self, u: int) -> np.ndarray:
        """Rating indices of user ``u``'s triples, sorted by item."""
        return self.user_order[self.user_ptr[u]:self.user_ptr[u + 1]]

    def item_rating_index(self, i: int) -> np.ndarray:
        return self.item_order[self.item_ptr[i]:self.item_ptr[i + 1]]

    def user_row(self, u: int) -> tuple[np.ndarray, np.ndarray]:
        """``(items, levels)`` rated by user ``u``."""
        idx = self.user_rating_index(u)
        return self.items[idx], self.levels[idx]

    def item_row(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        """``(users, levels)`` who rated item ``i``."""
        idx = self.item_rating_index(i)
        return self.users[idx], self.levels[idx]

    @property
    def by_user(self) -> dict:
        return {u: list(zip(*map(np.ndarray.tolist, self.user_row(u))))
                for u in range(self.n_users) if self.user_ptr[u + 1] > self.user_ptr[u]}

    @property
    def by_item(self) -> dict:
        return {i: list(zip(*map(np.ndarray.tolist, self.item_row(i))))
                for i in range(self.n_items) if self.item_ptr[i + 1] > self.item_ptr[i]}

    def triples(self) -> Iterable[RatingTriple]:
        for u, i, s in zip(self.users.tolist(), self.items.tolist(), self.levels.tolist()):
            yield RatingTriple(u, i, s)

    # -- derived stores --------------------------------------------------
    def transpose(self) -> "RatingStore":
        """Swap the roles of users and items; rating indices are unchanged."""
        return RatingStore(self.items, self.users, self.levels,
                           self.item_ids, self.user_ids, self.scale)

    def subset(self, index: np.ndarray) -> "RatingStore":
        """Keep the selected triples in the same index space (no re-densify)."""
        index = np.asarray(index)
        return RatingStore(self.users[index], self.items[index], self.levels[index],
                           self.user_ids, self.item_ids, self.scale)

    def lookup(self, u: int, i: int) -> int | None:
        """Level of (u, i) or ``None`` if unrated."""
        items, levels = self.user_row(u)
        k = np.searchsorted(items, i)
        if k < len(items) and items[k] == i:
            return int(levels[k])
        return None

    def compact(self) -> "RatingStore":
        """Re-densify: drop users/items with no ratings."""
        ukeep = np.unique(self.users)
        ikeep = np.unique(self.items)
        return RatingStore(np.searchsorted(ukeep, self.users), np.searchsorted(ikeep, self.items),
                           self.levels, self.user_ids[ukeep], self.item_ids[ikeep], self.scale)

    # -- serialization ---------------------------------------------------
    def to_csv(self, out: TextIO | None = None) -> str:
        """Canonical export: header then rows sorted by (user id, item id)."""
        order = np.lexsort((self.item_ids[self.items], self.user_ids[self.users]))
        buf = io.StringIO()
        buf.write("user,item,rating\n")
        uid, iid = self.user_ids[self.users[order]], self.item_ids[self.items[order]]
        vals = [self.scale.value_of(s) for s in self.levels[order].tolist()]
        for u, i, v in zip(uid.tolist(), iid.tolist(), vals):
            buf.write(f"{u},{i},{v}\n")
        text = buf.getvalue()
        if out is not None:
            out.write(text)
        return text

    def content_hash(self) -> str:
        return hashlib.sha256(self.to_csv().encode()).hexdigest()[:16]

    def same_as(self, other: "RatingStore") -> bool:
        """Element-wise equality including id maps and triple order."""
        return (
            self.scale == other.scale
            and np.array_equal(self.user_ids, other.user_ids)
            and np.array_equal(self.item_ids, other.item_ids)
            and np.array_equal(self.users, other.users)
            and np.array_equal(self.items, other.items)
            and np.array_equal(self.levels, other.levels)
        )


def _id_array(tokens: list[str]) -> np.ndarray:
    try:
        return np.array([int(t) for t in tokens], dtype=np.int64)
    except ValueError:
        return np.array(tokens, dtype=object)


def from_raw(raw_users: list[str], raw_items: list[str], levels: list[int],
             scale: RatingScale | None = None) -> RatingStore:
    """Build a store from raw id tokens, assigning dense ids in sorted id order."""
    scale = scale or RatingScale()
    if not levels:
        raise EmptyCorpusError("no ratings")
    user_ids, users = np.unique(_id_array(raw_users), return_inverse=True)
    item_ids, items = np.unique(_id_array(raw_items), return_inverse=True)
    return RatingStore(users, items, np.asarray(levels), user_ids, item_ids, scale)


def parse_ratings(stream, format_tag: str, scale: RatingScale | None = None) -> RatingStore:
    """Parse a rating file (bytes or text stream) in one of :data:`FORMATS`."""
    if format_tag not in FORMATS:
        raise ValueError(f"unknown format {format_tag!r}; expected one of {FORMATS}")
    scale = scale or RatingScale()
    if isinstance(stream, (bytes, bytearray)):
        stream = io.StringIO(stream.decode())
    elif isinstance(stream, str):
        stream = io.StringIO(stream)
    raw_u, raw_i, levels = [], [], []
    sep = {"ml100k_tab": "\t", "ml1m_coloncolon": "::", "csv": ","}[format_tag]
    min_fields = 4 if format_tag != "csv" else 3
    for lineno, line in enumerate(stream, start=1):
        if isinstance(line, bytes):
            line = line.decode()
        line = line.rstrip("\r\n")
        if not line.strip():
            continue
        if format_tag == "csv" and lineno == 1:
            if [h.strip() for h in line.split(",")][:3] != ["user", "item", "rating"]:
                raise ParseError(f"line 1: expected header 'user,item,rating', got {line!r}")
            continue
        parts = line.split(sep)
        if len(parts) < min_fields or not parts[0] or not parts[1]:
            raise ParseError(f"line {lineno}: malformed record {line!r}")
        try:
            value = float(parts[2])
        except ValueError:
            raise ParseError(f"line {lineno}: non-numeric rating {parts[2]!r}") from None
        try:
            levels.append(scale.level_of(value))
        except LevelRangeError as exc:
            raise LevelRangeError(f"line {lineno}: {exc}") from None
        raw_u.append(parts[0].strip())
        raw_i.append(parts[1].strip())
    return from_raw(raw_u, raw_i, levels, scale)


def load_ratings(path, format_tag: str, scale: RatingScale | None = None) -> RatingStore:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_ratings(fh, format_tag, scale)


def filter_min_counts(store: RatingStore, min_user_ratings: int, min_item_ratings: int) -> RatingStore:
    """Keep users with more than ``min_user_ratings`` ratings and items with more
    than ``min_item_ratings``, iterating until both hold at once."""
    if min_user_ratings < 0 or min_item_ratings < 0:
        raise ValueError("thresholds must be non-negative")
    keep = np.ones(store.n_ratings, dtype=bool)
    while True:
        ucount = np.bincount(store.users[keep], minlength=store.n_users)
        icount = np.bincount(store.items[keep], minlength=store.n_items)
        new = keep & (ucount[store.users] > min_user_ratings) & (icount[store.items] > min_item_ratings)
        if np.array_equal(new, keep):
            break
        keep = new
    if not keep.any():
        raise EmptyCorpusError(
            f"no ratings survive filtering at thresholds ({min_user_ratings}, {min_item_ratings})"
        )
    return store.subset(np.flatnonzero(keep)).compact()


@dataclass(frozen=True, eq=False)
class DataSplit:
    train: RatingStore
    test: RatingStore
    seed: int


def split_per_user(store: RatingStore, train_fraction: float, seed: int) -> DataSplit:
    """Per-user random split; each user keeps at least one train and one test rating."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie strictly between 0 and 1")
    counts = store.user_counts()
    bad = np.flatnonzero((counts > 0) & (counts < 2))
    if len(bad):
        raise SplitError(f"user {store.user_ids[bad[0]]!r} has a single rating and cannot be split")
    rng = np.random.default_rng(seed)
    train_mask = np.zeros(store.n_ratings, dtype=bool)
    for u in range(store.n_users):
        idx = store.user_rating_index(u)
        n = len(idx)
        if n == 0:
            continue
        n_train = min(max(int(np.floor(train_fraction * n + 0.5)), 1), n - 1)
        train_mask[idx[rng.permutation(n)[:n_train]]] = True
    return DataSplit(store.subset(np.flatnonzero(train_mask)),
                     store.subset(np.flatnonzero(~train_mask)), seed)
