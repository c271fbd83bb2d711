"""Rating feature maps for the categorical, ordinal and Gaussian parameterisations."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .corpus import LevelRangeError, RatingStore

KINDS = ("categorical", "ordinal", "gaussian")


class DegenerateDataError(ValueError):
    pass


@dataclass(frozen=True)
class GaussianNormalizer:
    mean: float
    std: float

    def __post_init__(self):
        if not self.std > 0:
            raise DegenerateDataError("normalizer std must be positive")

    def transform(self, level):
        return (np.asarray(level, dtype=float) - self.mean) / self.std

    def inverse(self, x, n_levels: int | None = None):
        out = np.asarray(x, dtype=float) * self.std + self.mean
        if n_levels is not None:
            out = np.clip(out, 1.0, float(n_levels))
        return out


def fit_gaussian_normalizer(store: RatingStore) -> GaussianNormalizer:
    """Global mean / population std of all levels in ``store``."""
    if store.n_ratings == 0:
        raise DegenerateDataError("cannot fit a normalizer on an empty store")
    levels = store.levels.astype(float)
    std = float(levels.std())
    if std == 0.0:
        raise DegenerateDataError("all ratings are identical; zero variance")
    return GaussianNormalizer(float(levels.mean()), std)


@dataclass(frozen=True)
class FeatureScheme:
    """Feature map of one parameterisation over an ``n_levels`` scale.

    Ordinal unary features are laid out as ``[down_1..down_n, up_1..up_n]``.
    """

    kind: str
    n_levels: int = 5
    normalizer: GaussianNormalizer | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown scheme {self.kind!r}; expected one of {KINDS}")
        if self.n_levels < 2:
            raise ValueError("need at least two levels")
        if self.kind == "gaussian" and self.normalizer is None:
            raise ValueError("the gaussian scheme needs a fitted normalizer")

    @property
    def A(self) -> int:
        return {"categorical": self.n_levels, "ordinal": 2 * self.n_levels, "gaussian": 1}[self.kind]

    @property
    def B(self) -> int:
        return 1

    @property
    def is_gaussian(self) -> bool:
        return self.kind == "gaussian"

    def _check(self, s: int) -> int:
        s = int(s)
        if not 1 <= s <= self.n_levels:
            raise LevelRangeError(f"level {s} outside 1..{self.n_levels}")
        return s

    def unary(self, s: int) -> np.ndarray:
        s = self._check(s)
        n = self.n_levels
        if self.kind == "categorical":
            f = np.zeros(n)
            f[s - 1] = 1.0
            return f
        if self.kind == "ordinal":
            grid = np.arange(1, n + 1, dtype=float)
            down = (grid - s) * (grid < s)
            up = (grid - s) * (grid > s)
            return np.concatenate([down, up])
        return np.array([float(self.normalizer.transform(s))])

    def pair(self, s: int, t: int) -> np.ndarray:
        s, t = self._check(s), self._check(t)
        if self.kind == "categorical":
            return np.array([float(s == t)])
        if self.kind == "ordinal":
            return np.array([float(abs(t - s))])
        return np.array([float(self.normalizer.transform(s) * self.normalizer.transform(t))])

    @cached_property
    def unary_table(self) -> np.ndarray:
        """``(n, A)``; row ``s-1`` holds the features of level ``s``."""
        t = np.stack([self.unary(s) for s in range(1, self.n_levels + 1)])
        t.setflags(write=False)
        return t

    @cached_property
    def pair_table(self) -> np.ndarray:
        """``(n, n, B)`` pair features indexed by zero-based levels."""
        n = self.n_levels
        t = np.stack([[self.pair(s, r) for r in range(1, n + 1)] for s in range(1, n + 1)])
        t.setflags(write=False)
        return t

    @cached_property
    def level_values(self) -> np.ndarray:
        """Numeric value of each level (normalized under the gaussian scheme)."""
        v = np.arange(1, self.n_levels + 1, dtype=float)
        if self.is_gaussian:
            v = self.normalizer.transform(v)
        v.setflags(write=False)
        return v


def unary_features(scheme: FeatureScheme, s: int) -> np.ndarray:
    return scheme.unary(s)


def pair_feature(scheme: FeatureScheme, s: int, t: int) -> np.ndarray:
    return scheme.pair(s, t)
