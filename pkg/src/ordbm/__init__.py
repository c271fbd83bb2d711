"""Boltzmann-machine recommenders over ordinal, categorical or Gaussian rating features."""

from .corpus import RatingScale, RatingStore, filter_min_counts, parse_ratings, split_per_user
from .features import FeatureScheme, fit_gaussian_normalizer
from .neighbors import build_topk, pearson
from .user_bm import UserModelParams

__all__ = [
    "FeatureScheme",
    "RatingScale",
    "RatingStore",
    "UserModelParams",
    "build_topk",
    "filter_min_counts",
    "fit_gaussian_normalizer",
    "parse_ratings",
    "pearson",
    "split_per_user",
]

__version__ = "0.1.0"
