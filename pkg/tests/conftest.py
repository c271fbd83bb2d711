import os
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ordbm.corpus import filter_min_counts, load_ratings, split_per_user

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

ML100K = Path(os.environ.get("ORDBM_ML100K",
                             Path(__file__).resolve().parents[1] / "data" / "ml-100k" / "u.data"))


@pytest.fixture(scope="session")
def ml100k_raw():
    if not ML100K.is_file():
        pytest.fail(f"MovieLens-100K not found at {ML100K}; run scripts/fetch_ml100k.py "
                    "or point ORDBM_ML100K at a u.data file")
    return load_ratings(ML100K, "ml100k_tab")


@pytest.fixture(scope="session")
def ml100k_split(ml100k_raw):
    """The evaluation protocol: keep users/items with more than 20 ratings, 80/20 split."""
    return split_per_user(filter_min_counts(ml100k_raw, 20, 20), 0.8, 0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE: dict = {}


@pytest.fixture(scope="session")
def acceptance_log():
    """Criterion number -> one-line verdict, printed in the terminal summary."""
    return _ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[k])
