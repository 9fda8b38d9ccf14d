import os

import numpy as np
import pytest

from crossrec import corpus

ML1M_ENV = "CROSSREC_ML1M"


def ml1m_dir():
    """Directory holding ratings.dat/users.dat/movies.dat, or None."""
    path = os.environ.get(ML1M_ENV, os.path.join(os.path.dirname(__file__), "..", "data", "ml-1m"))
    if all(os.path.exists(os.path.join(path, f)) for f in ("ratings.dat", "users.dat", "movies.dat")):
        return os.path.abspath(path)
    return None


requires_ml1m = pytest.mark.skipif(
    ml1m_dir() is None,
    reason=f"MovieLens-1M not found; set {ML1M_ENV} to a directory with ratings/users/movies.dat",
)


def pytest_configure(config):
    config.addinivalue_line(
        "markers", "desk: desk-scale dataset reproduction (hours of CPU; needs MovieLens-1M)"
    )


def write_generic_dataset(directory, num_users=30, num_items=140, seed=7,
                          min_inter=12, max_inter=30):
    """A small pin-style dataset on disk; returns the three file paths."""
    rng = np.random.default_rng(seed)
    inter = os.path.join(directory, "interactions.tsv")
    uattr = os.path.join(directory, "user_attrs.tsv")
    iattr = os.path.join(directory, "item_attrs.tsv")
    with open(inter, "w", encoding="utf-8") as fh:
        fh.write("# raw_user<TAB>raw_item<TAB>timestamp\n")
        for u in range(num_users):
            n = int(rng.integers(min_inter, max_inter))
            for i in rng.choice(num_items, size=n, replace=False):
                fh.write(f"{u + 100}\t{int(i) + 500}\t{1000 + u + int(i)}\n")
    categories = ["art", "food", "travel", "diy", "tech"]
    with open(uattr, "w", encoding="utf-8") as fh:
        for u in range(num_users):
            for c in rng.choice(categories, size=int(rng.integers(1, 3)), replace=False):
                fh.write(f"{u + 100}\t{c}\n")
    open(iattr, "w", encoding="utf-8").close()
    return inter, uattr, iattr


@pytest.fixture
def generic_dataset(tmp_path):
    return write_generic_dataset(str(tmp_path))


@pytest.fixture
def tiny_catalog():
    return corpus.AttributeCatalog(
        user_attrs=[[0], [1, 2], [0, 1], [2], [1], [0, 2]],
        item_attrs=[[0], [1], [2, 3], [0, 3], [1, 2], [3], [0]],
        user_vocab_size=3,
        item_vocab_size=4,
    )
