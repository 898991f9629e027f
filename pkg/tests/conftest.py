import numpy as np
import pytest
from hypothesis import settings

from diffrec.data import RawInteraction, dataset_from_records, prepare
from diffrec.synthetic import generate, write_ratings

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


def records_from_arrays(u, i, r, t):
    return [RawInteraction(str(a + 1), str(b + 1), float(c), int(d), k + 1)
            for k, (a, b, c, d) in enumerate(zip(u.tolist(), i.tolist(), r.tolist(), t.tolist()))]


@pytest.fixture(scope="session")
def small_dataset():
    return dataset_from_records(records_from_arrays(*generate(120, 80, mean_degree=20, seed=3)))


@pytest.fixture(scope="session")
def small_bundle(small_dataset):
    return prepare(small_dataset, "clean", 0)


@pytest.fixture(scope="session")
def ratings_file(tmp_path_factory):
    p = tmp_path_factory.mktemp("raw") / "ratings.tsv"
    return write_ratings(p, 120, 80, seed=3, mean_degree=20)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("tests.test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(results, key=lambda k: (int(k.rstrip("ab")), k)):
        ok, detail = results[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}")
