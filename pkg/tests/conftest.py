import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from manifold_rank.core import DescriptorSet
from manifold_rank.graph import build_affinity, exact_knn, normalize

settings.register_profile("default", deadline=None, derandomize=True, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_unit(n, d, rng):
    X = rng.standard_normal((n, d))
    return X / np.linalg.norm(X, axis=1, keepdims=True)


def random_dataset(n, d, rng):
    return DescriptorSet.from_rows(random_unit(n, d, rng))


def random_graph(n, k, rng, d=8, alpha=0.99):
    """Normalized mutual-kNN graph over random unit vectors, with its dataset and affinity."""
    ds = random_dataset(n, d, rng)
    a = build_affinity(exact_knn(ds, k))
    return ds, a, normalize(a, alpha)


def random_query(n, rng, nnz=5):
    y = np.zeros(n)
    y[rng.choice(n, size=min(nnz, n), replace=False)] = rng.random(min(nnz, n)) + 0.1
    return y


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# --- acceptance reporting ----------------------------------------------------------

ACCEPTANCE = {}  # criterion number -> [outcome, detail]


@pytest.fixture
def criterion(request):
    """Record a detail line for an acceptance criterion; outcome comes from the test result."""
    number = request.node.get_closest_marker("criterion").args[0]
    entry = ACCEPTANCE.setdefault(number, ["FAIL", ""])

    def note(detail):
        entry[1] = detail

    return note


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when != "call":
        return
    entry = ACCEPTANCE.setdefault(marker.args[0], ["FAIL", ""])
    entry[0] = "PASS" if report.passed else "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        outcome, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {outcome}  {detail}")
