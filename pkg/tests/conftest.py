import numpy as np
import pytest

from hgmmreg.io import subsample, synthetic_object, unit_normalize

CORNERS = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], float)


def make_blobs(n_per=1000, sigma=0.01, seed=0):
    rng = np.random.default_rng(seed)
    return np.concatenate([c + sigma * rng.standard_normal((n_per, 3)) for c in CORNERS])


def make_plane(n=4000, seed=0):
    rng = np.random.default_rng(seed)
    return np.column_stack([rng.uniform(-1, 1, (n, 2)), np.zeros(n)])


def random_spd(rng, k, lo=1e-4, hi=1.0):
    q = np.linalg.qr(rng.standard_normal((k, 3, 3)))[0]
    lam = np.exp(rng.uniform(np.log(lo), np.log(hi), (k, 3)))
    return np.einsum("kij,kj,klj->kil", q, lam, q)


@pytest.fixture(scope="session")
def blobs():
    return make_blobs()


@pytest.fixture(scope="session")
def plane():
    return make_plane()


@pytest.fixture(scope="session")
def object_cloud():
    return unit_normalize(synthetic_object(20000, seed=1))


@pytest.fixture(scope="session")
def object_5k(object_cloud):
    return subsample(object_cloud, 5000, seed=0)


ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance():
    """Record one pass/fail line for an acceptance criterion, then assert it."""

    def record(number, title, ok, detail=""):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title}" + (f" ({detail})" if detail else "")
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
