import numpy as np
import pytest
from hypothesis import settings

from tlcv.systems import butane_from_torsion

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


def central_fd(fn, x, h=1e-6):
    """Central finite-difference gradient of a scalar function of a flat vector."""
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (fn(x + e) - fn(x - e)) / (2 * h)
    return g


def rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b) / (np.abs(a) + floor)))


def max_rel_err(a, b, scale_floor=1.0):
    """Max error normalized by max(|a|_inf, scale_floor): robust near zero components."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), scale_floor))


def random_butane(rng, n=None, noise=0.08):
    """Near-equilibrium butane chains with random torsions and small Cartesian noise."""
    m = 1 if n is None else n
    phis = rng.uniform(-np.pi, np.pi, m)
    X = np.stack([butane_from_torsion(p) for p in phis]) + noise * rng.standard_normal((m, 12))
    return X[0] if n is None else X


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_VERDICTS = {}


@pytest.fixture
def verdict(request):
    """Record one pass/fail line per acceptance criterion, then assert it.

    Test names look like ``test_criterion_NN_...``; a test that errors before
    recording still gets a FAIL line.
    """
    number = int(request.node.name.split("_")[2])

    def record(name, ok, detail):
        _VERDICTS[number] = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {name}: {detail}"
        assert ok, _VERDICTS[number]

    yield record
    if number not in _VERDICTS:
        _VERDICTS[number] = f"criterion {number:>2} FAIL  {request.node.name}: raised before a verdict"


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_VERDICTS):
            terminalreporter.write_line(_VERDICTS[k])
