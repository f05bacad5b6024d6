import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.optimize import minimize

from conftest import central_fd, random_butane
from tlcv.errors import ContractViolation, DegenerateGeometryError
from tlcv.geometry import random_rotation, rigid_transform
from tlcv.systems import (DEFAULT_PARAMETERS, ReferenceCv, basin_minimum, basin_of, butane4, butane_from_torsion,
                          doublewell1d, force, ground_truth_cv, harmonic1d, in_basin_a, make_system, mullerbrown2d,
                          potential_energy, reference_coordinate)


def _butane_oracle(x, p):
    """Independent energy: harmonic bonds and angles plus the torsion series, all from first principles."""
    P = x.reshape(4, 3)
    u = 0.0
    for i in range(3):
        u += 0.5 * p["kb"] * (np.linalg.norm(P[i + 1] - P[i]) - p["r0"]) ** 2
    for i in range(2):
        a, b = P[i] - P[i + 1], P[i + 2] - P[i + 1]
        th = math.acos(np.dot(a, b) / np.linalg.norm(a) / np.linalg.norm(b))
        u += 0.5 * p["ka"] * (th - p["theta0"]) ** 2
    b1, b2, b3 = P[1] - P[0], P[2] - P[1], P[3] - P[2]
    phi = math.atan2(np.linalg.norm(b2) * np.dot(b1, np.cross(b2, b3)), np.dot(np.cross(b1, b2), np.cross(b2, b3)))
    u += (p["c1"] * (1 + math.cos(phi)) + p["c2"] * (1 + math.cos(2 * phi)) + p["c3"] * (1 + math.cos(3 * phi))
          - p["s1"] * math.sin(phi))
    return u


def test_doublewell_examples():
    s = doublewell1d(a=5.0)
    assert potential_energy(s, [1.0]) == 0.0
    assert potential_energy(s, [0.0]) == 5.0
    assert force(s, [0.0])[0] == 0.0
    assert force(s, [2.0])[0] == pytest.approx(-120.0, abs=1e-12)
    assert ground_truth_cv(s, [0.7]) == 0.7
    assert basin_of(s, [1.0]) == "A" and basin_of(s, [-1.0]) == "B"


def test_tilted_doublewell_closed_form():
    s = doublewell1d(a=5.0, tilt=1.0)
    for x in (-1.3, 0.2, 0.9):
        assert potential_energy(s, [x]) == pytest.approx(5 * (x * x - 1) ** 2 + x, abs=1e-12)


def test_mullerbrown_global_minimum_by_minimization():
    s = mullerbrown2d()
    res = minimize(lambda x: potential_energy(s, x), [-0.5, 1.5], method="Nelder-Mead",
                   options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 5000})
    assert res.x == pytest.approx([-0.558, 1.442], abs=1e-3)
    assert res.fun == pytest.approx(-146.7, abs=0.05)
    xa = basin_minimum(s, "A")
    assert potential_energy(s, xa) == pytest.approx(res.fun, abs=1e-6)
    assert basin_of(s, xa) == "A" and basin_of(s, basin_minimum(s, "B")) == "B"


def test_butane_energy_matches_independent_oracle(rng):
    s = butane4()
    for x in random_butane(rng, 50):
        assert potential_energy(s, x) == pytest.approx(_butane_oracle(x, s.parameters), rel=1e-12, abs=1e-12)


@pytest.mark.parametrize("system", [doublewell1d(), doublewell1d(tilt=1.0), mullerbrown2d(), butane4(), harmonic1d()],
                         ids=lambda s: s.kind)
def test_force_is_negative_fd_gradient(system):
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(1000):
        if system.kind == "butane4":
            x = random_butane(rng)
        elif system.kind == "mullerbrown2d":
            x = rng.uniform([-1.5, -0.3], [1.2, 2.0])
        else:
            x = rng.uniform(-1.8, 1.8, 1)
        f = force(system, x)
        fd = -central_fd(lambda y: potential_energy(system, y), x, 1e-6)
        worst = max(worst, float(np.max(np.abs(f - fd)) / max(np.max(np.abs(f)), 1.0)))
    assert worst < 1e-6


def test_butane_planar_trans_is_pi_and_syn_is_zero():
    s = butane4()
    assert abs(ground_truth_cv(s, butane_from_torsion(math.pi))) == pytest.approx(math.pi, abs=1e-12)
    assert ground_truth_cv(s, butane_from_torsion(0.0)) == pytest.approx(0.0, abs=1e-12)


def test_butane_rigid_invariance(rng):
    s = butane4()
    for x in random_butane(rng, 100):
        R, t = random_rotation(rng), rng.normal(size=3) * 5
        y = rigid_transform(x, R, t)
        assert abs(potential_energy(s, y) - potential_energy(s, x)) < 1e-10
        assert abs(ground_truth_cv(s, y) - ground_truth_cv(s, x)) < 1e-10


def test_butane_basin_labels():
    s = butane4()
    assert s.threshold == pytest.approx(2 * math.pi / 3)
    assert basin_of(s, butane_from_torsion(math.pi)) == "A"
    assert basin_of(s, butane_from_torsion(math.pi / 3)) == "B"
    assert basin_of(s, butane_from_torsion(-math.pi / 3)) == "B"


def test_torsion_barrier_sits_near_threshold():
    # the barrier separating trans from gauche lies on the threshold surface
    s = butane4()
    phis = np.linspace(math.pi / 3, math.pi, 2001)
    e = [potential_energy(s, butane_from_torsion(p)) for p in phis]
    assert abs(phis[int(np.argmax(e))] - s.threshold) < 0.1


def test_butane_collinear_raises():
    x = np.array([0, 0, 0, 1, 0, 0, 2, 0, 0, 3, 1, 0], dtype=float)
    with pytest.raises(DegenerateGeometryError):
        ground_truth_cv(butane4(), x)


def test_dimension_mismatch():
    with pytest.raises(ContractViolation):
        potential_energy(butane4(), np.zeros(11))
    with pytest.raises(ContractViolation):
        force(doublewell1d(), np.zeros(2))


def test_spec_validation():
    with pytest.raises(ContractViolation):
        make_system("nope")
    with pytest.raises(ContractViolation):
        make_system("doublewell1d", mass=-1.0)
    with pytest.raises(ContractViolation):
        make_system("doublewell1d", {"a": float("nan")})
    s = make_system("butane4")
    assert s.particle_count * s.spatial_dim == 12
    assert set(s.parameters) == set(DEFAULT_PARAMETERS["butane4"])


def test_reference_coordinate_gradient_matches_fd(rng):
    for system in (butane4(), mullerbrown2d(), doublewell1d()):
        for _ in range(20):
            x = random_butane(rng) if system.kind == "butane4" else rng.normal(size=system.dim)
            if system.kind == "butane4" and abs(ground_truth_cv(system, x)) < 0.2:
                continue  # the [0, 2pi) cut sits at cis
            s, g = reference_coordinate(system, x)
            fd = central_fd(lambda y: reference_coordinate(system, y)[0], x)
            assert np.max(np.abs(g - fd)) < 1e-6
    cv = ReferenceCv(butane4())
    assert cv(butane_from_torsion(math.pi))[0] == pytest.approx(math.pi)


@given(st.floats(-2.0, 2.0), st.floats(-2.0, 2.0))
def test_basin_constant_on_paths_not_crossing_threshold(a, b):
    s = doublewell1d()
    if (a >= 0) != (b >= 0):
        return
    path = np.linspace(a, b, 50)[:, None]
    labels = {basin_of(s, p) for p in path}
    assert len(labels) == 1
    assert bool(in_basin_a(s, path[0])) == (a >= 0)
