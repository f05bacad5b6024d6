"""Analytic toy molecular systems.

Three systems stand in for an all-atom peptide: a 1D double well, the
Muller-Brown surface, and a four-bead butane-like chain whose torsion is the
slow coordinate. A harmonic oscillator is kept for thermostat checks. All
use dimensionless units with k_B = 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy.optimize import minimize

from . import _kernels as K
from .errors import ContractViolation, DegenerateGeometryError

KINDS = ("doublewell1d", "mullerbrown2d", "butane4", "harmonic1d")
_KIND_ID = {"doublewell1d": K.DOUBLEWELL, "mullerbrown2d": K.MULLERBROWN, "butane4": K.BUTANE, "harmonic1d": K.HARMONIC}

MULLER_BROWN = {
    "A": (-200.0, -100.0, -170.0, 15.0),
    "a": (-1.0, -1.0, -6.5, 0.7),
    "b": (0.0, 0.0, 11.0, 0.6),
    "c": (-10.0, -10.0, -6.5, 0.7),
    "x0": (1.0, 0.0, -0.5, -1.0),
    "y0": (0.0, 0.5, 1.5, 1.0),
}
# Global minimum (basin A), the lower-right minimum (basin B) and the saddle
# between the lower-right minimum and the intermediate one.
_MB_MIN_A = (-0.558224, 1.441726)
_MB_MIN_B = (0.623499, 0.028038)
_MB_SADDLE = (0.212487, 0.292988)

DEFAULT_PARAMETERS = {
    "doublewell1d": {"a": 5.0, "tilt": 0.0},
    "mullerbrown2d": {
        "scale": 1.0,
        **{f"{key}{i + 1}": val for key, vals in MULLER_BROWN.items() for i, val in enumerate(vals)},
    },
    "butane4": {
        "kb": 100.0, "r0": 1.0, "ka": 40.0, "theta0": 1.911,
        "c1": 2.0, "c2": 0.0, "c3": 4.0, "s1": 3.5,
    },
    "harmonic1d": {"k": 1.0},
}
_SHAPES = {"doublewell1d": (1, 1), "mullerbrown2d": (1, 2), "butane4": (4, 3), "harmonic1d": (1, 1)}
DEFAULT_THRESHOLD = {"doublewell1d": 0.0, "mullerbrown2d": 0.0, "butane4": 2.0 * math.pi / 3.0, "harmonic1d": 0.0}


@dataclass(frozen=True)
class SystemSpec:
    kind: str
    parameters: Mapping[str, float] = field(default_factory=dict)
    particle_count: int = 1
    spatial_dim: int = 1
    mass: tuple = (1.0,)
    threshold: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractViolation(f"unknown system kind {self.kind!r}")
        if (self.particle_count, self.spatial_dim) != _SHAPES[self.kind]:
            raise ContractViolation(f"{self.kind} needs shape {_SHAPES[self.kind]}")
        if len(self.mass) != self.particle_count or min(self.mass) <= 0:
            raise ContractViolation("one positive mass per particle required")
        missing = set(DEFAULT_PARAMETERS[self.kind]) - set(self.parameters)
        unknown = set(self.parameters) - set(DEFAULT_PARAMETERS[self.kind])
        if missing or unknown:
            raise ContractViolation(f"bad parameters: missing {sorted(missing)}, unknown {sorted(unknown)}")
        if not all(math.isfinite(v) for v in self.parameters.values()):
            raise ContractViolation("parameters must be finite")

    @property
    def dim(self) -> int:
        return self.particle_count * self.spatial_dim

    @property
    def kind_id(self) -> int:
        return _KIND_ID[self.kind]

    @property
    def masses_per_dof(self) -> np.ndarray:
        return np.repeat(np.asarray(self.mass, dtype=float), self.spatial_dim)

    def kernel_params(self) -> np.ndarray:
        p = self.parameters
        if self.kind == "doublewell1d":
            return np.array([p["a"], p["tilt"]], dtype=float)
        if self.kind == "harmonic1d":
            return np.array([p["k"]], dtype=float)
        if self.kind == "mullerbrown2d":
            out = [p["scale"]]
            for key in ("A", "a", "b", "c", "x0", "y0"):
                out.extend(p[f"{key}{i}"] for i in range(1, 5))
            return np.array(out, dtype=float)
        return np.array([p[k] for k in ("kb", "r0", "ka", "theta0", "c1", "c2", "c3", "s1")], dtype=float)

    def cv_params(self) -> np.ndarray:
        if self.kind == "mullerbrown2d":
            u = np.subtract(_MB_MIN_A, _MB_MIN_B)
            u /= np.linalg.norm(u)
            return np.array([u[0], u[1], *_MB_SADDLE])
        return np.zeros(4)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "parameters": dict(self.parameters), "mass": list(self.mass),
                "threshold": self.threshold}

    @classmethod
    def from_dict(cls, d: Mapping) -> "SystemSpec":
        d = dict(d)
        return make_system(d.pop("kind"), **d)


def make_system(kind: str, parameters: Mapping | None = None, mass=None, threshold=None) -> SystemSpec:
    if kind not in KINDS:
        raise ContractViolation(f"unknown system kind {kind!r}")
    params = dict(DEFAULT_PARAMETERS[kind])
    params.update({k: float(v) for k, v in (parameters or {}).items()})
    n, d = _SHAPES[kind]
    if mass is None:
        mass = (1.0,) * n
    elif np.isscalar(mass):
        mass = (float(mass),) * n
    return SystemSpec(kind, params, n, d, tuple(float(m) for m in mass),
                      DEFAULT_THRESHOLD[kind] if threshold is None else float(threshold))


def doublewell1d(a=5.0, tilt=0.0, **kw) -> SystemSpec:
    return make_system("doublewell1d", {"a": a, "tilt": tilt}, **kw)


def mullerbrown2d(scale=1.0, **kw) -> SystemSpec:
    return make_system("mullerbrown2d", {"scale": scale}, **kw)


def harmonic1d(k=1.0, **kw) -> SystemSpec:
    """Reference oscillator U = k x^2 / 2 used to check the thermostat."""
    return make_system("harmonic1d", {"k": k}, **kw)


def butane4(**params) -> SystemSpec:
    kw = {k: params.pop(k) for k in ("mass", "threshold") if k in params}
    return make_system("butane4", params, **kw)


def _as_batch(system: SystemSpec, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = np.ascontiguousarray(x.reshape(1, -1) if single else x)
    if X.ndim != 2 or X.shape[1] != system.dim:
        raise ContractViolation(f"{system.kind} expects configurations of length {system.dim}, got shape {x.shape}")
    return X, single


def energy_and_force(system: SystemSpec, x):
    X, single = _as_batch(system, x)
    F = np.empty_like(X)
    E = np.empty(X.shape[0])
    K.batch_energy_force(system.kind_id, system.kernel_params(), X, F, E)
    return (E[0], F[0]) if single else (E, F)


def potential_energy(system: SystemSpec, x):
    return energy_and_force(system, x)[0]


def force(system: SystemSpec, x):
    """-grad U, closed form per term."""
    return energy_and_force(system, x)[1]


def _torsions(system, X):
    g = np.empty(12)
    out = np.array([K.dihedral_grad(row, 0, 1, 2, 3, g) for row in X])
    if np.isnan(out).any():
        raise DegenerateGeometryError("collinear consecutive beads: torsion undefined")
    return out


def ground_truth_cv(system: SystemSpec, x):
    """x for the double well, the A-B projection for Muller-Brown, the torsion in (-pi, pi] for butane."""
    X, single = _as_batch(system, x)
    if system.kind == "butane4":
        s = _torsions(system, X)
    else:
        s = reference_coordinate(system, X)[0]
    return s[0] if single else s


def basin_coordinate(system: SystemSpec, x):
    """Coordinate compared against ``system.threshold``; the butane torsion is folded to |phi|."""
    s = ground_truth_cv(system, x)
    return np.abs(s) if system.kind == "butane4" else s


def in_basin_a(system: SystemSpec, x):
    return basin_coordinate(system, x) >= system.threshold


def basin_of(system: SystemSpec, x) -> str:
    return "A" if in_basin_a(system, x) else "B"


def reference_coordinate(system: SystemSpec, x):
    """Continuous slow coordinate and its configuration gradient.

    Equal to the ground truth except for butane, where the torsion is mapped to
    [0, 2pi): continuous through the trans basin, cut at the cis barrier.
    """
    X, single = _as_batch(system, x)
    G = np.empty_like(X)
    cvp = system.cv_params()
    s = np.array([K.reference_cv(system.kind_id, cvp, X[i], G[i]) for i in range(X.shape[0])])
    if np.isnan(s).any():
        raise DegenerateGeometryError("collinear consecutive beads: torsion undefined")
    return (s[0], G[0]) if single else (s, G)


class ReferenceCv:
    """The system's reference coordinate behind the CV protocol used by the biasing engines."""

    def __init__(self, system: SystemSpec):
        self.system = system

    def value_and_grad(self, X):
        X = np.atleast_2d(X)
        return reference_coordinate(self.system, X)

    def __call__(self, X):
        return self.value_and_grad(X)[0]


def butane_from_torsion(phi, r0=1.0, theta0=1.911) -> np.ndarray:
    """Chain with the given bond length, bond angles and torsion (first bond in the xy plane)."""
    p1 = np.array([r0 * math.cos(theta0), r0 * math.sin(theta0), 0.0])
    p2 = np.zeros(3)
    p3 = np.array([r0, 0.0, 0.0])
    p4 = p3 + r0 * np.array([-math.cos(theta0), math.sin(theta0) * math.cos(phi), math.sin(theta0) * math.sin(phi)])
    return np.concatenate([p1, p2, p3, p4])


def _relax(system, x0):
    res = minimize(lambda x: potential_energy(system, x), x0, jac=lambda x: -force(system, x),
                   method="L-BFGS-B", options={"gtol": 1e-10, "ftol": 1e-15, "maxiter": 10000})
    return res.x


def basin_minimum(system: SystemSpec, label: str = "A") -> np.ndarray:
    """Local energy minimum inside basin ``label`` (A: x=+1 / global MB minimum / trans)."""
    if label not in ("A", "B"):
        raise ContractViolation("label must be 'A' or 'B'")
    p = system.parameters
    if system.kind == "harmonic1d":
        raise ContractViolation("harmonic1d has a single well")
    if system.kind == "doublewell1d":
        x0 = np.array([1.0 if label == "A" else -1.0])
    elif system.kind == "mullerbrown2d":
        x0 = np.array(_MB_MIN_A if label == "A" else _MB_MIN_B)
    else:
        phi = _torsion_minimum(p, math.pi if label == "A" else math.pi / 3)
        x0 = butane_from_torsion(phi, p["r0"], p["theta0"])
    x = _relax(system, x0)
    if basin_of(system, x) != label:
        raise ContractViolation(f"relaxation left basin {label}")
    return x


def _torsion_minimum(p, guess):
    res = minimize(lambda a: K.torsion_energy(a[0], p["c1"], p["c2"], p["c3"], p["s1"]), [guess],
                   jac=lambda a: [K.torsion_derivative(a[0], p["c1"], p["c2"], p["c3"], p["s1"])])
    return float(res.x[0])
