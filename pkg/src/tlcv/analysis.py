"""Evaluation: SMD path metrics, reweighted free-energy profiles, basin free-energy differences."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .dynamics import Trajectory
from .errors import ContractViolation, EmptyDatasetError
from .geometry import rmsd_batch
from .systems import SystemSpec, butane_from_torsion, ground_truth_cv, potential_energy

METRICS_SCHEMA = 1


# --- SMD path metrics ---------------------------------------------------------

@dataclass(frozen=True)
class PathMetrics:
    rmsd_mean: float
    thp_percent: float
    ets_mean: Optional[float]
    ets_std: Optional[float]
    rows: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"schema_version": METRICS_SCHEMA, "rmsd_mean": self.rmsd_mean, "thp_percent": self.thp_percent,
                "ets_mean": self.ets_mean, "ets_std": self.ets_std, "replicas": self.rows}


def _coordinate_distance(system, s, s_target):
    d = np.asarray(s) - s_target
    if system.kind == "butane4":
        d = (d + math.pi) % (2.0 * math.pi) - math.pi
    return np.abs(d)


def _path_distance(system, frames, target):
    if system.particle_count > 1:
        return rmsd_batch(frames, target, system.spatial_dim)
    # one particle in an external field: alignment would remove everything
    return np.linalg.norm(frames - target, axis=1)


def path_metrics(trajs: Sequence[Trajectory], system: SystemSpec, target, hit_threshold: float = 0.2) -> PathMetrics:
    """Per replica: closest approach to ``target``, target hit, and maximum potential energy.

    A replica hits when its ground-truth coordinate (torsions compared on the
    circle) comes within ``hit_threshold`` of the target's. E_TS statistics
    use hitting replicas only and are None when nothing hits.
    """
    trajs = list(trajs)
    if not trajs:
        raise EmptyDatasetError("no trajectories")
    target = np.asarray(target, dtype=float)
    s_target = float(ground_truth_cv(system, target))
    rows = []
    for i, tr in enumerate(trajs):
        if "energy" not in tr.annotations:
            raise ContractViolation("path metrics need potential-energy annotations")
        r = float(np.min(_path_distance(system, tr.frames, target)))
        hit = bool(np.any(_coordinate_distance(system, ground_truth_cv(system, tr.frames), s_target) < hit_threshold))
        rows.append({"replica": i, "rmsd": r, "hit": hit, "ets": float(np.max(tr.annotations["energy"])),
                     "diverged_step": tr.diverged_step})
    hits = [row["ets"] for row in rows if row["hit"]]
    return PathMetrics(
        float(np.mean([row["rmsd"] for row in rows])),
        100.0 * len(hits) / len(rows),
        float(np.mean(hits)) if hits else None,
        float(np.std(hits)) if hits else None,
        rows,
    )


# --- free-energy profiles -------------------------------------------------------

@dataclass(frozen=True)
class FesCurve:
    centers: np.ndarray
    free_energy: np.ndarray  # +inf in empty bins
    counts: np.ndarray
    ess: np.ndarray
    edges: np.ndarray
    beta: float

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.edges)


def _frames_after_burn_in(n, burn_in_fraction):
    if not 0.0 <= burn_in_fraction < 1.0:
        raise ContractViolation("burn_in_fraction must be in [0, 1)")
    return int(math.floor(burn_in_fraction * n))


def _coordinates(traj: Trajectory, coordinate_fn):
    if coordinate_fn is None:
        if "cv" not in traj.annotations:
            raise ContractViolation("trajectory has no CV annotation; pass coordinate_fn")
        return np.asarray(traj.annotations["cv"], dtype=float)
    return np.asarray(coordinate_fn(traj.frames), dtype=float).reshape(-1)


def _fes_from_histogram(values, weights, beta, n_bins, value_range):
    if len(values) == 0:
        raise EmptyDatasetError("no samples to histogram")
    if value_range is None:
        value_range = (float(np.min(values)), float(np.max(values)))
    if not value_range[1] > value_range[0]:
        raise EmptyDatasetError("empty bin range: all samples share one value")
    hist, edges = np.histogram(values, bins=n_bins, range=value_range, weights=weights)
    counts, _ = np.histogram(values, bins=edges)
    w2, _ = np.histogram(values, bins=edges, weights=None if weights is None else weights * weights)
    total = float(np.sum(hist))
    density = hist / (total * np.diff(edges))
    with np.errstate(divide="ignore"):
        F = -np.log(density) / beta
    F = F - np.min(F)
    with np.errstate(invalid="ignore", divide="ignore"):
        ess = np.where(w2 > 0, hist * hist / w2, 0.0)
    return FesCurve(0.5 * (edges[1:] + edges[:-1]), F, counts, ess, edges, beta)


def boltzmann_inversion(values, beta: float, n_bins: int = 64, value_range=None) -> FesCurve:
    """Unweighted histogram inversion F = -log(p)/beta, min-shifted."""
    return _fes_from_histogram(np.asarray(values, dtype=float), None, beta, n_bins, value_range)


def reweighting_weights(bias, beta):
    """exp(beta V) rescaled by the maximum (the scale cancels in every ratio); V = 0 gives exact ones."""
    bias = np.asarray(bias, dtype=float)
    vmax = float(np.max(bias)) if len(bias) else 0.0
    return np.exp(beta * (bias - vmax))


def reweighted_fes(traj: Trajectory, coordinate_fn: Optional[Callable] = None, beta: float = 1.0, n_bins: int = 64,
                   burn_in_fraction: float = 0.15, value_range=None) -> FesCurve:
    """Free energy along a coordinate from a biased run, weighting frames by exp(beta V)."""
    if "bias" not in traj.annotations:
        raise ContractViolation("reweighting needs per-frame bias values")
    start = _frames_after_burn_in(traj.n_frames, burn_in_fraction)
    vals = _coordinates(traj, coordinate_fn)[start:]
    bias = np.asarray(traj.annotations["bias"], dtype=float)[start:]
    if not np.any(bias):
        return boltzmann_inversion(vals, beta, n_bins, value_range)
    return _fes_from_histogram(vals, reweighting_weights(bias, beta), beta, n_bins, value_range)


def fes_from_function(F, lo, hi, n_bins, beta) -> FesCurve:
    """Bin-centred samples of an analytic free energy (for oracles and plots)."""
    edges = np.linspace(lo, hi, n_bins + 1)
    c = 0.5 * (edges[1:] + edges[:-1])
    vals = np.asarray(F(c), dtype=float)
    return FesCurve(c, vals - vals.min(), np.ones(n_bins, dtype=int), np.ones(n_bins), edges, beta)


# --- basin free-energy differences ---------------------------------------------

def _delta_from_sums(za, zb, beta):
    if not (za > 0 and zb > 0):
        raise EmptyDatasetError("both basins must be populated")
    return math.log(za / zb) / beta


def delta_f(source, beta: float = 1.0, basin_split: float = 0.0, coordinate_fn=None,
            burn_in_fraction: float = 0.15) -> float:
    """Delta F = (1/beta) log(Z_A / Z_B) with A the side at or above ``basin_split``.

    For a FesCurve, Z is the bin-width weighted sum of exp(-beta F) (the exact
    integral of the histogram density). For an annotated trajectory, Z is the
    sum of reweighting factors of the frames on each side after burn-in.
    """
    if isinstance(source, FesCurve):
        w = np.exp(-beta * source.free_energy) * source.widths
        a = source.centers >= basin_split
        return _delta_from_sums(float(np.sum(w[a])), float(np.sum(w[~a])), beta)
    traj = source
    start = _frames_after_burn_in(traj.n_frames, burn_in_fraction)
    vals = _coordinates(traj, coordinate_fn)[start:]
    bias = traj.annotations.get("bias")
    w = np.ones(len(vals)) if bias is None else reweighting_weights(np.asarray(bias)[start:], beta)
    a = vals >= basin_split
    return _delta_from_sums(float(np.sum(w[a])), float(np.sum(w[~a])), beta)


@dataclass(frozen=True)
class DeltaFSeries:
    steps: np.ndarray
    values: np.ndarray
    final: float
    reference: Optional[float] = None
    converged: Optional[bool] = None
    tolerance: float = 0.5


def delta_f_series(traj: Trajectory, beta: float = 1.0, burn_in_fraction: float = 0.15,
                   checkpoint_stride: int = 100, coordinate_fn=None, basin_split: float = 0.0,
                   reference: Optional[float] = None, tolerance_kt: float = 0.5,
                   final_window: float = 0.1) -> DeltaFSeries:
    """Delta F on growing prefixes of the post-burn-in frames.

    Checkpoints sit every ``checkpoint_stride`` frames; those not past the
    burn-in frame are dropped. With a reference, ``converged`` means every
    checkpoint in the final ``final_window`` fraction lies within
    ``tolerance_kt`` k_BT of it.
    """
    if checkpoint_stride < 1:
        raise ContractViolation("checkpoint_stride must be >= 1")
    if "bias" not in traj.annotations:
        raise ContractViolation("series needs per-frame bias values")
    start = _frames_after_burn_in(traj.n_frames, burn_in_fraction)
    vals = _coordinates(traj, coordinate_fn)
    w = reweighting_weights(traj.annotations["bias"][start:], beta)
    a = vals[start:] >= basin_split
    cum_a = np.cumsum(np.where(a, w, 0.0))
    cum_b = np.cumsum(np.where(a, 0.0, w))
    steps, values = [], []
    for c in range(checkpoint_stride, traj.n_frames + 1, checkpoint_stride):
        if c <= start:
            continue
        za, zb = cum_a[c - start - 1], cum_b[c - start - 1]
        if za > 0 and zb > 0:
            steps.append(c * traj.record_stride)
            values.append(math.log(za / zb) / beta)
    if not values:
        raise EmptyDatasetError("no checkpoint with both basins populated after burn-in")
    values = np.array(values)
    converged = None
    tol = tolerance_kt / beta
    if reference is not None:
        k = max(1, int(math.ceil(final_window * len(values))))
        converged = bool(np.all(np.abs(values[-k:] - reference) <= tol))
    return DeltaFSeries(np.array(steps), values, float(values[-1]), reference, converged, tol)


def delta_f_bootstrap(traj: Trajectory, beta: float = 1.0, basin_split: float = 0.0, coordinate_fn=None,
                      burn_in_fraction: float = 0.15, n_boot: int = 200, n_blocks: int = 20, seed: int = 0):
    """Block-bootstrap (2.5, 97.5) percentile interval of the trajectory Delta F."""
    start = _frames_after_burn_in(traj.n_frames, burn_in_fraction)
    vals = _coordinates(traj, coordinate_fn)[start:]
    bias = traj.annotations.get("bias")
    w = np.ones(len(vals)) if bias is None else reweighting_weights(np.asarray(bias)[start:], beta)
    a = vals >= basin_split
    blocks_a = np.array([x.sum() for x in np.array_split(np.where(a, w, 0.0), n_blocks)])
    blocks_b = np.array([x.sum() for x in np.array_split(np.where(a, 0.0, w), n_blocks)])
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_boot):
        idx = rng.integers(0, n_blocks, n_blocks)
        za, zb = blocks_a[idx].sum(), blocks_b[idx].sum()
        if za > 0 and zb > 0:
            out.append(math.log(za / zb) / beta)
    if not out:
        raise EmptyDatasetError("bootstrap never populated both basins")
    return float(np.percentile(out, 2.5)), float(np.percentile(out, 97.5))


# --- CV landscapes --------------------------------------------------------------

@dataclass(frozen=True)
class Table:
    columns: list
    data: np.ndarray

    def __len__(self):
        return len(self.data)


def _axis(spec, default):
    lo, hi, n = spec if spec is not None else default
    return np.linspace(float(lo), float(hi), int(n))


def landscape_grid(system: SystemSpec, grid_spec: dict | None = None):
    """Grid nodes as (coordinate table, configurations)."""
    grid_spec = grid_spec or {}
    if system.particle_count == 1 and system.spatial_dim == 1:
        x = _axis(grid_spec.get("x"), (-2.0, 2.0, 101))
        return ["x"], x[:, None], x[:, None]
    if system.kind == "mullerbrown2d":
        xs = _axis(grid_spec.get("x"), (-1.5, 1.2, 55))
        ys = _axis(grid_spec.get("y"), (-0.3, 2.0, 47))
        XX, YY = np.meshgrid(xs, ys, indexing="ij")
        pts = np.column_stack([XX.ravel(), YY.ravel()])
        return ["x", "y"], pts, pts
    p = system.parameters
    phi = _axis(grid_spec.get("phi"), (-math.pi, math.pi, 73))
    conf = np.array([butane_from_torsion(a, p["r0"], p["theta0"]) for a in phi])
    return ["phi"], phi[:, None], conf


def cv_landscape(cv, system: SystemSpec, grid_spec: dict | None = None) -> Table:
    """CV (and potential energy) at every grid node; butane sweeps the torsion at equilibrium bonds and angles."""
    cols, coords, conf = landscape_grid(system, grid_spec)
    if hasattr(cv, "value_and_grad"):
        s = cv.value_and_grad(conf)[0]
    else:
        s = np.asarray(cv(conf), dtype=float)
    e = potential_energy(system, conf)
    return Table(cols + ["cv", "energy"], np.column_stack([coords, s, e]))


# --- quadrature references ----------------------------------------------------------

def reference_delta_f(system: SystemSpec, beta: float = 1.0) -> float:
    """Exact basin free-energy difference by quadrature.

    For butane the bonded terms and the torsion separate and the internal
    coordinate Jacobian does not involve the torsion, so the torsion marginal
    is exp(-beta U_torsion) and one angle integral suffices.
    """
    from scipy.integrate import quad

    from . import _kernels as K

    p = system.parameters
    if system.kind == "butane4":
        f = lambda a: math.exp(-beta * K.torsion_energy(a, p["c1"], p["c2"], p["c3"], p["s1"]))
        th = system.threshold
        za = quad(f, th, math.pi, limit=200)[0] + quad(f, -math.pi, -th, limit=200)[0]
        zb = quad(f, -th, th, limit=200)[0]
        return _delta_from_sums(za, zb, beta)
    if system.spatial_dim == 1:
        u = lambda x: float(potential_energy(system, np.array([x])))
        umin = min(u(x) for x in np.linspace(-2.0, 2.0, 401))
        lim = 4.0 if system.kind == "doublewell1d" else 12.0 / math.sqrt(beta * p.get("k", 1.0))
        f = lambda x: math.exp(-beta * (u(x) - umin))
        th = system.threshold
        za = quad(f, th, lim, limit=200, points=[1.0])[0]
        zb = quad(f, -lim, th, limit=200, points=[-1.0])[0]
        return _delta_from_sums(za, zb, beta)
    xs = np.linspace(-2.0, 1.5, 701)
    ys = np.linspace(-1.0, 2.6, 721)
    XX, YY = np.meshgrid(xs, ys, indexing="ij")
    pts = np.column_stack([XX.ravel(), YY.ravel()])
    e = potential_energy(system, pts)
    w = np.exp(-beta * (e - e.min()))
    a = ground_truth_cv(system, pts) >= system.threshold
    return _delta_from_sums(float(w[a].sum()), float(w[~a].sum()), beta)


def basin_masses(system: SystemSpec, beta: float = 1.0):
    """(P(A), P(B)) from the quadrature free-energy difference."""
    d = reference_delta_f(system, beta)
    pa = 1.0 / (1.0 + math.exp(-beta * d))
    return pa, 1.0 - pa
