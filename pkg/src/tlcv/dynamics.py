"""Underdamped Langevin dynamics (BAOAB splitting) and time-lagged pair extraction.

Random numbers: every walker owns a ``numpy.random.Generator`` over the
counter-based Philox bit generator, seeded from ``SeedSequence(seed)`` (a
single run) or ``SeedSequence(seed).spawn(n)[i]`` (walker ``i`` of a batch).
Initial Maxwell-Boltzmann velocities are drawn first, then one standard
normal per degree of freedom per step via numpy's ziggurat transform. Noise
is pre-drawn in chunks, which yields exactly the per-step sequence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import _kernels as K
from .errors import ContractViolation, EmptyDatasetError, SimulationDiverged
from .systems import SystemSpec, energy_and_force, in_basin_a

CHUNK_STEPS = 8192


@dataclass(frozen=True)
class LangevinParams:
    dt: float
    gamma: float
    temperature: float
    seed: int = 0
    masses: Optional[tuple] = None  # per particle; None -> take from the system

    def __post_init__(self):
        if not self.dt > 0 or self.gamma < 0 or self.temperature < 0:
            raise ContractViolation("need dt > 0, gamma >= 0, temperature >= 0")

    def to_dict(self) -> dict:
        d = {"dt": self.dt, "gamma": self.gamma, "temperature": self.temperature, "seed": self.seed}
        if self.masses is not None:
            d["masses"] = list(self.masses)
        return d


@dataclass
class MdState:
    x: np.ndarray
    v: np.ndarray
    t: int = 0
    f: Optional[np.ndarray] = None  # total force at (x, t), cached between steps


@dataclass(frozen=True)
class Trajectory:
    frames: np.ndarray
    record_stride: int
    params: LangevinParams
    n_particles: int
    spatial_dim: int
    annotations: dict = field(default_factory=dict)
    diverged_step: Optional[int] = None
    velocities: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.frames.ndim != 2 or len(self.frames) == 0:
            raise ContractViolation("a trajectory needs at least one frame")
        self.frames.flags.writeable = False
        if self.velocities is not None:
            self.velocities.flags.writeable = False
        for a in self.annotations.values():
            a.flags.writeable = False

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    @property
    def dt(self) -> float:
        return self.params.dt


@dataclass(frozen=True)
class PairDataset:
    x_t: np.ndarray
    x_tau: np.ndarray
    tau_steps: int
    in_a_t: np.ndarray
    in_a_tau: np.ndarray
    n_particles: int
    spatial_dim: int

    def __len__(self):
        return len(self.x_t)

    def subset(self, idx) -> "PairDataset":
        return replace(self, x_t=self.x_t[idx], x_tau=self.x_tau[idx],
                       in_a_t=self.in_a_t[idx], in_a_tau=self.in_a_tau[idx])


def walker_rng(seed, index=None) -> np.random.Generator:
    ss = np.random.SeedSequence(seed)
    if index is not None:
        ss = np.random.SeedSequence(seed, spawn_key=(index,))
    return np.random.Generator(np.random.Philox(ss))


def _dof_masses(params: LangevinParams, system: SystemSpec | None, dof: int) -> np.ndarray:
    if params.masses is not None:
        m = np.asarray(params.masses, dtype=float)
    elif system is not None:
        m = np.asarray(system.mass, dtype=float)
    else:
        m = np.ones(1)
    if dof % len(m):
        raise ContractViolation("masses do not divide the configuration length")
    return np.repeat(m, dof // len(m))


def _coefficients(params: LangevinParams, m: np.ndarray):
    c1 = math.exp(-params.gamma * params.dt)
    noise_scale = math.sqrt(1.0 - c1 * c1) * np.sqrt(params.temperature / m)
    return 0.5 * params.dt, c1, noise_scale, 1.0 / m


def maxwell_boltzmann(rng, masses_dof, temperature) -> np.ndarray:
    return np.sqrt(temperature / masses_dof) * rng.standard_normal(len(masses_dof))


def _system_force(system):
    kind, p = system.kind_id, system.kernel_params()

    def fn(X):
        X = np.atleast_2d(X)
        F = np.empty_like(X)
        E = np.empty(len(X))
        K.batch_energy_force(kind, p, X, F, E)
        return F

    return fn


def step(state: MdState, params: LangevinParams, force_fn, bias_force_fn=None, rng=None) -> MdState:
    """One BAOAB step.

    ``force_fn(x)`` returns -grad U (a SystemSpec is accepted too);
    ``bias_force_fn(x, t)`` returns an additional force, possibly
    time-dependent. Works on a single configuration or a (walkers, dof) batch.
    """
    if isinstance(force_fn, SystemSpec):
        system = force_fn
        force_fn = _system_force(system)
    else:
        system = None
    single = np.ndim(state.x) == 1
    x = np.array(state.x, dtype=float, ndmin=2)
    v = np.array(state.v, dtype=float, ndmin=2)
    m = _dof_masses(params, system, x.shape[1])
    half_dt, c1, noise_scale, inv_m = _coefficients(params, m)
    rng = rng if rng is not None else walker_rng(params.seed)

    def total(xx, t):
        f = np.array(force_fn(xx), dtype=float, ndmin=2)
        if bias_force_fn is not None:
            f = f + np.reshape(bias_force_fn(xx[0] if single else xx, t), f.shape)
        if not np.all(np.isfinite(f)):
            raise SimulationDiverged(f"non-finite force at step {t}", step=t)
        return f

    f = total(x, state.t) if state.f is None else np.array(state.f, dtype=float, ndmin=2)
    xi = rng.standard_normal(x.shape)
    K.baoab_drift(x, v, f, inv_m, half_dt, c1, noise_scale, xi)
    f = total(x, state.t + 1)
    K.kick(v, f, inv_m, half_dt)
    if single:
        return MdState(x[0], v[0], state.t + 1, f[0])
    return MdState(x, v, state.t + 1, f)


class _Noise:
    """Per-walker Gaussian streams handed out in (steps, walkers, dof) chunks."""

    def __init__(self, rngs, dof):
        self.rngs = rngs
        self.dof = dof

    def draw(self, n):
        return np.ascontiguousarray(np.stack([r.standard_normal((n, self.dof)) for r in self.rngs], axis=1))


BiasHook = Callable[[np.ndarray, int], tuple]


def run_batch(system: SystemSpec, params: LangevinParams, inits, n_steps: int, record_stride: int,
              bias_force_fn: Optional[BiasHook] = None, seeds=None, annotate=True,
              mask_divergence=False, record_velocities=False) -> list:
    """Integrate several independent walkers together.

    ``bias_force_fn(X, t)`` receives the (walkers, dof) batch at step ``t``
    and returns ``(force, info)`` where ``info`` is None or a dict of
    per-walker arrays recorded as annotations every ``record_stride`` steps.
    Walker ``i`` draws from ``walker_rng(params.seed, i)`` unless ``seeds``
    provides explicit generators or integer seeds.
    """
    X = np.array(inits, dtype=float, ndmin=2)
    n_walk, dof = X.shape
    if dof != system.dim:
        raise ContractViolation(f"initial configurations must have length {system.dim}")
    if not (n_steps >= record_stride >= 1):
        raise ContractViolation("need n_steps >= record_stride >= 1")
    if seeds is None:
        rngs = [walker_rng(params.seed, i) for i in range(n_walk)]
    else:
        rngs = [s if isinstance(s, np.random.Generator) else walker_rng(s) for s in seeds]
    m = _dof_masses(params, system, dof)
    half_dt, c1, noise_scale, inv_m = _coefficients(params, m)
    V = np.ascontiguousarray(np.stack([maxwell_boltzmann(r, m, params.temperature) for r in rngs]))
    noise = _Noise(rngs, dof)
    kind, p = system.kind_id, system.kernel_params()
    n_frames = n_steps // record_stride + 1
    frames = np.empty((n_frames, n_walk, dof))
    frames[0] = X
    vframes = np.empty((n_frames if record_velocities else 0, n_walk, dof))
    if record_velocities:
        vframes[0] = V
    F = np.empty_like(X)
    E = np.empty(n_walk)
    K.batch_energy_force(kind, p, X, F, E)

    if bias_force_fn is None:
        if not K.all_finite(F):
            raise SimulationDiverged("non-finite force at step 0", step=0)
        done, fi = 0, 1
        while done < n_steps:
            chunk = min(CHUNK_STEPS, n_steps - done)
            fi, bad = K.run_unbiased(kind, p, X, V, F, inv_m, half_dt, c1, noise_scale,
                                     noise.draw(chunk), done, record_stride, frames, vframes, fi)
            if bad >= 0:
                raise SimulationDiverged(f"non-finite force at step {bad}", step=bad)
            done += chunk
        ann = {}
        if annotate:
            energies = np.empty((n_frames, n_walk))
            for k in range(n_frames):
                K.batch_energy_force(kind, p, np.ascontiguousarray(frames[k]), np.empty_like(X), energies[k])
            ann["energy"] = energies
        return _split(frames, vframes, ann, record_stride, params, system, [None] * n_walk, [n_frames] * n_walk)

    records = {}
    energies = np.empty((n_frames, n_walk))
    energies[0] = E
    diverged = [None] * n_walk
    valid = [n_frames] * n_walk
    x0 = X.copy()

    def apply_bias(t):
        fb, info = bias_force_fn(X, t)
        np.add(F, fb, out=F)
        bad_rows = ~np.all(np.isfinite(F), axis=1)
        if bad_rows.any():
            rows = [int(r) for r in np.flatnonzero(bad_rows) if diverged[r] is None]
            if not mask_divergence and rows:
                mag = None if info is None or "bias" not in info else float(np.nanmax(np.abs(info["bias"])))
                raise SimulationDiverged(f"non-finite force at step {t} (walkers {rows})", step=t, bias=mag)
            for r in np.flatnonzero(bad_rows):
                if diverged[r] is None:
                    diverged[r] = t
                    valid[r] = (t - 1) // record_stride + 1
                X[r], V[r], F[r] = x0[r], 0.0, 0.0
        return info

    def record(idx, info):
        if info:
            for key, val in info.items():
                records.setdefault(key, np.full((n_frames, n_walk), np.nan))[idx] = val

    record(0, apply_bias(0))
    done, fi = 0, 1
    while done < n_steps:
        chunk = min(CHUNK_STEPS, n_steps - done)
        xi = noise.draw(chunk)
        for k in range(chunk):
            t = done + k + 1
            K.baoab_drift(X, V, F, inv_m, half_dt, c1, noise_scale, xi[k])
            K.batch_energy_force(kind, p, X, F, E)
            info = apply_bias(t)
            K.kick(V, F, inv_m, half_dt)
            if t % record_stride == 0:
                frames[fi] = X
                if record_velocities:
                    vframes[fi] = V
                energies[fi] = E
                record(fi, info)
                fi += 1
        done += chunk
    ann = dict(records)
    if annotate:
        ann["energy"] = energies
    return _split(frames, vframes, ann, record_stride, params, system, diverged, valid)


def _split(frames, vframes, ann, stride, params, system, diverged, valid):
    out = []
    for w in range(frames.shape[1]):
        n = valid[w]
        vel = vframes[:n, w].copy() if len(vframes) else None
        out.append(Trajectory(frames[:n, w].copy(), stride, params, system.particle_count, system.spatial_dim,
                              {k: a[:n, w].copy() for k, a in ann.items()}, diverged[w], vel))
    return out


def run(system: SystemSpec, params: LangevinParams, init, n_steps: int, record_stride: int,
        bias_force_fn: Optional[BiasHook] = None, annotate=True, record_velocities=False) -> Trajectory:
    """Single trajectory, deterministic given ``params.seed``. Frame 0 is ``init``."""
    init = np.asarray(init, dtype=float)
    if init.ndim != 1:
        raise ContractViolation("run() takes one flat configuration; use run_batch for several")
    return run_batch(system, params, init[None], n_steps, record_stride, bias_force_fn,
                     seeds=[walker_rng(params.seed)], annotate=annotate,
                     record_velocities=record_velocities)[0]


def basin_trajectories(system: SystemSpec, params: LangevinParams, n_per_basin: int, n_steps: int,
                       record_stride: int, starts=None) -> dict:
    """Unbiased trajectories started in each basin's energy minimum.

    Returns {"A": [...], "B": [...]}; trajectory j of basin b uses seed
    ``SeedSequence(params.seed, spawn_key=(basin_index, j))``.
    """
    from .systems import basin_minimum

    out = {}
    for bi, label in enumerate("AB"):
        x0 = basin_minimum(system, label) if starts is None else np.asarray(starts[label], dtype=float)
        seeds = [np.random.Generator(np.random.Philox(np.random.SeedSequence(params.seed, spawn_key=(bi, j))))
                 for j in range(n_per_basin)]
        out[label] = run_batch(system, params, np.tile(x0, (n_per_basin, 1)), n_steps, record_stride,
                               seeds=seeds)
    return out


def extract_pairs(trajs, tau_steps: int, exclude_transitions: bool = True, max_pairs: Optional[int] = None,
                  rng=None, system: Optional[SystemSpec] = None, labels=None) -> PairDataset:
    """Time-lagged pairs (x_i, x_{i+lag}) from every trajectory.

    Basin labels come from ``system`` (or an explicit per-trajectory list of
    boolean arrays). With ``exclude_transitions`` pairs whose endpoints sit
    in different basins are dropped before uniform subsampling.
    """
    trajs = list(trajs)
    if not trajs:
        raise EmptyDatasetError("no trajectories")
    if tau_steps <= 0:
        raise ContractViolation("tau_steps must be positive")
    xs, ys, la, lb = [], [], [], []
    for i, tr in enumerate(trajs):
        if tau_steps % tr.record_stride:
            raise ContractViolation(f"tau_steps={tau_steps} is not a multiple of record_stride={tr.record_stride}")
        lag = tau_steps // tr.record_stride
        if tr.n_frames <= lag:
            continue
        if labels is not None:
            lab = np.asarray(labels[i], dtype=bool)
        elif system is not None:
            lab = np.asarray(in_basin_a(system, tr.frames), dtype=bool)
        else:
            raise ContractViolation("basin labels need a system or explicit labels")
        a, b = lab[:-lag], lab[lag:]
        keep = (a == b) if exclude_transitions else np.ones(len(a), dtype=bool)
        idx = np.flatnonzero(keep)
        xs.append(tr.frames[idx])
        ys.append(tr.frames[idx + lag])
        la.append(a[idx])
        lb.append(b[idx])
    n_total = sum(len(x) for x in xs)
    if n_total == 0:
        raise EmptyDatasetError("no eligible time-lagged pairs")
    ds = PairDataset(np.concatenate(xs), np.concatenate(ys), tau_steps, np.concatenate(la), np.concatenate(lb),
                     trajs[0].n_particles, trajs[0].spatial_dim)
    if max_pairs is not None and n_total > max_pairs:
        rng = rng if rng is not None else np.random.default_rng(0)
        ds = ds.subset(np.sort(rng.choice(n_total, size=max_pairs, replace=False)))
    return ds
