"""Steered MD with a moving harmonic CV restraint, and OPES.

Both drive ``dynamics.run_batch`` through its bias hook. A CV is any object
with ``value_and_grad(X) -> (s, ds/dX)`` for a batch of configurations:
a ``CvEncoder`` or a system's ``ReferenceCv``. OPES along the reference
coordinate runs entirely in compiled code; other CVs go through the hook.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import _kernels as K
from .dynamics import LangevinParams, Trajectory, _coefficients, _dof_masses, _Noise, maxwell_boltzmann, \
    run_batch, walker_rng
from .errors import ContractViolation, SimulationDiverged
from .systems import ReferenceCv, SystemSpec, basin_minimum


# --- steered MD --------------------------------------------------------------

@dataclass(frozen=True)
class SmdConfig:
    k: float
    horizon_steps: int
    s_initial: float
    s_target: float
    n_replicas: int = 64
    seed: int = 0
    record_stride: int = 10
    equilibration_steps: int = 2000

    def __post_init__(self):
        if self.k < 0 or self.horizon_steps < 1 or self.n_replicas < 1 or self.record_stride < 1:
            raise ContractViolation("SMD needs k >= 0, horizon_steps >= 1, n_replicas >= 1")


def smd_target(t, cfg: SmdConfig):
    """Restraint centre (t s_target + (T - t) s_initial) / T."""
    T = cfg.horizon_steps
    return (t * cfg.s_target + (T - t) * cfg.s_initial) / T


def smd_bias(cv, X, t, cfg: SmdConfig):
    """Restraint energy, force and current CV values for a batch."""
    s, G = cv.value_and_grad(np.atleast_2d(X))
    d = smd_target(t, cfg) - s
    return 0.5 * cfg.k * d * d, (cfg.k * d)[:, None] * G, s


def smd_bias_force(cv, x, t, cfg: SmdConfig):
    """-grad_x of (k/2)(target(t) - s(x))^2 with the CV gradient at frozen alignment."""
    _, F, _ = smd_bias(cv, x, t, cfg)
    return F[0] if np.ndim(x) == 1 else F


def thermalized_starts(system: SystemSpec, langevin: LangevinParams, n: int, n_steps: int, seed: int,
                       label: str = "A", x0=None) -> np.ndarray:
    """Final frames of ``n`` unbiased runs started at the basin minimum (independent streams)."""
    x0 = basin_minimum(system, label) if x0 is None else np.asarray(x0, dtype=float)
    rngs = [np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(1, i)))) for i in range(n)]
    trajs = run_batch(system, langevin, np.tile(x0, (n, 1)), max(n_steps, 1), max(n_steps, 1), seeds=rngs,
                      annotate=False)
    return np.stack([tr.frames[-1] for tr in trajs])


def smd_seeds(cfg: SmdConfig):
    return [np.random.Generator(np.random.Philox(np.random.SeedSequence(cfg.seed, spawn_key=(0, i))))
            for i in range(cfg.n_replicas)]


def run_smd(system: SystemSpec, cv, langevin: LangevinParams, cfg: SmdConfig, inits=None) -> list:
    """``n_replicas`` steered trajectories annotated with energy, CV and restraint energy.

    Starting points default to thermalized basin-A configurations. A replica
    that diverges is truncated and flagged via ``diverged_step``; the rest of
    the batch continues.
    """
    if inits is None:
        inits = thermalized_starts(system, langevin, cfg.n_replicas, cfg.equilibration_steps, cfg.seed)
    inits = np.asarray(inits, dtype=float)
    if len(inits) != cfg.n_replicas:
        raise ContractViolation("need one initial configuration per replica")

    def hook(X, t):
        U, F, s = smd_bias(cv, X, min(t, cfg.horizon_steps), cfg)
        return F, {"cv": s, "bias": U}

    return run_batch(system, langevin, inits, cfg.horizon_steps, cfg.record_stride, hook, seeds=smd_seeds(cfg),
                     mask_divergence=True)


# --- OPES ----------------------------------------------------------------------

@dataclass(frozen=True)
class OpesConfig:
    pace: int = 500
    sigma: float = 0.1
    barrier: float = 10.0
    gamma: Optional[float] = None  # default beta * barrier
    epsilon: Optional[float] = None  # default exp(-beta * barrier / (1 - 1/gamma))
    beta: float = 1.0
    record_stride: int = 100
    total_steps: int = 100000
    seed: int = 0

    def __post_init__(self):
        if self.pace < 1 or not self.sigma > 0 or not self.barrier > 0 or not self.beta > 0:
            raise ContractViolation("OPES needs pace >= 1 and positive sigma, barrier, beta")
        if self.bias_factor <= 1.0:
            raise ContractViolation("OPES bias factor gamma must exceed 1")
        if self.record_stride < 1 or self.total_steps < self.record_stride:
            raise ContractViolation("need total_steps >= record_stride >= 1")
        if not self.eps > 0:
            raise ContractViolation("OPES epsilon must be positive (barrier too large for float64?)")

    @property
    def bias_factor(self) -> float:
        return self.beta * self.barrier if self.gamma is None else self.gamma

    @property
    def eps(self) -> float:
        if self.epsilon is not None:
            return self.epsilon
        return math.exp(-self.beta * self.barrier / (1.0 - 1.0 / self.bias_factor))

    @property
    def prefactor(self) -> float:
        return (1.0 - 1.0 / self.bias_factor) / self.beta

    @property
    def floor(self) -> float:
        """Minimum of the bias, prefactor * log(eps); exactly -barrier for the default eps."""
        return -self.barrier if self.epsilon is None else self.prefactor * math.log(self.epsilon)


@dataclass
class OpesState:
    centers: np.ndarray = field(default_factory=lambda: np.zeros(0))
    weights: np.ndarray = field(default_factory=lambda: np.zeros(0))
    sum_weights: float = 0.0
    z: float = 1.0
    n_deposits: int = 0
    # dens[j] = sum_k w_k G(s_j, s_k); keeps the Z update O(n)
    dens: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)

    @property
    def kernels(self):
        return list(zip(self.centers[:self.n_deposits].tolist(), self.weights[:self.n_deposits].tolist()))

    def copy(self) -> "OpesState":
        return OpesState(self.centers.copy(), self.weights.copy(), self.sum_weights, self.z, self.n_deposits,
                         self.dens.copy())

    def reserve(self, capacity: int):
        if len(self.centers) < capacity:
            grow = lambda a: np.concatenate([a[:self.n_deposits], np.zeros(capacity - self.n_deposits)])
            self.centers, self.weights, self.dens = grow(self.centers), grow(self.weights), grow(self.dens)


def kernel_density(state: OpesState, s, sigma):
    """Normalized estimate P_n(s) = sum_k w_k G(s, s_k) / sum_k w_k (0 for an empty state)."""
    if state.n_deposits == 0:
        return 0.0
    acc, _ = K.kde_sum(state.centers, state.weights, state.n_deposits, float(s), sigma)
    return acc / state.sum_weights


def opes_bias(state: OpesState, s, cfg: OpesConfig):
    """V_n(s) = (1 - 1/gamma)/beta * log(P_n(s)/Z_n + eps) and dV/ds."""
    return K.opes_value(state.centers, state.weights, state.n_deposits, state.sum_weights, state.z, float(s),
                        cfg.sigma, cfg.prefactor, cfg.eps, cfg.floor)


def _deposit_inplace(state: OpesState, s_new, cfg: OpesConfig) -> float:
    if len(state.centers) <= state.n_deposits:
        state.reserve(max(8, 2 * (state.n_deposits + 1)))
    n, sw, z, w = K.opes_deposit_inplace(state.centers, state.weights, state.dens, state.n_deposits,
                                         state.sum_weights, state.z, float(s_new), cfg.sigma, cfg.beta,
                                         cfg.prefactor, cfg.eps, cfg.floor)
    state.n_deposits, state.sum_weights, state.z = n, sw, z
    return w


def opes_deposit(state: OpesState, s_new, cfg: OpesConfig) -> OpesState:
    """New state with a kernel at s_new weighted by exp(beta V(s_new)) of the state before insertion."""
    out = state.copy()
    _deposit_inplace(out, s_new, cfg)
    return out


def _is_reference(cv, system):
    return isinstance(cv, ReferenceCv) and cv.system == system


def run_opes(system: SystemSpec, cv, langevin: LangevinParams, cfg: OpesConfig, init=None, state=None):
    """Single-walker OPES. Returns (trajectory annotated with cv/bias/energy, final OpesState).

    The walker's noise stream is ``walker_rng(cfg.seed)``. A kernel is
    deposited at the current CV value every ``pace`` steps (never at step 0),
    then the bias force -dV/ds * ds/dx of the updated state is applied.
    """
    x0 = basin_minimum(system, "A") if init is None else np.asarray(init, dtype=float)
    state = OpesState() if state is None else state.copy()
    state.reserve(state.n_deposits + cfg.total_steps // cfg.pace + 1)
    params = replace(langevin, seed=cfg.seed)
    if not _is_reference(cv, system):
        return _run_opes_hook(system, cv, params, cfg, x0, state)

    X = np.ascontiguousarray(x0[None].copy())
    dof = X.shape[1]
    m = _dof_masses(params, system, dof)
    half_dt, c1, noise_scale, inv_m = _coefficients(params, m)
    rng = walker_rng(cfg.seed)
    V = np.ascontiguousarray(maxwell_boltzmann(rng, m, params.temperature)[None])
    noise = _Noise([rng], dof)
    kind, p, cvp = system.kind_id, system.kernel_params(), system.cv_params()
    n_frames = cfg.total_steps // cfg.record_stride + 1
    frames = np.empty((n_frames, dof))
    svals = np.empty(n_frames)
    vvals = np.empty(n_frames)
    F = np.empty_like(X)
    E = np.empty(1)
    K.batch_energy_force(kind, p, X, F, E)
    g = np.empty(dof)
    s0 = K.reference_cv(kind, cvp, X[0], g)
    v0, dv0 = opes_bias(state, s0, cfg)
    F[0] += -dv0 * g
    frames[0], svals[0], vvals[0] = X[0], s0, v0
    if not K.all_finite(F):
        raise SimulationDiverged("non-finite force at step 0", step=0, bias=abs(v0))
    done, fi = 0, 1
    n, sw, z = state.n_deposits, state.sum_weights, state.z
    while done < cfg.total_steps:
        chunk = min(8192, cfg.total_steps - done)
        fi, bad, n, sw, z, vb = K.run_opes_reference(
            kind, p, cvp, X, V, F, inv_m, half_dt, c1, noise_scale, noise.draw(chunk), done, cfg.record_stride,
            cfg.pace, state.centers, state.weights, state.dens, n, sw, z, cfg.sigma, cfg.beta, cfg.prefactor,
            cfg.eps, cfg.floor, frames, svals, vvals, fi)
        state.n_deposits, state.sum_weights, state.z = n, sw, z
        if bad >= 0:
            raise SimulationDiverged(f"non-finite force at step {bad} (bias {vb:.4g})", step=bad, bias=abs(vb))
        done += chunk
    energies = np.empty(n_frames)
    K.batch_energy_force(kind, p, frames, np.empty_like(frames), energies)
    traj = Trajectory(frames, cfg.record_stride, params, system.particle_count, system.spatial_dim,
                      {"cv": svals, "bias": vvals, "energy": energies})
    return traj, state


def _run_opes_hook(system, cv, params, cfg, x0, state):
    def hook(X, t):
        s, G = cv.value_and_grad(X)
        s0 = float(s[0])
        if t > 0 and t % cfg.pace == 0:
            _deposit_inplace(state, s0, cfg)
        v, dv = opes_bias(state, s0, cfg)
        return (-dv) * G, {"cv": np.array([s0]), "bias": np.array([v])}

    traj = run_batch(system, params, x0[None], cfg.total_steps, cfg.record_stride, hook,
                     seeds=[walker_rng(cfg.seed)])[0]
    return traj, state
