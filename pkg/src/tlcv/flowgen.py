"""Time-lagged conditional flow matching with a jointly trained CV encoder.

The flow generates features of x_{t+tau} conditioned on the encoder's raw
output at x_t. The vector-field network sees concat(x_r, r, s). Training
minimizes l_cfm + lambda * l_ac, where l_ac is the negative batch Pearson
correlation between s_t and s_{t+tau}; encoder gradients arrive through both
the conditioning input and l_ac.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import nn
from .cvmodels import (CvEncoder, autocorrelation_loss, calibrate, featurize, n_features, with_calibration)
from .dynamics import PairDataset
from .errors import ContractViolation, EmptyDatasetError, GenerationDiverged, TrainingDiverged


@dataclass
class FlowModel:
    net: nn.DenseNet
    sigma: float = 0.05
    input_mode: str = "aligned_coords"
    condition_dim: int = 1

    def __post_init__(self):
        if not self.sigma > 0:
            raise ContractViolation("sigma must be positive")
        if self.net.n_in != self.n_features + 1 + self.condition_dim:
            raise ContractViolation("flow network input must be features + time + condition")

    @property
    def n_features(self) -> int:
        return self.net.n_out


@dataclass(frozen=True)
class TlcConfig:
    tau_steps: int = 100
    lam: float = 0.1
    sigma: float = 0.05
    lr: float = 1e-3
    batch_size: int = 256
    n_iters: int = 5000
    ode_steps: int = 100
    seed: int = 0
    encoder_hidden: tuple = (64, 64)
    flow_hidden: tuple = (128, 128)
    activation: str = "tanh"
    input_mode: Optional[str] = None

    def __post_init__(self):
        if min(self.tau_steps, self.sigma, self.lr, self.batch_size, self.n_iters, self.ode_steps) <= 0:
            raise ContractViolation("TLC hyperparameters must be positive")
        if self.lam < 0:
            raise ContractViolation("lambda must be non-negative")


@dataclass
class FlowMatchSample:
    x0: np.ndarray
    x1: np.ndarray
    r: np.ndarray
    x_r: np.ndarray
    u: np.ndarray


@dataclass
class TlcLoss:
    l_cfm: float
    l_ac: float
    l_total: float
    degenerate: bool
    flow_grads: Optional[list] = None
    encoder_grads: Optional[list] = None


@dataclass
class TlcResult:
    flow: FlowModel
    encoder: CvEncoder
    history: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))  # columns l_cfm, l_ac, l_total
    degenerate_batches: int = 0

    def __iter__(self):
        return iter((self.flow, self.encoder))


def make_flow(n_feat, hidden=(128, 128), activation="tanh", sigma=0.05, seed=0, input_mode="aligned_coords"):
    return FlowModel(nn.init([n_feat + 2, *hidden, n_feat], activation, seed), sigma, input_mode)


def sample_path(x1, rng, sigma, r=None) -> FlowMatchSample:
    """Draw r ~ U[0,1] (unless given), x0 ~ N(0, I), and x_r ~ N(r x1 + (1-r) x0, sigma^2)."""
    if not sigma >= 0:
        raise ContractViolation("sigma must be non-negative")
    x1 = np.asarray(x1, dtype=float)
    X1 = np.atleast_2d(x1)
    n = len(X1)
    rr = rng.uniform(size=n) if r is None else np.broadcast_to(np.asarray(r, dtype=float), (n,)).copy()
    x0 = rng.standard_normal(X1.shape)
    xi = rng.standard_normal(X1.shape)
    xr = rr[:, None] * X1 + (1.0 - rr[:, None]) * x0 + sigma * xi
    u = X1 - x0
    if x1.ndim == 1:
        return FlowMatchSample(x0[0], x1, rr[0], xr[0], u[0])
    return FlowMatchSample(x0, X1, rr, xr, u)


def velocity(flow: FlowModel, x, r, s):
    X = np.atleast_2d(np.asarray(x, dtype=float))
    n = len(X)
    inp = np.column_stack([X, np.broadcast_to(r, (n,)), np.broadcast_to(s, (n,))])
    out = nn.forward(flow.net, inp)
    return out[0] if np.ndim(x) == 1 else out


def cfm_loss(flow: FlowModel, sample: FlowMatchSample, s, need_grads=False):
    """Mean squared error of v(x_r, r | s) against u; gradients w.r.t. flow params and s."""
    xr = np.atleast_2d(sample.x_r)
    n = len(xr)
    inp = np.column_stack([xr, np.broadcast_to(sample.r, (n,)), np.broadcast_to(s, (n,))])
    out, cache = nn.forward_cached(flow.net, inp)
    diff = out - np.atleast_2d(sample.u)
    loss = float(np.sum(diff * diff) / n)
    if not need_grads:
        return loss, None, None
    grads, gin = nn.backward_cached(flow.net, cache, 2.0 * diff / n)
    return loss, grads, gin[:, -1]


def tlc_loss(flow: FlowModel, encoder: CvEncoder, x_t, x_tau, rng, lam=0.1, need_grads=False,
             sample: Optional[FlowMatchSample] = None) -> TlcLoss:
    """l_cfm, l_ac and l_total on one batch; s_t is the raw encoder output at x_t."""
    x_t = np.atleast_2d(np.asarray(x_t, dtype=float))
    x_tau = np.atleast_2d(np.asarray(x_tau, dtype=float))
    if len(x_t) < 2 or x_t.shape != x_tau.shape:
        raise ContractViolation("tlc_loss needs a batch of at least two pairs")
    Ft, Fl = featurize(encoder, x_t), featurize(encoder, x_tau)
    out_t, ce_t = nn.forward_cached(encoder.net, Ft)
    out_l, ce_l = nn.forward_cached(encoder.net, Fl)
    k = encoder.output_index
    s_t, s_l = out_t[:, k], out_l[:, k]
    if sample is None:
        sample = sample_path(Fl, rng, flow.sigma)
    l_cfm, gflow, ds_cfm = cfm_loss(flow, sample, s_t, need_grads)
    l_ac, da, db, degenerate = autocorrelation_loss(s_t, s_l)
    total = l_cfm + lam * l_ac
    if not need_grads:
        return TlcLoss(l_cfm, l_ac, total, degenerate)
    up_t = np.zeros_like(out_t)
    up_t[:, k] = ds_cfm + lam * da
    up_l = np.zeros_like(out_l)
    up_l[:, k] = lam * db
    g_t, _ = nn.backward_cached(encoder.net, ce_t, up_t)
    g_l, _ = nn.backward_cached(encoder.net, ce_l, up_l)
    return TlcLoss(l_cfm, l_ac, total, degenerate, gflow, [a + b for a, b in zip(g_t, g_l)])


def train_tlc(pairs: PairDataset, cfg: TlcConfig = TlcConfig(), reference=None) -> TlcResult:
    """Joint Adam training of flow and encoder, then calibration on the x_t side of the pairs."""
    if len(pairs) < 2:
        raise EmptyDatasetError("TLC training needs at least two pairs")
    mode = cfg.input_mode or ("aligned_coords" if pairs.n_particles > 1 else "raw_coords")
    if reference is None:
        a_idx = np.flatnonzero(pairs.in_a_t)
        reference = pairs.x_t[a_idx[0] if len(a_idx) else 0]
    reference = np.asarray(reference, dtype=float)
    nf = n_features(mode, reference.size, pairs.spatial_dim)
    enc = CvEncoder(nn.init([nf, *cfg.encoder_hidden, 1], cfg.activation, cfg.seed), reference,
                    pairs.spatial_dim, mode)
    flow = make_flow(nf, cfg.flow_hidden, cfg.activation, cfg.sigma, cfg.seed + 1, mode)
    st_e = nn.adam_state(enc.net, cfg.lr)
    st_f = nn.adam_state(flow.net, cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    n = len(pairs)
    b = min(cfg.batch_size, n)
    hist = np.empty((cfg.n_iters, 3))
    n_degenerate = 0
    for it in range(cfg.n_iters):
        idx = rng.choice(n, size=b, replace=False) if b < n else np.arange(n)
        res = tlc_loss(flow, enc, pairs.x_t[idx], pairs.x_tau[idx], rng, cfg.lam, need_grads=True)
        if not math.isfinite(res.l_total):
            raise TrainingDiverged(f"TLC loss became non-finite at iteration {it}", iteration=it)
        n_degenerate += res.degenerate
        nn.adam_update(flow.net, res.flow_grads, st_f)
        nn.adam_update(enc.net, res.encoder_grads, st_e)
        hist[it] = (res.l_cfm, res.l_ac, res.l_total)
    a_side = pairs.x_t[pairs.in_a_t] if pairs.in_a_t.any() else pairs.x_t
    enc = with_calibration(enc, calibrate(enc, pairs.x_t, a_side))
    return TlcResult(flow, enc, hist, n_degenerate)


def train_unconditional(features, cfg: TlcConfig = TlcConfig(), input_mode="raw_coords") -> tuple:
    """Flow matching on features alone; the condition input is held at zero."""
    F = np.atleast_2d(np.asarray(features, dtype=float))
    if len(F) == 0:
        raise EmptyDatasetError("no training data")
    flow = make_flow(F.shape[1], cfg.flow_hidden, cfg.activation, cfg.sigma, cfg.seed + 1, input_mode)
    st = nn.adam_state(flow.net, cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    b = min(cfg.batch_size, len(F))
    hist = np.empty(cfg.n_iters)
    for it in range(cfg.n_iters):
        idx = rng.choice(len(F), size=b, replace=False) if b < len(F) else np.arange(len(F))
        sample = sample_path(F[idx], rng, flow.sigma)
        loss, grads, _ = cfm_loss(flow, sample, 0.0, need_grads=True)
        if not math.isfinite(loss):
            raise TrainingDiverged(f"flow loss became non-finite at iteration {it}", iteration=it)
        nn.adam_update(flow.net, grads, st)
        hist[it] = loss
    return flow, hist


def integrate(flow: FlowModel, x0, s, ode_steps: int):
    """Fixed-step RK4 of dx/dr = v(x, r | s) from r=0 to r=1."""
    if ode_steps < 1:
        raise ContractViolation("ode_steps must be >= 1")
    x = np.array(x0, dtype=float, ndmin=2)
    s = np.broadcast_to(np.asarray(s, dtype=float), (len(x),))
    h = 1.0 / ode_steps
    for i in range(ode_steps):
        r = i * h
        k1 = velocity(flow, x, r, s)
        k2 = velocity(flow, x + 0.5 * h * k1, r + 0.5 * h, s)
        k3 = velocity(flow, x + 0.5 * h * k2, r + 0.5 * h, s)
        k4 = velocity(flow, x + h * k3, r + h, s)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(x)):
            raise GenerationDiverged(f"non-finite state at ODE step {i + 1}")
    return x


def generate(flow: FlowModel, s, ode_steps: int, rng, n: Optional[int] = None):
    """Draw x(0) ~ N(0, I) and transport it to r=1 under condition s (scalar or per sample)."""
    m = 1 if n is None else n
    x0 = rng.standard_normal((m, flow.n_features))
    x = integrate(flow, x0, s, ode_steps)
    return x[0] if n is None else x


def flow_to_dict(flow: FlowModel, encoder_checksum: Optional[str] = None) -> dict:
    return nn.net_to_dict(flow.net, {"kind": "flow", "sigma": flow.sigma, "condition_dim": flow.condition_dim,
                                     "input_mode": flow.input_mode, "encoder_checksum": encoder_checksum})


def flow_from_dict(d: dict):
    net, ex = nn.net_from_dict(d)
    if ex.get("kind") != "flow":
        raise ContractViolation("checkpoint does not hold a flow model")
    return FlowModel(net, float(ex["sigma"]), ex["input_mode"], int(ex["condition_dim"])), ex.get("encoder_checksum")
