"""CV encoders (alignment -> network -> calibration) and baseline CV learners.

An encoder maps configurations to a scalar CV. ``value_and_grad(X)`` is the
protocol the biasing engines consume; the reference coordinate of a system
implements the same method.

Input modes:
  aligned_coords      Kabsch-aligned Cartesian coordinates (rigid-invariant)
  pairwise_distances  all inter-particle distances
  raw_coords          coordinates as given, for single-particle systems in an
                      external field where alignment would erase everything
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from itertools import combinations
from typing import Optional

import numpy as np
import scipy.linalg

from . import nn
from .dynamics import PairDataset
from .errors import (ContractViolation, DegenerateEncoderError, EmptyDatasetError, IllConditionedError,
                     TrainingDiverged)
from .geometry import kabsch_batch

INPUT_MODES = ("aligned_coords", "pairwise_distances", "raw_coords")


@dataclass(frozen=True)
class Calibration:
    raw_min: float = -1.0
    raw_max: float = 1.0
    sign: int = 1

    def __post_init__(self):
        if not self.raw_min < self.raw_max:
            raise DegenerateEncoderError(f"calibration needs raw_min < raw_max, got {self.raw_min}, {self.raw_max}")
        if self.sign not in (1, -1):
            raise ContractViolation("calibration sign must be +1 or -1")

    @property
    def scale(self) -> float:
        """d(calibrated)/d(raw)."""
        return self.sign * 2.0 / (self.raw_max - self.raw_min)

    def apply(self, raw):
        return self.sign * (2.0 * (np.asarray(raw) - self.raw_min) / (self.raw_max - self.raw_min) - 1.0)

    def to_dict(self) -> dict:
        return {"raw_min": self.raw_min, "raw_max": self.raw_max, "sign": self.sign}


IDENTITY_CALIBRATION = Calibration()


@dataclass(frozen=True)
class CvEncoder:
    net: nn.DenseNet
    reference: np.ndarray
    spatial_dim: int
    input_mode: str = "aligned_coords"
    calibration: Calibration = IDENTITY_CALIBRATION
    output_index: int = 0  # which network output is the CV (VDE emits mean and log-variance)

    def __post_init__(self):
        if self.input_mode not in INPUT_MODES:
            raise ContractViolation(f"unknown input_mode {self.input_mode!r}")
        ref = np.asarray(self.reference, dtype=float)
        if ref.ndim != 1 or ref.size % self.spatial_dim:
            raise ContractViolation("reference must be a flat configuration")
        object.__setattr__(self, "reference", ref)
        if self.net.n_in != n_features(self.input_mode, ref.size, self.spatial_dim):
            raise ContractViolation("network input size does not match the feature dimension")

    @property
    def n_particles(self) -> int:
        return self.reference.size // self.spatial_dim

    def value_and_grad(self, X):
        return encode_and_gradient(self, X)

    def __call__(self, x):
        return encode(self, x)


def n_features(input_mode: str, dof: int, spatial_dim: int) -> int:
    if input_mode == "pairwise_distances":
        n = dof // spatial_dim
        return n * (n - 1) // 2
    return dof


def default_input_mode(system) -> str:
    return "aligned_coords" if system.particle_count > 1 else "raw_coords"


def make_encoder(system, hidden=(64, 64), activation="tanh", seed=0, input_mode=None, reference=None,
                 n_out=1) -> CvEncoder:
    from .systems import basin_minimum

    mode = input_mode or default_input_mode(system)
    ref = basin_minimum(system, "A") if reference is None else np.asarray(reference, dtype=float)
    nf = n_features(mode, system.dim, system.spatial_dim)
    net = nn.init([nf, *hidden, n_out], activation, seed)
    return CvEncoder(net, ref, system.spatial_dim, mode)


def _batch(encoder, x):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = x[None] if single else x
    if X.ndim != 2 or X.shape[1] != encoder.reference.size:
        raise ContractViolation(f"expected configurations of length {encoder.reference.size}, got {x.shape}")
    return X, single


def _pairs_index(n):
    return np.array(list(combinations(range(n), 2)), dtype=int).reshape(-1, 2)


def _features_batch(encoder, X):
    if encoder.input_mode == "raw_coords":
        return X, None
    if encoder.input_mode == "aligned_coords":
        aligned, R, _ = kabsch_batch(X, encoder.reference, encoder.spatial_dim)
        return aligned, R
    P = X.reshape(len(X), -1, encoder.spatial_dim)
    ij = _pairs_index(P.shape[1])
    diff = P[:, ij[:, 0]] - P[:, ij[:, 1]]
    return np.linalg.norm(diff, axis=-1), diff


def featurize(encoder: CvEncoder, x):
    X, single = _batch(encoder, x)
    F, _ = _features_batch(encoder, X)
    return F[0] if single else F


def raw_output(encoder: CvEncoder, x):
    """Uncalibrated network output (the condition fed to the flow)."""
    X, single = _batch(encoder, x)
    F, _ = _features_batch(encoder, X)
    out = nn.forward(encoder.net, F)[:, encoder.output_index]
    return out[0] if single else out


def encode(encoder: CvEncoder, x):
    return encoder.calibration.apply(raw_output(encoder, x))


def _feature_to_coord_grad(encoder, X, aux, GF):
    """Pull a feature-space gradient back to coordinates (rotation and centroid frozen)."""
    if encoder.input_mode == "raw_coords":
        return GF
    n, d = len(X), encoder.spatial_dim
    if encoder.input_mode == "aligned_coords":
        G = GF.reshape(n, -1, d) @ aux  # row g_i -> (R^T g_i)^T
        G = G - G.mean(axis=1, keepdims=True)
        return G.reshape(n, -1)
    diff = aux
    dist = np.linalg.norm(diff, axis=-1)
    contrib = (GF / dist)[..., None] * diff
    ij = _pairs_index(encoder.n_particles)
    G = np.zeros((n, encoder.n_particles, d))
    np.add.at(G, (slice(None), ij[:, 0]), contrib)
    np.add.at(G, (slice(None), ij[:, 1]), -contrib)
    return G.reshape(n, -1)


def encode_and_gradient(encoder: CvEncoder, x, calibrated=True):
    """CV values and ds/dx; calibrated=False differentiates the raw output instead."""
    X, single = _batch(encoder, x)
    F, aux = _features_batch(encoder, X)
    out, cache = nn.forward_cached(encoder.net, F)
    up = np.zeros_like(out)
    up[:, encoder.output_index] = 1.0
    _, GF = nn.backward_cached(encoder.net, cache, up, need_params=False)
    raw = out[:, encoder.output_index]
    G = _feature_to_coord_grad(encoder, X, aux, GF)
    if calibrated:
        raw = encoder.calibration.apply(raw)
        G = G * encoder.calibration.scale
    return (raw[0], G[0]) if single else (raw, G)


def cv_input_gradient(encoder: CvEncoder, x):
    return encode_and_gradient(encoder, x)[1]


def calibrate(encoder: CvEncoder, dataset, basin_a_samples) -> Calibration:
    """Map dataset extremes of the raw output to [-1, 1], basin A positive."""
    dataset = np.asarray(dataset, dtype=float)
    basin_a_samples = np.asarray(basin_a_samples, dtype=float)
    if dataset.size == 0 or basin_a_samples.size == 0:
        raise EmptyDatasetError("calibration needs a non-empty dataset and basin-A samples")
    raw = np.atleast_1d(raw_output(encoder, dataset))
    lo, hi = float(raw.min()), float(raw.max())
    if not hi > lo:
        raise DegenerateEncoderError(f"encoder output is constant ({lo}) on the calibration dataset")
    mean_a = float(np.mean(raw_output(encoder, basin_a_samples)))
    sign = 1 if 2.0 * (mean_a - lo) / (hi - lo) - 1.0 >= 0.0 else -1
    return Calibration(lo, hi, sign)


def with_calibration(encoder: CvEncoder, calibration: Calibration) -> CvEncoder:
    return replace(encoder, calibration=calibration)


def encoder_to_dict(encoder: CvEncoder) -> dict:
    return nn.net_to_dict(encoder.net, {
        "kind": "cv_encoder",
        "input_mode": encoder.input_mode,
        "reference": encoder.reference.tolist(),
        "spatial_dim": encoder.spatial_dim,
        "calibration": encoder.calibration.to_dict(),
        "output_index": encoder.output_index,
    })


def encoder_from_dict(d: dict) -> CvEncoder:
    net, ex = nn.net_from_dict(d)
    if ex.get("kind") != "cv_encoder":
        raise ContractViolation("checkpoint does not hold a CV encoder")
    c = ex["calibration"]
    return CvEncoder(net, np.array(ex["reference"], dtype=float), int(ex["spatial_dim"]), ex["input_mode"],
                     Calibration(c["raw_min"], c["raw_max"], int(c["sign"])), int(ex.get("output_index", 0)))


# --- batch autocorrelation --------------------------------------------------

def autocorrelation_loss(a, b):
    """-Pearson(a, b) with its gradients; a zero-variance batch gives (0, 0, 0, True)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1 or len(a) < 2:
        raise ContractViolation("autocorrelation needs two equal-length batches of size >= 2")
    ac = a - a.mean()
    bc = b - b.mean()
    sa = float(ac @ ac)
    sb = float(bc @ bc)
    if sa <= 1e-24 * float(a @ a) + 1e-300 or sb <= 1e-24 * float(b @ b) + 1e-300:
        z = np.zeros_like(a)
        return 0.0, z, z.copy(), True
    root = math.sqrt(sa * sb)
    r = float(ac @ bc) / root
    r = min(1.0, max(-1.0, r))
    da = bc / root - r * ac / sa
    db = ac / root - r * bc / sb
    return -r, -da, -db, False


# --- shared training helpers -------------------------------------------------

@dataclass
class BaselineConfig:
    hidden: tuple = (64, 64)
    activation: str = "tanh"
    lr: float = 1e-3
    batch_size: int = 256
    n_iters: int = 2000
    seed: int = 0
    input_mode: Optional[str] = None
    # VDE
    beta_kl: float = 1e-3
    ac_weight: float = 1.0
    sample_latent: bool = True
    # DeepTDA
    targets: tuple = (-7.0, 7.0)  # (B, A)
    sigma_targets: tuple = (0.2, 0.2)
    alpha: float = 1.0
    beta: float = 100.0


@dataclass
class TrainResult:
    encoder: CvEncoder
    history: list = field(default_factory=list)
    decoder: Optional[nn.DenseNet] = None


def _template_reference(pairs: PairDataset, reference):
    if reference is not None:
        return np.asarray(reference, dtype=float)
    idx = np.flatnonzero(pairs.in_a_t)
    return pairs.x_t[idx[0] if len(idx) else 0].copy()


def _mode(cfg, pairs):
    return cfg.input_mode or ("aligned_coords" if pairs.n_particles > 1 else "raw_coords")


def _minibatches(rng, n, batch, iters):
    b = min(batch, n)
    for _ in range(iters):
        yield rng.choice(n, size=b, replace=False) if b < n else np.arange(n)


def _check_loss(loss, it):
    if not math.isfinite(loss):
        raise TrainingDiverged(f"loss became non-finite at iteration {it}", iteration=it)


def reconstruction_loss(pred, target):
    """Mean over the batch of squared reconstruction error norms, and d/dpred."""
    diff = pred - target
    n = len(diff)
    return float(np.sum(diff * diff) / n), 2.0 * diff / n


def train_tae(pairs: PairDataset, cfg: BaselineConfig = BaselineConfig(), reference=None) -> TrainResult:
    """Time-lagged autoencoder: reconstruct features of x_{t+tau} through a 1D bottleneck."""
    if len(pairs) == 0:
        raise EmptyDatasetError("no pairs")
    mode = _mode(cfg, pairs)
    ref = _template_reference(pairs, reference)
    nf = n_features(mode, ref.size, pairs.spatial_dim)
    enc = CvEncoder(nn.init([nf, *cfg.hidden, 1], cfg.activation, cfg.seed), ref, pairs.spatial_dim, mode)
    dec = nn.init([1, *cfg.hidden, nf], cfg.activation, cfg.seed + 1)
    Ft, Fl = featurize(enc, pairs.x_t), featurize(enc, pairs.x_tau)
    st_e, st_d = nn.adam_state(enc.net, cfg.lr), nn.adam_state(dec, cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    history = []
    for it, idx in enumerate(_minibatches(rng, len(Ft), cfg.batch_size, cfg.n_iters)):
        z, ce = nn.forward_cached(enc.net, Ft[idx])
        y, cd = nn.forward_cached(dec, z)
        loss, gy = reconstruction_loss(y, Fl[idx])
        _check_loss(loss, it)
        gd, gz = nn.backward_cached(dec, cd, gy)
        ge, _ = nn.backward_cached(enc.net, ce, gz)
        nn.adam_update(dec, gd, st_d)
        nn.adam_update(enc.net, ge, st_e)
        history.append(loss)
    return TrainResult(enc, history, dec)


def gaussian_kl(mu, logvar):
    """KL(N(mu, e^logvar) || N(0, 1)) elementwise."""
    return 0.5 * (mu * mu + np.exp(logvar) - 1.0 - logvar)


def train_vde(pairs: PairDataset, cfg: BaselineConfig = BaselineConfig(), reference=None) -> TrainResult:
    """Variational dynamics encoder with a reparameterized 1D latent; encodes with the mean head."""
    if len(pairs) == 0:
        raise EmptyDatasetError("no pairs")
    mode = _mode(cfg, pairs)
    ref = _template_reference(pairs, reference)
    nf = n_features(mode, ref.size, pairs.spatial_dim)
    enc = CvEncoder(nn.init([nf, *cfg.hidden, 2], cfg.activation, cfg.seed), ref, pairs.spatial_dim, mode)
    dec = nn.init([1, *cfg.hidden, nf], cfg.activation, cfg.seed + 1)
    Ft, Fl = featurize(enc, pairs.x_t), featurize(enc, pairs.x_tau)
    st_e, st_d = nn.adam_state(enc.net, cfg.lr), nn.adam_state(dec, cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    history = []
    for it, idx in enumerate(_minibatches(rng, len(Ft), cfg.batch_size, cfg.n_iters)):
        out, ce = nn.forward_cached(enc.net, Ft[idx])
        mu, logvar = out[:, 0], out[:, 1]
        eps = rng.standard_normal(len(idx)) if cfg.sample_latent else np.zeros(len(idx))
        std = np.exp(0.5 * logvar)
        z = (mu + std * eps)[:, None]
        y, cd = nn.forward_cached(dec, z)
        rec, gy = reconstruction_loss(y, Fl[idx])
        n = len(idx)
        kl = float(np.mean(gaussian_kl(mu, logvar)))
        out_l, ce_l = nn.forward_cached(enc.net, Fl[idx])
        lac, dmu_t, dmu_l, _ = autocorrelation_loss(mu, out_l[:, 0])
        loss = rec + cfg.beta_kl * kl + cfg.ac_weight * lac
        _check_loss(loss, it)
        gd, gz = nn.backward_cached(dec, cd, gy)
        gz = gz[:, 0]
        g_out = np.zeros_like(out)
        g_out[:, 0] = gz + cfg.beta_kl * mu / n + cfg.ac_weight * dmu_t
        g_out[:, 1] = gz * eps * 0.5 * std + cfg.beta_kl * 0.5 * (np.exp(logvar) - 1.0) / n
        ge, _ = nn.backward_cached(enc.net, ce, g_out)
        g_l = np.zeros_like(out_l)
        g_l[:, 0] = cfg.ac_weight * dmu_l
        ge_l, _ = nn.backward_cached(enc.net, ce_l, g_l)
        nn.adam_update(dec, gd, st_d)
        nn.adam_update(enc.net, [a + b for a, b in zip(ge, ge_l)], st_e)
        history.append(loss)
    return TrainResult(enc, history, dec)


def deeptda_loss(s, in_a, cfg: BaselineConfig):
    """Target-driven discriminant loss on one batch; returns (loss, dloss/ds) or None if a state is missing."""
    in_a = np.asarray(in_a, dtype=bool)
    if in_a.all() or not in_a.any():
        return None
    loss = 0.0
    g = np.zeros_like(s)
    for mask, mu_t, sig_t in ((~in_a, cfg.targets[0], cfg.sigma_targets[0]),
                              (in_a, cfg.targets[1], cfg.sigma_targets[1])):
        v = s[mask]
        n = len(v)
        mu = v.mean()
        sig = v.std()
        loss += cfg.alpha * (mu - mu_t) ** 2 + cfg.beta * (sig - sig_t) ** 2
        gv = np.full(n, 2.0 * cfg.alpha * (mu - mu_t) / n)
        if sig > 0:
            gv += 2.0 * cfg.beta * (sig - sig_t) * (v - mu) / (n * sig)
        g[mask] = gv
    return float(loss), g


def train_deeptda(configs, in_a, cfg: BaselineConfig = BaselineConfig(), reference=None,
                  spatial_dim=None) -> TrainResult:
    """Discriminant CV pushing per-state means and spreads of the raw output towards targets.

    ``configs`` are configurations (rows) with boolean basin-A labels ``in_a``.
    Minibatches containing a single state are skipped.
    """
    X = np.asarray(configs, dtype=float)
    in_a = np.asarray(in_a, dtype=bool)
    if in_a.all() or not in_a.any():
        raise EmptyDatasetError("both basin labels must be present")
    sd = spatial_dim or (3 if X.shape[1] % 3 == 0 and X.shape[1] > 3 else X.shape[1])
    mode = cfg.input_mode or ("aligned_coords" if X.shape[1] // sd > 1 else "raw_coords")
    ref = X[np.flatnonzero(in_a)[0]].copy() if reference is None else np.asarray(reference, dtype=float)
    nf = n_features(mode, ref.size, sd)
    enc = CvEncoder(nn.init([nf, *cfg.hidden, 1], cfg.activation, cfg.seed), ref, sd, mode)
    F = featurize(enc, X)
    st = nn.adam_state(enc.net, cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    history = []
    for it, idx in enumerate(_minibatches(rng, len(F), cfg.batch_size, cfg.n_iters)):
        out, cache = nn.forward_cached(enc.net, F[idx])
        res = deeptda_loss(out[:, 0], in_a[idx], cfg)
        if res is None:
            continue
        loss, g = res
        _check_loss(loss, it)
        grads, _ = nn.backward_cached(enc.net, cache, g[:, None])
        nn.adam_update(enc.net, grads, st)
        history.append(loss)
    return TrainResult(enc, history)


# --- linear CVs ---------------------------------------------------------------

@dataclass(frozen=True)
class LinearCv:
    direction: np.ndarray  # in raw feature units
    offset: float
    eigenvalues: Optional[np.ndarray] = None

    def __post_init__(self):
        if not np.any(self.direction != 0):
            raise DegenerateEncoderError("linear CV direction is zero")

    def project(self, F):
        return np.asarray(F, dtype=float) @ self.direction + self.offset


def _standardize(F):
    mean = F.mean(axis=0)
    std = F.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return mean, std


def _solve_generalized(A, B, reg):
    Breg = B + reg * np.eye(len(B))
    try:
        cond = np.linalg.cond(Breg)
    except np.linalg.LinAlgError:
        cond = np.inf
    if not np.isfinite(cond) or cond > 1e12:
        raise IllConditionedError(f"covariance matrix is singular or ill-conditioned (cond={cond:.3g}); increase reg")
    return scipy.linalg.eigh(A, Breg)


def fit_linear_tica(pairs, reg: float = 1e-10, features=None) -> LinearCv:
    """Symmetrized TICA on standardized features; ``pairs`` is a PairDataset or an (X_t, X_tau) tuple.

    The returned direction is normalized so that projections of the training
    data (both sides of the pairs) have unit variance.
    """
    if isinstance(pairs, PairDataset):
        X, Y = pairs.x_t, pairs.x_tau
    else:
        X, Y = (np.asarray(a, dtype=float) for a in pairs)
    if features is not None:
        X, Y = features(X), features(Y)
    X = X.reshape(len(X), -1)
    Y = Y.reshape(len(Y), -1)
    if len(X) < 2:
        raise EmptyDatasetError("TICA needs at least two pairs")
    mean, std = _standardize(np.concatenate([X, Y]))
    Xs, Ys = (X - mean) / std, (Y - mean) / std
    n = len(Xs)
    C0 = 0.5 * (Xs.T @ Xs + Ys.T @ Ys) / n
    Ct = Xs.T @ Ys / n
    Ct = 0.5 * (Ct + Ct.T)
    evals, evecs = _solve_generalized(Ct, C0, reg)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    w = evecs[:, 0] / std
    return LinearCv(w, float(-mean @ w), evals)


def fit_lda(features, in_a, reg: float = 1e-10) -> LinearCv:
    """Fisher discriminant direction (S_w + reg I)^-1 (mu_A - mu_B), oriented so basin A projects higher."""
    F = np.asarray(features, dtype=float)
    in_a = np.asarray(in_a, dtype=bool)
    if in_a.all() or not in_a.any():
        raise EmptyDatasetError("both classes must be present")
    mean, std = _standardize(F)
    Fs = (F - mean) / std
    A, B = Fs[in_a], Fs[~in_a]
    Sw = np.cov(A.T, bias=True).reshape(F.shape[1], -1) + np.cov(B.T, bias=True).reshape(F.shape[1], -1)
    Sreg = Sw + reg * np.eye(len(Sw))
    if np.linalg.cond(Sreg) > 1e12:
        raise IllConditionedError("within-class scatter is singular; increase reg")
    dmu = A.mean(axis=0) - B.mean(axis=0)
    w_std = np.linalg.solve(Sreg, dmu)
    if np.linalg.norm(w_std) < 1e-8 * max(1.0, np.linalg.norm(np.linalg.inv(Sreg), 2)):
        raise DegenerateEncoderError("class means coincide: discriminant direction vanishes")
    w = w_std / std
    w = w / np.linalg.norm(w)
    return LinearCv(w, float(-mean @ w), None)


def linear_encoder(lcv: LinearCv, reference, spatial_dim, input_mode) -> CvEncoder:
    """Wrap a linear CV as an identity-activation network so it plugs into SMD/OPES."""
    W = np.asarray(lcv.direction, dtype=float)[None, :]
    net = nn.DenseNet([W.shape[1], 1], "identity", [W.copy()], [np.array([lcv.offset])])
    return CvEncoder(net, np.asarray(reference, dtype=float), spatial_dim, input_mode)


def sensitivity(encoder: CvEncoder, dataset):
    """Mean |ds/dfeature| over the dataset, sorted descending. Returns (feature indices, values)."""
    X = np.asarray(dataset, dtype=float)
    if X.size == 0:
        raise EmptyDatasetError("sensitivity needs data")
    F = featurize(encoder, np.atleast_2d(X))
    out, cache = nn.forward_cached(encoder.net, F)
    up = np.zeros_like(out)
    up[:, encoder.output_index] = encoder.calibration.scale
    _, GF = nn.backward_cached(encoder.net, cache, up, need_params=False)
    mean_abs = np.mean(np.abs(GF), axis=0)
    order = np.argsort(-mean_abs, kind="stable")
    return order, mean_abs[order]
