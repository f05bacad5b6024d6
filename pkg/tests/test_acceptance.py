"""End-to-end acceptance criteria, one test per criterion.

Each test records a single pass/fail line (printed in the terminal summary)
and then asserts it. Runtime budgets are part of the criteria where stated.
"""

import json
import math
import statistics
import time

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays
from scipy.stats import spearmanr

from conftest import random_butane
from tlcv import analysis as A
from tlcv import cli
from tlcv import cvmodels as CV
from tlcv import enhanced as E
from tlcv import flowgen as FG
from tlcv import io
from tlcv import nn
from tlcv.dynamics import LangevinParams, basin_trajectories, extract_pairs, run
from tlcv.geometry import kabsch_batch, random_rotation, rigid_transform, rmsd
from tlcv.systems import (ReferenceCv, basin_minimum, butane4, doublewell1d, harmonic1d, in_basin_a,
                          reference_coordinate)


def _fd(f, x, h):
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def _rel(analytic, fd, floor):
    """Max error relative to the gradient's own scale (floored for near-zero gradients)."""
    analytic, fd = np.asarray(analytic, float), np.asarray(fd, float)
    return float(np.max(np.abs(analytic - fd)) / max(np.max(np.abs(analytic)), floor))


@pytest.fixture(scope="module")
def butane_tlc():
    """TLC at default settings on butane basin trajectories (transition pairs excluded)."""
    s = butane4()
    trajs = basin_trajectories(s, LangevinParams(0.005, 1.0, 1.0, seed=7), 5, 40000, 10)
    pairs = extract_pairs(trajs["A"] + trajs["B"], 100, True, None, np.random.default_rng(0), s)
    t0 = time.perf_counter()
    res = FG.train_tlc(pairs, FG.TlcConfig(tau_steps=100, seed=0), reference=basin_minimum(s, "A"))
    return res, pairs, time.perf_counter() - t0


# --- 1 ---------------------------------------------------------------------------

def test_criterion_01_thermostat(verdict):
    t0 = time.perf_counter()
    tr = run(harmonic1d(), LangevinParams(0.01, 1.0, 1.0, seed=0), np.array([0.0]), 2_000_000, 1, annotate=False,
             record_velocities=True)
    x2, v2 = float(np.mean(tr.frames**2)), float(np.mean(tr.velocities**2))
    dt = time.perf_counter() - t0
    ok = abs(x2 - 1) < 0.03 and abs(v2 - 1) < 0.03 and dt < 10
    verdict("BAOAB equipartition", ok, f"<x^2>={x2:.4f} <v^2>={v2:.4f} in {dt:.1f}s (within 3%, < 10 s)")


# --- 2 ---------------------------------------------------------------------------

def test_criterion_02_rigid_invariance(verdict):
    rng = np.random.default_rng(2)
    s = butane4()
    ref = basin_minimum(s, "A")
    enc = CV.with_calibration(CV.make_encoder(s, (32, 32), seed=3, reference=ref), CV.Calibration(-0.3, 0.4, 1))
    t0 = time.perf_counter()
    X = random_butane(rng, 1000)
    Y = np.stack([rigid_transform(x, random_rotation(rng), rng.normal(size=3) * 5) for x in X])
    d_enc = float(np.max(np.abs(CV.encode(enc, X) - CV.encode(enc, Y))))
    d_rmsd = max(abs(rmsd(x, ref) - rmsd(y, ref)) for x, y in zip(X, Y))
    _, R, _ = kabsch_batch(Y, ref, 3)
    orth = float(np.max(np.abs(R @ np.swapaxes(R, 1, 2) - np.eye(3))))
    det = float(np.max(np.abs(np.linalg.det(R) - 1)))
    dt = time.perf_counter() - t0
    ok = d_enc < 1e-6 and d_rmsd < 1e-6 and orth < 1e-10 and det < 1e-10 and dt < 5
    verdict("rigid invariance", ok, f"max |d encode|={d_enc:.1e} |d rmsd|={d_rmsd:.1e} "
            f"|RR^T-I|={orth:.1e} |det-1|={det:.1e} in {dt:.1f}s")


# --- 3 ---------------------------------------------------------------------------

def _nn_cases(rng, n):
    worst = 0.0
    for _ in range(n):
        sizes = [int(rng.integers(1, 6)) for _ in range(int(rng.integers(2, 5)))]
        net = nn.init(sizes, str(rng.choice(["tanh", "gelu", "identity"])), int(rng.integers(1 << 30)))
        x, up = rng.normal(size=net.n_in), rng.normal(size=net.n_out)
        grads, gx = nn.backward(net, x, up)
        flat = np.concatenate([p.ravel() for p in net.parameters()])

        def f_params(theta):
            off = 0
            for p in net.parameters():
                p[...] = theta[off:off + p.size].reshape(p.shape)
                off += p.size
            return float(up @ nn.forward(net, x))

        g_fd = _fd(f_params, flat, 1e-6)
        f_params(flat)
        worst = max(worst, _rel(np.concatenate([g.ravel() for g in grads]), g_fd, 1e-3),
                    _rel(gx, _fd(lambda y: float(up @ nn.forward(net, y)), x, 1e-6), 1e-3))
    return worst


def _cv_input_cases(rng, n, ref):
    enc = CV.with_calibration(CV.make_encoder(butane4(), (16, 16), seed=5, reference=ref), CV.Calibration(-0.5, 0.5, 1))
    worst = 0.0
    for x in random_butane(rng, n):
        _, R, _ = kabsch_batch(x, ref, 3)

        def f(y):
            P = y.reshape(-1, 3)
            a = (P - P.mean(0)) @ R.T + ref.reshape(-1, 3).mean(0)
            return enc.calibration.apply(nn.forward(enc.net, a.ravel())[0])

        worst = max(worst, _rel(CV.cv_input_gradient(enc, x), _fd(f, x, 1e-6), 1e-3))
    return worst


def _tlc_cases(rng, n, ref):
    worst = 0.0
    for _ in range(n):
        enc = CV.make_encoder(butane4(), (5,), seed=int(rng.integers(1000)), reference=ref)
        flow = FG.make_flow(12, (6,), seed=int(rng.integers(1000)))
        X, Y = random_butane(rng, 6), random_butane(rng, 6)
        smp = FG.sample_path(CV.featurize(enc, Y), rng, 0.05)
        res = FG.tlc_loss(flow, enc, X, Y, None, 0.7, need_grads=True, sample=smp)
        params = enc.net.parameters()
        flat = np.concatenate([p.ravel() for p in params])

        def f(theta):
            off = 0
            for p in params:
                p[...] = theta[off:off + p.size].reshape(p.shape)
                off += p.size
            return FG.tlc_loss(flow, enc, X, Y, None, 0.7, sample=smp).l_total

        g_fd = _fd(f, flat, 1e-6)
        f(flat)
        worst = max(worst, _rel(np.concatenate([g.ravel() for g in res.encoder_grads]), g_fd, 1e-3))
    return worst


def _smd_cases(rng, n, ref):
    enc = CV.with_calibration(CV.make_encoder(butane4(), (16,), seed=1, reference=ref), CV.Calibration(-1, 1, -1))
    cfg = E.SmdConfig(37.0, 200, 0.8, -0.6)
    worst = 0.0
    for x in random_butane(rng, n):
        t = int(rng.integers(0, 201))
        _, R, _ = kabsch_batch(x, ref, 3)

        def U(y):
            P = y.reshape(-1, 3)
            a = (P - P.mean(0)) @ R.T + ref.reshape(-1, 3).mean(0)
            s = enc.calibration.apply(nn.forward(enc.net, a.ravel())[0])
            return 0.5 * cfg.k * (E.smd_target(t, cfg) - s) ** 2

        worst = max(worst, _rel(E.smd_bias_force(enc, x, t, cfg), -_fd(U, x, 1e-6), 1e-3))
    return worst


def _opes_cases(rng, n):
    worst = 0.0
    for _ in range(n):
        cfg = E.OpesConfig(sigma=float(rng.uniform(0.05, 0.3)), barrier=float(rng.uniform(2, 20)))
        state = E.OpesState()
        for c in rng.normal(size=int(rng.integers(1, 30))):
            state = E.opes_deposit(state, c, cfg)
        s = np.array([rng.normal()])
        _, dv = E.opes_bias(state, s[0], cfg)
        worst = max(worst, _rel([dv], _fd(lambda y: E.opes_bias(state, y[0], cfg)[0], s, 1e-5), 1e-3))
    return worst


def test_criterion_03_gradient_integrity(verdict):
    rng = np.random.default_rng(3)
    ref = basin_minimum(butane4(), "A")
    t0 = time.perf_counter()
    errs = {"nn": _nn_cases(rng, 100), "cv_input": _cv_input_cases(rng, 100, ref), "tlc_encoder": _tlc_cases(rng, 100, ref),
            "smd_force": _smd_cases(rng, 100, ref), "opes_dV": _opes_cases(rng, 100)}
    dt = time.perf_counter() - t0
    ok = all(v < 1e-4 for v in errs.values()) and dt < 30
    verdict("gradient integrity", ok, " ".join(f"{k}={v:.1e}" for k, v in errs.items()) +
            f" (100 cases each, rel < 1e-4) in {dt:.1f}s")


# --- 4 ---------------------------------------------------------------------------

_FUZZ_OK = []


@given(arrays(np.float64, st.integers(2, 64), elements=st.floats(-1e3, 1e3)),
       arrays(np.float64, st.integers(2, 64), elements=st.floats(-1e3, 1e3)))
def _fuzz_bounds(a, b):
    n = min(len(a), len(b))
    loss = CV.autocorrelation_loss(a[:n], b[:n])[0]
    _FUZZ_OK.append(-1.0 <= loss <= 1.0)
    assert -1.0 <= loss <= 1.0


def test_criterion_04_autocorrelation_oracle(verdict):
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(200):
        n = int(rng.integers(2, 300))
        a = rng.normal(size=n) * rng.uniform(0.1, 10)
        b = 0.7 * a + rng.normal(size=n)
        worst = max(worst, abs(CV.autocorrelation_loss(a, b)[0] + statistics.correlation(list(a), list(b))))
    enc = CV.CvEncoder(nn.init([2, 8, 1], "tanh", 3), np.zeros(2), 2, "raw_coords")
    flow = FG.make_flow(2, (8,), seed=1, input_mode="raw_coords")
    X, Y = rng.normal(size=(64, 2)), rng.normal(size=(64, 2))
    in_loss = FG.tlc_loss(flow, enc, X, X + 0.3 * Y, rng).l_ac
    pear = statistics.correlation(list(CV.raw_output(enc, X)), list(CV.raw_output(enc, X + 0.3 * Y)))
    worst = max(worst, abs(in_loss + pear))
    _FUZZ_OK.clear()
    _fuzz_bounds()
    ok = worst < 1e-12 and len(_FUZZ_OK) > 0 and all(_FUZZ_OK)
    verdict("autocorrelation loss", ok, f"max |loss + Pearson|={worst:.1e} (< 1e-12); "
            f"bounds held on {len(_FUZZ_OK)} fuzzed batches")


# --- 5 ---------------------------------------------------------------------------

def test_criterion_05_opes_floor_and_normalization(verdict):
    rng = np.random.default_rng(5)
    t0 = time.perf_counter()
    floor_gap, norm_err = np.inf, 0.0
    for _ in range(200):
        barrier = float(rng.uniform(1.5, 40))
        cfg = E.OpesConfig(sigma=float(rng.uniform(0.03, 0.5)), barrier=barrier, beta=float(rng.uniform(0.5, 2.0)))
        state = E.OpesState()
        centers = rng.normal(size=int(rng.integers(1, 40))) * rng.uniform(0.1, 2)
        for c in centers:
            state = E.opes_deposit(state, c, cfg)
        probe = np.r_[rng.uniform(-10, 10, 50), centers, 1e3]
        v = np.array([E.opes_bias(state, s, cfg)[0] for s in probe])
        floor_gap = min(floor_gap, float(np.min(v + barrier)))
        lo, hi = centers.min() - 12 * cfg.sigma, centers.max() + 12 * cfg.sigma
        grid = np.linspace(lo, hi, 20001)
        total = np.trapezoid([E.kernel_density(state, y, cfg.sigma) for y in grid], grid)
        norm_err = max(norm_err, abs(total - 1.0))
    dt = time.perf_counter() - t0
    ok = floor_gap >= 0 and norm_err < 1e-6 and dt < 10
    verdict("OPES bias floor and normalization", ok,
            f"min(V + dE)={floor_gap:.2e} (>= 0), max |int P - 1|={norm_err:.1e} (< 1e-6) in {dt:.1f}s")


# --- 6 ---------------------------------------------------------------------------

def test_criterion_06_opes_delta_f(verdict):
    s = doublewell1d(a=5.0, tilt=1.0)
    ref = A.reference_delta_f(s, 1.0)
    t0 = time.perf_counter()
    errs = []
    for seed in range(4):
        cfg = E.OpesConfig(pace=500, sigma=0.1, barrier=8.0, beta=1.0, record_stride=100, total_steps=2_000_000,
                           seed=seed)
        tr, _ = E.run_opes(s, ReferenceCv(s), LangevinParams(0.005, 1.0, 1.0), cfg)
        errs.append(A.delta_f(tr, 1.0, 0.0, lambda X: X[:, 0], 0.15) - ref)
    dt = time.perf_counter() - t0
    ok = all(abs(e) < 0.5 for e in errs) and dt < 300
    verdict("OPES Delta F recovery", ok, f"reference {ref:.4f} kT, errors " + ", ".join(f"{e:+.3f}" for e in errs)
            + f" (each within 0.5 kT) in {dt:.0f}s")


# --- 7 ---------------------------------------------------------------------------

def test_criterion_07_tlc_cv_quality(verdict, butane_tlc):
    res, pairs, train_time = butane_tlc
    s = butane4()
    t0 = time.perf_counter()
    # held-out configurations from an independent OPES run on the torsion, spanning trans and gauche
    cfg = E.OpesConfig(pace=500, sigma=0.1, barrier=8.0, record_stride=100, total_steps=400_000, seed=123)
    tr, _ = E.run_opes(s, ReferenceCv(s), LangevinParams(0.005, 1.0, 1.0), cfg)
    phi = reference_coordinate(s, tr.frames)[0]
    rho = float(spearmanr(CV.encode(res.encoder, tr.frames), phi)[0])
    trans = float(CV.encode(res.encoder, basin_minimum(s, "A")))
    gauche = float(CV.encode(res.encoder, basin_minimum(s, "B")))
    no_transitions = bool(np.all(pairs.in_a_t == pairs.in_a_tau))
    # informational: unbiased held-out frames sit inside the basins, where the CV is nearly flat
    ho = basin_trajectories(s, LangevinParams(0.005, 1.0, 1.0, seed=99), 2, 20000, 50)
    Xu = np.concatenate([t.frames for t in ho["A"] + ho["B"]])
    rho_u = float(spearmanr(CV.encode(res.encoder, Xu), reference_coordinate(s, Xu)[0])[0])
    dt = train_time + time.perf_counter() - t0
    ok = abs(rho) >= 0.9 and trans > 0 and no_transitions and dt < 600
    verdict("TLC CV quality", ok, f"|Spearman| vs torsion={abs(rho):.3f} (>= 0.9) on {tr.n_frames} held-out frames, "
            f"(unbiased basin frames {abs(rho_u):.3f}), s(trans)={trans:+.3f} s(gauche)={gauche:+.3f}, train {train_time:.0f}s, total {dt:.0f}s")


# --- 8 ---------------------------------------------------------------------------

def _smd_sweep(s, cv, inits, ks, cap, target, lp):
    a, b = basin_minimum(s, "A"), basin_minimum(s, "B")
    s0, s1 = (float(v) for v in cv.value_and_grad(np.stack([a, b]))[0])
    rows = []
    for k in ks:
        trajs = E.run_smd(s, cv, lp, E.SmdConfig(k, 2000, s0, s1, 64, seed=1), inits=inits)
        m = A.path_metrics(trajs, s, target)
        rows.append((k, m.thp_percent, m.ets_mean))
    eligible = [r for r in rows if r[2] is not None and r[2] <= cap]
    return rows, max(eligible, key=lambda r: (r[1], -r[2])) if eligible else None


def test_criterion_08_tlc_smd(verdict, butane_tlc):
    res, _, _ = butane_tlc
    s = butane4()
    lp = LangevinParams(0.005, 1.0, 1.0)
    t0 = time.perf_counter()
    inits = E.thermalized_starts(s, lp, 64, 2000, 1)
    target = basin_minimum(s, "B")
    base = E.run_smd(s, ReferenceCv(s), lp, E.SmdConfig(0.0, 2000, 0.0, 0.0, 64, seed=1), inits=inits)
    cap = max(float(np.max(t.annotations["energy"])) for t in base) + 2.0
    ks = [10.0 * i for i in range(1, 11)]
    tlc_rows, tlc_best = _smd_sweep(s, res.encoder, inits, ks, cap, target, lp)
    ref_rows, ref_best = _smd_sweep(s, ReferenceCv(s), inits, ks, cap, target, lp)
    dt = time.perf_counter() - t0
    ok = (tlc_best is not None and tlc_best[1] >= 50 and ref_best is not None and ref_best[1] >= 95 and dt < 600)
    fmt = lambda r: "none under cap" if r is None else f"k={r[0]:g} THP={r[1]:.1f}% E_TS={r[2]:.2f}"
    verdict("TLC-driven SMD", ok, f"cap {cap:.2f}; TLC best {fmt(tlc_best)} (THP >= 50); "
            f"reference best {fmt(ref_best)} (THP >= 95) in {dt:.0f}s")


# --- 9 ---------------------------------------------------------------------------

def test_criterion_09_tica_oracle(verdict):
    rng = np.random.default_rng(9)
    n, lag = 200_000, 2
    phi = np.exp(-1.0 / np.array([10.0, 1.0]))
    noise = rng.standard_normal((n, 2)) * np.sqrt(1 - phi**2)
    z = np.empty((n, 2))
    z[0] = rng.standard_normal(2)
    for t in range(1, n):
        z[t] = phi * z[t - 1] + noise[t]
    M = np.array([[1.0, 0.6], [0.3, 2.0]])
    X = z @ M.T
    lcv = CV.fit_linear_tica((X[:-lag], X[lag:]))
    slow = np.linalg.inv(M)[0]
    cos = abs(lcv.direction @ slow) / (np.linalg.norm(lcv.direction) * np.linalg.norm(slow))
    lam, expected = float(lcv.eigenvalues[0]), math.exp(-lag / 10.0)
    ok = cos > 0.99 and abs(lam - expected) / expected < 0.05
    verdict("TICA oracle", ok, f"|cos|={cos:.6f} (> 0.99), lambda1={lam:.4f} vs exp(-0.2)={expected:.4f} (5%)")


# --- 10 --------------------------------------------------------------------------

def test_criterion_10_flow_basin_masses(verdict):
    s = doublewell1d(a=3.0, tilt=0.5)
    pa, _ = A.basin_masses(s)
    tr = run(s, LangevinParams(0.005, 1.0, 1.0, seed=0), np.array([1.0]), 2_000_000, 100, annotate=False)
    flow, _ = FG.train_unconditional(tr.frames, FG.TlcConfig(n_iters=2000, flow_hidden=(64, 64), lr=3e-3, seed=0))
    x = FG.generate(flow, 0.0, 50, np.random.default_rng(1), n=2000)
    ga = float(np.mean(in_basin_a(s, x)))
    ok = abs(ga - pa) < 0.10
    verdict("flow basin masses", ok, f"generated P(A)={ga:.3f} vs quadrature {pa:.3f} (within 10 pp, 2000 samples)")


# --- 11 --------------------------------------------------------------------------

SMALL = """seed = 5
[system]
kind = "doublewell1d"
parameters = {a = 5.0, tilt = 1.0}
[data]
n_trajs_per_basin = 2
n_steps = 3000
[model]
n_iters = 100
encoder_hidden = [8]
flow_hidden = [16]
batch_size = 64
[projection]
total_steps = 10000
[smd]
k = [20.0]
n_replicas = 4
horizon_steps = 500
equilibration_steps = 100
[opes]
total_steps = 10000
n_seeds = 2
"""


def _tree(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_11_reproducibility(verdict, tmp_path):
    cfg = tmp_path / "run.toml"
    cfg.write_text(SMALL)
    stages = ["simulate", "make-pairs", "train", "calibrate", "project", "smd", "opes", "fes", "report"]
    codes = []
    for out in ("a", "b"):
        codes += [cli.main([st_, "--config", str(cfg), "--out", str(tmp_path / out)]) for st_ in stages]
    a, b = _tree(tmp_path / "a"), _tree(tmp_path / "b")
    differing = [k for k in a if a.get(k) != b.get(k)] + sorted(set(b) - set(a))

    exact = []
    trj = io.load_trajectory(tmp_path / "a" / "opes" / "seed_5" / "trajectory.trj")
    exact.append(io.trajectory_bytes(trj) == a["opes/seed_5/trajectory.trj"])
    text = a["models/encoder.json"].decode()
    exact.append(io.dumps_json(CV.encoder_to_dict(CV.encoder_from_dict(json.loads(text)))) == text)
    text = a["models/flow.json"].decode()
    exact.append(io.dumps_json(FG.flow_to_dict(*FG.flow_from_dict(json.loads(text)))) == text)
    pairs = io.load_pairs(tmp_path / "a" / "data" / "pairs.bin")
    exact.append(io.pairs_bytes(pairs) == a["data/pairs.bin"])
    ok = all(c == 0 for c in codes) and not differing and all(exact) and len(a) > 40
    verdict("reproducibility and persistence", ok,
            f"{len(stages)} stages x 2 runs, {len(a)} files, {len(differing)} differing; "
            f"round trips bit-exact: {sum(exact)}/{len(exact)}")
