"""Compiled inner loops.

Everything that runs once per MD step lives here so the Python-level
callback path and the all-compiled fast path execute the same machine code
(and therefore produce bit-identical numbers when the bias is zero).
"""

import math

import numpy as np
from numba import njit

DOUBLEWELL = 0
MULLERBROWN = 1
BUTANE = 2
HARMONIC = 3

_TWO_PI = 2.0 * math.pi
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@njit(cache=True)
def _cross(a, b, out):
    out[0] = a[1] * b[2] - a[2] * b[1]
    out[1] = a[2] * b[0] - a[0] * b[2]
    out[2] = a[0] * b[1] - a[1] * b[0]


@njit(cache=True)
def _dot3(a, b):
    return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]


@njit(cache=True)
def dihedral_grad(x, i, j, k, l, g):
    """Signed torsion of beads i-j-k-l in flat 3D coordinates ``x``.

    Writes dphi/dx into ``g`` (zeroed first). Returns nan for collinear triples.
    """
    b1 = np.empty(3)
    b2 = np.empty(3)
    b3 = np.empty(3)
    for d in range(3):
        b1[d] = x[3 * j + d] - x[3 * i + d]
        b2[d] = x[3 * k + d] - x[3 * j + d]
        b3[d] = x[3 * l + d] - x[3 * k + d]
    n1 = np.empty(3)
    n2 = np.empty(3)
    _cross(b1, b2, n1)
    _cross(b2, b3, n2)
    n1sq = _dot3(n1, n1)
    n2sq = _dot3(n2, n2)
    b2sq = _dot3(b2, b2)
    g[:] = 0.0
    if n1sq < 1e-24 or n2sq < 1e-24 or b2sq < 1e-24:
        return np.nan
    b2n = math.sqrt(b2sq)
    phi = math.atan2(b2n * _dot3(b1, n2), _dot3(n1, n2))
    if phi <= -math.pi:
        phi = math.pi
    f1 = -b2n / n1sq
    f4 = b2n / n2sq
    p12 = _dot3(b1, b2) / b2sq
    p32 = _dot3(b3, b2) / b2sq
    for d in range(3):
        g1 = f1 * n1[d]
        g4 = f4 * n2[d]
        g[3 * i + d] = g1
        g[3 * l + d] = g4
        g[3 * j + d] = -(p12 + 1.0) * g1 + p32 * g4
        g[3 * k + d] = -(p32 + 1.0) * g4 + p12 * g1
    return phi


@njit(cache=True)
def _bond(x, i, j, kb, r0, f):
    dx0 = x[3 * i] - x[3 * j]
    dx1 = x[3 * i + 1] - x[3 * j + 1]
    dx2 = x[3 * i + 2] - x[3 * j + 2]
    r = math.sqrt(dx0 * dx0 + dx1 * dx1 + dx2 * dx2)
    dr = r - r0
    c = -kb * dr / r
    f[3 * i] += c * dx0
    f[3 * i + 1] += c * dx1
    f[3 * i + 2] += c * dx2
    f[3 * j] -= c * dx0
    f[3 * j + 1] -= c * dx1
    f[3 * j + 2] -= c * dx2
    return 0.5 * kb * dr * dr


@njit(cache=True)
def _angle(x, i, j, k, ka, theta0, f):
    a = np.empty(3)
    c = np.empty(3)
    for d in range(3):
        a[d] = x[3 * i + d] - x[3 * j + d]
        c[d] = x[3 * k + d] - x[3 * j + d]
    ra = math.sqrt(_dot3(a, a))
    rc = math.sqrt(_dot3(c, c))
    cos_t = _dot3(a, c) / (ra * rc)
    if cos_t > 1.0:
        cos_t = 1.0
    elif cos_t < -1.0:
        cos_t = -1.0
    theta = math.acos(cos_t)
    sin_t = math.sqrt(1.0 - cos_t * cos_t)
    dth = theta - theta0
    # dU/dcos = ka*dth * dtheta/dcos = -ka*dth/sin
    pref = ka * dth / sin_t
    for d in range(3):
        dca = c[d] / (ra * rc) - cos_t * a[d] / (ra * ra)
        dcc = a[d] / (ra * rc) - cos_t * c[d] / (rc * rc)
        fi = pref * dca
        fk = pref * dcc
        f[3 * i + d] += fi
        f[3 * k + d] += fk
        f[3 * j + d] -= fi + fk
    return 0.5 * ka * dth * dth


@njit(cache=True)
def torsion_energy(phi, c1, c2, c3, s1):
    return (c1 * (1.0 + math.cos(phi)) + c2 * (1.0 + math.cos(2.0 * phi))
            + c3 * (1.0 + math.cos(3.0 * phi)) - s1 * math.sin(phi))


@njit(cache=True)
def torsion_derivative(phi, c1, c2, c3, s1):
    return (-c1 * math.sin(phi) - 2.0 * c2 * math.sin(2.0 * phi)
            - 3.0 * c3 * math.sin(3.0 * phi) - s1 * math.cos(phi))


@njit(cache=True)
def energy_force(kind, p, x, f):
    """Potential energy of one flat configuration; writes -grad U into f."""
    f[:] = 0.0
    if kind == DOUBLEWELL:
        a = p[0]
        tilt = p[1]
        q = x[0]
        w = q * q - 1.0
        f[0] = -(4.0 * a * q * w + tilt)
        return a * w * w + tilt * q
    if kind == HARMONIC:
        f[0] = -p[0] * x[0]
        return 0.5 * p[0] * x[0] * x[0]
    if kind == MULLERBROWN:
        scale = p[0]
        u = 0.0
        gx = 0.0
        gy = 0.0
        for m in range(4):
            dx = x[0] - p[17 + m]
            dy = x[1] - p[21 + m]
            e = p[1 + m] * math.exp(p[5 + m] * dx * dx + p[9 + m] * dx * dy + p[13 + m] * dy * dy)
            u += e
            gx += e * (2.0 * p[5 + m] * dx + p[9 + m] * dy)
            gy += e * (p[9 + m] * dx + 2.0 * p[13 + m] * dy)
        f[0] = -scale * gx
        f[1] = -scale * gy
        return scale * u
    # butane: kb, r0, ka, theta0, c1, c2, c3, s1
    kb = p[0]
    r0 = p[1]
    ka = p[2]
    theta0 = p[3]
    u = _bond(x, 0, 1, kb, r0, f) + _bond(x, 1, 2, kb, r0, f) + _bond(x, 2, 3, kb, r0, f)
    u += _angle(x, 0, 1, 2, ka, theta0, f) + _angle(x, 1, 2, 3, ka, theta0, f)
    g = np.empty(12)
    phi = dihedral_grad(x, 0, 1, 2, 3, g)
    u += torsion_energy(phi, p[4], p[5], p[6], p[7])
    dudphi = torsion_derivative(phi, p[4], p[5], p[6], p[7])
    for d in range(12):
        f[d] -= dudphi * g[d]
    return u


@njit(cache=True)
def batch_energy_force(kind, p, X, F, E):
    for w in range(X.shape[0]):
        E[w] = energy_force(kind, p, X[w], F[w])


@njit(cache=True)
def reference_cv(kind, cvp, x, g):
    """Continuous slow coordinate and its gradient (written into g).

    doublewell: x; Muller-Brown: projection on cvp[:2] through point cvp[2:4];
    butane: torsion mapped to [0, 2pi) so the trans basin is not split.
    """
    if kind == DOUBLEWELL or kind == HARMONIC:
        g[0] = 1.0
        return x[0]
    if kind == MULLERBROWN:
        g[0] = cvp[0]
        g[1] = cvp[1]
        return cvp[0] * (x[0] - cvp[2]) + cvp[1] * (x[1] - cvp[3])
    phi = dihedral_grad(x, 0, 1, 2, 3, g)
    if phi < 0.0:
        phi += _TWO_PI
    return phi


@njit(cache=True)
def baoab_drift(x, v, f, inv_m, half_dt, c1, noise_scale, xi):
    """B-A-O-A part of one BAOAB step, in place, for every walker row."""
    for w in range(x.shape[0]):
        for j in range(x.shape[1]):
            vj = v[w, j] + half_dt * f[w, j] * inv_m[j]
            xj = x[w, j] + half_dt * vj
            vj = c1 * vj + noise_scale[j] * xi[w, j]
            x[w, j] = xj + half_dt * vj
            v[w, j] = vj


@njit(cache=True)
def kick(v, f, inv_m, half_dt):
    for w in range(v.shape[0]):
        for j in range(v.shape[1]):
            v[w, j] = v[w, j] + half_dt * f[w, j] * inv_m[j]


@njit(cache=True)
def all_finite(a):
    for w in range(a.shape[0]):
        for j in range(a.shape[1]):
            if not math.isfinite(a[w, j]):
                return False
    return True


@njit(cache=True)
def run_unbiased(kind, p, x, v, f, inv_m, half_dt, c1, noise_scale, noise,
                 t0, stride, frames, vframes, frame_idx):
    """Advance ``noise.shape[0]`` steps; returns (frame_idx, diverged_step or -1).

    Velocities are recorded too when ``vframes`` has room for them.
    """
    keep_v = vframes.shape[0] > 0
    e = np.empty(x.shape[0])
    for k in range(noise.shape[0]):
        baoab_drift(x, v, f, inv_m, half_dt, c1, noise_scale, noise[k])
        batch_energy_force(kind, p, x, f, e)
        t = t0 + k + 1
        if not all_finite(f):
            return frame_idx, t
        kick(v, f, inv_m, half_dt)
        if t % stride == 0:
            frames[frame_idx] = x
            if keep_v:
                vframes[frame_idx] = v
            frame_idx += 1
    return frame_idx, -1


# --- OPES -------------------------------------------------------------------

@njit(cache=True)
def kde_sum(centers, weights, n, s, sigma):
    """Sum_k w_k G(s, s_k) with normalized Gaussians, and its s-derivative."""
    acc = 0.0
    dacc = 0.0
    inv = 1.0 / sigma
    for k in range(n):
        d = (s - centers[k]) * inv
        gk = weights[k] * math.exp(-0.5 * d * d)
        acc += gk
        dacc -= d * gk
    norm = _INV_SQRT_2PI * inv
    return acc * norm, dacc * norm * inv


@njit(cache=True)
def opes_value(centers, weights, n, sum_w, z, s, sigma, pref, eps, floor):
    """Bias V(s) and dV/ds; pref = (1 - 1/gamma)/beta, floor = pref * log(eps).

    Written as floor + pref * log1p(P/(Z eps)) so V >= floor holds exactly in
    floating point.
    """
    if n == 0:
        return floor, 0.0
    acc, dacc = kde_sum(centers, weights, n, s, sigma)
    scale = 1.0 / (sum_w * z)
    ratio = acc * scale
    return floor + pref * math.log1p(ratio / eps), pref * dacc * scale / (ratio + eps)


@njit(cache=True)
def opes_deposit_inplace(centers, weights, dens, n, sum_w, z, s_new, sigma, beta, pref, eps, floor):
    """Append a kernel at s_new (capacity must allow index n).

    dens[j] holds sum_k w_k G(s_j, s_k) so Z (mean of P over centers) is
    maintained in O(n) per deposit. Returns (n + 1, sum_w, z, weight).
    """
    v_prev, _ = opes_value(centers, weights, n, sum_w, z, s_new, sigma, pref, eps, floor)
    w = math.exp(beta * v_prev)
    inv = 1.0 / sigma
    norm = _INV_SQRT_2PI * inv
    own = 0.0
    for j in range(n):
        d = (centers[j] - s_new) * inv
        gj = math.exp(-0.5 * d * d) * norm
        dens[j] += w * gj
        own += weights[j] * gj
    centers[n] = s_new
    weights[n] = w
    dens[n] = own + w * norm
    n += 1
    sum_w += w
    tot = 0.0
    for j in range(n):
        tot += dens[j]
    z = tot / n / sum_w
    return n, sum_w, z, w


@njit(cache=True)
def run_opes_reference(kind, p, cvp, x, v, f, inv_m, half_dt, c1, noise_scale, noise,
                       t0, stride, pace, centers, weights, dens, n, sum_w, z,
                       sigma, beta, pref, eps, floor, frames, svals, vvals, frame_idx):
    """OPES loop for one walker biased along the system's reference coordinate."""
    g = np.empty(x.shape[1])
    e = np.empty(1)
    for k in range(noise.shape[0]):
        baoab_drift(x, v, f, inv_m, half_dt, c1, noise_scale, noise[k])
        batch_energy_force(kind, p, x, f, e)
        t = t0 + k + 1
        s = reference_cv(kind, cvp, x[0], g)
        if t % pace == 0:
            n, sum_w, z, _ = opes_deposit_inplace(centers, weights, dens, n, sum_w, z,
                                                  s, sigma, beta, pref, eps, floor)
        bias, dv = opes_value(centers, weights, n, sum_w, z, s, sigma, pref, eps, floor)
        for j in range(x.shape[1]):
            f[0, j] = f[0, j] + (-dv) * g[j]
        if not all_finite(f):
            return frame_idx, t, n, sum_w, z, bias
        kick(v, f, inv_m, half_dt)
        if t % stride == 0:
            frames[frame_idx] = x[0]
            svals[frame_idx] = s
            vvals[frame_idx] = bias
            frame_idx += 1
    return frame_idx, -1, n, sum_w, z, 0.0
