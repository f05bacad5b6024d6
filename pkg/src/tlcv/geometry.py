"""Rigid-body superposition (Kabsch) and torsion angles."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .errors import ContractViolation, DegenerateGeometryError


@dataclass(frozen=True)
class RigidAlignment:
    rotation: np.ndarray
    translation: np.ndarray
    rmsd: float


def _points(x, spatial_dim):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] % spatial_dim:
        raise ContractViolation(f"length {x.shape[-1]} is not a multiple of spatial_dim={spatial_dim}")
    return x.reshape(*x.shape[:-1], -1, spatial_dim)


def optimal_rotations(P, Q):
    """Proper rotations R minimizing sum ||R p_i - q_i||^2 for centered point sets.

    P: (..., n, d) and Q: (n, d) or broadcastable. Reflections are removed by
    flipping the direction paired with the smallest singular value.
    """
    d = P.shape[-1]
    if d == 1:
        return np.ones(P.shape[:-2] + (1, 1))
    H = np.swapaxes(P, -1, -2) @ Q
    U, _, Vt = np.linalg.svd(H)
    sign = np.sign(np.linalg.det(np.swapaxes(Vt, -1, -2) @ np.swapaxes(U, -1, -2)))
    sign = np.where(sign == 0, 1.0, sign)
    D = np.ones(P.shape[:-2] + (d,))
    D[..., -1] = sign
    return np.swapaxes(Vt, -1, -2) @ (D[..., :, None] * np.swapaxes(U, -1, -2))


def kabsch_batch(X, ref, spatial_dim):
    """Align each row of X onto ref. Returns (aligned rows, rotations, source centroids)."""
    P = _points(X, spatial_dim)
    Q = _points(ref, spatial_dim)
    if P.shape[-2:] != Q.shape:
        raise ContractViolation("configuration and reference differ in size")
    cP = P.mean(axis=-2, keepdims=True)
    cQ = Q.mean(axis=0)
    R = optimal_rotations(P - cP, Q - cQ)
    aligned = (P - cP) @ np.swapaxes(R, -1, -2) + cQ
    return aligned.reshape(np.shape(X)), R, cP[..., 0, :]


def kabsch_align(x, ref, spatial_dim=3):
    """Superpose x onto ref with a proper rotation plus translation.

    One-dimensional inputs are only centered. Returns the aligned flat
    configuration and the transform (aligned = R x + t per particle).
    """
    x = np.asarray(x, dtype=float)
    ref = np.asarray(ref, dtype=float)
    if x.shape != ref.shape or x.ndim != 1:
        raise ContractViolation("x and ref must be flat vectors of equal length")
    aligned, R, cP = kabsch_batch(x, ref, spatial_dim)
    Q = _points(ref, spatial_dim)
    t = Q.mean(axis=0) - R @ cP
    resid = _points(aligned, spatial_dim) - Q
    rmsd = float(np.sqrt(np.mean(np.sum(resid**2, axis=-1))))
    return aligned, RigidAlignment(R, t, rmsd)


def rmsd(x, y, spatial_dim=3) -> float:
    return kabsch_align(x, y, spatial_dim)[1].rmsd


def rmsd_batch(X, ref, spatial_dim=3) -> np.ndarray:
    aligned, _, _ = kabsch_batch(X, ref, spatial_dim)
    resid = _points(aligned, spatial_dim) - _points(ref, spatial_dim)
    return np.sqrt(np.mean(np.sum(resid**2, axis=-1), axis=-1))


def dihedral(p1, p2, p3, p4) -> float:
    """Signed torsion in (-pi, pi]; 0 for syn, pi for anti."""
    x = np.concatenate([np.asarray(p, dtype=float).reshape(3) for p in (p1, p2, p3, p4)])
    phi = K.dihedral_grad(x, 0, 1, 2, 3, np.empty(12))
    if np.isnan(phi):
        raise DegenerateGeometryError("three consecutive points are collinear")
    return float(phi)


def random_rotation(rng, spatial_dim=3) -> np.ndarray:
    """Haar-random proper rotation."""
    if spatial_dim == 1:
        return np.ones((1, 1))
    A = rng.standard_normal((spatial_dim, spatial_dim))
    Qm, Rm = np.linalg.qr(A)
    Qm = Qm * np.sign(np.diag(Rm))
    if np.linalg.det(Qm) < 0:
        Qm[:, 0] = -Qm[:, 0]
    return Qm


def rigid_transform(x, R, t, spatial_dim=3) -> np.ndarray:
    P = _points(x, spatial_dim)
    return (P @ R.T + t).reshape(np.shape(x))
