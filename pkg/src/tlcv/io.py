"""Persistence: atomic writes, the trajectory binary format, CSV tables, JSON checkpoints.

Trajectory file layout (little-endian)::

    b"TLCTRJ1"
    u32 version, u32 n_particles, u32 spatial_dim, u64 n_frames,
    f64 dt, u64 record_stride, u64 seed
    n_frames * n_particles * spatial_dim f64      (frames, row-major)
    u32 n_blocks                                   (optional trailer)
    per block: u16 name length, utf-8 name, u64 count, count f64

Trailer blocks hold per-frame annotations (count = n_frames) and run
metadata prefixed ``meta:`` (gamma, temperature, masses, velocities...).
Files written before the trailer existed simply end after the frames.
"""

from __future__ import annotations

import contextlib
import csv
import hashlib
import io as _io
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .dynamics import LangevinParams, PairDataset, Trajectory
from .errors import ChecksumMismatch, ContractViolation

TRAJ_MAGIC = b"TLCTRJ1"
TRAJ_VERSION = 1
_TRAJ_HEADER = struct.Struct("<IIIQdQQ")
PAIRS_MAGIC = b"TLCPRS1"
_PAIRS_HEADER = struct.Struct("<IIIQQ")


def atomic_write_bytes(path, data: bytes) -> Path:
    """Write to a temporary sibling then rename, so readers never see a partial file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise
    return path


def atomic_write_text(path, text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


# --- trajectories ------------------------------------------------------------

def _block(name: str, values) -> bytes:
    raw = name.encode("utf-8")
    arr = np.ascontiguousarray(values, dtype="<f8").ravel()
    return struct.pack("<H", len(raw)) + raw + struct.pack("<Q", arr.size) + arr.tobytes()


def trajectory_bytes(traj: Trajectory) -> bytes:
    p = traj.params
    head = _TRAJ_HEADER.pack(TRAJ_VERSION, traj.n_particles, traj.spatial_dim, traj.n_frames,
                             p.dt, traj.record_stride, p.seed & 0xFFFFFFFFFFFFFFFF)
    blocks = [_block(k, v) for k, v in sorted(traj.annotations.items())]
    blocks.append(_block("meta:gamma", [p.gamma]))
    blocks.append(_block("meta:temperature", [p.temperature]))
    if p.masses is not None:
        blocks.append(_block("meta:masses", p.masses))
    if traj.diverged_step is not None:
        blocks.append(_block("meta:diverged_step", [traj.diverged_step]))
    if traj.velocities is not None:
        blocks.append(_block("meta:velocities", traj.velocities))
    return (TRAJ_MAGIC + head + np.ascontiguousarray(traj.frames, dtype="<f8").tobytes()
            + struct.pack("<I", len(blocks)) + b"".join(blocks))


def parse_trajectory(data: bytes) -> Trajectory:
    if data[:7] != TRAJ_MAGIC:
        raise ContractViolation("not a trajectory file (bad magic)")
    off = 7
    version, n_part, sdim, n_frames, dt, stride, seed = _TRAJ_HEADER.unpack_from(data, off)
    if version != TRAJ_VERSION:
        raise ContractViolation(f"unsupported trajectory version {version}")
    off += _TRAJ_HEADER.size
    dof = n_part * sdim
    n_bytes = 8 * n_frames * dof
    if len(data) < off + n_bytes:
        raise ContractViolation("truncated trajectory file")
    frames = np.frombuffer(data, dtype="<f8", count=n_frames * dof, offset=off).reshape(n_frames, dof).astype(float)
    off += n_bytes
    blocks = {}
    if off < len(data):
        (n_blocks,) = struct.unpack_from("<I", data, off)
        off += 4
        for _ in range(n_blocks):
            (ln,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off:off + ln].decode("utf-8")
            off += ln
            (count,) = struct.unpack_from("<Q", data, off)
            off += 8
            blocks[name] = np.frombuffer(data, dtype="<f8", count=count, offset=off).astype(float)
            off += 8 * count
    meta = {k[5:]: v for k, v in blocks.items() if k.startswith("meta:")}
    ann = {k: v for k, v in blocks.items() if not k.startswith("meta:")}
    masses = tuple(meta["masses"].tolist()) if "masses" in meta else None
    params = LangevinParams(dt, float(meta["gamma"][0]) if "gamma" in meta else 0.0,
                            float(meta["temperature"][0]) if "temperature" in meta else 0.0, int(seed), masses)
    vel = meta["velocities"].reshape(n_frames, dof) if "velocities" in meta else None
    div = int(meta["diverged_step"][0]) if "diverged_step" in meta else None
    return Trajectory(frames, int(stride), params, n_part, sdim, ann, div, vel)


def save_trajectory(path, traj: Trajectory) -> Path:
    return atomic_write_bytes(path, trajectory_bytes(traj))


def load_trajectory(path) -> Trajectory:
    return parse_trajectory(Path(path).read_bytes())


def trajectory_csv(traj: Trajectory) -> str:
    """One frame per row: frame, step, coordinates, then annotations."""
    names = sorted(traj.annotations)
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["frame", "step"] + [f"x{i}" for i in range(traj.frames.shape[1])] + names)
    for i, row in enumerate(traj.frames):
        w.writerow([i, i * traj.record_stride] + [repr(float(v)) for v in row]
                   + [repr(float(traj.annotations[n][i])) for n in names])
    return buf.getvalue()


# --- pairs -------------------------------------------------------------------

def pairs_bytes(ds: PairDataset) -> bytes:
    head = _PAIRS_HEADER.pack(1, ds.n_particles, ds.spatial_dim, len(ds), ds.tau_steps)
    labels = np.concatenate([ds.in_a_t, ds.in_a_tau]).astype(np.uint8)
    return (PAIRS_MAGIC + head + np.ascontiguousarray(ds.x_t, dtype="<f8").tobytes()
            + np.ascontiguousarray(ds.x_tau, dtype="<f8").tobytes() + labels.tobytes())


def parse_pairs(data: bytes) -> PairDataset:
    if data[:7] != PAIRS_MAGIC:
        raise ContractViolation("not a pair-dataset file (bad magic)")
    _, n_part, sdim, n, tau = _PAIRS_HEADER.unpack_from(data, 7)
    off = 7 + _PAIRS_HEADER.size
    dof = n_part * sdim
    xt = np.frombuffer(data, "<f8", n * dof, off).reshape(n, dof).astype(float)
    off += 8 * n * dof
    xtau = np.frombuffer(data, "<f8", n * dof, off).reshape(n, dof).astype(float)
    off += 8 * n * dof
    lab = np.frombuffer(data, np.uint8, 2 * n, off).astype(bool)
    return PairDataset(xt, xtau, int(tau), lab[:n], lab[n:], n_part, sdim)


def save_pairs(path, ds: PairDataset) -> Path:
    return atomic_write_bytes(path, pairs_bytes(ds))


def load_pairs(path) -> PairDataset:
    return parse_pairs(Path(path).read_bytes())


# --- JSON / CSV --------------------------------------------------------------

def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def dumps_json(obj) -> str:
    """Deterministic JSON; floats use Python's shortest round-trip repr, so f64 survives exactly."""
    return json.dumps(obj, indent=1, sort_keys=True, default=_jsonable, allow_nan=True) + "\n"


def save_json(path, obj) -> Path:
    return atomic_write_text(path, dumps_json(obj))


def load_json(path):
    return json.loads(Path(path).read_text())


def table_csv(header, rows) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
    return buf.getvalue()


def save_csv(path, header, rows) -> Path:
    return atomic_write_text(path, table_csv(header, rows))


def read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def verify_checksum(path, expected: str):
    got = sha256_file(path)
    if got != expected:
        raise ChecksumMismatch(f"{path}: checksum {got[:12]} does not match recorded {expected[:12]}")
