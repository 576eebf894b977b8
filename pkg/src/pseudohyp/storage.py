"""Trajectory cache and CSV dumps of trajectories and tangent fields."""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .integrate import TrajectoryRecord
from .tangent_fields import TangentFields

MAGIC = b"PHYPTRAJ"
VERSION = 1
# magic, version, dimension | count, is_flow, pad | sample_dt, transient
_HEADER = struct.Struct("<8sII")
_META = struct.Struct("<QB7xdd")


class CacheFormatError(ValueError):
    pass


def save_trajectory(traj: TrajectoryRecord, path) -> Path:
    """Binary little-endian cache: a 16-byte header (magic ``PHYPTRAJ``, uint32
    version, uint32 dimension), the sample count and metadata, then times and
    row-major states as float64."""
    path = Path(path)
    states = np.ascontiguousarray(traj.states, dtype="<f8")
    m, n = states.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, n))
        fh.write(_META.pack(m, 1 if traj.is_flow else 0, float(traj.sample_dt), float(traj.transient_discarded)))
        fh.write(np.ascontiguousarray(traj.times, dtype="<f8").tobytes())
        fh.write(states.tobytes())
    return path


def load_trajectory(path) -> TrajectoryRecord:
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) < _HEADER.size:
            raise CacheFormatError("truncated header")
        magic, version, n = _HEADER.unpack(head)
        if magic != MAGIC:
            raise CacheFormatError(f"bad magic {magic!r}")
        if version != VERSION:
            raise CacheFormatError(f"unsupported cache version {version}")
        meta = fh.read(_META.size)
        if len(meta) < _META.size:
            raise CacheFormatError("truncated metadata")
        m, is_flow, dt, transient = _META.unpack(meta)
        body = fh.read()
    if len(body) != 8 * m * (n + 1):
        raise CacheFormatError(f"expected {8 * m * (n + 1)} data bytes, found {len(body)}")
    data = np.frombuffer(body, dtype="<f8")
    times = data[:m].astype(np.float64)
    states = data[m:].reshape(m, n).astype(np.float64)
    return TrajectoryRecord(times=times, states=states, sample_dt=dt, transient_discarded=transient,
                            is_flow=bool(is_flow))


def write_trajectory_csv(traj: TrajectoryRecord, path) -> None:
    n = traj.states.shape[1]
    header = ",".join(["t", *(f"x{i + 1}" for i in range(n))])
    data = np.column_stack([traj.times, traj.states])
    np.savetxt(path, data, fmt="%.17g", delimiter=",", header=header, comments="")


def write_fields_csv(fields: TangentFields, path) -> None:
    """CSV ``s,x1..xn,u1..un,w1..wn`` with 1-based trajectory indices."""
    n = fields.states.shape[1]
    cols = ["s", *(f"x{i + 1}" for i in range(n)), *(f"u{i + 1}" for i in range(n)),
            *(f"w{i + 1}" for i in range(n))]
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for k in range(len(fields)):
            vals = np.concatenate([fields.states[k], fields.u[k], fields.w[k]])
            fh.write(str(int(fields.index[k])) + "," + ",".join(f"{v:.17g}" for v in vals) + "\n")


def read_fields_csv(path, torus: bool = False, is_flow: bool = True) -> TangentFields:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    n = (len(header) - 1) // 3
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return TangentFields(index=data[:, 0].astype(np.int64), states=data[:, 1:1 + n], u=data[:, 1 + n:1 + 2 * n],
                         w=data[:, 1 + 2 * n:1 + 3 * n], torus=torus, is_flow=is_flow)
