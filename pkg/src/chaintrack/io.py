"""CSV and JSON exchange formats for poses, trials, estimates and reports.

Floats are written with 17 significant digits so that a write/read round
trip is bit-exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .chain import ChainGeometry, ChainTopology, ImuPoses

FLOAT_FMT = "%.17g"

POSE_HEADER = ["t", "imu", "px", "py", "pz", "qw", "qx", "qy", "qz"]
MEASUREMENT_HEADER = ["t", "imu", "ax", "ay", "az", "gx", "gy", "gz"]
ORIENTATION_HEADER = ["t", "qw", "qx", "qy", "qz"]
GEOMETRY_HEADER = ["joint", "side", "jx", "jy", "jz"]
IMU_ESTIMATE_HEADER = ["t", "imu", "qw", "qx", "qy", "qz", "wx", "wy", "wz"]
JOINT_ESTIMATE_HEADER = ["t", "joint", "side", "jx", "jy", "jz"]

MEASUREMENTS_FILE = "measurements.csv"
ORIENTATION_FILE = "orientation.csv"
POSES_FILE = "poses.csv"
GEOMETRY_FILE = "geometry.csv"
META_FILE = "trial.json"
IMU_ESTIMATES_FILE = "estimates_imu.csv"
JOINT_ESTIMATES_FILE = "estimates_joints.csv"


class DataError(ValueError):
    """Malformed input data; ``line`` is the 1-based line number if known."""

    def __init__(self, message: str, path: str | Path | None = None, line: int | None = None):
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)
        self.path = path
        self.line = line


# ---------------------------------------------------------------- generic table io


def write_table(path: str | Path, header: list[str], columns: list[np.ndarray], int_cols=()) -> None:
    """Write columns as CSV; columns named in ``int_cols`` are written as integers."""
    rows = len(columns[0])
    fmts = ["%d" if name in int_cols else FLOAT_FMT for name in header]
    data = np.empty((rows, len(header)))
    for k, col in enumerate(columns):
        data[:, k] = col
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        if rows:
            np.savetxt(fh, data, fmt=fmts, delimiter=",")


def read_table(path: str | Path, header: list[str]) -> np.ndarray:
    """Read a numeric CSV with exactly ``header``; returns ``(rows, columns)``."""
    path = Path(path)
    if not path.exists():
        raise DataError("file not found", path)
    with open(path) as fh:
        first = fh.readline().strip()
        got = [h.strip() for h in first.split(",")]
        if got != header:
            raise DataError(f"expected header {','.join(header)!r}, got {first!r}", path, 1)
        lines = fh.readlines()
    out = np.empty((len(lines), len(header)))
    for k, line in enumerate(lines, start=2):
        parts = line.strip().split(",")
        if parts == [""]:
            raise DataError("empty line", path, k)
        if len(parts) != len(header):
            raise DataError(f"expected {len(header)} fields, got {len(parts)}", path, k)
        try:
            out[k - 2] = [float(p) for p in parts]
        except ValueError as exc:
            raise DataError(f"not a number ({exc})", path, k) from None
    if not np.all(np.isfinite(out)):
        bad = int(np.flatnonzero(~np.isfinite(out).all(axis=1))[0]) + 2
        raise DataError("non-finite value", path, bad)
    return out


def _long_to_wide(table: np.ndarray, path: Path, n_values: int):
    """Rows ``t, index, values...`` sorted by time then index to ``(T, N, values)``."""
    t_all = table[:, 0]
    idx = table[:, 1]
    if not np.all(idx == np.round(idx)) or idx.min(initial=0) < 0:
        raise DataError("index column must hold non-negative integers", path)
    idx = idx.astype(int)
    n = int(idx.max()) + 1 if len(idx) else 0
    if n == 0 or len(table) % n:
        raise DataError(f"{len(table)} rows do not split evenly into {n} series", path)
    T = len(table) // n
    expected = np.tile(np.arange(n), T)
    mismatch = np.flatnonzero(idx != expected)
    if len(mismatch):
        raise DataError("rows must be ordered by time, then index", path, int(mismatch[0]) + 2)
    t = t_all.reshape(T, n)
    if not np.all(t == t[:, :1]):
        row = int(np.flatnonzero((t != t[:, :1]).any(axis=1))[0]) * n + 2
        raise DataError("timestamps differ within one time step", path, row)
    return t[:, 0], table[:, 2 : 2 + n_values].reshape(T, n, n_values)


# ---------------------------------------------------------------- poses


def write_poses(path: str | Path, poses: ImuPoses) -> None:
    T, n = poses.positions.shape[:2]
    write_table(
        path,
        POSE_HEADER,
        [np.repeat(poses.t, n), np.tile(np.arange(n), T)]
        + [poses.positions[..., k].ravel() for k in range(3)]
        + [poses.orientations[..., k].ravel() for k in range(4)],
        int_cols=("imu",),
    )


def read_poses(path: str | Path) -> ImuPoses:
    path = Path(path)
    table = read_table(path, POSE_HEADER)
    t, values = _long_to_wide(table, path, 7)
    q = values[..., 3:]
    norms = np.linalg.norm(q, axis=-1)
    if np.any(np.abs(norms - 1.0) > 1e-6):
        raise DataError("quaternions must have unit norm", path)
    return ImuPoses(t, values[..., :3].copy(), q.copy())


# ---------------------------------------------------------------- trials


@dataclass
class TrialData:
    """A measurement stream with optional ground truth, as stored on disk."""

    t: np.ndarray
    accel: np.ndarray
    gyro: np.ndarray
    orientation: np.ndarray
    topology: ChainTopology
    rate: float
    poses: ImuPoses | None = None
    geometry: ChainGeometry | None = None

    @property
    def dt(self) -> float:
        return 1.0 / self.rate


def write_trial(directory: str | Path, trial) -> None:
    """Write a :class:`~chaintrack.simulator.SimulatedTrial` (or :class:`TrialData`)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    T, n = trial.accel.shape[:2]
    write_table(
        directory / MEASUREMENTS_FILE,
        MEASUREMENT_HEADER,
        [np.repeat(trial.t, n), np.tile(np.arange(n), T)]
        + [trial.accel[..., k].ravel() for k in range(3)]
        + [trial.gyro[..., k].ravel() for k in range(3)],
        int_cols=("imu",),
    )
    q = trial.orientation_meas if hasattr(trial, "orientation_meas") else trial.orientation
    write_table(directory / ORIENTATION_FILE, ORIENTATION_HEADER, [trial.t] + [q[:, k] for k in range(4)])
    if trial.poses is not None:
        write_poses(directory / POSES_FILE, trial.poses)
    if trial.geometry is not None:
        write_geometry(directory / GEOMETRY_FILE, trial.geometry)
    topo = trial.topology
    meta = {
        "rate": float(trial.rate),
        "imu_count": topo.imu_count,
        "joints": [list(j) for j in topo.joints],
        "external_imu": topo.external_imu,
    }
    (directory / META_FILE).write_text(json.dumps(meta, indent=2) + "\n")


def read_trial(directory: str | Path) -> TrialData:
    directory = Path(directory)
    meta_path = directory / META_FILE
    if not meta_path.exists():
        raise DataError("trial metadata not found", meta_path)
    try:
        meta = json.loads(meta_path.read_text())
        topo = ChainTopology(int(meta["imu_count"]), tuple(map(tuple, meta["joints"])),
                             int(meta["external_imu"]))
        rate = float(meta["rate"])
    except (ValueError, KeyError, TypeError) as exc:
        raise DataError(f"invalid metadata ({exc})", meta_path) from None

    m_path = directory / MEASUREMENTS_FILE
    t, values = _long_to_wide(read_table(m_path, MEASUREMENT_HEADER), m_path, 6)
    if values.shape[1] != topo.imu_count:
        raise DataError(f"expected {topo.imu_count} IMUs, found {values.shape[1]}", m_path)
    o_path = directory / ORIENTATION_FILE
    o_table = read_table(o_path, ORIENTATION_HEADER)
    if len(o_table) != len(t) or np.any(o_table[:, 0] != t):
        raise DataError("orientation timestamps do not match the measurements", o_path)
    q = o_table[:, 1:].copy()
    if np.any(np.abs(np.linalg.norm(q, axis=1) - 1.0) > 1e-6):
        raise DataError("quaternions must have unit norm", o_path)

    poses = read_poses(directory / POSES_FILE) if (directory / POSES_FILE).exists() else None
    geometry = None
    if (directory / GEOMETRY_FILE).exists():
        geometry = read_geometry(directory / GEOMETRY_FILE, topo.joint_count)
    return TrialData(t, values[..., :3].copy(), values[..., 3:].copy(), q, topo, rate, poses, geometry)


def write_geometry(path: str | Path, geometry: ChainGeometry) -> None:
    g = geometry.as_array().reshape(-1, 3)
    m = len(geometry.joint_positions)
    write_table(
        path,
        GEOMETRY_HEADER,
        [np.repeat(np.arange(m), 2), np.tile([0, 1], m)] + [g[:, k] for k in range(3)],
        int_cols=("joint", "side"),
    )


def read_geometry(path: str | Path, joint_count: int) -> ChainGeometry:
    table = read_table(path, GEOMETRY_HEADER)
    if len(table) != 2 * joint_count:
        raise DataError(f"expected {2 * joint_count} rows, got {len(table)}", path)
    g = table[:, 2:].reshape(joint_count, 2, 3)
    return ChainGeometry([(g[k, 0].copy(), g[k, 1].copy()) for k in range(joint_count)])


# ---------------------------------------------------------------- estimates


def write_estimates(directory: str | Path, t, quat, omega, joints) -> None:
    """Write ``quat (T, N, 4)``, ``omega (T, N, 3)`` and ``joints (T, M, 2, 3)``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    T, n = quat.shape[:2]
    write_table(
        directory / IMU_ESTIMATES_FILE,
        IMU_ESTIMATE_HEADER,
        [np.repeat(t, n), np.tile(np.arange(n), T)]
        + [quat[..., k].ravel() for k in range(4)]
        + [omega[..., k].ravel() for k in range(3)],
        int_cols=("imu",),
    )
    m = joints.shape[1]
    write_table(
        directory / JOINT_ESTIMATES_FILE,
        JOINT_ESTIMATE_HEADER,
        [np.repeat(t, 2 * m), np.tile(np.repeat(np.arange(m), 2), T), np.tile([0, 1], T * m)]
        + [joints[..., k].ravel() for k in range(3)],
        int_cols=("joint", "side"),
    )


def read_estimates(directory: str | Path):
    """Inverse of :func:`write_estimates`: ``(t, quat, omega, joints)``."""
    directory = Path(directory)
    path = directory / IMU_ESTIMATES_FILE
    t, imu = _long_to_wide(read_table(path, IMU_ESTIMATE_HEADER), path, 7)
    path = directory / JOINT_ESTIMATES_FILE
    table = read_table(path, JOINT_ESTIMATE_HEADER)
    T = len(t)
    if T == 0 or len(table) % T:
        raise DataError("joint estimates do not match the IMU estimates", path)
    joints = table[:, 3:].reshape(T, -1, 2, 3)
    return t, imu[..., :4].copy(), imu[..., 4:].copy(), joints


def write_json(path: str | Path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path: str | Path):
    path = Path(path)
    if not path.exists():
        raise DataError("file not found", path)
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"invalid JSON ({exc.msg})", path, exc.lineno) from None
