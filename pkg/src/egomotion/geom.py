"""SE(3) pose algebra.

Conventions used throughout the package:

* Quaternions are stored ``(w, x, y, z)`` and kept canonical (``w >= 0``).
* Euler vectors are ``(roll, pitch, yaw)`` for the intrinsic Z-Y-X sequence,
  i.e. ``R = Rz(yaw) @ Ry(pitch) @ Rx(roll)``.
* ``compose(a, b)`` applies motion ``b`` in the frame of ``a`` (right
  composition); ``relative(a, b)`` returns ``b^-1 * a`` so that
  ``compose(b, relative(a, b)) == a``.

The array helpers (``quat_*``, ``euler_*``, ``so3_*``) are vectorized over a
leading axis; the dataclass API wraps them for single poses.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import InvalidPoseError, TrackFormatError
from .io_utils import atomic_write_text

GIMBAL_TOL = 1e-6
TRAJECTORY_HEADER = ["frame_id", "tx", "ty", "tz", "qw", "qx", "qy", "qz"]


# --------------------------------------------------------------------------
# vectorized helpers
# --------------------------------------------------------------------------

def wrap_angle(a):
    """Wrap angles to (-pi, pi]."""
    w = np.mod(np.asarray(a, dtype=float) + np.pi, 2.0 * np.pi) - np.pi
    return np.where(w <= -np.pi, w + 2.0 * np.pi, w)


def quat_normalize(q):
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    return np.where(q[..., :1] < 0.0, -q, q)


def quat_mul(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_conj(q):
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_to_matrix(q):
    q = np.asarray(q, dtype=float)
    w, x, y, z = np.moveaxis(q, -1, 0)
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
    ], axis=-2)


def matrix_to_quat(R):
    """Rotation matrix to canonical quaternion (Shepperd's method, vectorized)."""
    R = np.asarray(R, dtype=float)
    m = R.reshape(-1, 3, 3)
    d0, d1, d2 = m[:, 0, 0], m[:, 1, 1], m[:, 2, 2]
    tr = d0 + d1 + d2
    # candidate quaternions scaled by 4*component, one per pivot choice
    cands = np.stack([
        np.stack([1 + tr, m[:, 2, 1] - m[:, 1, 2], m[:, 0, 2] - m[:, 2, 0], m[:, 1, 0] - m[:, 0, 1]], -1),
        np.stack([m[:, 2, 1] - m[:, 1, 2], 1 + d0 - d1 - d2, m[:, 0, 1] + m[:, 1, 0], m[:, 0, 2] + m[:, 2, 0]], -1),
        np.stack([m[:, 0, 2] - m[:, 2, 0], m[:, 0, 1] + m[:, 1, 0], 1 + d1 - d0 - d2, m[:, 1, 2] + m[:, 2, 1]], -1),
        np.stack([m[:, 1, 0] - m[:, 0, 1], m[:, 0, 2] + m[:, 2, 0], m[:, 1, 2] + m[:, 2, 1], 1 + d2 - d0 - d1], -1),
    ], axis=1)
    pivot = np.argmax(np.stack([tr, d0, d1, d2], -1), axis=1)
    q = cands[np.arange(m.shape[0]), pivot]
    return quat_normalize(q).reshape(R.shape[:-2] + (4,))


def euler_to_quat(r):
    r = np.asarray(r, dtype=float)
    hr, hp, hy = np.moveaxis(r * 0.5, -1, 0)
    cr, sr = np.cos(hr), np.sin(hr)
    cp, sp = np.cos(hp), np.sin(hp)
    cy, sy = np.cos(hy), np.sin(hy)
    q = np.stack([
        cr * cp * cy + sr * sp * sy,
        sr * cp * cy - cr * sp * sy,
        cr * sp * cy + sr * cp * sy,
        cr * cp * sy - sr * sp * cy,
    ], axis=-1)
    return quat_normalize(q)


def euler_to_matrix(r):
    r = np.asarray(r, dtype=float)
    roll, pitch, yaw = np.moveaxis(r, -1, 0)
    cr, sr = np.cos(roll), np.sin(roll)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cy, sy = np.cos(yaw), np.sin(yaw)
    return np.stack([
        np.stack([cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr], -1),
        np.stack([sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr], -1),
        np.stack([-sp, cp * sr, cp * cr], -1),
    ], axis=-2)


def matrix_to_euler(R):
    """Z-Y-X Euler angles from rotation matrices.

    Within ``GIMBAL_TOL`` of pitch = +-pi/2 roll is set to zero and the
    remaining in-plane rotation is reported as yaw.
    """
    R = np.asarray(R, dtype=float)
    cp = np.hypot(R[..., 2, 1], R[..., 2, 2])
    pitch = np.arctan2(-R[..., 2, 0], cp)
    roll = np.arctan2(R[..., 2, 1], R[..., 2, 2])
    yaw = np.arctan2(R[..., 1, 0], R[..., 0, 0])
    gimbal = np.abs(np.abs(pitch) - np.pi / 2) < GIMBAL_TOL
    if np.any(gimbal):
        roll = np.where(gimbal, 0.0, roll)
        yaw = np.where(gimbal, np.arctan2(-R[..., 0, 1], R[..., 1, 1]), yaw)
    return wrap_angle(np.stack([roll, pitch, yaw], axis=-1))


def quat_to_euler(q):
    return matrix_to_euler(quat_to_matrix(q))


def skew(v):
    v = np.asarray(v, dtype=float)
    z = np.zeros(v.shape[:-1])
    x, y, w = np.moveaxis(v, -1, 0)
    return np.stack([
        np.stack([z, -w, y], -1),
        np.stack([w, z, -x], -1),
        np.stack([-y, x, z], -1),
    ], axis=-2)


def quat_exp(v):
    """Rotation vector to unit quaternion."""
    v = np.asarray(v, dtype=float)
    theta = np.linalg.norm(v, axis=-1, keepdims=True)
    half = 0.5 * theta
    small = theta < 1e-8
    safe = np.where(small, 1.0, theta)
    k = np.where(small, 0.5 - theta ** 2 / 48.0, np.sin(half) / safe)
    return np.concatenate([np.cos(half), k * v], axis=-1)


def quat_log(q):
    """Unit quaternion to rotation vector (angle in [0, pi])."""
    q = quat_normalize(q)
    w = q[..., :1]
    v = q[..., 1:]
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    small = n < 1e-8
    safe = np.where(small, 1.0, n)
    k = np.where(small, 2.0 / w * (1.0 - n ** 2 / (3.0 * w ** 2)), 2.0 * np.arctan2(n, w) / safe)
    return k * v


def so3_exp(v):
    return quat_to_matrix(quat_exp(v))


def so3_log(R):
    return quat_log(matrix_to_quat(R))


def so3_right_jacobian_inv(phi):
    """Inverse right Jacobian of SO(3) at rotation vector(s) ``phi``."""
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi, axis=-1)[..., None, None]
    K = skew(phi)
    small = theta < 1e-6
    safe = np.where(small, 1.0, theta)
    coef = np.where(
        small,
        1.0 / 12.0,
        1.0 / safe ** 2 - (1.0 + np.cos(safe)) / (2.0 * safe * np.sin(np.where(small, 1.0, safe))),
    )
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + 0.5 * K + coef * (K @ K)


# --------------------------------------------------------------------------
# value types
# --------------------------------------------------------------------------

def _vec(values, n: int, name: str) -> tuple[float, ...]:
    arr = np.asarray(values, dtype=float).reshape(-1)
    if arr.shape != (n,):
        raise InvalidPoseError(f"{name} must have {n} components, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidPoseError(f"{name} has non-finite components: {arr}")
    return tuple(float(v) for v in arr)


@dataclass(frozen=True)
class RelativePose:
    """Frame-to-frame motion: translation (m) and Z-Y-X Euler rotation (rad)."""

    t: tuple[float, float, float] = (0.0, 0.0, 0.0)
    r: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "t", _vec(self.t, 3, "t"))
        object.__setattr__(self, "r", tuple(float(v) for v in wrap_angle(_vec(self.r, 3, "r"))))

    @classmethod
    def from_vector(cls, z: Sequence[float]) -> "RelativePose":
        z = np.asarray(z, dtype=float)
        return cls(z[:3], z[3:6])

    def as_vector(self) -> np.ndarray:
        return np.array(self.t + self.r)


@dataclass(frozen=True)
class AbsolutePose:
    """Pose in the world frame; the quaternion is normalized on construction."""

    t: tuple[float, float, float] = (0.0, 0.0, 0.0)
    q: tuple[float, float, float, float] = (1.0, 0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "t", _vec(self.t, 3, "t"))
        q = np.asarray(_vec(self.q, 4, "q"))
        norm = float(np.linalg.norm(q))
        if norm < 1e-12:
            raise InvalidPoseError("quaternion has zero norm")
        object.__setattr__(self, "q", tuple(float(v) for v in quat_normalize(q)))

    @classmethod
    def identity(cls) -> "AbsolutePose":
        return cls()

    @classmethod
    def from_euler(cls, t, r) -> "AbsolutePose":
        return cls(t, euler_to_quat(r))

    @property
    def rotation(self) -> np.ndarray:
        return quat_to_matrix(np.array(self.q))

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.t
        return T


def _ensure(pose, cls, name):
    if not isinstance(pose, cls):
        raise InvalidPoseError(f"{name} must be a {cls.__name__}, got {type(pose).__name__}")
    return pose


def compose(a: AbsolutePose, b: RelativePose) -> AbsolutePose:
    """Pose ``a`` followed by motion ``b`` expressed in ``a``'s frame."""
    _ensure(a, AbsolutePose, "a")
    _ensure(b, RelativePose, "b")
    qa = np.array(a.q)
    t = np.array(a.t) + quat_to_matrix(qa) @ np.array(b.t)
    q = quat_mul(qa, euler_to_quat(b.r))
    return AbsolutePose(t, q)


def relative(a: AbsolutePose, b: AbsolutePose) -> RelativePose:
    """Return ``b^-1 * a``: the pose of ``a`` seen from ``b``."""
    _ensure(a, AbsolutePose, "a")
    _ensure(b, AbsolutePose, "b")
    qb = np.array(b.q)
    t = quat_to_matrix(qb).T @ (np.array(a.t) - np.array(b.t))
    q = quat_mul(quat_conj(qb), np.array(a.q))
    return RelativePose(t, quat_to_euler(quat_normalize(q)))


def euler_quat_roundtrip(r: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    r = np.asarray(r, dtype=float)
    if not np.all(np.isfinite(r)):
        raise InvalidPoseError("Euler angles must be finite")
    q = euler_to_quat(r)
    return q, quat_to_euler(q)


def pose_error(a: AbsolutePose, b: AbsolutePose) -> tuple[float, float]:
    """Translation distance (m) and relative rotation angle in [0, pi]."""
    trans = float(np.linalg.norm(np.array(a.t) - np.array(b.t)))
    # atan2 form stays accurate for tiny angles where acos loses precision
    qrel = quat_mul(quat_conj(np.array(b.q)), np.array(a.q))
    rot = 2.0 * math.atan2(float(np.linalg.norm(qrel[1:])), abs(float(qrel[0])))
    return trans, rot


# --------------------------------------------------------------------------
# trajectories
# --------------------------------------------------------------------------

@dataclass(eq=False)
class Trajectory:
    """Ordered absolute poses stored as arrays.

    ``frame_ids`` is (N,) int64, ``t`` is (N, 3) and ``q`` is (N, 4).
    """

    frame_ids: np.ndarray
    t: np.ndarray
    q: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.frame_ids = np.asarray(self.frame_ids, dtype=np.int64).reshape(-1)
        self.t = np.asarray(self.t, dtype=float).reshape(-1, 3)
        self.q = np.asarray(self.q, dtype=float).reshape(-1, 4)
        n = len(self.frame_ids)
        if self.t.shape[0] != n or self.q.shape[0] != n:
            raise InvalidPoseError("frame_ids, t and q must have equal length")
        if n > 1 and np.any(np.diff(self.frame_ids) <= 0):
            raise InvalidPoseError("frame ids must be strictly increasing")
        if not (np.all(np.isfinite(self.t)) and np.all(np.isfinite(self.q))):
            raise InvalidPoseError("trajectory has non-finite values")
        if n:
            self.q = quat_normalize(self.q)

    @classmethod
    def from_poses(cls, frame_ids: Iterable[int], poses: Iterable[AbsolutePose]) -> "Trajectory":
        poses = list(poses)
        return cls(
            np.asarray(list(frame_ids), dtype=np.int64),
            np.array([p.t for p in poses]).reshape(-1, 3),
            np.array([p.q for p in poses]).reshape(-1, 4),
        )

    def __len__(self) -> int:
        return len(self.frame_ids)

    def __getitem__(self, i: int) -> AbsolutePose:
        return AbsolutePose(self.t[i], self.q[i])

    def __iter__(self) -> Iterator[tuple[int, AbsolutePose]]:
        for i in range(len(self)):
            yield int(self.frame_ids[i]), self[i]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Trajectory):
            return NotImplemented
        return (
            np.array_equal(self.frame_ids, other.frame_ids)
            and np.array_equal(self.t, other.t)
            and np.array_equal(self.q, other.q)
        )

    @property
    def rotations(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    def index_of(self, frame_id: int) -> int:
        idx = np.searchsorted(self.frame_ids, frame_id)
        if idx >= len(self) or self.frame_ids[idx] != frame_id:
            raise KeyError(frame_id)
        return int(idx)

    def relative_motions(self) -> np.ndarray:
        """(N-1, 6) frame-to-frame motions ``relative(p[i], p[i-1])``."""
        R = self.rotations
        dt = self.t[1:] - self.t[:-1]
        t_rel = np.einsum("nji,nj->ni", R[:-1], dt)
        q_rel = quat_normalize(quat_mul(quat_conj(self.q[:-1]), self.q[1:]))
        return np.concatenate([t_rel, quat_to_euler(q_rel)], axis=1)

    def path_length(self) -> float:
        return float(np.sum(np.linalg.norm(np.diff(self.t, axis=0), axis=1)))


def integrate(rels, origin: AbsolutePose | None = None, first_frame_id: int = 0) -> Trajectory:
    """Chain relative motions onto ``origin``.

    ``rels`` may be a sequence of :class:`RelativePose` or an (N, 6) array.
    Element ``i`` of the result is ``compose(element[i-1], rels[i-1])``.
    """
    origin = origin or AbsolutePose.identity()
    if isinstance(rels, np.ndarray):
        z = np.asarray(rels, dtype=float).reshape(-1, 6)
    else:
        z = np.array([r.as_vector() for r in rels]).reshape(-1, 6)
    if not np.all(np.isfinite(z)):
        raise InvalidPoseError("relative motions must be finite")
    n = z.shape[0]
    t = np.empty((n + 1, 3))
    q = np.empty((n + 1, 4))
    t[0] = origin.t
    q[0] = origin.q
    dq = euler_to_quat(z[:, 3:])
    for i in range(n):
        R = quat_to_matrix(q[i])
        t[i + 1] = t[i] + R @ z[i, :3]
        q[i + 1] = quat_normalize(quat_mul(q[i], dq[i]))
    return Trajectory(np.arange(first_frame_id, first_frame_id + n + 1), t, q)


def _fmt(v: float) -> str:
    return format(float(v), ".9g")


def write_trajectory_csv(path, traj: Trajectory) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRAJECTORY_HEADER)
    for i in range(len(traj)):
        w.writerow([int(traj.frame_ids[i])] + [_fmt(v) for v in traj.t[i]] + [_fmt(v) for v in traj.q[i]])
    atomic_write_text(path, buf.getvalue())


def read_trajectory_csv(path) -> Trajectory:
    text = Path(path).read_text(encoding="utf-8")
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or [c.strip() for c in rows[0]] != TRAJECTORY_HEADER:
        raise TrackFormatError(f"expected header {','.join(TRAJECTORY_HEADER)}", line=1)
    ids, ts, qs = [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 8:
            raise TrackFormatError(f"expected 8 columns, got {len(row)}", line=lineno)
        try:
            fid = int(row[0])
            vals = [float(c) for c in row[1:]]
        except ValueError as exc:
            raise TrackFormatError(str(exc), line=lineno) from None
        if ids and fid <= ids[-1]:
            raise TrackFormatError("frame_id must be strictly increasing", line=lineno)
        ids.append(fid)
        ts.append(vals[:3])
        qs.append(vals[3:])
    return Trajectory(np.array(ids, dtype=np.int64), np.array(ts).reshape(-1, 3), np.array(qs).reshape(-1, 4))
