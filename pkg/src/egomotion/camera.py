"""Central projection models: pinhole, equidistant fisheye, unified sphere.

Points are in the camera frame (x right, y down, z along the optical axis).
No lens distortion is modelled.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigurationError
from .io_utils import read_kv, write_kv

KINDS = ("pinhole", "fisheye-equidistant", "catadioptric-unified")
CAMERA_KEYS = ("kind", "f", "cx", "cy", "width", "height", "xi")

# vehicle body: x forward, y left, z up  ->  camera: x right, y down, z forward
BODY_TO_CAMERA = np.array([
    [0.0, -1.0, 0.0],
    [0.0, 0.0, -1.0],
    [1.0, 0.0, 0.0],
])


@dataclass(frozen=True)
class CameraModel:
    kind: str
    f: float
    cx: float
    cy: float
    width: int
    height: int
    xi: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown camera kind {self.kind!r}; expected one of {KINDS}")
        if not self.f > 0:
            raise ConfigurationError(f"focal length must be positive, got {self.f}")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ConfigurationError("principal point must lie inside the image")
        if self.xi < 0:
            raise ConfigurationError(f"xi must be non-negative, got {self.xi}")

    @classmethod
    def default(cls, kind: str = "pinhole", width: int = 640, height: int = 480) -> "CameraModel":
        """Defaults sized so every optic spans the same sensor.

        pinhole: 90 deg horizontal field of view; fisheye: 180 deg across the
        width; catadioptric (xi = 0.9): roughly 200 deg across the width.
        """
        cx, cy = width / 2.0, height / 2.0
        if kind == "pinhole":
            return cls(kind, cx, cx, cy, width, height)
        if kind == "fisheye-equidistant":
            return cls(kind, cx / (np.pi / 2.0), cx, cy, width, height)
        if kind == "catadioptric-unified":
            xi = 0.9
            theta = np.deg2rad(100.0)
            f = cx * (np.cos(theta) + xi) / np.sin(theta)
            return cls(kind, float(f), cx, cy, width, height, xi)
        raise ConfigurationError(f"unknown camera kind {kind!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        unknown = set(d) - set(CAMERA_KEYS)
        if unknown:
            raise ConfigurationError(f"unknown camera keys: {sorted(unknown)}")
        kind = d.get("kind", "pinhole")
        base = asdict(cls.default(kind)) if kind in KINDS else {}
        try:
            return cls(
                kind=kind,
                f=float(d.get("f", base.get("f", 0.0))),
                cx=float(d.get("cx", base.get("cx", 0.0))),
                cy=float(d.get("cy", base.get("cy", 0.0))),
                width=int(d.get("width", base.get("width", 0))),
                height=int(d.get("height", base.get("height", 0))),
                xi=float(d.get("xi", base.get("xi", 0.0))),
            )
        except ValueError as exc:
            raise ConfigurationError(f"bad camera value: {exc}") from None

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in CAMERA_KEYS}


def load_camera(path) -> CameraModel:
    return CameraModel.from_dict(read_kv(path))


def save_camera(path, model: CameraModel) -> None:
    write_kv(path, model.to_dict())


def project_points(model: CameraModel, P, check_bounds: bool = True):
    """Project (N, 3) camera-frame points.

    Returns ``(uv, valid)`` where ``uv`` is (N, 2) pixels (NaN where invalid)
    and ``valid`` flags points that are projectable and, when
    ``check_bounds``, inside the image.
    """
    P = np.asarray(P, dtype=float).reshape(-1, 3)
    x, y, z = P[:, 0], P[:, 1], P[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        if model.kind == "pinhole":
            valid = z > 1e-9
            u = model.f * x / z + model.cx
            v = model.f * y / z + model.cy
        elif model.kind == "fisheye-equidistant":
            rho = np.hypot(x, y)
            theta = np.arctan2(rho, z)
            valid = np.hypot(rho, z) > 1e-12
            scale = np.where(rho > 1e-15, model.f * theta / np.where(rho > 1e-15, rho, 1.0), 0.0)
            u = scale * x + model.cx
            v = scale * y + model.cy
        else:
            norm = np.sqrt(x * x + y * y + z * z)
            denom = z + model.xi * norm
            valid = (norm > 1e-12) & (denom > 1e-9 * np.maximum(norm, 1.0))
            u = model.f * x / denom + model.cx
            v = model.f * y / denom + model.cy
    uv = np.stack([u, v], axis=1)
    valid = valid & np.all(np.isfinite(uv), axis=1)
    if check_bounds:
        valid &= (uv[:, 0] >= 0) & (uv[:, 0] <= model.width) & (uv[:, 1] >= 0) & (uv[:, 1] <= model.height)
    uv[~valid] = np.nan
    return uv, valid


def project(model: CameraModel, p) -> tuple[float, float] | None:
    """Pixel coordinates of a single camera-frame point, or None if unseen."""
    uv, valid = project_points(model, np.asarray(p, dtype=float).reshape(1, 3))
    if not valid[0]:
        return None
    return float(uv[0, 0]), float(uv[0, 1])


def normalize_pixels(model: CameraModel, uv):
    """Pixel positions to [-1, 1] using the image size (centered)."""
    half = np.array([model.width / 2.0, model.height / 2.0])
    return (np.asarray(uv, dtype=float) - half) / half


def normalize_flow(model: CameraModel, duv):
    half = np.array([model.width / 2.0, model.height / 2.0])
    return np.asarray(duv, dtype=float) / half
