"""Spinning-LiDAR and pinhole-camera models with JSON (de)serialization."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ConfigError(ValueError):
    """Invalid sensor, camera, or scene configuration."""


@dataclass(frozen=True)
class SensorModel:
    """Spinning LiDAR with evenly spaced beams and azimuth steps.

    ``fov_total`` is the vertical field of view in radians, ``fov_down``
    the part of it below horizontal. Beam elevations are cell-centered and
    evenly spaced inside [-fov_down, fov_total - fov_down], beam 0 lowest;
    azimuths are cell-centered in [-pi, pi). ``range_h``/``range_w`` give
    the spherical-projection grid resolution.
    """

    beam_count: int
    azimuth_steps: int
    fov_total: float
    fov_down: float
    max_range: float
    range_h: int
    range_w: int

    def __post_init__(self):
        if not (0.0 < self.fov_down < self.fov_total):
            raise ConfigError("need 0 < fov_down < fov_total")
        if self.range_h < 1 or self.range_w < 1:
            raise ConfigError("range image resolution must be >= 1")
        if self.beam_count < 1 or self.azimuth_steps < 1:
            raise ConfigError("beam_count and azimuth_steps must be >= 1")
        if self.max_range <= 0:
            raise ConfigError("max_range must be positive")

    def beam_elevations(self) -> np.ndarray:
        b = self.beam_count
        return (-self.fov_down
                + self.fov_total * (np.arange(b) + 0.5) / b).astype(np.float64)

    def azimuths(self) -> np.ndarray:
        a = self.azimuth_steps
        return (-np.pi + 2.0 * np.pi * (np.arange(a) + 0.5) / a).astype(np.float64)

    def to_json(self) -> dict:
        return {
            "beam_count": self.beam_count,
            "azimuth_steps": self.azimuth_steps,
            "fov_total_rad": self.fov_total,
            "fov_down_rad": self.fov_down,
            "max_range_m": self.max_range,
            "range_h": self.range_h,
            "range_w": self.range_w,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "SensorModel":
        try:
            return cls(
                beam_count=int(doc["beam_count"]),
                azimuth_steps=int(doc["azimuth_steps"]),
                fov_total=float(doc["fov_total_rad"]),
                fov_down=float(doc["fov_down_rad"]),
                max_range=float(doc["max_range_m"]),
                range_h=int(doc["range_h"]),
                range_w=int(doc["range_w"]),
            )
        except KeyError as exc:
            raise ConfigError(f"sensor config missing key {exc}") from exc


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera: 3x3 intrinsics and a 4x4 rigid LiDAR-to-camera
    transform. Camera frame convention: +z forward, +x right, +y down."""

    intrinsics: np.ndarray
    extrinsics: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        k = np.asarray(self.intrinsics, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.extrinsics, dtype=np.float64).reshape(4, 4)
        object.__setattr__(self, "intrinsics", k)
        object.__setattr__(self, "extrinsics", t)
        if k[1, 0] != 0 or k[2, 0] != 0 or k[2, 1] != 0:
            raise ConfigError("intrinsics must be upper-triangular")
        if k[0, 0] <= 0 or k[1, 1] <= 0:
            raise ConfigError("focal lengths must be positive")
        r = t[:3, :3]
        if np.linalg.norm(r.T @ r - np.eye(3)) >= 1e-6:
            raise ConfigError("extrinsic rotation block must be orthonormal")
        if not np.allclose(t[3], [0, 0, 0, 1]):
            raise ConfigError("extrinsics bottom row must be [0,0,0,1]")
        if self.width < 1 or self.height < 1:
            raise ConfigError("image size must be >= 1")

    def center_in_lidar(self) -> np.ndarray:
        """Camera optical center expressed in the LiDAR frame."""
        r = self.extrinsics[:3, :3]
        t = self.extrinsics[:3, 3]
        return -r.T @ t

    def to_json(self) -> dict:
        return {
            "cam_intrinsics": self.intrinsics.tolist(),
            "cam_extrinsics": self.extrinsics.tolist(),
            "cam_w": self.width,
            "cam_h": self.height,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "CameraModel":
        try:
            return cls(
                intrinsics=np.asarray(doc["cam_intrinsics"], dtype=np.float64),
                extrinsics=np.asarray(doc["cam_extrinsics"], dtype=np.float64),
                width=int(doc["cam_w"]),
                height=int(doc["cam_h"]),
            )
        except KeyError as exc:
            raise ConfigError(f"camera config missing key {exc}") from exc


def forward_camera(offset=(0.0, 0.0, 0.2), fx=64.0, fy=64.0,
                   cx=48.0, cy=32.0, width=96, height=64) -> CameraModel:
    """A camera at ``offset`` from the LiDAR looking along +x.

    Maps LiDAR axes (x fwd, y left, z up) onto camera axes
    (z fwd, x right, y down).
    """
    r = np.array([[0.0, -1.0, 0.0],
                  [0.0, 0.0, -1.0],
                  [1.0, 0.0, 0.0]])
    t = np.eye(4)
    t[:3, :3] = r
    t[:3, 3] = -r @ np.asarray(offset, dtype=np.float64)
    k = np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])
    return CameraModel(intrinsics=k, extrinsics=t, width=width, height=height)
