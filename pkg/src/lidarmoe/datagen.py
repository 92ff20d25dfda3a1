"""Synthetic scene construction, LiDAR/camera ray casting, augmentation,
and corruption generators.

Scenes are compositions of four primitive kinds on a fixed 6-class palette:
ground plane (0), vehicle box (1), pedestrian cylinder (2), pole cylinder
(3), building wall (4), barrier wall (5). All generators are pure functions
of their inputs and an integer seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .pointcloud import PointCloud, empty_cloud
from .sensors import CameraModel, ConfigError, SensorModel

CLASS_GROUND = 0
CLASS_VEHICLE = 1
CLASS_PEDESTRIAN = 2
CLASS_POLE = 3
CLASS_BUILDING = 4
CLASS_BARRIER = 5
NUM_CLASSES = 6

# intensity = base(class) * (1 - range / max_range), clamped to [0, 1]
INTENSITY_BASE = {
    CLASS_GROUND: 0.30,
    CLASS_VEHICLE: 0.80,
    CLASS_PEDESTRIAN: 0.55,
    CLASS_POLE: 0.95,
    CLASS_BUILDING: 0.65,
    CLASS_BARRIER: 0.45,
}

_RAY_EPS = 1e-9
PRIMITIVE_KINDS = ("ground-plane", "box", "vertical-cylinder", "wall")


@dataclass(frozen=True)
class Primitive:
    """One scene element.

    pose: (x, y, z, yaw) center and heading for boxes/walls; (x, y, z_base)
    center-bottom for cylinders; (x, y, z_surface) for the ground plane.
    extents: half-extents (hx, hy, hz) for boxes/walls and the ground
    rectangle (hz unused for ground); (radius, height) for cylinders.
    """

    kind: str
    pose: tuple
    extents: tuple
    class_id: int

    def __post_init__(self):
        if self.kind not in PRIMITIVE_KINDS:
            raise ConfigError(f"unknown primitive kind: {self.kind}")
        if any(e <= 0 for e in self.extents[:2]):
            raise ConfigError("extents must be strictly positive")
        if self.class_id < 0:
            raise ConfigError("class_id must be >= 0")


@dataclass(frozen=True)
class Scene:
    primitives: tuple
    seed: int
    num_classes: int = NUM_CLASSES

    def __post_init__(self):
        grounds = [p for p in self.primitives if p.kind == "ground-plane"]
        if len(grounds) != 1:
            raise ConfigError("scene must contain exactly one ground plane")
        for p in self.primitives:
            if p.class_id >= self.num_classes:
                raise ConfigError("primitive class_id out of range")

    def to_json(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "seed": self.seed,
            "primitives": [
                {"kind": p.kind, "pose": list(p.pose),
                 "extents": list(p.extents), "class_id": p.class_id}
                for p in self.primitives
            ],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "Scene":
        prims = tuple(
            Primitive(kind=e["kind"], pose=tuple(e["pose"]),
                      extents=tuple(e["extents"]), class_id=int(e["class_id"]))
            for e in doc["primitives"]
        )
        return cls(primitives=prims, seed=int(doc.get("seed", 0)),
                   num_classes=int(doc.get("num_classes", NUM_CLASSES)))


@dataclass(frozen=True)
class SceneConfig:
    """Placement recipe for random scenes.

    Counts per kind plus an (x, y) placement window. Object centers are
    drawn uniformly inside the window; the window must not contain the
    sensor origin so primitives never embed it.
    """

    n_boxes: int = 7
    n_pedestrians: int = 8
    n_poles: int = 8
    n_buildings: int = 3
    n_barriers: int = 5
    x_bounds: tuple = (3.5, 20.0)
    y_bounds: tuple = (-9.0, 9.0)
    ground_z: float = -1.8
    ground_half: float = 120.0

    def __post_init__(self):
        if self.x_bounds[0] > self.x_bounds[1] or self.y_bounds[0] > self.y_bounds[1]:
            raise ConfigError("placement bounds must have min <= max")

    def to_json(self) -> dict:
        return {
            "n_boxes": self.n_boxes, "n_pedestrians": self.n_pedestrians,
            "n_poles": self.n_poles, "n_buildings": self.n_buildings,
            "n_barriers": self.n_barriers,
            "x_bounds": list(self.x_bounds), "y_bounds": list(self.y_bounds),
            "ground_z": self.ground_z, "ground_half": self.ground_half,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "SceneConfig":
        kw = dict(doc)
        for key in ("x_bounds", "y_bounds"):
            if key in kw:
                kw[key] = tuple(kw[key])
        return cls(**kw)


def build_scene(config: SceneConfig, seed: int) -> Scene:
    """Generate a random scene; deterministic for fixed (config, seed)."""
    rng = np.random.default_rng(seed)
    z0 = config.ground_z
    prims = [Primitive("ground-plane", (0.0, 0.0, z0),
                       (config.ground_half, config.ground_half, 1.0), CLASS_GROUND)]

    def draw_xy():
        x = rng.uniform(*config.x_bounds)
        y = rng.uniform(*config.y_bounds)
        return float(x), float(y)

    for _ in range(config.n_boxes):
        x, y = draw_xy()
        yaw = float(rng.uniform(-np.pi, np.pi))
        hx = float(rng.uniform(1.6, 2.4))
        hy = float(rng.uniform(0.7, 1.0))
        hz = float(rng.uniform(0.6, 0.9))
        prims.append(Primitive("box", (x, y, z0 + hz, yaw), (hx, hy, hz), CLASS_VEHICLE))
    for _ in range(config.n_pedestrians):
        x, y = draw_xy()
        r = float(rng.uniform(0.25, 0.35))
        h = float(rng.uniform(1.5, 1.9))
        prims.append(Primitive("vertical-cylinder", (x, y, z0), (r, h), CLASS_PEDESTRIAN))
    for _ in range(config.n_poles):
        x, y = draw_xy()
        r = float(rng.uniform(0.10, 0.18))
        h = float(rng.uniform(3.5, 5.0))
        prims.append(Primitive("vertical-cylinder", (x, y, z0), (r, h), CLASS_POLE))
    for _ in range(config.n_buildings):
        x, y = draw_xy()
        yaw = float(rng.uniform(-np.pi, np.pi))
        hx = float(rng.uniform(3.0, 6.0))
        hy = float(rng.uniform(0.3, 0.6))
        hz = float(rng.uniform(2.5, 4.0))
        prims.append(Primitive("wall", (x, y, z0 + hz, yaw), (hx, hy, hz), CLASS_BUILDING))
    for _ in range(config.n_barriers):
        x, y = draw_xy()
        yaw = float(rng.uniform(-np.pi, np.pi))
        hx = float(rng.uniform(1.5, 3.0))
        hy = float(rng.uniform(0.15, 0.3))
        hz = float(rng.uniform(0.4, 0.6))
        prims.append(Primitive("wall", (x, y, z0 + hz, yaw), (hx, hy, hz), CLASS_BARRIER))
    return Scene(primitives=tuple(prims), seed=seed)


# ---------------------------------------------------------------------------
# ray casting
# ---------------------------------------------------------------------------

def _ray_plane_rect(origins, dirs, prim):
    px, py, pz = prim.pose[:3]
    hx, hy = prim.extents[0], prim.extents[1]
    dz = dirs[:, 2]
    t = np.full(dirs.shape[0], np.inf)
    moving = np.abs(dz) > _RAY_EPS
    tt = (pz - origins[:, 2]) / np.where(moving, dz, 1.0)
    x = origins[:, 0] + tt * dirs[:, 0]
    y = origins[:, 1] + tt * dirs[:, 1]
    ok = moving & (tt > _RAY_EPS) & (np.abs(x - px) <= hx) & (np.abs(y - py) <= hy)
    t[ok] = tt[ok]
    return t


def _ray_obb(origins, dirs, prim):
    cx, cy, cz, yaw = prim.pose
    hx, hy, hz = prim.extents
    c, s = np.cos(yaw), np.sin(yaw)
    # world -> box frame
    rot = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])
    o = (origins - np.array([cx, cy, cz])) @ rot.T
    d = dirs @ rot.T
    half = np.array([hx, hy, hz])
    t_near = np.full(dirs.shape[0], -np.inf)
    t_far = np.full(dirs.shape[0], np.inf)
    ok = np.ones(dirs.shape[0], dtype=bool)
    for ax in range(3):
        da = d[:, ax]
        oa = o[:, ax]
        parallel = np.abs(da) <= _RAY_EPS
        ok &= ~(parallel & (np.abs(oa) > half[ax]))
        safe = np.where(parallel, 1.0, da)
        t1 = (-half[ax] - oa) / safe
        t2 = (half[ax] - oa) / safe
        lo, hi = np.minimum(t1, t2), np.maximum(t1, t2)
        t_near = np.where(parallel, t_near, np.maximum(t_near, lo))
        t_far = np.where(parallel, t_far, np.minimum(t_far, hi))
    ok &= (t_near <= t_far) & (t_near > _RAY_EPS)
    t = np.full(dirs.shape[0], np.inf)
    t[ok] = t_near[ok]
    return t


def _ray_cylinder(origins, dirs, prim):
    cx, cy, zb = prim.pose[:3]
    r, h = prim.extents[0], prim.extents[1]
    zt = zb + h
    ox = origins[:, 0] - cx
    oy = origins[:, 1] - cy
    oz = origins[:, 2]
    dx, dy, dz = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    n = dirs.shape[0]
    best = np.full(n, np.inf)

    a = dx * dx + dy * dy
    b = 2.0 * (ox * dx + oy * dy)
    cq = ox * ox + oy * oy - r * r
    disc = b * b - 4.0 * a * cq
    quad = (a > _RAY_EPS) & (disc >= 0.0)
    sq = np.sqrt(np.where(quad, disc, 0.0))
    for sign in (-1.0, 1.0):
        tt = (-b + sign * sq) / np.where(quad, 2.0 * a, 1.0)
        z = oz + tt * dz
        ok = quad & (tt > _RAY_EPS) & (z >= zb) & (z <= zt)
        best = np.where(ok & (tt < best), tt, best)

    moving = np.abs(dz) > _RAY_EPS
    for zcap in (zb, zt):
        tt = (zcap - oz) / np.where(moving, dz, 1.0)
        x = ox + tt * dx
        y = oy + tt * dy
        ok = moving & (tt > _RAY_EPS) & (x * x + y * y <= r * r)
        best = np.where(ok & (tt < best), tt, best)
    return best


_INTERSECTORS = {
    "ground-plane": _ray_plane_rect,
    "box": _ray_obb,
    "vertical-cylinder": _ray_cylinder,
    "wall": _ray_obb,
}


def cast_rays(scene: Scene, origins, dirs):
    """Nearest-hit distances and class ids for a batch of rays.

    Returns ``(t, class_id)`` with ``t = inf`` and class -1 for misses.
    Ties go to the earlier primitive in scene order.
    """
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    n = dirs.shape[0]
    best_t = np.full(n, np.inf)
    best_c = np.full(n, -1, dtype=np.int32)
    for prim in scene.primitives:
        t = _INTERSECTORS[prim.kind](origins, dirs, prim)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_c = np.where(closer, prim.class_id, best_c)
    return best_t, best_c


def simulate_lidar(scene: Scene, sensor: SensorModel) -> PointCloud:
    """Cast one ray per (beam, azimuth) pair from the origin.

    Points are emitted in (beam, azimuth)-sorted order; rays with no hit
    within ``max_range`` produce no point. Intensity is the class base
    reflectance with linear range falloff.
    """
    elev = sensor.beam_elevations()
    azim = sensor.azimuths()
    bb, aa = np.meshgrid(np.arange(sensor.beam_count), np.arange(sensor.azimuth_steps),
                         indexing="ij")
    bb, aa = bb.ravel(), aa.ravel()
    ce, se = np.cos(elev[bb]), np.sin(elev[bb])
    dirs = np.stack([ce * np.cos(azim[aa]), ce * np.sin(azim[aa]), se], axis=1)
    origins = np.zeros_like(dirs)
    t, cls = cast_rays(scene, origins, dirs)
    hit = np.isfinite(t) & (t <= sensor.max_range)
    if not np.any(hit):
        return empty_cloud()
    t, cls, bb = t[hit], cls[hit], bb[hit]
    xyz = dirs[hit] * t[:, None]
    base = np.array([INTENSITY_BASE[c] for c in cls.tolist()])
    intensity = np.clip(base * (1.0 - t / sensor.max_range), 0.0, 1.0)
    return PointCloud(xyz, intensity, bb.astype(np.int32), cls)


@dataclass(frozen=True)
class ClassImage:
    """Per-pixel semantic class (-1 for no hit) and hit depth.

    ``depth`` is the Euclidean distance from the camera center to the hit
    surface, +inf where nothing is hit.
    """

    class_id: np.ndarray
    depth: np.ndarray

    @property
    def height(self):
        return self.class_id.shape[0]

    @property
    def width(self):
        return self.class_id.shape[1]


def _tile_superpixels(class_map: np.ndarray, tile: int) -> np.ndarray:
    """Split the class map into fixed tiles, then by class inside each tile.

    Returns an int32 superpixel-id map with ids dense in [0, S); every
    superpixel is single-class by construction.
    """
    h, w = class_map.shape
    vv, uu = np.mgrid[0:h, 0:w]
    n_tx = (w + tile - 1) // tile
    tile_id = (vv // tile) * n_tx + (uu // tile)
    keys = np.stack([tile_id.ravel(), class_map.ravel()], axis=1)
    _, inverse = np.unique(keys, axis=0, return_inverse=True)
    return inverse.reshape(h, w).astype(np.int32)


def render_camera(scene: Scene, camera: CameraModel, tile: int = 16):
    """Ray-cast the scene through every pixel center.

    Returns ``(ClassImage, superpixel_map)``; the superpixel map is the
    tile-then-class partition of the class map.
    """
    h, w = camera.height, camera.width
    vv, uu = np.mgrid[0:h, 0:w]
    pix = np.stack([uu.ravel() + 0.5, vv.ravel() + 0.5, np.ones(h * w)], axis=0)
    k_inv = np.linalg.inv(camera.intrinsics)
    cam_dirs = k_inv @ pix
    r = camera.extrinsics[:3, :3]
    dirs = (r.T @ cam_dirs).T
    dirs = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    center = camera.center_in_lidar()
    origins = np.broadcast_to(center, dirs.shape)
    t, cls = cast_rays(scene, origins, dirs)
    class_map = cls.reshape(h, w)
    depth = t.reshape(h, w)
    return ClassImage(class_map, depth), _tile_superpixels(class_map, tile)


# ---------------------------------------------------------------------------
# augmentation and corruption
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentParams:
    flip_x: bool
    flip_y: bool
    rotation: float
    scale: float


def draw_augment_params(seed: int) -> AugmentParams:
    """Flips with p=0.5 each, z-rotation uniform in [-pi, pi], isotropic
    scale uniform in [0.95, 1.05]; draw order fixed for reproducibility."""
    rng = np.random.default_rng(seed)
    flip_x = bool(rng.random() < 0.5)
    flip_y = bool(rng.random() < 0.5)
    rotation = float(rng.uniform(-np.pi, np.pi))
    scale = float(rng.uniform(0.95, 1.05))
    return AugmentParams(flip_x, flip_y, rotation, scale)


def apply_augment(cloud: PointCloud, params: AugmentParams) -> PointCloud:
    """Flip-x, flip-y, rotate about z, then scale; other fields unchanged."""
    xyz = cloud.xyz.astype(np.float64).copy()
    if params.flip_x:
        xyz[:, 0] = -xyz[:, 0]
    if params.flip_y:
        xyz[:, 1] = -xyz[:, 1]
    c, s = np.cos(params.rotation), np.sin(params.rotation)
    x = xyz[:, 0] * c - xyz[:, 1] * s
    y = xyz[:, 0] * s + xyz[:, 1] * c
    xyz[:, 0], xyz[:, 1] = x, y
    xyz *= params.scale
    return cloud.replace_xyz(xyz)


def augment(cloud: PointCloud, seed: int) -> PointCloud:
    return apply_augment(cloud, draw_augment_params(seed))


CORRUPTION_KINDS = ("beam-missing", "jitter", "range-cut")
_JITTER_SIGMA = {1: 0.02, 2: 0.05, 3: 0.10}
_RANGE_LIMIT = {1: 40.0, 2: 30.0, 3: 20.0}


def dropped_beams(beam_count: int, severity: int) -> np.ndarray:
    """Beam indices removed by the beam-missing corruption.

    Severity 1 and 2 drop every 4th / 2nd beam; severity 3 drops the
    half-up-rounded multiples of 1.5 (two thirds of all beams).
    """
    if severity in (1, 2):
        k = {1: 4, 2: 2}[severity]
        return np.arange(0, beam_count, k)
    j = np.arange(int(np.ceil(beam_count / 1.5)) + 1)
    idx = np.unique(np.floor(1.5 * j + 0.5).astype(np.int64))
    return idx[idx < beam_count]


def corrupt(cloud: PointCloud, kind: str, severity: int, seed: int) -> PointCloud:
    """Simplified sensor-corruption analogues, deterministic per seed."""
    if kind not in CORRUPTION_KINDS:
        raise ConfigError(f"unknown corruption kind: {kind}")
    if severity not in (1, 2, 3):
        raise ConfigError("severity must be 1, 2, or 3")
    if kind == "beam-missing":
        gone = dropped_beams(int(cloud.beam.max(initial=-1)) + 1, severity)
        keep = ~np.isin(cloud.beam, gone)
        return cloud.select(keep)
    if kind == "jitter":
        rng = np.random.default_rng(seed)
        noise = rng.standard_normal(cloud.xyz.shape) * _JITTER_SIGMA[severity]
        return cloud.replace_xyz(cloud.xyz.astype(np.float64) + noise)
    keep = cloud.depth() <= _RANGE_LIMIT[severity]
    return cloud.select(keep)
