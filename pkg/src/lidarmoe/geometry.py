"""Representation transforms: spherical range projection, sparse
voxelization, camera projection, superpoint construction, feature
alignment back to point space, and grouped pooling.

All functions are pure over immutable inputs. The range projection maps a
point (x, y, z) with depth d to

    u = 0.5 * (1 - atan2(y, x) / pi) * W_r
    v = (1 - (asin(z / d) + fov_down) / fov_total) * H_r

floored to integers and clamped to the grid; a point is flagged invalid
iff clamping moved its row index. Cell collisions keep the minimum-depth
point, but every point retains its pixel so unprojection stays total.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .pointcloud import PointCloud
from .sensors import CameraModel, SensorModel


class ContractError(ValueError):
    """An argument violates a documented precondition."""


@dataclass(frozen=True)
class RangeImage:
    """Spherical projection of a cloud onto an (H_r, W_r) grid.

    ``features`` is (H_r, W_r, 5) float32 carrying (x, y, z, intensity,
    depth) of each cell's kept point, zeros where empty. ``kept_index``
    is (H_r, W_r) int32 with the kept point id or -1. ``pixel_u`` /
    ``pixel_v`` map every input point to its cell; ``valid`` is False
    where row clamping moved the point.
    """

    features: np.ndarray
    kept_index: np.ndarray
    pixel_u: np.ndarray
    pixel_v: np.ndarray
    valid: np.ndarray

    @property
    def height(self):
        return self.features.shape[0]

    @property
    def width(self):
        return self.features.shape[1]

    def point_cell_ids(self) -> np.ndarray:
        """Flat cell index (v * W_r + u) per input point."""
        return (self.pixel_v.astype(np.int64) * self.width
                + self.pixel_u.astype(np.int64))


def range_uv_exact(xyz, sensor: SensorModel):
    """Pre-floor (u, v) coordinates of the spherical projection, float64."""
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    d = np.linalg.norm(xyz, axis=1)
    if np.any(d <= 0):
        raise ContractError("points must have positive depth")
    u = 0.5 * (1.0 - np.arctan2(xyz[:, 1], xyz[:, 0]) / np.pi) * sensor.range_w
    v = (1.0 - (np.arcsin(xyz[:, 2] / d) + sensor.fov_down) / sensor.fov_total) * sensor.range_h
    return u, v, d


def project_to_range(cloud: PointCloud, sensor: SensorModel) -> RangeImage:
    h, w = sensor.range_h, sensor.range_w
    n = cloud.count
    if n == 0:
        return RangeImage(np.zeros((h, w, 5), np.float32),
                          np.full((h, w), -1, np.int32),
                          np.zeros(0, np.int32), np.zeros(0, np.int32),
                          np.zeros(0, bool))
    u, v, d = range_uv_exact(cloud.xyz, sensor)
    ui = np.floor(u).astype(np.int64)
    vi = np.floor(v).astype(np.int64)
    uc = np.clip(ui, 0, w - 1)
    vc = np.clip(vi, 0, h - 1)
    valid = vi == vc

    cell = vc * w + uc
    # min-depth point per cell, ties to the lower point id: sort by
    # (depth, id) and write in reverse so the best entry lands last
    order = np.lexsort((np.arange(n), d))
    flat = np.full(h * w, -1, np.int64)
    flat[cell[order[::-1]]] = order[::-1]
    kept = flat.reshape(h, w)

    features = np.zeros((h, w, 5), np.float32)
    have = kept >= 0
    src = kept[have]
    features[have] = np.concatenate([
        cloud.xyz[src], cloud.intensity[src, None],
        d[src, None].astype(np.float32)], axis=1)
    return RangeImage(features, kept.astype(np.int32),
                      uc.astype(np.int32), vc.astype(np.int32), valid)


@dataclass(frozen=True)
class VoxelGrid:
    """Sparse voxelization with floored integer coordinates.

    ``coords`` is (M, 3) int64 voxel coordinates in lexicographic order,
    ``point_voxel`` the per-point voxel id in [0, M), and ``features`` the
    (M, 4) mean of member (x, y, z, intensity).
    """

    sizes: tuple
    coords: np.ndarray
    point_voxel: np.ndarray
    features: np.ndarray

    @property
    def count(self):
        return self.coords.shape[0]


def voxelize(cloud: PointCloud, sizes) -> VoxelGrid:
    sx, sy, sz = sizes
    if sx <= 0 or sy <= 0 or sz <= 0:
        raise ContractError("voxel sizes must be positive")
    xyz = cloud.xyz.astype(np.float64)
    idx = np.floor(xyz / np.array([sx, sy, sz])).astype(np.int64)
    coords, inverse = np.unique(idx, axis=0, return_inverse=True)
    inverse = inverse.astype(np.int64).reshape(-1)
    m = coords.shape[0]
    feats = np.zeros((m, 4), np.float64)
    np.add.at(feats, inverse, np.concatenate([xyz, cloud.intensity[:, None].astype(np.float64)], axis=1))
    counts = np.bincount(inverse, minlength=m).astype(np.float64)
    if m:
        feats /= counts[:, None]
    # float64 so pooled means stay exact; consumers cast on entry
    return VoxelGrid((float(sx), float(sy), float(sz)), coords, inverse, feats)


def project_to_image(cloud: PointCloud, camera: CameraModel):
    """Pinhole projection of every point.

    Returns ``(u, v, in_frustum)`` float64/bool arrays; ``in_frustum`` is
    True iff the camera-frame depth is positive and (u, v) lands inside
    the image.
    """
    xyz = cloud.xyz.astype(np.float64)
    hom = np.concatenate([xyz, np.ones((cloud.count, 1))], axis=1)
    cam = (camera.extrinsics @ hom.T)[:3]
    z = cam[2]
    safe_z = np.where(np.abs(z) > 1e-12, z, 1e-12)
    proj = camera.intrinsics @ (cam / safe_z)
    u, v = proj[0], proj[1]
    in_frustum = (z > 0) & (u >= 0) & (u < camera.width) & (v >= 0) & (v < camera.height)
    return u, v, in_frustum


@dataclass(frozen=True)
class SuperpointPartition:
    """Image-anchored point groups.

    ``point_group`` maps each point to a group id in [0, S) or -1;
    ``members`` lists point ids per group; ``superpixel_of`` links each
    group back to its source superpixel id.
    """

    point_group: np.ndarray
    members: tuple
    superpixel_of: np.ndarray

    @property
    def count(self):
        return len(self.members)


def build_superpoints(cloud: PointCloud, camera: CameraModel,
                      superpixel_map: np.ndarray, pixel_depth: np.ndarray,
                      tolerance: float = 0.1) -> SuperpointPartition:
    """Assign points to superpixels through the camera projection.

    A point joins the superpoint of the superpixel under its projected
    pixel iff it is in the frustum and its distance to the camera agrees
    with the rendered pixel depth within ``tolerance`` (occlusion rule).
    Superpixels with no member points are dropped and ids recompacted.
    """
    n = cloud.count
    group = np.full(n, -1, np.int64)
    if n:
        u, v, ok = project_to_image(cloud, camera)
        ui = np.floor(u).astype(np.int64)
        vi = np.floor(v).astype(np.int64)
        cam_center = camera.center_in_lidar()
        dist = np.linalg.norm(cloud.xyz.astype(np.float64) - cam_center, axis=1)
        sel = np.flatnonzero(ok)
        if sel.size:
            depth_at = pixel_depth[vi[sel], ui[sel]]
            agree = np.abs(dist[sel] - depth_at) <= tolerance
            sel = sel[agree]
            group[sel] = superpixel_map[vi[sel], ui[sel]]

    used = np.unique(group[group >= 0])
    remap = {int(g): i for i, g in enumerate(used)}
    members = [[] for _ in used]
    for i in np.flatnonzero(group >= 0):
        g = remap[int(group[i])]
        group[i] = g
        members[g].append(int(i))
    return SuperpointPartition(group.astype(np.int32),
                               tuple(np.array(m, np.int64) for m in members),
                               used.astype(np.int32))


def align_to_points(features: np.ndarray, mapping) -> np.ndarray:
    """Broadcast per-cell or per-voxel features back onto the points.

    ``mapping`` is the RangeImage or VoxelGrid the features were computed
    on; output has one row per original point.
    """
    feats = np.asarray(features)
    if isinstance(mapping, RangeImage):
        cells = mapping.height * mapping.width
        if feats.shape[0] != cells:
            raise ContractError(f"expected {cells} cell rows, got {feats.shape[0]}")
        return feats[mapping.point_cell_ids()]
    if isinstance(mapping, VoxelGrid):
        if feats.shape[0] != mapping.count:
            raise ContractError(f"expected {mapping.count} voxel rows, got {feats.shape[0]}")
        return feats[mapping.point_voxel]
    raise ContractError(f"unsupported mapping type: {type(mapping).__name__}")


def group_mean(features: np.ndarray, partition: SuperpointPartition) -> np.ndarray:
    """Mean feature per superpoint; unassigned points are excluded."""
    feats = np.asarray(features)
    s = partition.count
    d = feats.shape[1]
    out = np.zeros((s, d), np.float64)
    grp = partition.point_group
    inside = grp >= 0
    np.add.at(out, grp[inside].astype(np.int64), feats[inside].astype(np.float64))
    counts = np.bincount(grp[inside].astype(np.int64), minlength=s).astype(np.float64)
    if s:
        out /= np.maximum(counts, 1.0)[:, None]
    return out.astype(feats.dtype if feats.dtype == np.float64 else np.float32)


def project_labels(cloud: PointCloud, target) -> np.ndarray:
    """Label space for a derived representation.

    Range target: the kept (min-depth) point's label per cell, -1 for
    empty cells, flattened row-major. Voxel target: majority vote over
    member labels, ties to the smallest class id.
    """
    labels = cloud.label.astype(np.int64)
    if isinstance(target, RangeImage):
        out = np.full(target.height * target.width, -1, np.int64)
        kept = target.kept_index.ravel().astype(np.int64)
        have = kept >= 0
        out[have] = labels[kept[have]]
        return out.astype(np.int32)
    if isinstance(target, VoxelGrid):
        m = target.count
        out = np.full(m, -1, np.int64)
        lab = labels.copy()
        valid = lab >= 0
        if np.any(valid):
            num_classes = int(lab[valid].max()) + 1
            votes = np.zeros((m, num_classes), np.int64)
            np.add.at(votes, (target.point_voxel[valid], lab[valid]), 1)
            has_vote = votes.sum(axis=1) > 0
            out[has_vote] = votes[has_vote].argmax(axis=1)
        return out.astype(np.int32)
    raise ContractError(f"unsupported target type: {type(target).__name__}")
