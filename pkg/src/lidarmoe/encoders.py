"""Miniature representation backbones and the frozen teacher.

Three small encoders preserve each representation's inductive bias:

* range: two 3x3 convolutions (5 -> 32 -> 32) over the projection grid,
  then a per-cell linear head;
* voxel: pointwise MLP (4 -> 32), one mean aggregation over 6-connected
  existing voxels (self included), MLP (32 -> 32), linear head;
* point: farthest-point-sampled centroids, k-nearest-neighbor groups,
  shared pointwise MLP (4 -> 32) max-pooled per group, and a per-point
  head over (own feature || nearest centroid feature).

The teacher maps a rendered class image to per-superpixel embeddings via
a frozen random class embedding plus a sinusoidal positional code; it is
constant for a given seed and never trained.

Each backbone has a composable graph builder (``build_*``) plus an
evaluated convenience wrapper.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, ShapeError
from .datagen import ClassImage
from .geometry import RangeImage, VoxelGrid
from .params import ParameterStore, add_linear, glorot_uniform
from .pointcloud import PointCloud

TRUNK_CH = 32
POINT_CONCAT_CH = 2 * TRUNK_CH
TEACHER_CH = 32

# metric inputs (coordinates, depth) are divided by this before the first
# layer so activations start near unit scale; intensity is already in [0, 1]
COORD_SCALE = 30.0
_SCALE_XYZI = np.array([1.0, 1.0, 1.0, COORD_SCALE], np.float32) / COORD_SCALE
_SCALE_RANGE = np.array([1.0, 1.0, 1.0, COORD_SCALE, 1.0], np.float32) / COORD_SCALE


def linear(ctx, x, name):
    return ad.add(ad.matmul(x, ctx.param(f"{name}.w")), ctx.param(f"{name}.b"))


# ---------------------------------------------------------------------------
# parameter initialization
# ---------------------------------------------------------------------------

def init_range_params(store: ParameterStore, dim: int, rng, prefix="range"):
    store.add(f"{prefix}.conv1.w", glorot_uniform((9 * 5, TRUNK_CH), rng))
    store.add(f"{prefix}.conv1.b", np.zeros(TRUNK_CH, np.float32))
    store.add(f"{prefix}.conv2.w", glorot_uniform((9 * TRUNK_CH, TRUNK_CH), rng))
    store.add(f"{prefix}.conv2.b", np.zeros(TRUNK_CH, np.float32))
    add_linear(store, f"{prefix}.head", TRUNK_CH, dim, rng)


def init_voxel_params(store: ParameterStore, dim: int, rng, prefix="voxel"):
    add_linear(store, f"{prefix}.mlp1", 4, TRUNK_CH, rng)
    add_linear(store, f"{prefix}.mlp2", TRUNK_CH, TRUNK_CH, rng)
    add_linear(store, f"{prefix}.head", TRUNK_CH, dim, rng)


def init_point_params(store: ParameterStore, dim: int, rng, prefix="point"):
    add_linear(store, f"{prefix}.mlp", 4, TRUNK_CH, rng)
    add_linear(store, f"{prefix}.head", POINT_CONCAT_CH, dim, rng)


def init_encoder_params(store, kind, dim, rng, prefix=None):
    prefix = prefix or kind
    {"range": init_range_params, "voxel": init_voxel_params,
     "point": init_point_params}[kind](store, dim, rng, prefix)


def trunk_width(kind: str) -> int:
    return POINT_CONCAT_CH if kind == "point" else TRUNK_CH


# ---------------------------------------------------------------------------
# range encoder
# ---------------------------------------------------------------------------

def build_range_trunk(ctx, image_input: str, prefix="range"):
    """Per-cell trunk features, shape (H_r * W_r, 32)."""
    x = ad.mul(ctx.input(image_input), ad.as_var(_SCALE_RANGE))
    h, w, _ = x.shape
    y = ad.relu(ad.conv2d3x3(x, ctx.param(f"{prefix}.conv1.w"),
                             ctx.param(f"{prefix}.conv1.b")))
    y = ad.relu(ad.conv2d3x3(y, ctx.param(f"{prefix}.conv2.w"),
                             ctx.param(f"{prefix}.conv2.b")))
    return ad.reshape(y, (h * w, TRUNK_CH))


def build_range_embed(ctx, image_input: str, prefix="range", head="head"):
    return linear(ctx, build_range_trunk(ctx, image_input, prefix),
                  f"{prefix}.{head}")


def encode_range(range_image: RangeImage, params: ParameterStore,
                 prefix="range") -> np.ndarray:
    """Per-cell embeddings of a range image, shape (H_r * W_r, D)."""
    graph = Graph(lambda ctx: {"out": build_range_embed(ctx, "image", prefix)})
    return ad.evaluate(graph, params, {"image": range_image.features})["out"]


# ---------------------------------------------------------------------------
# voxel encoder
# ---------------------------------------------------------------------------

def voxel_neighbor_pairs(grid: VoxelGrid):
    """(src, dst) voxel-id pairs for the 6-connected existing neighbors of
    every voxel, self included, sorted by (dst, src)."""
    coords = grid.coords
    lookup = {tuple(c): i for i, c in enumerate(coords.tolist())}
    src, dst = [], []
    offsets = [(0, 0, 0), (1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0),
               (0, 0, 1), (0, 0, -1)]
    for i, c in enumerate(coords.tolist()):
        for off in offsets:
            j = lookup.get((c[0] + off[0], c[1] + off[1], c[2] + off[2]))
            if j is not None:
                dst.append(i)
                src.append(j)
    order = np.lexsort((np.asarray(src), np.asarray(dst)))
    return (np.asarray(src, np.int64)[order], np.asarray(dst, np.int64)[order])


def build_voxel_trunk(ctx, feat_input: str, pairs_input: str, prefix="voxel"):
    """Per-voxel trunk features, shape (M, 32)."""
    x = ad.mul(ctx.input(feat_input), ad.as_var(_SCALE_XYZI))
    src, dst = ctx.raw_input(pairs_input)
    m = x.shape[0]
    h = ad.relu(linear(ctx, x, f"{prefix}.mlp1"))
    gathered = ad.gather_rows(h, src)
    agg = ad.segment_mean(gathered, dst, m)
    return ad.relu(linear(ctx, agg, f"{prefix}.mlp2"))


def build_voxel_embed(ctx, feat_input, pairs_input, prefix="voxel", head="head"):
    return linear(ctx, build_voxel_trunk(ctx, feat_input, pairs_input, prefix),
                  f"{prefix}.{head}")


def encode_voxel(grid: VoxelGrid, params: ParameterStore,
                 prefix="voxel") -> np.ndarray:
    """Per-voxel embeddings, shape (M, D)."""
    if grid.count < 1:
        raise ShapeError("voxel grid is empty")
    pairs = voxel_neighbor_pairs(grid)
    graph = Graph(lambda ctx: {"out": build_voxel_embed(ctx, "feats", "pairs", prefix)})
    return ad.evaluate(graph, params, {"feats": grid.features, "pairs": pairs})["out"]


# ---------------------------------------------------------------------------
# point encoder
# ---------------------------------------------------------------------------

def farthest_point_sample(xyz: np.ndarray, count: int) -> np.ndarray:
    """Greedy farthest-point centroid ids, starting from point 0; distance
    ties resolve to the smallest id."""
    n = xyz.shape[0]
    count = min(count, n)
    xyz = xyz.astype(np.float64)
    chosen = np.empty(count, np.int64)
    chosen[0] = 0
    dist = np.linalg.norm(xyz - xyz[0], axis=1)
    for i in range(1, count):
        nxt = int(np.argmax(dist))
        chosen[i] = nxt
        dist = np.minimum(dist, np.linalg.norm(xyz - xyz[nxt], axis=1))
    return chosen


@dataclass(frozen=True)
class PointGrouping:
    """Sampled centroids plus their k-NN membership and the per-point
    nearest centroid, all precomputed from geometry."""

    centroid_ids: np.ndarray
    member_rows: np.ndarray
    member_group: np.ndarray
    nearest_centroid: np.ndarray

    @property
    def count(self):
        return self.centroid_ids.shape[0]


def point_grouping(cloud: PointCloud, centroid_count: int, k: int) -> PointGrouping:
    if cloud.count < 1 or k < 1:
        raise ShapeError("need at least one point and k >= 1")
    xyz = cloud.xyz.astype(np.float64)
    centroids = farthest_point_sample(xyz, centroid_count)
    d2 = ((xyz[centroids][:, None, :] - xyz[None, :, :]) ** 2).sum(axis=2)
    k_eff = min(k, cloud.count)
    member_rows, member_group = [], []
    for g in range(centroids.shape[0]):
        nn = np.argsort(d2[g], kind="stable")[:k_eff]
        member_rows.append(nn)
        member_group.append(np.full(k_eff, g, np.int64))
    nearest = np.argmin(d2, axis=0).astype(np.int64)
    return PointGrouping(centroids,
                         np.concatenate(member_rows),
                         np.concatenate(member_group),
                         nearest)


def build_point_trunk(ctx, feat_input: str, grouping_input: str, prefix="point"):
    """Per-point trunk features, shape (N, 64)."""
    x = ad.mul(ctx.input(feat_input), ad.as_var(_SCALE_XYZI))
    grouping: PointGrouping = ctx.raw_input(grouping_input)
    h = ad.relu(linear(ctx, x, f"{prefix}.mlp"))
    members = ad.gather_rows(h, grouping.member_rows)
    pooled = ad.segment_max(members, grouping.member_group, grouping.count)
    per_point = ad.gather_rows(pooled, grouping.nearest_centroid)
    return ad.concat_cols([h, per_point])


def build_point_embed(ctx, feat_input, grouping_input, prefix="point", head="head"):
    return linear(ctx, build_point_trunk(ctx, feat_input, grouping_input, prefix),
                  f"{prefix}.{head}")


def encode_point(cloud: PointCloud, params: ParameterStore, centroid_count: int,
                 k: int, prefix="point") -> np.ndarray:
    """Per-point embeddings, shape (N, D)."""
    grouping = point_grouping(cloud, centroid_count, k)
    graph = Graph(lambda ctx: {"out": build_point_embed(ctx, "feats", "grouping", prefix)})
    return ad.evaluate(graph, params,
                       {"feats": cloud.features(), "grouping": grouping})["out"]


# ---------------------------------------------------------------------------
# frozen teacher
# ---------------------------------------------------------------------------

def init_teacher_params(store: ParameterStore, num_classes: int, dim: int,
                        seed: int, prefix="teacher"):
    """Create the frozen teacher weights from a fixed seed."""
    rng = np.random.default_rng(seed)
    store.add(f"{prefix}.emb", glorot_uniform((num_classes, TEACHER_CH), rng),
              trainable=False)
    store.add(f"{prefix}.proj.w", glorot_uniform((TEACHER_CH, dim), rng),
              trainable=False)
    store.add(f"{prefix}.proj.b", np.zeros(dim, np.float32), trainable=False)


POSITION_SCALE = 0.25


def positional_code(width: int, height: int) -> np.ndarray:
    """Sinusoidal (u, v) code per pixel, shape (H * W, 32), row-major.

    Scaled down so the class embedding dominates the pixel feature and
    position acts as a tie-breaker within a class.
    """
    vv, uu = np.mgrid[0:height, 0:width]
    un = (uu.ravel() + 0.5) / width
    vn = (vv.ravel() + 0.5) / height
    freqs = np.array([1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0, 128.0]) * np.pi
    parts = []
    for p in (un, vn):
        ang = p[:, None] * freqs[None, :]
        parts.extend([np.sin(ang), np.cos(ang)])
    return (POSITION_SCALE * np.concatenate(parts, axis=1)).astype(np.float32)


def teacher_features(class_image: ClassImage, params: ParameterStore,
                     superpixel_map: np.ndarray, prefix="teacher") -> np.ndarray:
    """Per-superpixel teacher embeddings Q, shape (S, D).

    Per-pixel feature = one-hot(class) @ class embedding + positional
    code, through the frozen projection; Q is the superpixel mean. Class
    -1 pixels contribute only their positional code.
    """
    emb = params.get(f"{prefix}.emb").astype(np.float64)
    proj_w = params.get(f"{prefix}.proj.w").astype(np.float64)
    proj_b = params.get(f"{prefix}.proj.b").astype(np.float64)
    cls = class_image.class_id.ravel().astype(np.int64)
    h, w = class_image.class_id.shape
    feat = positional_code(w, h).astype(np.float64)
    labeled = cls >= 0
    feat[labeled] += emb[cls[labeled]]
    pix = feat @ proj_w + proj_b

    sp = superpixel_map.ravel().astype(np.int64)
    s = int(sp.max()) + 1 if sp.size else 0
    out = np.zeros((s, pix.shape[1]), np.float64)
    np.add.at(out, sp, pix)
    counts = np.bincount(sp, minlength=s).astype(np.float64)
    if s:
        out /= np.maximum(counts, 1.0)[:, None]
    return out.astype(np.float32)
