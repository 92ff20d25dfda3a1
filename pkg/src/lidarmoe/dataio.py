"""Dataset serialization.

LPCD point-cloud file: magic "LPCD", u32 version=1, u64 N, then N records
of {f32 x, f32 y, f32 z, f32 intensity, u16 beam, i32 label},
little-endian, plus a CSV mirror with header ``x,y,z,intensity,beam,label``.
Camera renders are stored as .npz with arrays ``class_id`` (H, W) int32,
``depth`` (H, W) float64, and ``superpixel`` (H, W) int32. A dataset
manifest is a JSON document listing per-split scan/camera pairs.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datagen import ClassImage
from .pointcloud import PointCloud

LPCD_MAGIC = b"LPCD"
LPCD_VERSION = 1
_RECORD = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                    ("intensity", "<f4"), ("beam", "<u2"), ("label", "<i4")])


class DataFormatError(ValueError):
    """Corrupt or mismatched dataset file."""


def write_lpcd(path, cloud: PointCloud) -> None:
    rec = np.empty(cloud.count, dtype=_RECORD)
    rec["x"], rec["y"], rec["z"] = cloud.xyz[:, 0], cloud.xyz[:, 1], cloud.xyz[:, 2]
    rec["intensity"] = cloud.intensity
    rec["beam"] = cloud.beam.astype("<u2")
    rec["label"] = cloud.label
    with open(path, "wb") as fh:
        fh.write(LPCD_MAGIC)
        fh.write(struct.pack("<I", LPCD_VERSION))
        fh.write(struct.pack("<Q", cloud.count))
        fh.write(rec.tobytes())


def read_lpcd(path) -> PointCloud:
    with open(path, "rb") as fh:
        if fh.read(4) != LPCD_MAGIC:
            raise DataFormatError(f"bad magic in {path}")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != LPCD_VERSION:
            raise DataFormatError(f"unsupported LPCD version {version}")
        (n,) = struct.unpack("<Q", fh.read(8))
        raw = fh.read(n * _RECORD.itemsize)
        if len(raw) != n * _RECORD.itemsize:
            raise DataFormatError(f"truncated LPCD file {path}")
        rec = np.frombuffer(raw, dtype=_RECORD)
    xyz = np.stack([rec["x"], rec["y"], rec["z"]], axis=1)
    return PointCloud(xyz, rec["intensity"], rec["beam"].astype(np.int32),
                      rec["label"])


def write_cloud_csv(path, cloud: PointCloud) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("x,y,z,intensity,beam,label\n")
        for i in range(cloud.count):
            x, y, z = cloud.xyz[i].tolist()
            fh.write(f"{x!r},{y!r},{z!r},{float(cloud.intensity[i])!r},"
                     f"{int(cloud.beam[i])},{int(cloud.label[i])}\n")


def read_cloud_csv(path) -> PointCloud:
    xyz, inten, beam, label = [], [], [], []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "x,y,z,intensity,beam,label":
            raise DataFormatError(f"bad CSV header in {path}")
        for line in fh:
            cols = line.strip().split(",")
            if len(cols) != 6:
                raise DataFormatError(f"bad CSV row in {path}")
            xyz.append([float(cols[0]), float(cols[1]), float(cols[2])])
            inten.append(float(cols[3]))
            beam.append(int(cols[4]))
            label.append(int(cols[5]))
    return PointCloud(np.array(xyz, np.float32).reshape(-1, 3),
                      np.array(inten, np.float32), np.array(beam, np.int32),
                      np.array(label, np.int32))


def write_camera_npz(path, image: ClassImage, superpixel_map: np.ndarray) -> None:
    np.savez(path, class_id=image.class_id.astype(np.int32),
             depth=image.depth.astype(np.float64),
             superpixel=superpixel_map.astype(np.int32))


def read_camera_npz(path):
    with np.load(path) as data:
        image = ClassImage(data["class_id"], data["depth"])
        superpixel = data["superpixel"]
    return image, superpixel


@dataclass
class ScanEntry:
    scan: str
    camera: str | None = None


@dataclass
class DatasetManifest:
    """Per-split scan lists with optional camera pairings.

    Training scans must carry camera pairings for the contrastive stages;
    validation scans must be labeled. ``annotation_fraction`` subsamples
    the labeled training scans for fine-tuning.
    """

    train: list = field(default_factory=list)
    val: list = field(default_factory=list)
    num_classes: int = 6
    annotation_fraction: float = 1.0

    def to_json(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "annotation_fraction": self.annotation_fraction,
            "splits": {
                "train": [{"scan": e.scan, "camera": e.camera} for e in self.train],
                "val": [{"scan": e.scan, "camera": e.camera} for e in self.val],
            },
            "counts": {"train": len(self.train), "val": len(self.val)},
        }

    @classmethod
    def from_json(cls, doc: dict) -> "DatasetManifest":
        def entries(lst):
            return [ScanEntry(scan=e["scan"], camera=e.get("camera")) for e in lst]

        splits = doc.get("splits", {})
        return cls(train=entries(splits.get("train", [])),
                   val=entries(splits.get("val", [])),
                   num_classes=int(doc.get("num_classes", 6)),
                   annotation_fraction=float(doc.get("annotation_fraction", 1.0)))


def save_manifest(path, manifest: DatasetManifest) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest.to_json(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_manifest(path) -> DatasetManifest:
    with open(path, "r", encoding="utf-8") as fh:
        return DatasetManifest.from_json(json.load(fh))


def resolve(base: Path, rel: str) -> Path:
    p = Path(rel)
    return p if p.is_absolute() else base / p


class TrainingLog:
    """CSV stream of (step, stage, term, value) rows."""

    def __init__(self, path):
        self.path = Path(path)
        self._fh = open(self.path, "w", encoding="utf-8")
        self._fh.write("step,stage,term,value\n")

    def append(self, step: int, stage: str, term: str, value: float) -> None:
        self._fh.write(f"{step},{stage},{term},{float(value)!r}\n")

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
