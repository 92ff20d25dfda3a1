"""Named parameter storage and checkpoint files.

A :class:`ParameterStore` maps unique names to float32 arrays with a
per-parameter trainable flag. Checkpoints serialize a store to a single
file: an 8-byte magic, a JSON manifest (names, shapes, dtype tag, stage
metadata, format version), then the raw little-endian row-major values in
manifest order. Loading reproduces every tensor bit-exactly.
"""

from __future__ import annotations

import json
import struct

import numpy as np

CHECKPOINT_MAGIC = b"LMOECKPT"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Corrupt checkpoint file or manifest mismatch."""


class ParameterStore:
    """Uniquely named float32 tensors with trainable flags."""

    def __init__(self):
        self._values: dict[str, np.ndarray] = {}
        self._trainable: dict[str, bool] = {}

    def add(self, name: str, value, trainable: bool = True) -> None:
        if name in self._values:
            raise ValueError(f"duplicate parameter name: {name}")
        self._values[name] = np.ascontiguousarray(value, dtype=np.float32)
        self._trainable[name] = bool(trainable)

    def get(self, name: str) -> np.ndarray:
        return self._values[name]

    def set(self, name: str, value) -> None:
        arr = np.ascontiguousarray(value, dtype=np.float32)
        if arr.shape != self._values[name].shape:
            raise ValueError(f"shape mismatch for {name}")
        self._values[name] = arr

    def is_trainable(self, name: str) -> bool:
        return self._trainable[name]

    def set_trainable(self, name: str, flag: bool) -> None:
        self._trainable[name] = bool(flag)

    def freeze_all(self) -> None:
        for name in self._trainable:
            self._trainable[name] = False

    def names(self):
        return list(self._values)

    def trainable_names(self):
        return [n for n, f in self._trainable.items() if f]

    def __contains__(self, name):
        return name in self._values

    def __len__(self):
        return len(self._values)

    def merge(self, prefix: str, other: "ParameterStore") -> None:
        """Adopt another store's tensors under ``prefix.`` (shared arrays)."""
        for name in other.names():
            self.add(f"{prefix}.{name}", other.get(name), other.is_trainable(name))
            # share storage so updates through either store are visible
            self._values[f"{prefix}.{name}"] = other._values[name]

    def view(self, prefix: str) -> "ParameterStore":
        """Sub-store of every parameter under ``prefix.``, sharing storage."""
        sub = ParameterStore()
        dot = prefix + "."
        for name in self.names():
            if name.startswith(dot):
                short = name[len(dot):]
                sub._values[short] = self._values[name]
                sub._trainable[short] = self._trainable[name]
        return sub

    def copy(self) -> "ParameterStore":
        dup = ParameterStore()
        for name in self.names():
            dup.add(name, self._values[name].copy(), self._trainable[name])
        return dup

    def state_equal(self, other: "ParameterStore") -> bool:
        if self.names() != other.names():
            return False
        return all(np.array_equal(self._values[n], other._values[n])
                   for n in self.names())


def glorot_uniform(shape, rng) -> np.ndarray:
    """Uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out))."""
    fan_in = int(shape[0]) if len(shape) > 1 else int(shape[0])
    fan_out = int(shape[-1])
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape).astype(np.float32)


def add_linear(store, name, n_in, n_out, rng, trainable=True):
    store.add(f"{name}.w", glorot_uniform((n_in, n_out), rng), trainable)
    store.add(f"{name}.b", np.zeros(n_out, dtype=np.float32), trainable)


def save_checkpoint(path, store: ParameterStore, metadata: dict) -> None:
    names = store.names()
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "dtype": "f32",
        "params": [
            {"name": n, "shape": list(store.get(n).shape),
             "trainable": store.is_trainable(n)}
            for n in names
        ],
        "metadata": metadata,
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(store.get(n).astype("<f4").tobytes(order="C"))


def load_checkpoint(path, expected_names=None):
    """Read a checkpoint; returns ``(ParameterStore, metadata)``.

    ``expected_names`` (optional) is a manifest of names the caller
    requires; a missing name or shape/magic/version problem raises
    :class:`CheckpointError`.
    """
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad magic in {path}")
        (mlen,) = struct.unpack("<Q", fh.read(8))
        try:
            manifest = json.loads(fh.read(mlen).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"corrupt manifest in {path}") from exc
        if manifest.get("format_version") != CHECKPOINT_VERSION:
            raise CheckpointError("unsupported checkpoint version")
        if manifest.get("dtype") != "f32":
            raise CheckpointError("unsupported dtype tag")
        store = ParameterStore()
        for entry in manifest["params"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(4 * count)
            if len(raw) != 4 * count:
                raise CheckpointError(f"truncated blob in {path}")
            arr = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
            store.add(entry["name"], arr, entry["trainable"])
    if expected_names is not None:
        missing = set(expected_names) - set(store.names())
        if missing:
            raise CheckpointError(f"checkpoint missing parameters: {sorted(missing)}")
    return store, manifest["metadata"]
