"""CIFAR-10 binary ingestion, normalization, synthetic datasets, checkpoints."""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CIFAR10_MEAN = np.array([0.4914, 0.4822, 0.4465], dtype=np.float32)
CIFAR10_STD = np.array([0.2470, 0.2435, 0.2616], dtype=np.float32)

RECORD_BYTES = 3073  # 1 label byte + 3 * 32 * 32 pixel bytes
TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
TEST_FILES = ["test_batch.bin"]


class DataError(Exception):
    """Malformed or missing dataset input."""


class CheckpointError(Exception):
    """Malformed or incompatible checkpoint file."""


@dataclass
class Dataset:
    images: np.ndarray  # uint8 [N,3,32,32], raw pixel bytes
    labels: np.ndarray  # int64 [N]
    split: str
    name: str

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DataError("image/label count mismatch")

    def __len__(self) -> int:
        return len(self.labels)


def load_cifar10(data_dir: str | Path, split: str, num_classes: int = 10) -> Dataset:
    """Read the standard CIFAR-10 binary batch files.

    Each 3073-byte record is one label byte followed by the R, G, B planes
    row-major. Raises DataError naming file and byte offset on truncation
    or out-of-range labels.
    """
    if split not in ("train", "test"):
        raise ValueError(f"unknown split {split!r}")
    data_dir = Path(data_dir)
    files = TRAIN_FILES if split == "train" else TEST_FILES
    images, labels = [], []
    for name in files:
        path = data_dir / name
        if not path.is_file():
            raise DataError(f"missing CIFAR-10 batch file: {path}")
        raw = path.read_bytes()
        if len(raw) == 0 or len(raw) % RECORD_BYTES != 0:
            raise DataError(f"{path}: truncated at byte {len(raw)} "
                            f"(length not a multiple of {RECORD_BYTES})")
        arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, RECORD_BYTES)
        lbl = arr[:, 0].astype(np.int64)
        bad = np.flatnonzero(lbl >= num_classes)
        if bad.size:
            off = int(bad[0]) * RECORD_BYTES
            raise DataError(f"{path}: label byte {int(lbl[bad[0]])} > {num_classes - 1} "
                            f"at offset {off}")
        images.append(arr[:, 1:].reshape(-1, 3, 32, 32))
        labels.append(lbl)
    return Dataset(np.concatenate(images), np.concatenate(labels), split, "cifar10")


def normalize(raw: np.ndarray) -> np.ndarray:
    """uint8 pixels [...,3,H,W] -> float32, x/255 then per-channel (x-mean)/std."""
    x = raw.astype(np.float32) / 255.0
    shape = (3, 1, 1) if x.ndim >= 3 else (3,)
    return (x - CIFAR10_MEAN.reshape(shape)) / CIFAR10_STD.reshape(shape)


def denormalize(x: np.ndarray) -> np.ndarray:
    """Inverse of normalize, rounded back to uint8."""
    shape = (3, 1, 1) if x.ndim >= 3 else (3,)
    raw = (x * CIFAR10_STD.reshape(shape) + CIFAR10_MEAN.reshape(shape)) * 255.0
    return np.clip(np.rint(raw), 0, 255).astype(np.uint8)


def subset_per_class(ds: Dataset, per_class: int, num_classes: int = 10) -> Dataset:
    """Deterministic first-K-per-class subset (reproducible small runs)."""
    keep = []
    counts = [0] * num_classes
    for i, lbl in enumerate(ds.labels):
        if counts[lbl] < per_class:
            counts[lbl] += 1
            keep.append(i)
        if all(c >= per_class for c in counts):
            break
    idx = np.array(keep)
    return Dataset(ds.images[idx], ds.labels[idx], ds.split, f"{ds.name}-sub{per_class}")


def synthetic_dataset(kind: str, n: int, seed: int, image_size: int = 32,
                      patch: int = 4) -> Dataset:
    """Deterministic desk-scale datasets.

    two-class-blobs: per-class channel means separated by 2 sigma of pixel
    noise, linearly separable. striped-patches: class = orientation of a
    patch-aligned band pattern; each patch is uniform, so the classes differ
    only in patch arrangement and need positional information to separate.
    """
    if n < 2:
        raise ValueError("n must be >= 2")
    rng = np.random.default_rng(seed)
    labels = np.arange(n, dtype=np.int64) % 2
    if kind == "two-class-blobs":
        means = np.array([[96.0, 112.0, 96.0], [160.0, 144.0, 160.0]])
        mu = means[labels][:, :, None, None]
        noise = rng.normal(0.0, 16.0, size=(n, 3, image_size, image_size))
        images = np.clip(mu + noise, 0, 255).astype(np.uint8)
    elif kind == "striped-patches":
        grid = image_size // patch
        images = np.empty((n, 3, image_size, image_size), dtype=np.uint8)
        lo, hi = 64.0, 192.0
        for i in range(n):
            # fixed band phase: both classes still share the same patch
            # multiset, but patch brightness at a fixed off-diagonal grid
            # position separates them, so the task stays learnable
            bands = (np.arange(grid) % 2).astype(np.float64)
            level = np.where(bands > 0, hi, lo)
            band = np.repeat(level, patch)  # one value per pixel row/column
            if labels[i] == 0:  # horizontal bands
                img = np.tile(band[:, None], (1, image_size))
            else:               # vertical bands
                img = np.tile(band[None, :], (image_size, 1))
            noisy = img[None, :, :] + rng.normal(0.0, 12.0, size=(3, image_size, image_size))
            images[i] = np.clip(noisy, 0, 255).astype(np.uint8)
    else:
        raise ValueError(f"unknown synthetic dataset kind {kind!r}")
    return Dataset(images, labels, "train", f"synthetic-{kind}")


# ---------------------------------------------------------------------------
# checkpoints
#
# Layout (all little-endian):
#   bytes 0..3   magic "TVLB"
#   bytes 4..5   u16 format version
#   bytes 6..9   u32 JSON header length H
#   bytes 10..   H bytes of UTF-8 JSON header
#   then         tensor payload, float32 little-endian, addressed by the
#                per-tensor (offset, nbytes) entries in the header sections.

MAGIC = b"TVLB"
VERSION = 1


@dataclass
class Checkpoint:
    model_config: dict
    train_config: dict
    params: dict[str, np.ndarray]
    optim_meta: dict | None
    optim_arrays: dict[str, np.ndarray]
    rng_state: dict
    epoch: int


def _section(tensors: dict[str, np.ndarray], offset: int):
    entries = []
    for path in sorted(tensors):
        arr = tensors[path]
        nbytes = arr.size * 4
        entries.append({"path": path, "shape": list(arr.shape),
                        "offset": offset, "nbytes": nbytes})
        offset += nbytes
    return entries, offset


def save_checkpoint(path: str | Path, *, params: dict, model_config: dict,
                    train_config: dict, optim_meta: dict | None = None,
                    optim_arrays: dict[str, np.ndarray] | None = None,
                    rng_state: dict | None = None, epoch: int = 0) -> None:
    """Write a checkpoint; tensor payload is always 32-bit floats."""
    param_arrays = {k: (np.asarray(v) if isinstance(v, np.ndarray)
                        else v.data if hasattr(v, "data") else np.asarray(v))
                    for k, v in params.items()}
    optim_arrays = optim_arrays or {}
    p_entries, offset = _section(param_arrays, 0)
    o_entries, offset = _section(optim_arrays, offset)
    header = {
        "model_config": model_config,
        "train_config": train_config,
        "optim": optim_meta,
        "rng_state": rng_state or {},
        "epoch": epoch,
        "sections": [{"name": "params", "tensors": p_entries},
                     {"name": "optim", "tensors": o_entries}],
    }
    blob = json.dumps(header).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<HI", VERSION, len(blob)))
    buf.write(blob)
    for entries, arrays in ((p_entries, param_arrays), (o_entries, optim_arrays)):
        for e in entries:
            buf.write(np.ascontiguousarray(arrays[e["path"]], dtype="<f4").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < 10 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic (not a checkpoint file)")
    version, hlen = struct.unpack("<HI", raw[4:10])
    if version > VERSION:
        raise CheckpointError(f"{path}: format version {version} is newer than supported {VERSION}")
    if len(raw) < 10 + hlen:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[10:10 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header: {exc}") from exc
    payload = raw[10 + hlen:]
    tensors: dict[str, dict[str, np.ndarray]] = {}
    for section in header["sections"]:
        out: dict[str, np.ndarray] = {}
        for e in section["tensors"]:
            n = int(np.prod(e["shape"])) if e["shape"] else 1
            if e["nbytes"] != n * 4:
                raise CheckpointError(f"{path}: tensor {e['path']} shape/length inconsistency")
            lo, hi = e["offset"], e["offset"] + e["nbytes"]
            if hi > len(payload):
                raise CheckpointError(f"{path}: tensor {e['path']} exceeds payload "
                                      f"(have {len(payload)} bytes, need {hi})")
            out[e["path"]] = np.frombuffer(payload[lo:hi], dtype="<f4").reshape(e["shape"]).copy()
        tensors[section["name"]] = out
    return Checkpoint(model_config=header["model_config"],
                      train_config=header["train_config"],
                      params=tensors.get("params", {}),
                      optim_meta=header.get("optim"),
                      optim_arrays=tensors.get("optim", {}),
                      rng_state=header.get("rng_state", {}),
                      epoch=header.get("epoch", 0))
