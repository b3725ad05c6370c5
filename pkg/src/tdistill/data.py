"""Dataset loading, checkpoint serialization, and metrics files.

Checkpoint layout (all little-endian): magic "TSKD", u32 version=1,
u32 tensor count; per tensor: u16 name length + UTF-8 name, u8 rank,
rank x u64 extents, then the raw float32 payload.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import (BadMagicError, ContractError, DuplicateNameError, IdxFormatError,
                     IdxLengthError, TruncatedError, VersionError)

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

CHECKPOINT_MAGIC = b"TSKD"
CHECKPOINT_VERSION = 1

METRICS_COLUMNS = ("epoch", "node_kind", "loss_task", "loss_temporal", "train_acc", "test_acc", "lr")
TIMING_COLUMNS = ("epoch", "node_kind", "ms_per_batch")


@dataclass
class Dataset:
    images: np.ndarray  # [N,C,H,W] in [0,1]
    labels: np.ndarray  # int64 [N]
    split: str
    num_classes: int

    def __post_init__(self):
        if len(self.labels) != len(self.images):
            raise ContractError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ContractError(f"labels outside [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)


# ---------------------------------------------------------------------------
# IDX


def _read_exact(f, n, what):
    data = f.read(n)
    if len(data) != n:
        raise IdxLengthError(f"truncated IDX file: wanted {n} bytes for {what}, got {len(data)}")
    return data


def load_idx(images_path, labels_path, num_classes: int | None = None, split: str = "train") -> Dataset:
    """Load big-endian IDX image/label files into a [0,1]-scaled dataset."""
    with open(images_path, "rb") as f:
        magic_bytes = _read_exact(f, 4, "image magic")
        magic = struct.unpack(">I", magic_bytes)[0]
        if magic != IDX_IMAGE_MAGIC:
            raise IdxFormatError(
                f"bad image magic: expected 0x{IDX_IMAGE_MAGIC:08x}, observed bytes {magic_bytes.hex()}")
        n, rows, cols = struct.unpack(">III", _read_exact(f, 12, "image dimensions"))
        if n > 10**8 or rows > 4096 or cols > 4096:
            raise IdxFormatError(f"implausible image dimensions {n}x{rows}x{cols}")
        raw = _read_exact(f, n * rows * cols, "pixel data")
        images = np.frombuffer(raw, dtype=np.uint8).reshape(n, 1, rows, cols)
    with open(labels_path, "rb") as f:
        magic_bytes = _read_exact(f, 4, "label magic")
        magic = struct.unpack(">I", magic_bytes)[0]
        if magic != IDX_LABEL_MAGIC:
            raise IdxFormatError(
                f"bad label magic: expected 0x{IDX_LABEL_MAGIC:08x}, observed bytes {magic_bytes.hex()}")
        (ln,) = struct.unpack(">I", _read_exact(f, 4, "label count"))
        if ln != n:
            raise IdxFormatError(f"label count {ln} does not match image count {n}")
        labels = np.frombuffer(_read_exact(f, ln, "label data"), dtype=np.uint8).astype(np.int64)
    k = num_classes if num_classes is not None else (int(labels.max()) + 1 if ln else 0)
    scaled = (images.astype(np.float32) / np.float32(255.0))
    return Dataset(images=scaled, labels=labels, split=split, num_classes=k)


def save_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 [N,H,W] images and [N] labels in IDX format (test fixtures)."""
    n, rows, cols = images.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, n, rows, cols))
        f.write(np.ascontiguousarray(images, dtype=np.uint8).tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABEL_MAGIC, n))
        f.write(np.ascontiguousarray(labels, dtype=np.uint8).tobytes())


# ---------------------------------------------------------------------------
# synthetic data


def synth_dataset(seed: int, n_per_class: int, num_classes: int, image_size: int = 28,
                  noise: float = 0.15, split: str = "train") -> Dataset:
    """Class-conditioned oriented bars with seeded jitter and noise.

    Class c draws a bar through the (jittered) center at angle pi*c/K with
    a Gaussian cross-section; pixel noise is additive. A pure function of
    its arguments.
    """
    if num_classes < 2:
        raise ContractError(f"need at least 2 classes, got {num_classes}")
    rng = np.random.default_rng(seed)
    h = image_size
    yy, xx = np.mgrid[0:h, 0:h].astype(np.float64)
    images = np.empty((n_per_class * num_classes, 1, h, h), dtype=np.float32)
    labels = np.empty(n_per_class * num_classes, dtype=np.int64)
    idx = 0
    for c in range(num_classes):
        base_angle = np.pi * c / num_classes
        for _ in range(n_per_class):
            angle = base_angle + rng.uniform(-np.pi / (6 * num_classes), np.pi / (6 * num_classes))
            cy = (h - 1) / 2 + rng.uniform(-2.0, 2.0)
            cx = (h - 1) / 2 + rng.uniform(-2.0, 2.0)
            width = rng.uniform(1.2, 2.2)
            amp = rng.uniform(0.7, 1.0)
            # distance from the line through (cy,cx) at `angle`
            dist = -(yy - cy) * np.cos(angle) + (xx - cx) * np.sin(angle)
            img = amp * np.exp(-(dist ** 2) / (2 * width ** 2))
            img += rng.normal(0.0, noise, size=img.shape)
            images[idx, 0] = np.clip(img, 0.0, 1.0).astype(np.float32)
            labels[idx] = c
            idx += 1
    order = rng.permutation(len(labels))
    return Dataset(images=images[order], labels=labels[order], split=split, num_classes=num_classes)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(named_tensors, path) -> None:
    """Serialize a name -> array mapping; names must be unique and nonempty."""
    items = []
    seen = set()
    for name, value in named_tensors.items():
        if not name:
            raise ContractError("empty tensor name")
        if name in seen:
            raise DuplicateNameError(f"duplicate tensor name {name!r}")
        seen.add(name)
        arr = np.asarray(getattr(value, "data", value), dtype=np.float32)
        items.append((name, arr))
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(items)))
        for name, arr in items:
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b"")
            f.write(arr.astype("<f4", copy=False).tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Inverse of save_checkpoint; validates header before any allocation."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if len(magic) < 4:
            raise TruncatedError(f"file too short for magic: got {len(magic)} bytes")
        if magic != CHECKPOINT_MAGIC:
            raise BadMagicError(f"bad checkpoint magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
        head = f.read(8)
        if len(head) < 8:
            raise TruncatedError("file too short for version/count header")
        version, count = struct.unpack("<II", head)
        if version != CHECKPOINT_VERSION:
            raise VersionError(f"unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}")
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            raw = f.read(2)
            if len(raw) < 2:
                raise TruncatedError("file too short for name length")
            (name_len,) = struct.unpack("<H", raw)
            name_bytes = f.read(name_len)
            if len(name_bytes) < name_len:
                raise TruncatedError("file too short for tensor name")
            name = name_bytes.decode("utf-8")
            rank_raw = f.read(1)
            if len(rank_raw) < 1:
                raise TruncatedError("file too short for rank")
            rank = rank_raw[0]
            ext_raw = f.read(8 * rank)
            if len(ext_raw) < 8 * rank:
                raise TruncatedError("file too short for extents")
            shape = struct.unpack(f"<{rank}Q", ext_raw) if rank else ()
            n_elem = int(np.prod(shape, dtype=np.int64)) if rank else 1
            if n_elem > 10**9:
                raise TruncatedError(f"implausible tensor size {n_elem} for {name!r}")
            payload = f.read(4 * n_elem)
            if len(payload) < 4 * n_elem:
                raise TruncatedError(f"file too short for tensor {name!r} payload")
            if name in out:
                raise DuplicateNameError(f"duplicate tensor name {name!r} in checkpoint")
            out[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    return out


# ---------------------------------------------------------------------------
# metrics


@dataclass
class EpochRecord:
    epoch: int
    node_kind: str  # "M", "G", or "R"
    loss_task: float
    loss_temporal: float | None
    train_acc: float
    test_acc: float
    lr: float
    ms_per_batch: float


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return format(v, ".9g")
    return str(v)


class CsvAppender:
    """Header-then-rows CSV writer, flushed per row (crash-safe tail)."""

    def __init__(self, path, columns):
        self.columns = tuple(columns)
        self._f = open(path, "w", newline="")
        self._f.write(",".join(self.columns) + "\n")
        self._f.flush()

    def append(self, values) -> None:
        self._f.write(",".join(_fmt(v) for v in values) + "\n")
        self._f.flush()

    def close(self) -> None:
        self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _metrics_row(r: EpochRecord):
    return (r.epoch, r.node_kind, r.loss_task, r.loss_temporal, r.train_acc, r.test_acc, r.lr)


def write_metrics(records: list[EpochRecord], path) -> None:
    """Per-epoch metrics CSV, flushed per row. Deterministic columns only;
    wall-clock timing goes to the sibling timing CSV."""
    with CsvAppender(path, METRICS_COLUMNS) as w:
        for r in records:
            w.append(_metrics_row(r))


def write_timing(records: list[EpochRecord], path) -> None:
    with CsvAppender(path, TIMING_COLUMNS) as w:
        for r in records:
            w.append((r.epoch, r.node_kind, r.ms_per_batch))


def read_metrics(path) -> list[dict]:
    """Parse a metrics CSV back into dicts (floats where possible)."""
    with open(path) as f:
        header = f.readline().strip().split(",")
        rows = []
        for line in f:
            parts = line.rstrip("\n").split(",")
            row = {}
            for key, value in zip(header, parts):
                if value == "":
                    row[key] = None
                elif key in ("epoch",):
                    row[key] = int(value)
                elif key in ("node_kind",):
                    row[key] = value
                else:
                    row[key] = float(value)
            rows.append(row)
    return rows
