"""IDX and CIFAR-10 binary readers/writers."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32

# file names looked up by load_dataset for an IDX directory
IDX_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
CIFAR_FILES = {
    "train": tuple(f"data_batch_{i}.bin" for i in range(1, 6)),
    "test": ("test_batch.bin",),
}


class FormatError(ValueError):
    pass


@dataclass
class LabeledImages:
    images: np.ndarray  # [N, C, H, W] float64 in [0, 1]
    labels: np.ndarray  # [N] int64

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise FormatError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0


def parse_idx(raw: bytes) -> np.ndarray:
    """Decode a big-endian IDX u8 tensor (images or labels) to a uint8 array."""
    if len(raw) < 4:
        raise FormatError(f"truncated IDX header at byte offset {len(raw)}")
    (magic,) = struct.unpack_from(">I", raw, 0)
    if magic not in (IDX_IMAGES, IDX_LABELS):
        raise FormatError(f"bad IDX magic 0x{magic:08x} at byte offset 0")
    ndim = 3 if magic == IDX_IMAGES else 1
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"truncated IDX dimensions at byte offset {len(raw)}")
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    count = int(np.prod(dims))
    if len(raw) < header + count:
        raise FormatError(f"truncated IDX payload: expected {header + count} bytes, file ends at byte offset {len(raw)}")
    if len(raw) > header + count:
        raise FormatError(f"trailing data after IDX payload at byte offset {header + count}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def encode_idx(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.ndim == 3:
        magic = IDX_IMAGES
    elif arr.ndim == 1:
        magic = IDX_LABELS
    else:
        raise ValueError(f"IDX writer handles 3-D images or 1-D labels, got {arr.ndim}-D")
    if arr.size and (arr.min() < 0 or arr.max() > 255):
        raise ValueError("IDX u8 values must lie in [0, 255]")
    return struct.pack(f">I{arr.ndim}I", magic, *arr.shape) + arr.astype(np.uint8).tobytes()


def write_idx(path: str | Path, arr: np.ndarray) -> None:
    Path(path).write_bytes(encode_idx(arr))


def load_idx(images_path: str | Path, labels_path: str | Path) -> LabeledImages:
    """Images scaled to [0, 1] with a singleton channel axis: [N, 1, H, W]."""
    images = parse_idx(Path(images_path).read_bytes())
    labels = parse_idx(Path(labels_path).read_bytes())
    if images.ndim != 3:
        raise FormatError(f"{images_path}: expected an image tensor (magic 0x{IDX_IMAGES:08x})")
    if labels.ndim != 1:
        raise FormatError(f"{labels_path}: expected a label vector (magic 0x{IDX_LABELS:08x})")
    if len(images) != len(labels):
        raise FormatError(f"pairing error: {len(images)} images vs {len(labels)} labels")
    return LabeledImages(images[:, None].astype(np.float64) / 255.0, labels.astype(np.int64))


def parse_cifar_bin(raw: bytes) -> LabeledImages:
    if len(raw) % CIFAR_RECORD:
        raise FormatError(f"CIFAR binary size {len(raw)} is not a multiple of {CIFAR_RECORD}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    images = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return LabeledImages(images, rec[:, 0].astype(np.int64))


def load_cifar_bin(path: str | Path) -> LabeledImages:
    return parse_cifar_bin(Path(path).read_bytes())


def write_cifar_bin(path: str | Path, data: LabeledImages) -> None:
    """Pixels are rounded back to u8, so values must be multiples of 1/255 to round-trip."""
    if data.images.shape[1:] != (3, 32, 32):
        raise ValueError(f"CIFAR records hold 3x32x32 images, got {data.images.shape[1:]}")
    px = np.rint(data.images * 255).astype(np.uint8).reshape(len(data), -1)
    rec = np.concatenate([data.labels.astype(np.uint8)[:, None], px], axis=1)
    Path(path).write_bytes(rec.tobytes())


def load_dataset(path: str | Path, kind: str, split: str) -> LabeledImages:
    """Load ``split`` ("train"/"test") from a directory of IDX or CIFAR_BIN files."""
    root = Path(path)
    kind = kind.upper()
    if kind == "IDX":
        img, lab = IDX_FILES[split]
        return load_idx(root / img, root / lab)
    if kind == "CIFAR_BIN":
        parts = [load_cifar_bin(root / name) for name in CIFAR_FILES[split] if (root / name).exists()]
        if not parts:
            raise FileNotFoundError(f"no CIFAR {split} batches under {root}")
        return LabeledImages(np.concatenate([p.images for p in parts]), np.concatenate([p.labels for p in parts]))
    raise ValueError(f"unknown dataset kind {kind!r}")
