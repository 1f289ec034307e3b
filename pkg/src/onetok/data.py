"""Dataset ingestion (MNIST IDX, CIFAR-10 binary, image directories),
deterministic splitting, padding, and lossless image-grid emission.

Pixels map u8 -> [-1, 1] via x/127.5 - 1 on the way in and back via
round((x+1)*127.5) with clamping on the way out. Ingestion never silently
truncates: any count or size mismatch is a hard format error.
"""

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from torch import Tensor

from .errors import DataFormatError

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
CIFAR_RECORD_BYTES = 3073
DATASET_FORMATS = ("mnist_idx", "cifar10_bin", "image_dir")


@dataclass
class DatasetSpec:
    format: str = "mnist_idx"
    path: str = ""
    labels_path: str = ""
    train_fraction: float = 0.9
    test_fraction: float = 0.1
    num_classes: int = 10
    pad_to: int = 32

    def __post_init__(self):
        if abs(self.train_fraction + self.test_fraction - 1.0) > 1e-9:
            raise ValueError(
                f"split fractions must sum to 1, got {self.train_fraction} + {self.test_fraction}"
            )


@dataclass
class Dataset:
    train_images: Tensor
    train_labels: Tensor
    test_images: Tensor
    test_labels: Tensor

    @property
    def image_shape(self) -> tuple:
        return tuple(self.train_images.shape[1:])


def _u8_to_signed(pixels: np.ndarray) -> Tensor:
    return torch.from_numpy(pixels.astype(np.float32) / 127.5 - 1.0)


def signed_to_u8(images: Tensor) -> np.ndarray:
    x = (images.detach().to(torch.float32) + 1.0) * 127.5
    return x.round().clamp(0, 255).numpy().astype(np.uint8)


def _read_be_u32(buf: bytes, pos: int, what: str) -> int:
    if pos + 4 > len(buf):
        raise DataFormatError(f"truncated while reading {what}", offset=pos)
    return int.from_bytes(buf[pos : pos + 4], "big")


def ingest_mnist_idx(images_path, labels_path) -> tuple[Tensor, Tensor]:
    """IDX image/label pair -> (B x 1 x H x W in [-1, 1], long labels)."""
    img_buf = Path(images_path).read_bytes()
    magic = _read_be_u32(img_buf, 0, "image magic")
    if magic != IDX_IMAGE_MAGIC:
        raise DataFormatError(
            f"image magic 0x{magic:08x}, expected 0x{IDX_IMAGE_MAGIC:08x}", offset=0
        )
    count = _read_be_u32(img_buf, 4, "image count")
    rows = _read_be_u32(img_buf, 8, "row count")
    cols = _read_be_u32(img_buf, 12, "column count")
    expected = 16 + count * rows * cols
    if len(img_buf) != expected:
        raise DataFormatError(
            f"image file is {len(img_buf)} bytes, expected {expected}", offset=min(len(img_buf), expected)
        )
    pixels = np.frombuffer(img_buf, dtype=np.uint8, offset=16).reshape(count, 1, rows, cols)

    lbl_buf = Path(labels_path).read_bytes()
    lmagic = _read_be_u32(lbl_buf, 0, "label magic")
    if lmagic != IDX_LABEL_MAGIC:
        raise DataFormatError(
            f"label magic 0x{lmagic:08x}, expected 0x{IDX_LABEL_MAGIC:08x}", offset=0
        )
    lcount = _read_be_u32(lbl_buf, 4, "label count")
    if len(lbl_buf) != 8 + lcount:
        raise DataFormatError(
            f"label file is {len(lbl_buf)} bytes, expected {8 + lcount}",
            offset=min(len(lbl_buf), 8 + lcount),
        )
    if lcount != count:
        raise DataFormatError(f"{count} images but {lcount} labels", offset=4)
    labels = np.frombuffer(lbl_buf, dtype=np.uint8, offset=8)
    return _u8_to_signed(pixels), torch.from_numpy(labels.astype(np.int64))


def ingest_cifar10_bin(path) -> tuple[Tensor, Tensor]:
    """CIFAR-10 binary batch -> (B x 3 x 32 x 32 in [-1, 1], long labels)."""
    buf = Path(path).read_bytes()
    if len(buf) == 0 or len(buf) % CIFAR_RECORD_BYTES != 0:
        raise DataFormatError(
            f"file size {len(buf)} is not a multiple of the {CIFAR_RECORD_BYTES}-byte record",
            offset=len(buf) - len(buf) % CIFAR_RECORD_BYTES,
        )
    records = np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
    labels = records[:, 0]
    if labels.max(initial=0) > 9:
        bad = int(np.argmax(labels > 9))
        raise DataFormatError(
            f"label {labels[bad]} out of range in record {bad}", offset=bad * CIFAR_RECORD_BYTES
        )
    pixels = records[:, 1:].reshape(-1, 3, 32, 32)
    return _u8_to_signed(pixels), torch.from_numpy(labels.astype(np.int64))


def ingest_image_dir(path) -> tuple[Tensor, Tensor]:
    """Directory of images; class subdirectories become labels (sorted order),
    a flat directory gets label 0 for every image."""
    root = Path(path)
    if not root.is_dir():
        raise DataFormatError(f"{root} is not a directory")
    subdirs = sorted(d for d in root.iterdir() if d.is_dir())
    entries = []
    if subdirs:
        for label, d in enumerate(subdirs):
            entries.extend((f, label) for f in sorted(d.iterdir()) if f.is_file())
    else:
        entries = [(f, 0) for f in sorted(root.iterdir()) if f.is_file()]
    if not entries:
        raise DataFormatError(f"no image files under {root}")
    arrays, labels = [], []
    for f, label in entries:
        img = np.asarray(Image.open(f))
        if img.ndim == 2:
            img = img[None, :, :]
        else:
            img = img.transpose(2, 0, 1)
        arrays.append(img)
        labels.append(label)
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1:
        raise DataFormatError(f"inconsistent image shapes in {root}: {sorted(shapes)}")
    stack = np.stack(arrays)
    return _u8_to_signed(stack), torch.tensor(labels, dtype=torch.int64)


def pad_images(images: Tensor, size: int, fill: float = -1.0) -> Tensor:
    """Center-pad to size x size; returns the input when already that large."""
    h, w = images.shape[-2:]
    if h >= size and w >= size:
        return images
    out = torch.full((*images.shape[:-2], size, size), fill, dtype=images.dtype)
    top, left = (size - h) // 2, (size - w) // 2
    out[..., top : top + h, left : left + w] = images
    return out


def load_dataset(spec: DatasetSpec) -> Dataset:
    """Ingest, optionally pad, and split contiguously (train first)."""
    if spec.format == "mnist_idx":
        images, labels = ingest_mnist_idx(spec.path, spec.labels_path)
    elif spec.format == "cifar10_bin":
        images, labels = ingest_cifar10_bin(spec.path)
    elif spec.format == "image_dir":
        images, labels = ingest_image_dir(spec.path)
    else:
        raise ValueError(f"unknown dataset format {spec.format!r}; expected one of {DATASET_FORMATS}")
    if spec.pad_to:
        images = pad_images(images, spec.pad_to)
    n = images.shape[0]
    n_train = round(spec.train_fraction * n)
    return Dataset(
        train_images=images[:n_train],
        train_labels=labels[:n_train],
        test_images=images[n_train:],
        test_labels=labels[n_train:],
    )


def emit_image_grid(images: Tensor, cols: int, path) -> None:
    """Tile a batch row-major into one lossless PNG; empty cells stay black."""
    if cols < 1:
        raise ValueError(f"cols must be >= 1, got {cols}")
    if images.dim() != 4:
        raise ValueError(f"expected B x C x H x W, got shape {tuple(images.shape)}")
    b, c, h, w = images.shape
    rows = max(1, math.ceil(b / cols))
    grid = np.zeros((rows * h, cols * w, c), dtype=np.uint8)
    u8 = signed_to_u8(images).transpose(0, 2, 3, 1)
    for i in range(b):
        r, col = divmod(i, cols)
        grid[r * h : (r + 1) * h, col * w : (col + 1) * w] = u8[i]
    if c == 1:
        Image.fromarray(grid[:, :, 0], mode="L").save(path, format="PNG")
    elif c == 3:
        Image.fromarray(grid, mode="RGB").save(path, format="PNG")
    else:
        raise ValueError(f"cannot emit {c}-channel images")
