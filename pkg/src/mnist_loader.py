"""
MNIST IDX Loader
================

Parses the four MNIST IDX files into normalised ImageSets.

IDX Format (big-endian):
- Offset 0-3:   magic (2051 images / 2049 labels)
- Offset 4-7:   item count
- Offset 8-15:  rows, cols (images only)
- Then raw unsigned bytes: row-major pixels or one label per item

Files may be gzip-compressed; a ".gz" suffix is decompressed transparently.
Pixels are divided by 255 so every value lies in [0, 1]; images come back as
[N, 28, 28, 1] float32.
"""

import gzip
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from errors import FormatError

logger = logging.getLogger(__name__)

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049
NUM_CLASSES = 10

TRAIN_IMAGES = 'train-images-idx3-ubyte'
TRAIN_LABELS = 'train-labels-idx1-ubyte'
TEST_IMAGES = 't10k-images-idx3-ubyte'
TEST_LABELS = 't10k-labels-idx1-ubyte'


@dataclass
class ImageSet:
    """Images [N, H, W, C] in [0, 1] with class indices in [0, 9]."""
    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be [N, H, W, C], got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= NUM_CLASSES):
            raise ValueError(f"labels must lie in [0, {NUM_CLASSES - 1}]")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, indices: Sequence[int]) -> 'ImageSet':
        idx = np.asarray(indices, dtype=np.int64)
        return ImageSet(self.images[idx], self.labels[idx])

    def head(self, n: Optional[int]) -> 'ImageSet':
        if n is None or n >= len(self):
            return self
        return ImageSet(self.images[:n], self.labels[:n])


class IdxReader:
    """
    Reader for IDX files with magic, size and count validation.

    Tracks:
    - files_read: files parsed successfully
    - items_read: images + labels returned
    - format_errors: files rejected
    """

    def __init__(self):
        self.stats = {
            'files_read': 0,
            'items_read': 0,
            'format_errors': 0,
        }

    def _read_bytes(self, path: Path) -> bytes:
        if path.suffix == '.gz':
            with gzip.open(path, 'rb') as f:
                return f.read()
        return path.read_bytes()

    def _fail(self, message: str):
        self.stats['format_errors'] += 1
        logger.error(f"✗ {message}")
        raise FormatError(message)

    def read_images(self, path: Union[str, Path]) -> np.ndarray:
        """Parse an image file into [N, rows, cols, 1] float32 in [0, 1]."""
        path = Path(path)
        data = self._read_bytes(path)
        if len(data) < 16:
            self._fail(f"{path}: truncated image header ({len(data)} bytes)")

        magic, count, rows, cols = struct.unpack('>IIII', data[:16])
        if magic != IMAGE_MAGIC:
            self._fail(f"{path}: bad magic number {magic} (expected {IMAGE_MAGIC} for images)")

        expected = 16 + count * rows * cols
        if len(data) < expected:
            self._fail(f"{path}: truncated file, {len(data)} bytes for {count} images of {rows}x{cols}")

        pixels = np.frombuffer(data, dtype=np.uint8, count=count * rows * cols, offset=16)
        images = pixels.reshape(count, rows, cols, 1).astype(np.float32) / 255.0

        self.stats['files_read'] += 1
        self.stats['items_read'] += count
        logger.debug(f"Parsed {count} images ({rows}x{cols}) from {path}")
        return images

    def read_labels(self, path: Union[str, Path]) -> np.ndarray:
        path = Path(path)
        data = self._read_bytes(path)
        if len(data) < 8:
            self._fail(f"{path}: truncated label header ({len(data)} bytes)")

        magic, count = struct.unpack('>II', data[:8])
        if magic != LABEL_MAGIC:
            self._fail(f"{path}: bad magic number {magic} (expected {LABEL_MAGIC} for labels)")
        if len(data) < 8 + count:
            self._fail(f"{path}: truncated file, {len(data) - 8} labels present, {count} declared")

        labels = np.frombuffer(data, dtype=np.uint8, count=count, offset=8).astype(np.int64)
        if labels.size and labels.max() >= NUM_CLASSES:
            self._fail(f"{path}: label {labels.max()} out of range")

        self.stats['files_read'] += 1
        self.stats['items_read'] += count
        return labels

    def get_stats(self) -> dict:
        return self.stats.copy()


def _locate(directory: Path, stem: str) -> Path:
    """Accept both the canonical name and the dotted variant, plain or gzipped."""
    candidates = [stem, stem.replace('-idx', '.idx')]
    for name in candidates:
        for suffix in ('', '.gz'):
            path = directory / f"{name}{suffix}"
            if path.exists():
                return path
    raise FileNotFoundError(f"MNIST file '{stem}' (or .gz) not found in {directory}")


def load_split(reader: IdxReader, images_path: Path, labels_path: Path,
               limit: Optional[int] = None) -> ImageSet:
    images = reader.read_images(images_path)
    labels = reader.read_labels(labels_path)
    if len(images) != len(labels):
        reader._fail(f"count mismatch: {len(images)} images in {images_path.name}, "
                     f"{len(labels)} labels in {labels_path.name}")
    return ImageSet(images, labels).head(limit)


def load_mnist(dir_path: Union[str, Path], train_limit: Optional[int] = None,
               test_limit: Optional[int] = None) -> Tuple[ImageSet, ImageSet]:
    """
    Load MNIST train and test splits.

    Args:
        dir_path: directory holding the four IDX files
        train_limit: keep only the first N training images (None = all)
        test_limit: keep only the first N test images (None = all)

    Returns:
        (train, test) ImageSets with images [N, 28, 28, 1]

    Raises:
        FileNotFoundError: a file is missing
        FormatError: bad magic, truncated file or image/label count mismatch
    """
    directory = Path(dir_path)
    logger.info(f"Loading MNIST from {directory}...")
    reader = IdxReader()

    train = load_split(reader, _locate(directory, TRAIN_IMAGES), _locate(directory, TRAIN_LABELS), train_limit)
    test = load_split(reader, _locate(directory, TEST_IMAGES), _locate(directory, TEST_LABELS), test_limit)

    logger.info(f"✓ MNIST loaded: {len(train):,} train, {len(test):,} test")
    return train, test
