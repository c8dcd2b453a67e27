"""
Readers and writers for MNIST-style IDX pairs and CIFAR binary batches.

IDX files start with a big-endian magic (0x00000803 images, 0x00000801
labels) and big-endian uint32 extents, followed by unsigned bytes. CIFAR-10
records are 1 label byte + 3072 pixel bytes (R, G, B planes of 32x32);
CIFAR-100 records carry a coarse and a fine label byte before the pixels.
"""
import logging
import os
import struct
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import yaml

from errors import ConfigError, ConsistencyError, DataError, FormatError

logger = logging.getLogger(__name__)

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
CIFAR_SIDE = 32
CIFAR_CHANNELS = 3
CIFAR_PIXELS = CIFAR_CHANNELS * CIFAR_SIDE * CIFAR_SIDE
CIFAR10 = 'cifar10'
CIFAR100 = 'cifar100'
CIFAR_LABEL_BYTES = {CIFAR10: 1, CIFAR100: 2}

IDX_DATASETS = ('mnist', 'fashion_mnist')
CLASS_COUNTS = {'mnist': 10, 'fashion_mnist': 10, CIFAR10: 10, CIFAR100: 100}

PIXEL_SCALE = 255.0


@dataclass
class LabeledDataset:
    """Images [N x C x H x W] scaled to [0, 1] with class ids [N]."""
    images: np.ndarray
    labels: np.ndarray
    class_count: int
    name: str
    coarse_labels: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        if self.images.ndim != 4:
            raise DataError(f"Dataset images must be 4-D, got shape {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise DataError(f"{len(self.labels)} labels for {self.images.shape[0]} images")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise DataError(
                f"Labels must lie in [0, {self.class_count}), got range "
                f"[{self.labels.min()}, {self.labels.max()}]"
            )

    def __len__(self) -> int:
        return int(self.images.shape[0])

    @property
    def input_shape(self):
        return tuple(self.images.shape[1:])

    def subset(self, indices: Sequence[int]) -> 'LabeledDataset':
        """Dataset restricted to `indices`, in that order."""
        indices = np.asarray(indices)
        coarse = None if self.coarse_labels is None else self.coarse_labels[indices]
        return LabeledDataset(self.images[indices], self.labels[indices], self.class_count, self.name, coarse)


def _read_bytes(path: str) -> bytes:
    try:
        with open(path, 'rb') as f:
            return f.read()
    except FileNotFoundError:
        raise FileNotFoundError(f"Dataset file '{path}' not found")


def _parse_idx(payload: bytes, expected_magic: int, path: str) -> np.ndarray:
    if len(payload) < 8:
        raise FormatError(f"'{path}' is too short to be an IDX file ({len(payload)} bytes)")
    magic, = struct.unpack('>I', payload[:4])
    if magic != expected_magic:
        raise FormatError(f"'{path}' has magic 0x{magic:08x}, expected 0x{expected_magic:08x}")

    ndim = magic & 0xFF
    header_size = 4 + 4 * ndim
    if len(payload) < header_size:
        raise FormatError(f"'{path}' ends inside its {ndim}-D header")
    dims = struct.unpack(f'>{ndim}I', payload[4:header_size])
    expected = int(np.prod(dims))
    body = payload[header_size:]
    if len(body) != expected:
        raise FormatError(f"'{path}' holds {len(body)} data bytes, header promises {expected}")
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


def read_idx_pair(images_path: str, labels_path: str, name: str = 'mnist') -> LabeledDataset:
    """
    Parse an IDX image file and its label file.

    Args:
        images_path: Path to the idx3 image file
        labels_path: Path to the idx1 label file
        name: Dataset name (mnist or fashion_mnist)

    Returns:
        LabeledDataset: Single-channel images with pixels divided by 255

    Raises:
        FormatError: On a wrong magic number or a truncated file
        ConsistencyError: When the files disagree on the instance count
    """
    pixels = _parse_idx(_read_bytes(images_path), IDX_IMAGE_MAGIC, images_path)
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABEL_MAGIC, labels_path)
    if pixels.shape[0] != labels.shape[0]:
        raise ConsistencyError(
            f"'{images_path}' holds {pixels.shape[0]} images but '{labels_path}' holds {labels.shape[0]} labels"
        )

    images = (pixels.astype(np.float32) / np.float32(PIXEL_SCALE))[:, None, :, :]
    labels = labels.astype(np.int64)
    class_count = CLASS_COUNTS.get(name, int(labels.max()) + 1 if labels.size else 1)
    logger.info(f"Loaded {len(labels)} {name} images of {pixels.shape[1]}x{pixels.shape[2]}")
    return LabeledDataset(images, labels, class_count, name)


def read_cifar_bin(paths: Sequence[str], variant: str = CIFAR10) -> LabeledDataset:
    """
    Parse one or more CIFAR binary batch files.

    Args:
        paths: Batch files, concatenated in order
        variant: 'cifar10' or 'cifar100' (fine label kept, coarse label stored aside)

    Returns:
        LabeledDataset: Three-channel 32x32 images with pixels divided by 255

    Raises:
        FormatError: If a file length is not a multiple of the record size
    """
    if variant not in CIFAR_LABEL_BYTES:
        raise DataError(f"Unknown CIFAR variant '{variant}'")
    label_bytes = CIFAR_LABEL_BYTES[variant]
    record_size = label_bytes + CIFAR_PIXELS

    chunks = []
    for path in paths:
        payload = _read_bytes(path)
        if len(payload) % record_size:
            raise FormatError(
                f"'{path}' has {len(payload)} bytes, not a multiple of the {record_size}-byte {variant} record"
            )
        chunks.append(np.frombuffer(payload, dtype=np.uint8).reshape(-1, record_size))
    records = np.concatenate(chunks) if chunks else np.zeros((0, record_size), dtype=np.uint8)

    labels = records[:, label_bytes - 1].astype(np.int64)
    coarse = records[:, 0].astype(np.int64) if variant == CIFAR100 else None
    pixels = records[:, label_bytes:].reshape(-1, CIFAR_CHANNELS, CIFAR_SIDE, CIFAR_SIDE)
    images = pixels.astype(np.float32) / np.float32(PIXEL_SCALE)
    logger.info(f"Loaded {len(labels)} {variant} records from {len(paths)} file(s)")
    return LabeledDataset(images, labels, CLASS_COUNTS[variant], variant, coarse)


def _to_bytes(images: np.ndarray) -> np.ndarray:
    return np.rint(images * PIXEL_SCALE).astype(np.uint8)


def write_idx_pair(dataset: LabeledDataset, images_path: str, labels_path: str) -> None:
    """Serialize a single-channel dataset back into an IDX pair."""
    if dataset.images.shape[1] != 1:
        raise DataError(f"IDX holds single-channel images, dataset has {dataset.images.shape[1]} channels")
    count, _, height, width = dataset.images.shape
    with open(images_path, 'wb') as f:
        f.write(struct.pack('>IIII', IDX_IMAGE_MAGIC, count, height, width))
        f.write(_to_bytes(dataset.images[:, 0]).tobytes())
    with open(labels_path, 'wb') as f:
        f.write(struct.pack('>II', IDX_LABEL_MAGIC, count))
        f.write(dataset.labels.astype(np.uint8).tobytes())


def write_cifar_bin(dataset: LabeledDataset, path: str, variant: str = CIFAR10) -> None:
    """Serialize a dataset into one CIFAR binary batch file."""
    if dataset.input_shape != (CIFAR_CHANNELS, CIFAR_SIDE, CIFAR_SIDE):
        raise DataError(f"CIFAR records hold 3x32x32 images, dataset has {dataset.input_shape}")
    columns = [dataset.labels.astype(np.uint8)[:, None]]
    if variant == CIFAR100:
        coarse = dataset.coarse_labels if dataset.coarse_labels is not None else np.zeros(len(dataset), np.int64)
        columns.insert(0, coarse.astype(np.uint8)[:, None])
    columns.append(_to_bytes(dataset.images).reshape(len(dataset), -1))
    with open(path, 'wb') as f:
        f.write(np.concatenate(columns, axis=1).tobytes())


def load_manifest(file_path: str) -> Dict[str, Any]:
    """Load the dataset manifest mapping dataset names to train/test file lists."""
    try:
        with open(file_path, 'r') as file:
            data = yaml.safe_load(file)
    except FileNotFoundError:
        raise FileNotFoundError(f"Dataset manifest '{file_path}' not found")
    except yaml.YAMLError as e:
        raise ConfigError(f"Invalid YAML in '{file_path}': {e}")

    if not isinstance(data, dict):
        raise ConfigError(f"Dataset manifest '{file_path}' must map dataset names to file lists")
    return data


def resolve_paths(dataset: str, split: str, explicit: Sequence[str], manifest_path: str) -> List[str]:
    """Explicit paths win; otherwise look the dataset up in the manifest."""
    if explicit:
        return list(explicit)
    entry = load_manifest(manifest_path).get(dataset) or {}
    if not isinstance(entry, dict):
        raise ConfigError(
            f"Manifest entry '{dataset}' in '{manifest_path}' must map splits (train, test) to file lists"
        )
    paths = entry.get(split) or []
    if not isinstance(paths, list):
        raise ConfigError(f"Manifest entry '{dataset}.{split}' in '{manifest_path}' must be a list of paths")
    if not paths and split == 'train':
        raise ConfigError(f"No {split} files for dataset '{dataset}' in '{manifest_path}'")
    return [str(p) for p in paths]


def read_dataset(name: str, paths: Sequence[str]) -> LabeledDataset:
    """Pick the reader by dataset name."""
    if name in IDX_DATASETS:
        if len(paths) != 2:
            raise ConfigError(f"{name} needs exactly an images file and a labels file, got {len(paths)} path(s)")
        return read_idx_pair(paths[0], paths[1], name)
    if name in CIFAR_LABEL_BYTES:
        return read_cifar_bin(paths, name)
    raise ConfigError(f"Unknown dataset '{name}', expected one of {sorted(CLASS_COUNTS)}")


def load_dataset(config, split: str = 'train') -> Optional[LabeledDataset]:
    """
    Load the configured dataset split.

    Args:
        config: TrainConfig
        split: 'train' or 'test'

    Returns:
        LabeledDataset, or None for a test split with no files configured
    """
    explicit = config.train_paths if split == 'train' else config.test_paths
    paths = resolve_paths(config.dataset, split, explicit, config.datasets_file_path)
    if not paths:
        return None
    missing = [p for p in paths if not os.path.exists(p)]
    if missing:
        raise FileNotFoundError(f"Dataset file(s) not found: {', '.join(missing)}")
    return read_dataset(config.dataset, paths)
