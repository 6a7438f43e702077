"""
Dataset ingestion for the MNIST family (IDX files) and CIFAR-10 (binary
batches), per-channel normalization and the light train-time augmentations.

Images are kept as uint8 (N, C, H, W) arrays; batches are converted to
float32, augmented in pixel space and then normalized.
"""
import gzip
import queue
import struct
import threading
import typing as t
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .config import AugmentPolicy, DatasetName, DATASET_INPUT_SHAPES
from .errors import ConfigError, DataError, ParseError
from .logging import get_logger

logger = get_logger()

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

CIFAR10_RECORD_BYTES = 1 + 32 * 32 * 3
CIFAR10_CLASSES = 10

SPLITS = ("train", "test")

# Per-dataset file names under the data dir; IDX files may also be gzipped.
IDX_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
CIFAR10_FILES = {
    "train": [f"data_batch_{i}.bin" for i in range(1, 6)],
    "test": ["test_batch.bin"],
}
CIFAR10_SUBDIR = "cifar-10-batches-bin"


@dataclass
class Dataset:
    # uint8 (N, C, H, W)
    images: np.ndarray
    labels: np.ndarray
    split: str
    num_classes: int
    # (H, W) before zero padding; None when unpadded.
    source_hw: t.Optional[t.Tuple[int, int]] = None

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DataError(f"images must be (N, C, H, W), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DataError(
                f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.size and (
                self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def shape(self) -> t.Tuple[int, int, int]:
        return tuple(self.images.shape[1:])  # type: ignore

    def subset(self, count: int) -> 'Dataset':
        return Dataset(self.images[:count], self.labels[:count], self.split,
                       self.num_classes, self.source_hw)


def _read_bytes(path: Path) -> bytes:
    path = Path(path)
    if not path.exists():
        gz = path.with_name(path.name + ".gz")
        if gz.exists():
            path = gz
        else:
            raise DataError(f"dataset file {path} not found")
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as f:
            return f.read()
    return path.read_bytes()


def parse_idx(raw: bytes, expect_magic: int, path: t.Any = None) -> np.ndarray:
    """
    Parse an IDX container of unsigned bytes. Header: big-endian u32 magic
    (0x0000 08 <ndim>) followed by ndim big-endian u32 extents.
    """
    if len(raw) < 4:
        raise ParseError("truncated IDX header", path, len(raw))
    (magic,) = struct.unpack_from(">I", raw, 0)
    if magic != expect_magic:
        raise ParseError(
            f"bad IDX magic 0x{magic:08x}, expected 0x{expect_magic:08x}", path, 0)

    ndim = magic & 0xFF
    header_len = 4 + 4 * ndim
    if len(raw) < header_len:
        raise ParseError("truncated IDX dimension header", path, len(raw))
    dims = struct.unpack_from(f">{ndim}I", raw, 4)

    expected = header_len + int(np.prod(dims, dtype=np.int64))
    if len(raw) < expected:
        raise ParseError(
            f"truncated IDX payload: header declares {dims} "
            f"({expected} bytes), file has {len(raw)}", path, len(raw))
    if len(raw) > expected:
        raise ParseError(
            f"IDX dimension mismatch: {len(raw) - expected} bytes past the "
            f"declared {dims} payload", path, expected)

    return np.frombuffer(raw, dtype=np.uint8, count=expected - header_len,
                         offset=header_len).reshape(dims)


def load_idx(images_path: Path, labels_path: Path, split: str = "train",
             num_classes: int = 10) -> Dataset:
    images = parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, images_path)
    labels = parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, labels_path)

    if len(images) != len(labels):
        raise ParseError(
            f"image count {len(images)} doesn't match label count {len(labels)}",
            labels_path, 4)
    if labels.size and labels.max() >= num_classes:
        bad = int(np.argmax(labels >= num_classes))
        raise ParseError(
            f"label {labels[bad]} out of range [0, {num_classes})",
            labels_path, 8 + bad)

    return Dataset(
        images[:, None, :, :].copy(), labels.astype(np.int64), split, num_classes)


def parse_cifar10(raw: bytes, path: t.Any = None) -> t.Tuple[np.ndarray, np.ndarray]:
    if len(raw) == 0 or len(raw) % CIFAR10_RECORD_BYTES:
        raise ParseError(
            f"size {len(raw)} isn't a whole number of "
            f"{CIFAR10_RECORD_BYTES}-byte records", path,
            len(raw) - len(raw) % CIFAR10_RECORD_BYTES)

    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR10_RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    if labels.max() >= CIFAR10_CLASSES:
        bad = int(np.argmax(labels >= CIFAR10_CLASSES))
        raise ParseError(
            f"label {labels[bad]} out of range [0, {CIFAR10_CLASSES})",
            path, bad * CIFAR10_RECORD_BYTES)
    images = records[:, 1:].reshape(-1, 3, 32, 32).copy()
    return images, labels


def load_cifar10(batch_files: t.Sequence[Path], split: str = "train") -> Dataset:
    if not batch_files:
        raise ConfigError("no CIFAR-10 batch files given")
    parts = [parse_cifar10(_read_bytes(p), p) for p in batch_files]
    images = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    return Dataset(images, labels, split, CIFAR10_CLASSES)


def pad_to(images: np.ndarray, height: int, width: int) -> np.ndarray:
    """Centre-pad uint8 images with zeros to (height, width)."""
    _, _, h, w = images.shape
    if (h, w) == (height, width):
        return images
    if h > height or w > width:
        raise ConfigError(f"can't pad {h}x{w} images down to {height}x{width}")
    top, left = (height - h) // 2, (width - w) // 2
    return np.pad(
        images,
        ((0, 0), (0, 0), (top, height - h - top), (left, width - w - left)))


def load_dataset(name: DatasetName, data_dir: Path, split: str) -> Dataset:
    """Load one split of a bundled dataset, padded to its network input size."""
    if split not in SPLITS:
        raise ConfigError(f"split must be one of {SPLITS}")
    name = DatasetName(name)
    data_dir = Path(data_dir)

    if name is DatasetName.cifar10:
        root = data_dir / CIFAR10_SUBDIR
        if not root.is_dir():
            root = data_dir
        ds = load_cifar10([root / f for f in CIFAR10_FILES[split]], split)
    else:
        images, labels = IDX_FILES[split]
        ds = load_idx(data_dir / images, data_dir / labels, split)

    _, h, w = DATASET_INPUT_SHAPES[name]
    if ds.shape[1:] != (h, w):
        ds.source_hw = ds.shape[1:]
        ds.images = pad_to(ds.images, h, w)
    logger.info("loaded %s/%s: %d samples of %s", name.value, split, len(ds), ds.shape)
    return ds


@dataclass
class NormStats:
    # Per-channel, in 0-255 pixel units.
    mean: np.ndarray
    std: np.ndarray


def compute_norm_stats(images: np.ndarray,
                       source_hw: t.Optional[t.Tuple[int, int]] = None) -> NormStats:
    """
    Per-channel mean and std over (N, H, W) of a uint8 train split. With
    `source_hw`, only the central unpadded region counts.
    """
    if source_hw is not None:
        _, _, h, w = images.shape
        top, left = (h - source_hw[0]) // 2, (w - source_hw[1]) // 2
        images = images[:, :, top:top + source_hw[0], left:left + source_hw[1]]
    x = images.astype(np.float64)
    mean = x.mean(axis=(0, 2, 3))
    std = x.std(axis=(0, 2, 3))
    # A constant channel carries no scale; keep it at unit std.
    std = np.where(std < 1e-8, 1.0, std)
    return NormStats(mean.astype(np.float32), std.astype(np.float32))


def normalize(x: np.ndarray, stats: NormStats) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    return (x - stats.mean[None, :, None, None]) / stats.std[None, :, None, None]


def hflip(x: np.ndarray, flags: np.ndarray) -> np.ndarray:
    """Mirror the samples whose flag is set along the width axis."""
    out = x.copy()
    out[flags] = out[flags][..., ::-1]
    return out


def pad_crop(x: np.ndarray, pad: int, offsets: np.ndarray) -> np.ndarray:
    """Zero-pad by `pad` then crop each sample back at its (top, left) offset."""
    n, c, h, w = x.shape
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.empty_like(x)
    for i, (top, left) in enumerate(offsets):
        out[i] = padded[i, :, top:top + h, left:left + w]
    return out


def rotate(x: np.ndarray, angles: np.ndarray) -> np.ndarray:
    """Rotate each sample by its angle (degrees), bilinear, zero fill."""
    out = np.empty_like(x)
    for i, angle in enumerate(angles):
        out[i] = ndimage.rotate(
            x[i], float(angle), axes=(2, 1), reshape=False, order=1,
            mode="constant", cval=0.0)
    return out


def augment(x: np.ndarray, policy: AugmentPolicy,
            rng: np.random.Generator) -> np.ndarray:
    """Random rotation, pad-and-crop and horizontal flip, in that order."""
    n = len(x)
    if policy.rotate_deg:
        x = rotate(x, rng.uniform(-policy.rotate_deg, policy.rotate_deg, size=n))
    if policy.pad_crop:
        offsets = rng.integers(0, 2 * policy.pad_crop + 1, size=(n, 2))
        x = pad_crop(x, policy.pad_crop, offsets)
    if policy.hflip_prob:
        x = hflip(x, rng.random(n) < policy.hflip_prob)
    return x


class Batch(t.NamedTuple):
    x: np.ndarray
    y: np.ndarray


_DONE = object()


class BatchLoader:
    """
    Iterate normalized (and, for training, augmented) batches.

    With `prefetch > 0` a worker thread prepares batches into a bounded
    queue; it is the only consumer of the loader's RNG, so the sequence of
    batches is the same as with `prefetch=0`. The last short batch is kept.
    """

    def __init__(
        self,
        dataset: Dataset,
        batch_size: int,
        stats: NormStats,
        *,
        shuffle: bool = False,
        policy: t.Optional[AugmentPolicy] = None,
        seed: t.Optional[int] = None,
        prefetch: int = 2,
    ):
        if len(dataset) == 0:
            raise ConfigError(f"{dataset.split} dataset is empty")
        self.dataset = dataset
        self.batch_size = batch_size
        self.stats = stats
        self.shuffle = shuffle
        self.policy = policy
        self.prefetch = prefetch
        self.rng = np.random.default_rng(seed)

    def __len__(self):
        return -(-len(self.dataset) // self.batch_size)

    def _batches(self) -> t.Iterator[Batch]:
        n = len(self.dataset)
        order = self.rng.permutation(n) if self.shuffle else np.arange(n)
        for start in range(0, n, self.batch_size):
            idx = order[start:start + self.batch_size]
            x = self.dataset.images[idx].astype(np.float32)
            if self.policy is not None and not self.policy.is_identity:
                x = augment(x, self.policy, self.rng)
            yield Batch(normalize(x, self.stats), self.dataset.labels[idx])

    def __iter__(self) -> t.Iterator[Batch]:
        if not self.prefetch:
            yield from self._batches()
            return

        q: queue.Queue = queue.Queue(maxsize=self.prefetch)
        stop = threading.Event()

        def put(item) -> bool:
            while not stop.is_set():
                try:
                    q.put(item, timeout=0.1)
                    return True
                except queue.Full:
                    continue
            return False

        def produce():
            try:
                for batch in self._batches():
                    if not put(batch):
                        return
                put(_DONE)
            except BaseException as e:  # surfaced in the consumer
                put(e)

        worker = threading.Thread(target=produce, name="xmlp-prefetch", daemon=True)
        worker.start()
        try:
            while True:
                item = q.get()
                if item is _DONE:
                    break
                if isinstance(item, BaseException):
                    raise item
                yield item
        finally:
            stop.set()
            worker.join()
