import gzip
import logging
import queue
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple, Optional, Sequence, Tuple, TypeVar

import numpy as np
import torch

from ttp.augment import augment_batch
from ttp.config import AugmentPolicy
from ttp.errors import InsufficientSamples, IoFailure, MalformedFile, UnknownFormat
from ttp.seeding import torch_generator

log = logging.getLogger(__name__)

FORMATS = ("cifar10-bin", "idx")
CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_FILES = {
    "train": [f"data_batch_{i}.bin" for i in range(1, 6)],
    "test": ["test_batch.bin"],
}
IDX_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class LabeledImageSet:
    images: torch.Tensor  # N x C x H x W, float32 in [0, 1]
    labels: torch.Tensor  # N, int64
    num_classes: int
    split_tag: str = "train"

    def __post_init__(self) -> None:
        if self.images.shape[0] != self.labels.shape[0]:
            raise MalformedFile(f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        if self.split_tag not in ("train", "test"):
            raise ValueError(f"split_tag must be train or test, got {self.split_tag!r}")
        if len(self):
            if self.images.min().item() < 0.0 or self.images.max().item() > 1.0:
                raise MalformedFile("pixel values outside [0, 1]")
            if self.labels.min().item() < 0 or self.labels.max().item() >= self.num_classes:
                raise MalformedFile(f"labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])  # type: ignore[return-value]

    def count(self, label: int) -> int:
        return int((self.labels == label).sum().item())


def subset(data: LabeledImageSet, classes: Sequence[int]) -> LabeledImageSet:
    keep = torch.isin(data.labels, torch.as_tensor(list(classes), dtype=torch.long))
    return LabeledImageSet(data.images[keep], data.labels[keep], data.num_classes, data.split_tag)


def _read_bytes(path: Path) -> bytes:
    try:
        if path.suffix == ".gz":
            with gzip.open(path, "rb") as f:
                return f.read()
        return path.read_bytes()
    except OSError as e:
        raise IoFailure(f"cannot read {path}: {e}") from e


def _find(path: Path, name: str) -> Path:
    for candidate in (path / name, path / f"{name}.gz"):
        if candidate.exists():
            return candidate
    raise IoFailure(f"missing {name} under {path}")


def _parse_cifar(raw: bytes, source: Path) -> Tuple[np.ndarray, np.ndarray]:
    if not raw or len(raw) % CIFAR_RECORD:
        raise MalformedFile(f"{source}: {len(raw)} bytes is not a multiple of the {CIFAR_RECORD}-byte record")
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    # R plane, G plane, B plane, each row-major 32x32
    return records[:, 1:].reshape(-1, 3, 32, 32), records[:, 0].astype(np.int64)


def _parse_idx(raw: bytes, magic: int, source: Path) -> np.ndarray:
    if len(raw) < 4:
        raise MalformedFile(f"{source}: truncated header")
    got = int.from_bytes(raw[:4], "big")
    if got != magic:
        raise MalformedFile(f"{source}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise MalformedFile(f"{source}: truncated header")
    dims = [int.from_bytes(raw[4 + 4 * i : 8 + 4 * i], "big") for i in range(ndim)]
    expected = header + int(np.prod(dims))
    if len(raw) != expected:
        raise MalformedFile(f"{source}: {len(raw)} bytes, header promises {expected}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_dataset(path: Path, format: str, split: str, num_classes: int = 10) -> LabeledImageSet:
    """Read a CIFAR-10 binary or IDX (MNIST) split; bytes are rescaled to [0, 1] by /255."""
    if format not in FORMATS:
        raise UnknownFormat(f"unknown dataset format {format!r}; expected one of {FORMATS}")
    if split not in ("train", "test"):
        raise ValueError(f"split must be train or test, got {split!r}")
    path = Path(path)
    if not path.exists():
        raise IoFailure(f"{path} does not exist")

    if format == "cifar10-bin":
        files = [path] if path.is_file() else [_find(path, n) for n in CIFAR_FILES[split]]
        parts = [_parse_cifar(_read_bytes(f), f) for f in files]
        images = np.concatenate([p[0] for p in parts])
        labels = np.concatenate([p[1] for p in parts])
    else:
        img_path, lbl_path = (_find(path, n) for n in IDX_FILES[split])
        images = _parse_idx(_read_bytes(img_path), IDX_IMAGES_MAGIC, img_path)[:, None, :, :]
        labels = _parse_idx(_read_bytes(lbl_path), IDX_LABELS_MAGIC, lbl_path).astype(np.int64)
        if len(images) != len(labels):
            raise MalformedFile(f"{len(images)} images vs {len(labels)} labels in {path}")

    if labels.size and labels.max() >= num_classes:
        raise MalformedFile(f"label {labels.max()} >= num_classes {num_classes}")
    data = LabeledImageSet(
        images=torch.from_numpy(images.astype(np.float32) / 255.0),
        labels=torch.from_numpy(labels),
        num_classes=num_classes,
        split_tag=split,
    )
    log.info("event=dataset_loaded path=%s format=%s split=%s n=%d", path, format, split, len(data))
    return data


class Batch(NamedTuple):
    images: torch.Tensor
    labels: torch.Tensor
    augmented: Optional[torch.Tensor]
    epoch: int
    index: int


class BatchStream:
    """Per-epoch shuffled, fixed-size batches over one role's pool.

    Single consumer. Augmentation rng is derived from (seed, epoch, batch index),
    so the output does not depend on which thread produces it. Source and
    augmented-source streams share one batch order: attaching a policy only
    adds the augmented copy.
    """

    def __init__(
        self,
        images: torch.Tensor,
        labels: torch.Tensor,
        role: str,
        batch_size: int,
        seed: int,
        target_class: Optional[int] = None,
        augment: Optional[AugmentPolicy] = None,
        max_epochs: Optional[int] = None,
    ):
        if role not in ("source", "target", "augmented-source"):
            raise ValueError(f"unknown stream role {role!r}")
        if role == "target" and augment is not None:
            raise ValueError("target batches are never augmented")
        if role == "augmented-source" and augment is None:
            augment = AugmentPolicy()
        if role == "source" and augment is not None:
            role = "augmented-source"
        if batch_size < 1:
            raise ValueError("batch_size must be positive")
        if len(labels) < batch_size:
            raise InsufficientSamples(f"{role} pool has {len(labels)} samples, batch size is {batch_size}")
        self.images = images
        self.labels = labels
        self.role = role
        self.batch_size = batch_size
        self.seed = seed
        self.target_class = target_class
        self.augment = augment
        self.max_epochs = max_epochs

    def __len__(self) -> int:
        return len(self.labels) // self.batch_size

    def epoch(self, e: int) -> Iterator[Batch]:
        order_key = "target" if self.role == "target" else "source"
        perm = torch.randperm(len(self.labels), generator=torch_generator(self.seed, "stream", order_key, e))
        for k in range(len(self)):
            idx = perm[k * self.batch_size : (k + 1) * self.batch_size]
            images = self.images[idx]
            augmented = None
            if self.augment is not None:
                augmented = augment_batch(images, self.augment, torch_generator(self.seed, "augment", e, k))
            yield Batch(images, self.labels[idx], augmented, e, k)

    def __iter__(self) -> Iterator[Batch]:
        e = 0
        while self.max_epochs is None or e < self.max_epochs:
            yield from self.epoch(e)
            e += 1


def make_streams(
    data: LabeledImageSet,
    target_class: int,
    batch_size: int,
    seed: int,
    augment: Optional[AugmentPolicy] = None,
    source_classes: Optional[Sequence[int]] = None,
) -> Tuple[BatchStream, BatchStream]:
    """Source stream over every class except `target_class`, target stream over `target_class` only."""
    if not 0 <= target_class < data.num_classes:
        raise ValueError(f"target class {target_class} outside [0, {data.num_classes})")
    is_target = data.labels == target_class
    is_source = ~is_target
    if source_classes is not None:
        allowed = [c for c in source_classes if c != target_class]
        is_source &= torch.isin(data.labels, torch.as_tensor(allowed, dtype=torch.long))
    n_target, n_source = int(is_target.sum()), int(is_source.sum())
    if n_target < batch_size or n_source < batch_size:
        raise InsufficientSamples(
            f"need >= {batch_size} samples per side, have target={n_target} source={n_source}"
        )
    source = BatchStream(
        data.images[is_source], data.labels[is_source], "source", batch_size, seed, target_class, augment
    )
    target = BatchStream(data.images[is_target], data.labels[is_target], "target", batch_size, seed, target_class)
    return source, target


T = TypeVar("T")
_DONE = object()


def prefetch(items: Iterable[T], depth: int = 2) -> Iterator[T]:
    """Produce `items` on a worker thread through a bounded queue."""
    q: "queue.Queue[object]" = queue.Queue(maxsize=max(1, depth))
    stop = threading.Event()

    def put(item: object) -> bool:
        while not stop.is_set():
            try:
                q.put(item, timeout=0.1)
                return True
            except queue.Full:
                continue
        return False

    def worker() -> None:
        try:
            for item in items:
                if not put(item):
                    return
            put(_DONE)
        except BaseException as e:  # re-raised on the consumer side
            put(e)

    t = threading.Thread(target=worker, name="ttp-prefetch", daemon=True)
    t.start()
    try:
        while True:
            item = q.get()
            if item is _DONE:
                return
            if isinstance(item, BaseException):
                raise item
            yield item  # type: ignore[misc]
    finally:
        stop.set()
        t.join(timeout=1.0)
