import gzip
import sys
from pathlib import Path

import numpy as np
import pytest
import torch

ROOT_DIR = Path(__file__).resolve().parent
sys.path.append(str(ROOT_DIR))

from ttp.data import CIFAR_FILES, CIFAR_RECORD, LabeledImageSet  # noqa: E402
from ttp.models import ToyDiscriminator  # noqa: E402


def write_cifar_batch(path: Path, labels, rng: np.random.Generator) -> np.ndarray:
    """Write records of 1 label byte + 3072 pixel bytes; returns the pixel bytes as N x 3 x 32 x 32."""
    labels = np.asarray(labels, dtype=np.uint8)
    pixels = rng.integers(0, 256, size=(len(labels), CIFAR_RECORD - 1), dtype=np.uint8)
    records = np.concatenate([labels[:, None], pixels], axis=1)
    path.write_bytes(records.tobytes())
    return pixels.reshape(-1, 3, 32, 32)


def write_idx(path: Path, array: np.ndarray, magic: int, compress: bool = False) -> Path:
    header = magic.to_bytes(4, "big") + b"".join(int(d).to_bytes(4, "big") for d in array.shape)
    raw = header + array.astype(np.uint8).tobytes()
    if compress:
        path = path.with_name(path.name + ".gz")
        with gzip.open(path, "wb") as f:
            f.write(raw)
    else:
        path.write_bytes(raw)
    return path


@pytest.fixture(scope="session")
def cifar_dir(tmp_path_factory) -> Path:
    """Miniature CIFAR-10 binary layout: 5 x 40 train records, 50 test records, labels cycling 0..9."""
    root = tmp_path_factory.mktemp("cifar-10-batches-bin")
    rng = np.random.default_rng(0)
    for name in CIFAR_FILES["train"]:
        write_cifar_batch(root / name, np.arange(40) % 10, rng)
    write_cifar_batch(root / CIFAR_FILES["test"][0], np.arange(50) % 10, rng)
    return root


@pytest.fixture(scope="session")
def idx_dir(tmp_path_factory) -> Path:
    root = tmp_path_factory.mktemp("mnist")
    rng = np.random.default_rng(1)
    for images, labels, n, compress in (
        ("train-images-idx3-ubyte", "train-labels-idx1-ubyte", 60, False),
        ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte", 20, True),
    ):
        write_idx(root / images, rng.integers(0, 256, size=(n, 28, 28)), 0x00000803, compress)
        write_idx(root / labels, np.arange(n) % 10, 0x00000801, compress)
    return root


@pytest.fixture
def tiny_set() -> LabeledImageSet:
    """40 random 3 x 8 x 8 images over 5 classes, 8 per class."""
    g = torch.Generator().manual_seed(0)
    images = torch.rand(40, 3, 8, 8, generator=g)
    labels = torch.arange(40) % 5
    return LabeledImageSet(images, labels, num_classes=5, split_tag="train")


@pytest.fixture
def toy_disc() -> ToyDiscriminator:
    torch.manual_seed(0)
    disc = ToyDiscriminator(3, num_classes=5).freeze()
    disc.tag = "toy_s0"
    return disc
