import gzip
import os
import struct
from pathlib import Path

import numpy as np
import pytest

REPO = Path(__file__).resolve().parents[1]
DATA_DIR = Path(os.environ.get("IPGD_DATA_DIR", REPO / "data"))


def mnist_available() -> bool:
    root = DATA_DIR / "mnist"
    return any((root / f"train-images-idx3-ubyte{s}").exists() for s in ("", ".gz"))


needs_mnist = pytest.mark.skipif(not mnist_available(), reason="MNIST files not found; run scripts/fetch_mnist.sh")


def write_idx(path, array, magic, compress=False):
    """Byte-level IDX writer, independent of the package loader."""
    array = np.asarray(array, dtype=np.uint8)
    header = struct.pack(">I", magic) + b"".join(struct.pack(">I", n) for n in array.shape)
    blob = header + array.tobytes()
    opener = gzip.open if compress else open
    with opener(path, "wb") as fh:
        fh.write(blob)
    return blob


def write_cifar(path, images, labels):
    """Records of one label byte followed by 3072 channel-major pixel bytes."""
    images = np.asarray(images, dtype=np.uint8)
    with open(path, "wb") as fh:
        for img, lab in zip(images, labels):
            fh.write(bytes([int(lab)]))
            fh.write(img.reshape(-1).tobytes())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_spd(rng, d, lo=0.5, hi=5.0):
    Q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    return (Q * rng.uniform(lo, hi, d)) @ Q.T
