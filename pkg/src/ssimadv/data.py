"""Dataset ingestion: IDX (MNIST) files, CIFAR-10 binary batches, and a bundled MNIST subset."""

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (N, H, W, C) float64 in [0, 1]
    labels: np.ndarray  # (N,) int64
    split: str = ""

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DatasetError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise DatasetError("pixels must lie in [0, 1]")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx, split=None) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.split if split is None else split)


def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse_idx(raw: bytes, magic: int, what: str):
    if len(raw) < 4:
        raise DatasetError(f"{what}: truncated header")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise DatasetError(f"{what}: bad magic 0x{found:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise DatasetError(f"{what}: truncated header")
    dims = struct.unpack(">" + "I" * ndim, raw[4:head])
    count = int(np.prod(dims))
    if len(raw) - head < count:
        raise DatasetError(f"{what}: truncated data ({len(raw) - head} of {count} bytes)")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=head).reshape(dims)


def load_idx(images_path, labels_path, split="") -> Dataset:
    """Read an IDX image file (magic 0x803) and label file (magic 0x801).

    Pixels are scaled by 1/255; gzip-compressed files are accepted.
    """
    imgs = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, str(images_path))
    labs = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, str(labels_path))
    if len(imgs) != len(labs):
        raise DatasetError(f"count mismatch: {len(imgs)} images vs {len(labs)} labels")
    images = (imgs.astype(np.float64) / 255.0)[..., None]
    return Dataset(images, labs.astype(np.int64), split)


def write_idx(images_path, labels_path, images, labels):
    """Write 8-bit grayscale images (values in [0, 1], rounded) and labels as IDX."""
    images = np.asarray(images)
    if images.ndim == 4:
        if images.shape[-1] != 1:
            raise DatasetError("IDX images are single-channel")
        images = images[..., 0]
    if images.dtype != np.uint8:
        images = np.floor(np.asarray(images, dtype=np.float64) * 255.0 + 0.5).astype(np.uint8)
    labels = np.asarray(labels).astype(np.uint8)
    n, h, w = images.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        fh.write(labels.tobytes())


def load_cifar_batch(path, split="") -> Dataset:
    """CIFAR-10 binary batch: records of 1 label byte + 3072 channel-planar pixel bytes."""
    raw = _read_bytes(path)
    if len(raw) % 3073:
        raise DatasetError(f"{path}: size {len(raw)} is not a multiple of 3073")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, 3073)
    images = rec[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return Dataset(images.astype(np.float64) / 255.0, rec[:, 0].astype(np.int64), split)


def mnist_subset(train_per_class=200, test_per_class=50):
    """Class-balanced MNIST train/test split from the 5000-digit sample shipped with mlxtend.

    The sample holds 500 digits per class.  For each class the first
    ``train_per_class`` go to train and the last ``test_per_class`` to test,
    so the two never overlap.
    """
    try:
        from mlxtend.data import mnist_data
    except ImportError as exc:
        raise ImportError("the bundled MNIST sample needs `pip install mlxtend`") from exc
    X, y = mnist_data()
    if train_per_class + test_per_class > 500:
        raise ValueError("at most 500 digits per class are available")
    tr, te = [], []
    for k in range(10):
        idx = np.flatnonzero(y == k)
        tr.append(idx[:train_per_class])
        te.append(idx[len(idx) - test_per_class:])
    # interleave classes so truncated prefixes stay balanced
    tr = np.stack(tr, axis=1).ravel()
    te = np.stack(te, axis=1).ravel()
    X = np.rint(X).astype(np.uint8).reshape(-1, 28, 28)
    return (X[tr], y[tr].astype(np.uint8)), (X[te], y[te].astype(np.uint8))


def write_mnist_subset(outdir, train_per_class=200, test_per_class=50) -> dict:
    """Write the mlxtend MNIST split as four IDX files; returns their paths."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    (xtr, ytr), (xte, yte) = mnist_subset(train_per_class, test_per_class)
    paths = {
        "train_images": outdir / "train-images-idx3-ubyte",
        "train_labels": outdir / "train-labels-idx1-ubyte",
        "test_images": outdir / "t10k-images-idx3-ubyte",
        "test_labels": outdir / "t10k-labels-idx1-ubyte",
    }
    write_idx(paths["train_images"], paths["train_labels"], xtr, ytr)
    write_idx(paths["test_images"], paths["test_labels"], xte, yte)
    return {k: str(v) for k, v in paths.items()}
