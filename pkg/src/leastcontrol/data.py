"""Dataset ingestion and synthetic data generation.

MNIST-style IDX files are read bit-exactly (big-endian magic, shape
header, raw bytes); pixels are scaled to [0, 1] and nothing else is done
to them.  The teacher-student generator produces regression targets from
a frozen random equilibrium network, which gives training runs a regime
where the data is exactly realizable by a wide enough student.
"""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from leastcontrol.numerics import Rng

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


class BadMagicError(ValueError):
    """File does not start with the expected IDX magic number."""


class TruncatedFileError(ValueError):
    """File is shorter than its header promises."""


class CountMismatchError(ValueError):
    """Image and label files disagree on the number of items."""


@dataclass
class Dataset:
    """Sample matrix plus classification labels or regression targets."""

    inputs: np.ndarray  # (N, d)
    labels: np.ndarray | None = None  # (N,) int class indices
    targets: np.ndarray | None = None  # (N, c) regression targets
    num_classes: int = 0
    split: str = "train"
    normalization: str = "none"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        if self.inputs.ndim != 2 or self.inputs.shape[0] == 0:
            raise ValueError("inputs must be a non-empty (N, d) matrix")
        if not np.all(np.isfinite(self.inputs)):
            raise ValueError("inputs contain non-finite values")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape[0] != self.inputs.shape[0]:
                raise CountMismatchError("label count does not match inputs")
            if self.num_classes <= 0:
                self.num_classes = int(self.labels.max()) + 1
            if np.any(self.labels < 0) or np.any(self.labels >= self.num_classes):
                raise ValueError("class indices out of range")
        if self.targets is not None:
            self.targets = np.asarray(self.targets, dtype=np.float64)
            if self.targets.shape[0] != self.inputs.shape[0]:
                raise CountMismatchError("target count does not match inputs")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def take(self, indices) -> "Dataset":
        return Dataset(
            inputs=self.inputs[indices],
            labels=None if self.labels is None else self.labels[indices],
            targets=None if self.targets is None else self.targets[indices],
            num_classes=self.num_classes,
            split=self.split,
            normalization=self.normalization,
            meta=dict(self.meta),
        )


def _read_idx(path: str, expected_magic: int):
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise TruncatedFileError(f"{path}: shorter than a magic number")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise BadMagicError(
            f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}"
        )
    n_dims = magic & 0xFF
    header = 4 + 4 * n_dims
    if len(raw) < header:
        raise TruncatedFileError(f"{path}: truncated shape header")
    shape = struct.unpack(f">{n_dims}I", raw[4:header])
    count = int(np.prod(shape))
    if len(raw) < header + count:
        raise TruncatedFileError(
            f"{path}: header promises {count} bytes, file has {len(raw) - header}"
        )
    data = np.frombuffer(raw, dtype=np.uint8, count=count, offset=header)
    return data.reshape(shape)


def load_idx(images_path: str, labels_path: str, split: str = "train") -> Dataset:
    """Load an IDX image/label pair; pixels scaled to [0, 1], no whitening."""
    images = _read_idx(images_path, IDX_IMAGE_MAGIC)
    labels = _read_idx(labels_path, IDX_LABEL_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise CountMismatchError(
            f"{images.shape[0]} images vs {labels.shape[0]} labels"
        )
    flat = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return Dataset(
        inputs=flat,
        labels=labels.astype(np.int64),
        num_classes=10,
        split=split,
        normalization="pixels/255",
    )


def find_mnist(data_dir: str | None = None):
    """Locate MNIST IDX files under ``LCP_DATA_DIR`` (or an explicit dir).

    Returns (train, test) datasets or None when the files are absent.
    """
    root = data_dir or os.environ.get("LCP_DATA_DIR", "data")
    names = {
        "train_images": ["train-images-idx3-ubyte", "train-images.idx3-ubyte"],
        "train_labels": ["train-labels-idx1-ubyte", "train-labels.idx1-ubyte"],
        "test_images": ["t10k-images-idx3-ubyte", "t10k-images.idx3-ubyte"],
        "test_labels": ["t10k-labels-idx1-ubyte", "t10k-labels.idx1-ubyte"],
    }

    def locate(candidates):
        for name in candidates:
            for suffix in ("", ".gz"):
                path = os.path.join(root, name + suffix)
                if os.path.exists(path):
                    return path
        return None

    paths = {key: locate(cands) for key, cands in names.items()}
    if any(p is None for p in paths.values()):
        return None
    train = load_idx(paths["train_images"], paths["train_labels"], "train")
    test = load_idx(paths["test_images"], paths["test_labels"], "test")
    return train, test


def load_digits_dataset():
    """Bundled scikit-learn 8x8 digits as a hermetic desk-scale stand-in.

    Returns (train, test) with a fixed 80/20 split; inputs scaled to
    [0, 1].  Only used when MNIST files are not available locally.
    """
    try:
        from sklearn.datasets import load_digits
    except ImportError as err:  # pragma: no cover
        raise ImportError("the digits dataset needs scikit-learn installed") from err
    raw = load_digits()
    order = Rng(2024).permutation(raw.data.shape[0])
    inputs = raw.data.astype(np.float64)[order] / 16.0
    labels = raw.target.astype(np.int64)[order]
    n_train = int(0.8 * inputs.shape[0])
    train = Dataset(inputs[:n_train], labels=labels[:n_train], num_classes=10, split="train", normalization="pixels/16")
    test = Dataset(inputs[n_train:], labels=labels[n_train:], num_classes=10, split="test", normalization="pixels/16")
    return train, test


def make_teacher_student(
    n_samples: int, d: int, width: int, seed: int, output_dim: int = 4
) -> Dataset:
    """Regression targets from a frozen random equilibrium network.

    Inputs are uniform in [-1, 1]; targets are the teacher's free
    equilibrium outputs.  Reproducible from the seed alone; the teacher
    is kept in ``meta['teacher']`` so runs can verify realizability.
    """
    from leastcontrol.network import build_recurrent
    from leastcontrol.solver import SolveConfig, solve_free

    rng = Rng(seed)
    teacher = build_recurrent(width, d, output_dim, rng=rng.split(1))
    inputs = rng.uniform(-1.0, 1.0, (n_samples, d))
    phi, report = solve_free(
        teacher, inputs.T, SolveConfig(max_steps=5000, epsilon=1e-14)
    )
    targets = teacher.output(phi).T
    return Dataset(
        inputs=inputs,
        targets=targets,
        split="train",
        meta={"teacher": teacher, "seed": seed, "solver_converged": report.converged},
    )


def subset(ds: Dataset, n: int, seed: int) -> Dataset:
    """Deterministic subsample; stratified by class when labels exist."""
    if n >= len(ds):
        return ds.take(np.arange(len(ds)))
    rng = Rng(seed)
    if ds.labels is None:
        return ds.take(np.sort(rng.permutation(len(ds))[:n]))
    chosen = []
    classes = np.unique(ds.labels)
    quotas = {}
    remainders = []
    total = 0
    for cls in classes:
        exact = n * np.sum(ds.labels == cls) / len(ds)
        quotas[cls] = int(np.floor(exact))
        total += quotas[cls]
        remainders.append((exact - quotas[cls], cls))
    remainders.sort(reverse=True)
    for _, cls in remainders[: n - total]:
        quotas[cls] += 1
    for cls in classes:
        idx = np.flatnonzero(ds.labels == cls)
        picked = idx[rng.split(int(cls)).permutation(idx.shape[0])[: quotas[cls]]]
        chosen.append(picked)
    return ds.take(np.sort(np.concatenate(chosen)))


class BatchIterator:
    """Deterministic minibatch stream; each epoch is one full permutation."""

    def __init__(self, dataset: Dataset, batch_size: int, seed: int):
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        self.dataset = dataset
        self.batch_size = batch_size
        self.seed = seed
        self.epoch = 0

    def epoch_batches(self):
        """Yield (x_cols, labels_or_target_cols, indices) for one epoch."""
        order = Rng(self.seed).split(self.epoch).permutation(len(self.dataset))
        ds = self.dataset
        for start in range(0, len(ds), self.batch_size):
            idx = order[start : start + self.batch_size]
            x = ds.inputs[idx].T
            if ds.labels is not None:
                yield x, ds.labels[idx], idx
            else:
                yield x, ds.targets[idx].T, idx
        self.epoch += 1
