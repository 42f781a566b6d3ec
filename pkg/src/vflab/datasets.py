"""Dataset ingestion: benchmark image sets with checksum verification plus fast
deterministic fixtures (synthetic Gaussian blobs and the bundled 8x8 digits)."""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .validation import DatasetError, ValidationError

CACHE_ENV_VAR = "VFLAB_DATA_DIR"

# md5 of the canonical archives; verified whenever the files are present
_MNIST_ARCHIVES = {
    "MNIST/raw/train-images-idx3-ubyte.gz": "f68b3c2dcbeaaa9fbdd348bbdeb94873",
    "MNIST/raw/train-labels-idx1-ubyte.gz": "d53e105ee54ea40749a09fcbcd1e9432",
    "MNIST/raw/t10k-images-idx3-ubyte.gz": "9fb629c4189551a2d022fa330f9573f3",
    "MNIST/raw/t10k-labels-idx1-ubyte.gz": "ec29112dd5afa0611ce80d1b7f02629c",
}
_CIFAR_ARCHIVES = {
    "cifar10": {"cifar-10-python.tar.gz": "c58f30108f718f92721af3b95e74349a"},
    "cifar100": {"cifar-100-python.tar.gz": "eb9058c3a382ffc7106e4002c42a8d85"},
}


@dataclass
class Dataset:
    """Normalized train/test arrays plus the metadata the rest of the lab needs."""

    name: str
    train_X: np.ndarray
    train_y: np.ndarray
    test_X: np.ndarray
    test_y: np.ndarray
    n_classes: int
    value_range: tuple = (0.0, 1.0)
    flip_safe: bool = False
    params: dict = field(default_factory=dict)

    @property
    def feature_shape(self):
        return tuple(self.train_X.shape[1:])

    def subset(self, n_train, seed=0):
        """Deterministic class-stratified subset of the training split."""
        if n_train is None or n_train >= len(self.train_y):
            return self
        rng = np.random.default_rng(seed)
        picked = []
        classes = np.unique(self.train_y)
        per_class = n_train // len(classes)
        for c in classes:
            idx = np.flatnonzero(self.train_y == c)
            picked.append(rng.choice(idx, size=min(per_class, len(idx)), replace=False))
        picked = np.concatenate(picked)
        remainder = n_train - len(picked)
        if remainder > 0:
            rest = np.setdiff1d(np.arange(len(self.train_y)), picked)
            picked = np.concatenate([picked, rng.choice(rest, size=remainder, replace=False)])
        picked.sort()
        return Dataset(
            name=self.name,
            train_X=self.train_X[picked],
            train_y=self.train_y[picked],
            test_X=self.test_X,
            test_y=self.test_y,
            n_classes=self.n_classes,
            value_range=self.value_range,
            flip_safe=self.flip_safe,
            params={**self.params, "train_subset": int(n_train)},
        )


def resolve_cache_dir(cache_dir=None):
    if cache_dir:
        return Path(cache_dir)
    env = os.environ.get(CACHE_ENV_VAR)
    if env:
        return Path(env)
    return Path.home() / ".cache" / "vflab"


def _verify_checksums(root, table):
    for rel, want in table.items():
        path = Path(root) / rel
        if not path.is_file():
            continue
        got = hashlib.md5(path.read_bytes()).hexdigest()
        if got != want:
            raise DatasetError(f"checksum mismatch for {path}: expected {want}, got {got}")


def _expect(condition, message):
    if not condition:
        raise DatasetError(message)


def _load_mnist(cache_dir, download):
    from torchvision import datasets as tvd

    root = resolve_cache_dir(cache_dir)
    _verify_checksums(root, _MNIST_ARCHIVES)
    try:
        train = tvd.MNIST(root=str(root), train=True, download=download)
        test = tvd.MNIST(root=str(root), train=False, download=download)
    except Exception as exc:  # torchvision raises RuntimeError or URLError subclasses
        raise DatasetError(
            f"MNIST unavailable under {root} "
            f"({'download failed' if download else 'downloads disabled'}): {exc}"
        ) from exc
    _verify_checksums(root, _MNIST_ARCHIVES)
    train_X = train.data.numpy().astype(np.float32)[:, None] / 255.0
    test_X = test.data.numpy().astype(np.float32)[:, None] / 255.0
    train_y = train.targets.numpy().astype(np.int64)
    test_y = test.targets.numpy().astype(np.int64)
    _expect(train_X.shape == (60000, 1, 28, 28), f"unexpected MNIST train shape {train_X.shape}")
    _expect(test_X.shape == (10000, 1, 28, 28), f"unexpected MNIST test shape {test_X.shape}")
    return Dataset("mnist", train_X, train_y, test_X, test_y, n_classes=10,
                   value_range=(0.0, 1.0), flip_safe=False)


def _load_cifar(name, cache_dir, download):
    from torchvision import datasets as tvd

    root = resolve_cache_dir(cache_dir)
    _verify_checksums(root, _CIFAR_ARCHIVES[name])
    cls = tvd.CIFAR10 if name == "cifar10" else tvd.CIFAR100
    try:
        train = cls(root=str(root), train=True, download=download)
        test = cls(root=str(root), train=False, download=download)
    except Exception as exc:
        raise DatasetError(
            f"{name} unavailable under {root} "
            f"({'download failed' if download else 'downloads disabled'}): {exc}"
        ) from exc
    train_X = train.data.astype(np.float32).transpose(0, 3, 1, 2) / 255.0
    test_X = test.data.astype(np.float32).transpose(0, 3, 1, 2) / 255.0
    # per-channel standardization with train statistics
    mean = train_X.mean(axis=(0, 2, 3), keepdims=True)
    std = train_X.std(axis=(0, 2, 3), keepdims=True)
    train_X = (train_X - mean) / std
    test_X = (test_X - mean) / std
    n_classes = 10 if name == "cifar10" else 100
    n_expected = 50000
    _expect(train_X.shape == (n_expected, 3, 32, 32), f"unexpected {name} train shape")
    _expect(test_X.shape == (10000, 3, 32, 32), f"unexpected {name} test shape")
    lo = float(((0 - mean) / std).min())
    hi = float(((1 - mean) / std).max())
    return Dataset(name, train_X, np.asarray(train.targets, dtype=np.int64),
                   test_X, np.asarray(test.targets, dtype=np.int64),
                   n_classes=n_classes, value_range=(lo, hi), flip_safe=True)


def _load_digits(test_fraction=0.2, seed=0):
    from sklearn.datasets import load_digits
    from sklearn.model_selection import train_test_split

    bunch = load_digits()
    X = (bunch.images.astype(np.float32) / 16.0)[:, None]
    y = bunch.target.astype(np.int64)
    train_X, test_X, train_y, test_y = train_test_split(
        X, y, test_size=test_fraction, random_state=seed, stratify=y
    )
    return Dataset("digits", train_X, train_y, test_X, test_y, n_classes=10,
                   value_range=(0.0, 1.0), flip_safe=False)


def make_synthetic(n=1000, d=20, classes=4, seed=0, test_fraction=0.2, spread=0.35):
    """Deterministic Gaussian-blob dataset scaled to [0, 1], for fast tests."""
    if classes < 2 or d < 1 or n < classes * 2:
        raise ValidationError("synthetic dataset needs >= 2 classes and a few samples each")
    rng = np.random.default_rng(seed)
    centers = rng.normal(0.0, 1.0, size=(classes, d))
    y = rng.integers(0, classes, size=n)
    X = centers[y] + rng.normal(0.0, spread, size=(n, d))
    # per-feature min-max so every coordinate spans the full unit range
    lo, hi = X.min(axis=0, keepdims=True), X.max(axis=0, keepdims=True)
    X = ((X - lo) / np.maximum(hi - lo, 1e-9)).astype(np.float32)
    n_test = max(1, int(n * test_fraction))
    order = rng.permutation(n)
    test_idx, train_idx = order[:n_test], order[n_test:]
    return Dataset(
        "synthetic", X[train_idx], y[train_idx].astype(np.int64),
        X[test_idx], y[test_idx].astype(np.int64), n_classes=classes,
        value_range=(0.0, 1.0), flip_safe=False,
        params={"n": n, "d": d, "classes": classes, "seed": seed},
    )


def _parse_name(name):
    """Split 'synthetic:n=2000,classes=10' into a base name and kwargs."""
    if ":" not in name:
        return name, {}
    base, _, args = name.partition(":")
    kwargs = {}
    for piece in args.split(","):
        if not piece:
            continue
        key, _, value = piece.partition("=")
        kwargs[key.strip()] = int(value)
    return base, kwargs


def ingest_dataset(name, cache_dir=None, download=True):
    """Load a named dataset, normalized and split as the experiments expect.

    Image benchmarks are fetched into the cache directory (``cache_dir`` arg,
    then the VFLAB_DATA_DIR environment variable, then ~/.cache/vflab) and
    verified against known checksums; missing files with downloads disabled or
    a checksum mismatch raise :class:`DatasetError`. ``synthetic`` accepts
    inline parameters, e.g. ``synthetic:n=2000,d=32,classes=10,seed=1``.
    """
    base, kwargs = _parse_name(name.lower())
    if base == "mnist":
        return _load_mnist(cache_dir, download)
    if base in ("cifar10", "cifar-10"):
        return _load_cifar("cifar10", cache_dir, download)
    if base in ("cifar100", "cifar-100"):
        return _load_cifar("cifar100", cache_dir, download)
    if base == "digits":
        return _load_digits(**kwargs)
    if base == "synthetic":
        return make_synthetic(**kwargs)
    raise ValidationError(f"unknown dataset {name!r}")
