"""Input validation helpers and the exception hierarchy shared across the package."""

from __future__ import annotations

import numpy as np
import torch


class ValidationError(ValueError):
    """Malformed user input: bad shapes, non-covering partitions, out-of-range values."""


class ConfigurationError(ValueError):
    """Inconsistent run configuration: mismatched model dimensions, missing pieces."""


class ProtocolError(RuntimeError):
    """A split-training round violated its contract (e.g. gradient shape mismatch)."""


class DatasetError(RuntimeError):
    """Dataset ingestion failure: missing files, checksum mismatch, downloads disabled."""


class DivergenceError(RuntimeError):
    """Training produced non-finite losses."""


def as_float_tensor(x, name="X"):
    """Coerce array-like to a float32 torch tensor, rejecting NaN/inf."""
    if isinstance(x, torch.Tensor):
        t = x.float()
    else:
        t = torch.as_tensor(np.asarray(x), dtype=torch.float32)
    if not torch.isfinite(t).all():
        raise ValidationError(f"{name} contains non-finite values")
    return t


def as_label_array(y, n_classes=None, name="y"):
    """Coerce labels to a 1-D int64 numpy array, optionally range-checked."""
    arr = np.asarray(y)
    if arr.ndim != 1:
        raise ValidationError(f"{name} must be 1-D, got shape {arr.shape}")
    if arr.size and not np.issubdtype(arr.dtype, np.integer):
        if not np.all(arr == arr.astype(np.int64)):
            raise ValidationError(f"{name} must contain integer class labels")
    arr = arr.astype(np.int64)
    if n_classes is not None and arr.size and (arr.min() < 0 or arr.max() >= n_classes):
        raise ValidationError(f"{name} labels outside [0, {n_classes})")
    return arr


def check_fraction(value, name):
    value = float(value)
    if not 0.0 <= value <= 1.0:
        raise ValidationError(f"{name} must lie in [0, 1], got {value}")
    return value


def check_positive(value, name, strict=True):
    if (value <= 0) if strict else (value < 0):
        bound = "> 0" if strict else ">= 0"
        raise ValidationError(f"{name} must be {bound}, got {value}")
    return value


def check_matching_rows(a, b, names=("X", "y")):
    if len(a) != len(b):
        raise ValidationError(
            f"{names[0]} and {names[1]} disagree on sample count: {len(a)} vs {len(b)}"
        )


def new_generator(seed):
    """Seeded torch generator; the one RNG handed to seedable components."""
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g
