"""Reference attacks: the VILLAIN embedding trigger and LRA label-replacement
poisoning. Both are pure functions, safe to call from any number of workers."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch

from .validation import ValidationError, as_float_tensor, as_label_array, check_fraction

logger = logging.getLogger(__name__)


def base_pattern(dim):
    """The repeating [+1, +1, -1, -1] pattern tiled across ``dim`` coordinates,
    final tile truncated."""
    if dim < 1:
        raise ValidationError("pattern dimension must be >= 1")
    tile = np.array([1.0, 1.0, -1.0, -1.0], dtype=np.float32)
    reps = int(np.ceil(dim / 4))
    return np.tile(tile, reps)[:dim]


def make_mask(dim, spec="first_half"):
    """Binary mask over embedding coordinates.

    ``spec`` may be "all", "first_half", a fraction in (0, 1] covering the
    leading coordinates, or an explicit array of length ``dim``."""
    if isinstance(spec, str):
        if spec == "all":
            return np.ones(dim, dtype=np.float32)
        if spec == "first_half":
            spec = 0.5
        else:
            raise ValidationError(f"unknown mask spec {spec!r}")
    if np.isscalar(spec):
        frac = check_fraction(spec, "mask fraction")
        mask = np.zeros(dim, dtype=np.float32)
        mask[: int(np.floor(frac * dim))] = 1.0
        return mask
    mask = np.asarray(spec, dtype=np.float32)
    if mask.shape != (dim,):
        raise ValidationError(f"mask length {mask.shape} does not match dimension {dim}")
    return mask


@dataclass(frozen=True)
class VillainTrigger:
    """Fixed embedding-space trigger epsilon = mask * (beta * pattern)."""

    dim: int
    beta: float
    mask: np.ndarray

    @property
    def pattern(self):
        return base_pattern(self.dim)

    @property
    def epsilon(self):
        return self.mask * (self.beta * self.pattern)


def villain_trigger(dim, beta=0.4, mask="first_half"):
    return VillainTrigger(dim=int(dim), beta=float(beta), mask=make_mask(dim, mask))


def villain_poison(embedding, trigger):
    """Add the trigger to an embedding row or a batch of rows (elementwise +)."""
    is_numpy = isinstance(embedding, np.ndarray)
    e = as_float_tensor(embedding, "embedding")
    if e.shape[-1] != trigger.dim:
        raise ValidationError(
            f"embedding dimension {e.shape[-1]} does not match trigger {trigger.dim}"
        )
    out = e + torch.as_tensor(trigger.epsilon)
    return out.numpy() if is_numpy else out


def nearest_anchor_labels(rows, anchor_rows, anchor_labels, block=4096):
    """Label arbitrary rows with the label of their nearest anchor row
    (euclidean on flattened features)."""
    X = as_float_tensor(rows).flatten(1)
    anchors = as_float_tensor(anchor_rows).flatten(1)
    anchor_labels = as_label_array(anchor_labels, name="anchor_labels")
    if len(anchors) == 0:
        raise ValidationError("anchor set is empty")
    out = np.empty(len(X), dtype=np.int64)
    for start in range(0, len(X), block):
        d = torch.cdist(X[start : start + block], anchors)
        out[start : start + block] = anchor_labels[d.argmin(dim=1).numpy()]
    return out


def propagate_labels(local_features, known_indices, known_labels):
    """Believed label for every sample: the label of its nearest known sample
    in the adversary's local feature space."""
    X = as_float_tensor(local_features)
    known_indices = np.asarray(known_indices)
    known_labels = as_label_array(known_labels, name="known_labels")
    if len(known_indices) == 0:
        raise ValidationError("known-label subset is empty")
    believed = nearest_anchor_labels(X, X[torch.as_tensor(known_indices)], known_labels)
    believed[known_indices] = known_labels
    return believed


def lra_poison(local_features, known_labels, rho, seed, believed_labels=None):
    """Label-replacement poisoning of the adversary's local feature slice.

    For floor(rho * n) seed-chosen victims, the local slice is replaced by the
    slice of a donor drawn from the known-label subset whose (true, revealed)
    label differs from the victim's believed label. Believed labels are the
    oracle-revealed ones propagated to every sample by nearest known neighbor
    (or supplied explicitly). Victims with no eligible donor are skipped with a
    warning. Returns (poisoned_features, victim_index_array).

    ``known_labels`` is an (indices, labels) pair from the known-label oracle.
    """
    rho = check_fraction(rho, "rho")
    X = as_float_tensor(local_features)
    known_indices, known = known_labels
    known_indices = np.asarray(known_indices)
    known = as_label_array(known, name="known_labels")
    if believed_labels is None:
        believed_labels = propagate_labels(X, known_indices, known)
    believed_labels = as_label_array(believed_labels, name="believed_labels")
    n = len(X)
    count = int(np.floor(rho * n))
    rng = np.random.default_rng(seed)
    victims = np.sort(rng.permutation(n)[:count])
    out = X.clone()
    kept = []
    for v in victims:
        pool = known_indices[(known != believed_labels[v]) & (known_indices != v)]
        if len(pool) == 0:
            logger.warning("lra: no eligible donor for sample %d; skipping", v)
            continue
        donor = int(rng.choice(pool))
        out[v] = X[donor]
        kept.append(v)
    return out, np.asarray(kept, dtype=np.int64)
