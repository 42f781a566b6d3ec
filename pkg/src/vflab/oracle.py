"""Known-label oracle: the simulation stand-in for the adversary's limited ability
to infer labels. It reveals the true labels of a fixed number of training samples;
the inference mechanism itself is out of scope."""

from __future__ import annotations

import numpy as np

from .validation import ValidationError, as_label_array


class KnownLabelOracle:
    """Reveals ``quantity`` (index, label) pairs, class-balanced where possible.

    Quantities divisible by the class count yield an equal number of revealed
    labels per class, matching the usual few-label evaluation grids; any
    remainder is drawn at random. The same seed always reveals the same pairs.
    """

    def __init__(self, labels, quantity, seed=0):
        labels = as_label_array(labels, name="labels")
        quantity = int(quantity)
        if quantity < 1:
            raise ValidationError("oracle quantity must be >= 1")
        if quantity > len(labels):
            raise ValidationError(
                f"oracle quantity {quantity} exceeds dataset size {len(labels)}"
            )
        rng = np.random.default_rng(seed)
        classes = np.unique(labels)
        per_class = quantity // len(classes)
        picked = []
        for c in classes:
            pool = np.flatnonzero(labels == c)
            take = min(per_class, len(pool))
            if take:
                picked.append(rng.choice(pool, size=take, replace=False))
        picked = np.concatenate(picked) if picked else np.empty(0, dtype=np.int64)
        short = quantity - len(picked)
        if short > 0:
            rest = np.setdiff1d(np.arange(len(labels)), picked)
            picked = np.concatenate([picked, rng.choice(rest, size=short, replace=False)])
        picked.sort()
        self._indices = picked.astype(np.int64)
        self._labels = labels[self._indices].copy()

    def reveal(self):
        """The revealed (sample_indices, labels) pair; copies, callers may mutate."""
        return self._indices.copy(), self._labels.copy()

    def __len__(self):
        return len(self._indices)
