"""Vertical feature partitioning: who owns which columns (tabular) or image rows."""

from __future__ import annotations

from dataclasses import dataclass

from .validation import ValidationError


@dataclass(frozen=True)
class FeaturePartition:
    """One participant's contiguous share of the feature space.

    ``axis`` is "columns" for flat feature vectors and "rows" for image data,
    where each participant owns a horizontal band of pixel rows. The partition
    order is fixed for the life of a run: participant i always contributes the
    i-th block of the concatenated input.
    """

    participant_id: int
    axis: str  # "columns" | "rows"
    start: int
    stop: int
    total: int

    def __post_init__(self):
        if self.axis not in ("columns", "rows"):
            raise ValidationError(f"unknown partition axis {self.axis!r}")
        if not 0 <= self.start < self.stop <= self.total:
            raise ValidationError(
                f"invalid partition range [{self.start}, {self.stop}) of {self.total}"
            )

    @property
    def width(self):
        return self.stop - self.start

    def extract(self, X):
        """Slice a batch down to this participant's share. Works on numpy or torch."""
        if self.axis == "columns":
            return X[:, self.start : self.stop]
        return X[:, :, self.start : self.stop, :]

    def local_shape(self, feature_shape):
        """Per-sample shape of the local slice given the full per-sample shape."""
        if self.axis == "columns":
            return (self.width,)
        c, _, w = feature_shape
        return (c, self.width, w)


def _split_axis(feature_shape):
    if len(feature_shape) == 1:
        return "columns", feature_shape[0]
    if len(feature_shape) == 3:
        return "rows", feature_shape[1]
    raise ValidationError(
        f"feature shape {feature_shape} not supported; expected (d,) or (C, H, W)"
    )


def partition_features(feature_shape, n_participants, split_spec="equal"):
    """Split the feature space into disjoint contiguous shares, one per participant.

    ``feature_shape`` is the per-sample shape, either ``(d,)`` or ``(C, H, W)``;
    an object with a ``feature_shape`` attribute is also accepted. ``split_spec``
    is ``"equal"`` (even shares, remainder to the last participant), a sequence
    of widths, or a sequence of ``(start, stop)`` ranges. The ranges must cover
    the axis exactly once, in participant order.
    """
    feature_shape = tuple(getattr(feature_shape, "feature_shape", feature_shape))
    axis, total = _split_axis(feature_shape)
    n_participants = int(n_participants)
    if n_participants < 1:
        raise ValidationError("n_participants must be >= 1")
    if total < n_participants:
        raise ValidationError(
            f"cannot split {total} {axis} across {n_participants} participants"
        )

    if isinstance(split_spec, str):
        if split_spec != "equal":
            raise ValidationError(f"unknown split spec {split_spec!r}")
        base = total // n_participants
        widths = [base] * n_participants
        widths[-1] += total - base * n_participants
        ranges = []
        cursor = 0
        for w in widths:
            ranges.append((cursor, cursor + w))
            cursor += w
    else:
        entries = list(split_spec)
        if len(entries) != n_participants:
            raise ValidationError(
                f"split spec has {len(entries)} entries for {n_participants} participants"
            )
        if all(isinstance(e, (tuple, list)) and len(e) == 2 for e in entries):
            ranges = [(int(a), int(b)) for a, b in entries]
        else:
            widths = [int(e) for e in entries]
            ranges = []
            cursor = 0
            for w in widths:
                ranges.append((cursor, cursor + w))
                cursor += w

    cursor = 0
    for start, stop in ranges:
        if start != cursor:
            kind = "overlapping" if start < cursor else "non-covering"
            raise ValidationError(
                f"{kind} split spec: expected range starting at {cursor}, got [{start}, {stop})"
            )
        if stop <= start:
            raise ValidationError(f"empty partition range [{start}, {stop})")
        cursor = stop
    if cursor != total:
        raise ValidationError(
            f"split spec covers [0, {cursor}) but the feature axis has size {total}"
        )

    return [
        FeaturePartition(participant_id=i, axis=axis, start=start, stop=stop, total=total)
        for i, (start, stop) in enumerate(ranges)
    ]
