import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vflab.partition import FeaturePartition, partition_features
from vflab.validation import ValidationError


def test_mnist_two_equal_bands():
    parts = partition_features((1, 28, 28), 2, "equal")
    assert [(p.start, p.stop) for p in parts] == [(0, 14), (14, 28)]
    assert all(p.axis == "rows" for p in parts)


def test_single_participant_identity():
    (part,) = partition_features((1, 28, 28), 1, "equal")
    assert (part.start, part.stop) == (0, 28)
    x = np.arange(2 * 1 * 28 * 28, dtype=np.float32).reshape(2, 1, 28, 28)
    assert np.array_equal(part.extract(x), x)


def test_cifar_adversary_band_height_4():
    parts = partition_features((3, 32, 32), 2, [4, 28])
    assert (parts[0].start, parts[0].stop) == (0, 4)
    assert (parts[1].start, parts[1].stop) == (4, 32)


def test_flat_features_split_into_columns():
    parts = partition_features((20,), 2, "equal")
    assert [(p.start, p.stop) for p in parts] == [(0, 10), (10, 20)]
    assert all(p.axis == "columns" for p in parts)
    x = np.arange(40, dtype=np.float32).reshape(2, 20)
    assert np.array_equal(parts[1].extract(x), x[:, 10:])


def test_equal_split_remainder_goes_to_last():
    parts = partition_features((7,), 2, "equal")
    assert [(p.start, p.stop) for p in parts] == [(0, 3), (3, 7)]


@pytest.mark.parametrize("spec", [
    [(0, 10), (9, 20)],   # overlapping
    [(0, 9), (10, 20)],   # gap
    [(0, 10), (10, 19)],  # non-covering tail
    [10, 11],             # widths overshoot
])
def test_bad_specs_rejected(spec):
    with pytest.raises(ValidationError):
        partition_features((20,), 2, spec)


def test_explicit_ranges_must_start_at_zero():
    with pytest.raises(ValidationError):
        partition_features((20,), 2, [(1, 10), (10, 20)])


def test_image_local_shape():
    parts = partition_features((3, 32, 32), 2, [4, 28])
    assert parts[0].local_shape((3, 32, 32)) == (3, 4, 32)
    assert parts[1].local_shape((3, 32, 32)) == (3, 28, 32)


def test_extract_views_are_disjoint_and_cover(synth):
    parts = partition_features(synth.feature_shape, 3, "equal")
    x = synth.train_X[:5]
    rebuilt = np.concatenate([p.extract(x) for p in parts], axis=1)
    assert np.array_equal(rebuilt, x)


@settings(max_examples=60, deadline=None)
@given(
    total=st.integers(min_value=2, max_value=64),
    n=st.integers(min_value=1, max_value=6),
    data=st.data(),
)
def test_random_width_specs_are_disjoint_covering(total, n, data):
    if total < n:
        total = n
    cuts = sorted(data.draw(st.lists(
        st.integers(min_value=1, max_value=total - 1),
        min_size=n - 1, max_size=n - 1, unique=True,
    )))
    widths = np.diff([0, *cuts, total]).tolist()
    parts = partition_features((total,), n, widths)
    covered = sorted((p.start, p.stop) for p in parts)
    assert covered[0][0] == 0 and covered[-1][1] == total
    for (a, b), (c, d) in zip(covered, covered[1:]):
        assert b == c  # contiguous, disjoint


def test_partition_validates_range():
    with pytest.raises(ValidationError):
        FeaturePartition(0, "rows", 5, 5, 10)
    with pytest.raises(ValidationError):
        FeaturePartition(0, "diagonal", 0, 5, 10)
