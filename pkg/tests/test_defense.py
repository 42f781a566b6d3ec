import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from vflab.defense import (
    DaeDefense,
    DaeFilter,
    ThresholdTable,
    calibrate_thresholds,
    filter_rows,
    group_by_label,
    rmse,
    train_dae,
)
from vflab.nets import DeepAutoEncoder
from vflab.validation import ValidationError


class _IdentityDae(torch.nn.Module):
    def forward(self, x):
        return x


class _OffsetDae(torch.nn.Module):
    def __init__(self, offset):
        super().__init__()
        self.offset = offset

    def forward(self, x):
        return x + self.offset


def test_rmse_zero_for_perfect_reconstruction():
    assert rmse(_IdentityDae(), torch.randn(7)) == 0.0


def test_rmse_constant_residual_is_the_constant():
    row = torch.zeros(10)
    assert rmse(_OffsetDae(0.3), row) == pytest.approx(0.3, abs=1e-7)


def test_rmse_matches_independent_recomputation(rng):
    torch.manual_seed(0)
    dae = DeepAutoEncoder(12, hidden=(8, 6), bottleneck=4)
    row = torch.as_tensor(rng.normal(size=12), dtype=torch.float32)
    with torch.no_grad():
        recon = dae(row[None])[0].numpy()
    expected = float(np.sqrt(np.mean((row.numpy() - recon) ** 2)))
    assert rmse(dae, row) == pytest.approx(expected, abs=1e-6)


def test_group_by_label_partitions_and_restores():
    labels = np.array([2, 0, 1, 0, 2, 2])
    rows = torch.arange(12.0).reshape(6, 2)
    groups = group_by_label(rows, labels)
    assert sorted(groups) == [0, 1, 2]
    union = np.sort(np.concatenate(list(groups.values())))
    assert np.array_equal(union, np.arange(6))


def test_thresholds_median_plus_k_mad():
    scores = np.array([1.0, 1.1, 0.9, 1.05, 0.95, 3.0])

    class Fixed(torch.nn.Module):
        def forward(self, x):
            return x - torch.as_tensor(scores[: len(x)], dtype=torch.float32)[:, None]

    rows = torch.zeros(6, 1)
    table = calibrate_thresholds({0: Fixed()}, {0: rows}, k=3.0)
    med = np.median(scores)
    mad = np.median(np.abs(scores - med))
    assert table.get(0) == pytest.approx(med + 3 * mad, rel=1e-6)


def test_degenerate_mad_falls_back_to_floor():
    class Const(torch.nn.Module):
        def forward(self, x):
            return x - 0.5

    rows = torch.zeros(8, 1)
    table = calibrate_thresholds({0: Const()}, {0: rows}, k=3.0)
    assert table.get(0) == pytest.approx(0.5 + 3 * 1e-6, rel=1e-6)
    assert table.get(0) > 0.5  # still strictly above the shared score


def test_threshold_table_validates_positivity():
    with pytest.raises(ValidationError):
        ThresholdTable({0: 0.0})
    assert ThresholdTable({0: 0.5}).get(1) == np.inf  # unseen class passes


def test_filter_boundary_is_strict():
    # RMSE exactly equal to the threshold passes; any epsilon above is dropped
    dae = _OffsetDae(0.5)  # exactly representable residual
    rows = torch.zeros(2, 4)
    labels = np.array([0, 0])
    _, anomalous, _ = filter_rows(rows, labels, {0: dae}, ThresholdTable({0: 0.5}))
    assert not anomalous.any()
    _, anomalous, _ = filter_rows(rows, labels, {0: dae},
                                  ThresholdTable({0: 0.5 - 1e-6}))
    assert anomalous.all()


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(min_value=0, max_value=10_000))
def test_filter_soundness_against_reference_predicate(seed):
    torch.manual_seed(seed)
    dae = DeepAutoEncoder(6, hidden=(5, 4), bottleneck=3)
    rng = np.random.default_rng(seed)
    rows = torch.as_tensor(rng.normal(size=(20, 6)), dtype=torch.float32)
    labels = rng.integers(0, 3, size=20)
    table = ThresholdTable({0: 0.8, 1: 1.2, 2: 0.5})
    kept, anomalous, scores = filter_rows(rows, labels, {c: dae for c in range(3)}, table)
    for i in range(20):
        reference = rmse(dae, rows[i]) > table.get(labels[i])
        assert bool(anomalous[i]) == bool(reference)
    assert len(kept) == int((~anomalous).sum())


def test_permutation_equivariance(rng):
    torch.manual_seed(1)
    dae = DeepAutoEncoder(5, hidden=(6, 4), bottleneck=2)
    rows = torch.as_tensor(rng.normal(size=(30, 5)), dtype=torch.float32)
    labels = rng.integers(0, 2, size=30)
    table = ThresholdTable({0: 0.9, 1: 0.9})
    daes = {0: dae, 1: dae}
    _, anomalous, _ = filter_rows(rows, labels, daes, table)
    perm = rng.permutation(30)
    _, anomalous_p, _ = filter_rows(rows[torch.as_tensor(perm)], labels[perm], daes, table)
    assert np.array_equal(anomalous_p, anomalous[perm])


def planted_outlier_fixture(seed=0, n_in=90, n_out=10, d=32, rank=6):
    """Low-rank Gaussian inliers plus scattered far-off-manifold outliers."""
    rng = np.random.default_rng(seed)
    basis = rng.normal(size=(rank, d))
    codes = rng.normal(size=(n_in, rank))
    inliers = codes @ basis + rng.normal(scale=0.05, size=(n_in, d))
    outliers = rng.uniform(-6.0, 6.0, size=(n_out, d))
    X = np.concatenate([inliers, outliers]).astype(np.float32)
    truth = np.concatenate([np.zeros(n_in, bool), np.ones(n_out, bool)])
    return X, truth


def test_planted_outliers_filtered_with_high_recall():
    # 90 inliers from a known distribution + 10 far outliers
    X, truth = planted_outlier_fixture()
    labels = np.zeros(len(X), dtype=int)
    filt = DaeFilter(k=3.0, epochs=150, noise_sigma=0.3, seed=0).fit(X, labels)
    flagged = ~filt.predict(X, labels)
    recall = (flagged & truth).sum() / truth.sum()
    assert recall >= 0.9


def test_empty_class_passes_through(rng):
    X = rng.normal(size=(40, 8)).astype(np.float32)
    filt = DaeFilter(epochs=10, seed=0).fit(X, np.zeros(40, dtype=int))
    keep = filt.predict(X[:5], np.full(5, 7))  # class 7 never seen at fit
    assert keep.all()


def test_small_class_warns_but_trains(rng, caplog):
    import logging

    rows = torch.as_tensor(rng.normal(size=(4, 6)), dtype=torch.float32)
    with caplog.at_level(logging.WARNING):
        train_dae(rows, epochs=2, bottleneck=16, hidden=(8, 8))
    assert any("bottleneck" in r.message for r in caplog.records)


def test_shared_dae_mode(rng):
    X = rng.normal(size=(60, 8)).astype(np.float32)
    y = rng.integers(0, 3, size=60)
    filt = DaeFilter(per_class=False, epochs=10, seed=0).fit(X, y)
    assert filt.shared_dae_ is not None
    assert len(set(map(id, filt.daes_.values()))) == 1
    assert len(filt.thresholds_.thresholds) == 3  # thresholds stay per class


def test_defense_descriptor_schedules():
    calls = []

    def collect():
        calls.append(1)
        rng = np.random.default_rng(len(calls))
        return rng.normal(size=(40, 6)).astype(np.float32), np.zeros(40, dtype=int)

    # weights fit once at the calibration epoch, thresholds refreshed every epoch
    adapter = DaeDefense(calibration_epoch=3, epochs=2).build(seed=0)
    for epoch in range(1, 7):
        adapter.maybe_calibrate(epoch, collect)
    assert len(calls) == 4  # fit at 3, refreshes at 4, 5, 6
    assert adapter.ready

    # optional weight retraining on its own interval
    calls.clear()
    adapter = DaeDefense(calibration_epoch=3, recalibrate_every=2,
                         threshold_refresh_every=None, epochs=2).build(seed=0)
    for epoch in range(1, 9):
        adapter.maybe_calibrate(epoch, collect)
    assert len(calls) == 3  # fits at 3, 5, 7

    # default calibration epoch comes from the attack start epoch
    adapter = DaeDefense(epochs=2).build(seed=0, default_calibration_epoch=4)
    assert adapter.calibration_epoch == 4
