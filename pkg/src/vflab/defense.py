"""Server-side anomaly detection: the uploaded concatenated embeddings are grouped
by ground-truth label, a deep auto-encoder is trained per class, and rows whose
reconstruction RMSE exceeds a per-class threshold are dropped from the loss."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from sklearn.base import BaseEstimator

from .nets import DeepAutoEncoder
from .validation import (
    ValidationError,
    as_float_tensor,
    as_label_array,
    check_matching_rows,
)

_MAD_FLOOR = 1e-6


def group_by_label(rows, labels):
    """Row indices per class, order-preserving; their union restores the batch."""
    labels = as_label_array(labels, name="labels")
    check_matching_rows(rows, labels, ("rows", "labels"))
    return {int(c): np.flatnonzero(labels == c) for c in np.unique(labels)}


def rmse(dae, row):
    """Root mean squared reconstruction error, per row (accepts a row or a batch)."""
    x = as_float_tensor(row, "row")
    single = x.dim() == 1
    if single:
        x = x[None]
    with torch.no_grad():
        residual = dae(x) - x
        out = residual.pow(2).mean(dim=1).sqrt()
    return float(out[0]) if single else out.numpy()


def train_dae(rows, epochs=30, bottleneck=16, hidden=(64, 32), noise_sigma=0.1,
              lr=1e-3, batch_size=128, generator=None):
    """Fit one denoising auto-encoder on a class's embedding rows.

    Gaussian input corruption (sigma relative to the rows' std) gives the
    denoising objective; the reconstruction target is always the clean row.
    The training rows may contain poison; robustness to that is the point."""
    x = as_float_tensor(rows, "rows")
    if len(x) == 0:
        raise ValidationError("cannot train a DAE on an empty class")
    dae = DeepAutoEncoder(x.shape[1], hidden=hidden, bottleneck=bottleneck)
    if len(x) < bottleneck:
        import logging

        logging.getLogger(__name__).warning(
            "class has %d rows, fewer than the %d-dim bottleneck; training anyway",
            len(x), bottleneck,
        )
    opt = torch.optim.Adam(dae.parameters(), lr=lr)
    scale = float(x.std()) if len(x) > 1 else 1.0
    for _ in range(epochs):
        perm = torch.randperm(len(x), generator=generator)
        for start in range(0, len(x), batch_size):
            xb = x[perm[start : start + batch_size]]
            noisy = xb + torch.randn(xb.shape, generator=generator) * noise_sigma * scale
            loss = torch.nn.functional.mse_loss(dae(noisy), xb)
            opt.zero_grad()
            loss.backward()
            opt.step()
    dae.eval()
    return dae


@dataclass
class ThresholdTable:
    """Per-class RMSE cutoffs; a row is anomalous when its error exceeds the cutoff."""

    thresholds: dict = field(default_factory=dict)

    def __post_init__(self):
        for c, t in self.thresholds.items():
            if not t > 0:
                raise ValidationError(f"threshold for class {c} must be > 0, got {t}")

    def get(self, label):
        """Cutoff for a class; classes unseen at calibration pass everything."""
        return self.thresholds.get(int(label), np.inf)


def calibrate_thresholds(daes, per_class_rows, k=3.0, rule="mad", percentile=99.0):
    """Per-class cutoffs over calibration RMSEs.

    The default robust rule is median + k * MAD, tolerant of the poisoned rows
    the calibration set may contain; a percentile rule is available instead.
    Degenerate classes (MAD = 0) fall back to median + k * small floor."""
    thresholds = {}
    for c, rows in per_class_rows.items():
        scores = rmse(daes[c], rows)
        if rule == "mad":
            med = float(np.median(scores))
            mad = float(np.median(np.abs(scores - med)))
            if mad == 0.0:
                mad = _MAD_FLOOR
            thresholds[int(c)] = med + k * mad
        elif rule == "percentile":
            thresholds[int(c)] = max(float(np.percentile(scores, percentile)), _MAD_FLOOR)
        else:
            raise ValidationError(f"unknown threshold rule {rule!r}")
    return ThresholdTable(thresholds)


def filter_rows(rows, labels, daes, thresholds, shared_dae=None):
    """(kept_rows, anomaly_mask): a row passes iff its RMSE is <= its class cutoff.

    ``anomaly_mask`` is True for filtered (dropped) rows. Rows of classes with
    no model pass through."""
    x = as_float_tensor(rows, "rows")
    labels = as_label_array(labels, name="labels")
    check_matching_rows(x, labels, ("rows", "labels"))
    anomalous = np.zeros(len(labels), dtype=bool)
    scores = np.zeros(len(labels), dtype=np.float64)
    for c, idx in group_by_label(x, labels).items():
        dae = shared_dae if shared_dae is not None else daes.get(c)
        if dae is None:
            continue
        s = rmse(dae, x[torch.as_tensor(idx)])
        scores[idx] = s
        anomalous[idx] = s > thresholds.get(c)
    return x[torch.as_tensor(~anomalous)], anomalous, scores


class DaeFilter(BaseEstimator):
    """Per-class auto-encoder anomaly filter over concatenated embeddings.

    fit(E, y) trains one DAE per class present (or a single shared DAE) and
    calibrates per-class RMSE cutoffs on the same rows; predict(E, y) returns a
    boolean keep-mask. Not a standard sklearn outlier detector signature: the
    filter is conditioned on the server's ground-truth labels by design.
    """

    def __init__(self, k=3.0, per_class=True, bottleneck=16, hidden=(64, 32),
                 epochs=30, batch_size=128, lr=1e-3, noise_sigma=0.1,
                 threshold_rule="mad", percentile=99.0, seed=0):
        self.k = k
        self.per_class = per_class
        self.bottleneck = bottleneck
        self.hidden = hidden
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.noise_sigma = noise_sigma
        self.threshold_rule = threshold_rule
        self.percentile = percentile
        self.seed = seed

    def fit(self, E, y):
        E = as_float_tensor(E, "E")
        y = as_label_array(y, name="y")
        check_matching_rows(E, y, ("E", "y"))
        torch.manual_seed(self.seed)
        groups = group_by_label(E, y)
        kwargs = dict(epochs=self.epochs, bottleneck=self.bottleneck, hidden=self.hidden,
                      noise_sigma=self.noise_sigma, lr=self.lr, batch_size=self.batch_size)
        self.shared_dae_ = None
        if self.per_class:
            self.daes_ = {c: train_dae(E[torch.as_tensor(idx)], **kwargs)
                          for c, idx in groups.items()}
        else:
            self.shared_dae_ = train_dae(E, **kwargs)
            self.daes_ = {c: self.shared_dae_ for c in groups}
        per_class_rows = {c: E[torch.as_tensor(idx)] for c, idx in groups.items()}
        self.thresholds_ = calibrate_thresholds(
            self.daes_, per_class_rows, k=self.k, rule=self.threshold_rule,
            percentile=self.percentile,
        )
        return self

    def score_rows(self, E, y):
        """Per-row reconstruction RMSE under each row's class model."""
        _, _, scores = filter_rows(E, y, self.daes_, self.thresholds_, self.shared_dae_)
        return scores

    def predict(self, E, y):
        """Keep-mask: True where the row stays in the training loss."""
        _, anomalous, _ = filter_rows(E, y, self.daes_, self.thresholds_, self.shared_dae_)
        return ~anomalous


@dataclass
class DaeDefense:
    """Defense descriptor: attach a DAE filter to the server.

    The auto-encoders are trained once at ``calibration_epoch`` (by default the
    epoch the attack activates, collected before that epoch's first poisoned
    round). The per-class thresholds are then refreshed every
    ``threshold_refresh_every`` epochs against the current embeddings, whose
    scores may contain poison: the median + k*MAD rule tolerates that while
    tracking the drift of honestly-training bottom models. Set
    ``recalibrate_every`` to also retrain the auto-encoder weights on a
    schedule (their training set may then contain poison).

    With ``per_participant`` (the default) each participant's embedding slice
    gets its own per-class auto-encoder and threshold, and a row is dropped if
    any slice exceeds its cutoff; this keeps one participant's training drift
    from widening the detection band of the others. ``per_participant=False``
    scores the full concatenated embedding instead."""

    k: float = 3.0
    per_class: bool = True
    per_participant: bool = True
    calibration_epoch: int | None = None  # default: the attack's start epoch
    threshold_refresh_every: int | None = 1
    # static widening of every cutoff, scaled by (1 + margin)
    threshold_margin: float = 0.0
    # anticipatory allowance: each refreshed cutoff additionally grows by this
    # multiple of the observed median-score drift since the previous refresh,
    # so a slice whose bottom model is still training gets headroom while a
    # static slice keeps a tight cutoff
    drift_allowance: float = 1.5
    recalibrate_every: int | None = None
    bottleneck: int = 16
    hidden: tuple = (64, 32)
    epochs: int = 30
    batch_size: int = 128
    lr: float = 1e-3
    noise_sigma: float = 0.1
    threshold_rule: str = "mad"
    percentile: float = 99.0

    name = "dae"

    def build(self, seed, default_calibration_epoch=6, slices=None):
        return DaeDefenseAdapter(self, seed, default_calibration_epoch, slices)


class DaeDefenseAdapter:
    """Server-side lifecycle: calibrate, refresh thresholds, filter, log masks."""

    def __init__(self, config, seed, default_calibration_epoch=6, slices=None):
        self.config = config
        self.seed = seed
        self.calibration_epoch = (config.calibration_epoch
                                  if config.calibration_epoch is not None
                                  else default_calibration_epoch)
        self.slices = slices
        self.filters_ = None  # list of (start, stop, DaeFilter)
        self.records = []

    @property
    def ready(self):
        return self.filters_ is not None

    def _fit_due(self, epoch):
        cfg = self.config
        if epoch == self.calibration_epoch:
            return True
        return bool(self.filters_ is not None and cfg.recalibrate_every
                    and epoch > self.calibration_epoch
                    and (epoch - self.calibration_epoch) % cfg.recalibrate_every == 0)

    def _refresh_due(self, epoch):
        cfg = self.config
        return bool(self.filters_ is not None and cfg.threshold_refresh_every
                    and epoch > self.calibration_epoch
                    and (epoch - self.calibration_epoch) % cfg.threshold_refresh_every == 0)

    def _slice_ranges(self, width):
        if self.config.per_participant and self.slices:
            return list(self.slices)
        return [(0, width)]

    def _new_filter(self, epoch):
        cfg = self.config
        return DaeFilter(
            k=cfg.k, per_class=cfg.per_class, bottleneck=cfg.bottleneck,
            hidden=cfg.hidden, epochs=cfg.epochs, batch_size=cfg.batch_size,
            lr=cfg.lr, noise_sigma=cfg.noise_sigma, threshold_rule=cfg.threshold_rule,
            percentile=cfg.percentile, seed=self.seed + epoch,
        )

    def _widen(self, table):
        factor = 1.0 + self.config.threshold_margin
        return ThresholdTable({c: t * factor for c, t in table.thresholds.items()})

    def _class_medians(self, filt, per_class_rows):
        return {c: float(np.median(rmse(filt.daes_[c], rows)))
                for c, rows in per_class_rows.items()}

    def maybe_calibrate(self, epoch, collect_fn):
        if self._fit_due(epoch):
            E, y = collect_fn()
            E = as_float_tensor(E, "E")
            groups = group_by_label(E, y)
            self.filters_ = []
            self._medians = []
            for a, b in self._slice_ranges(E.shape[1]):
                filt = self._new_filter(epoch).fit(E[:, a:b], y)
                filt.thresholds_ = self._widen(filt.thresholds_)
                self.filters_.append((a, b, filt))
                per_class = {c: E[torch.as_tensor(idx), a:b] for c, idx in groups.items()}
                self._medians.append(self._class_medians(filt, per_class))
        elif self._refresh_due(epoch):
            E, y = collect_fn()
            E = as_float_tensor(E, "E")
            groups = group_by_label(E, y)
            for s, (a, b, filt) in enumerate(self.filters_):
                per_class = {c: E[torch.as_tensor(idx), a:b] for c, idx in groups.items()
                             if c in filt.daes_}
                base = calibrate_thresholds(
                    filt.daes_, per_class, k=self.config.k,
                    rule=self.config.threshold_rule, percentile=self.config.percentile,
                )
                medians = self._class_medians(filt, per_class)
                gain = self.config.drift_allowance
                widened = {
                    c: t + gain * max(0.0, medians[c] - self._medians[s].get(c, medians[c]))
                    for c, t in base.thresholds.items()
                }
                filt.thresholds_ = self._widen(ThresholdTable(widened))
                self._medians[s] = medians

    def filter_batch(self, z, labels, indices, epoch):
        z = as_float_tensor(z, "z")
        anomalous = np.zeros(len(labels), dtype=bool)
        # log the most anomalous slice per row: its score and cutoff
        worst_ratio = np.full(len(labels), -np.inf)
        worst_score = np.zeros(len(labels))
        worst_threshold = np.zeros(len(labels))
        for a, b, filt in self.filters_:
            _, slice_anomalous, scores = filter_rows(
                z[:, a:b], labels, filt.daes_, filt.thresholds_, filt.shared_dae_)
            anomalous |= slice_anomalous
            cutoffs = np.array([filt.thresholds_.get(c) for c in labels])
            ratio = scores / np.where(np.isfinite(cutoffs), cutoffs, np.inf)
            better = ratio > worst_ratio
            worst_ratio[better] = ratio[better]
            worst_score[better] = scores[better]
            worst_threshold[better] = cutoffs[better]
        for i, sample in enumerate(indices):
            self.records.append({
                "epoch": int(epoch),
                "sample_index": int(sample),
                "class": int(labels[i]),
                "rmse": float(worst_score[i]),
                "threshold": float(worst_threshold[i]),
                "filtered": bool(anomalous[i]),
            })
        return ~anomalous
