"""Experiment orchestration: declarative specs, single runs, sweeps, resumable
per-run CSV persistence, and deterministic result rows."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .attacks import LraAttack, PganAttack, VillainAttack
from .datasets import ingest_dataset
from .defense import DaeDefense
from .nets import snapshot_module
from .protocol import VflClassifier
from .surrogate import SurrogateClassifier
from .validation import ConfigurationError, ValidationError

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1

RESULT_COLUMNS = [
    "schema_version", "kind", "run_id", "spec_hash", "seed", "dataset",
    "train_subset", "n_participants", "adversary", "split_spec", "embedding_dim",
    "bottom_profile", "top_profile", "epochs", "batch_size", "lr", "momentum",
    "attack", "attack_rho", "attack_known_labels", "attack_lambda_gan",
    "attack_lambda_r", "attack_beta", "attack_start_epoch", "defense", "defense_k",
    "defense_calibration_epoch", "sweep_axis", "sweep_value", "epoch", "train_loss",
    "f1", "top1_accuracy", "f1_attacked", "top1_accuracy_attacked", "final_f1",
    "final_accuracy", "final_f1_attacked", "final_accuracy_attacked",
    "surrogate_train_acc", "surrogate_test_acc", "mean_perturbation_l1",
    "filter_precision", "filter_recall",
]

_PROFILES = {
    # dataset -> (bottom, top, default epochs)
    "mnist": ("fcnn3", "fcnn3", 50),
    "cifar10": ("resnet18", "fcnn3", 100),
    "cifar100": ("resnet18", "fcnn4", 100),
    "digits": ("fcnn3", "fcnn3", 20),
    "synthetic": ("fcnn3", "fcnn3", 20),
}

_ATTACKS = {"pgan": PganAttack, "lra": LraAttack, "villain": VillainAttack}
_DEFENSES = {"dae": DaeDefense}

SWEEP_AXES = ("poison_fraction", "known_labels", "adversary_feature_height", "lambda_grid")


@dataclass
class ExperimentSpec:
    """Declarative description of one experiment (possibly swept and repeated).

    Every run in a sweep differs only along the sweep axis; seeds are recorded
    in the output rows. ``attack``/``defense`` name a descriptor, with extra
    constructor arguments in the companion ``*_params`` dicts."""

    dataset: str = "synthetic"
    cache_dir: str | None = None
    download: bool = True
    train_subset: int | None = None
    n_participants: int = 2
    split_spec: object = "equal"
    adversary: int = 0
    embedding_dim: int = 64
    hidden: int = 256
    bottom_profile: str | None = None
    top_profile: str | None = None
    epochs: int | None = None
    batch_size: int = 128
    lr: float = 0.01
    momentum: float = 0.9
    attack: str | None = None
    attack_params: dict = field(default_factory=dict)
    defense: str | None = None
    defense_params: dict = field(default_factory=dict)
    freeze_bottoms_after_attack: bool = False
    eval_every: int = 1
    stage: str = "full"  # "full" | "surrogate" (stop after stage 1, report accuracy)
    seeds: tuple = (1, 2, 3)
    sweep_axis: str | None = None
    sweep_grid: tuple | None = None
    output_dir: str | None = None
    save_checkpoints: bool = False

    def resolved(self):
        """Fill dataset-dependent defaults (architecture profiles, epoch budget)."""
        base = self.dataset.split(":", 1)[0].lower()
        if base not in _PROFILES:
            raise ValidationError(f"unknown dataset {self.dataset!r}")
        bottom, top, epochs = _PROFILES[base]
        return replace(
            self,
            bottom_profile=self.bottom_profile or bottom,
            top_profile=self.top_profile or top,
            epochs=self.epochs if self.epochs is not None else epochs,
            seeds=tuple(int(s) for s in self.seeds),
        )

    def attack_descriptor(self):
        if self.attack is None:
            return None
        if self.attack not in _ATTACKS:
            raise ConfigurationError(f"unknown attack {self.attack!r}")
        return _ATTACKS[self.attack](**self.attack_params)

    def defense_descriptor(self):
        if self.defense is None:
            return None
        if self.defense not in _DEFENSES:
            raise ConfigurationError(f"unknown defense {self.defense!r}")
        return _DEFENSES[self.defense](**self.defense_params)


def spec_hash(spec):
    """Stable identity of the result-determining configuration (paths excluded)."""
    payload = {
        k: v
        for k, v in vars(spec).items()
        if k not in ("cache_dir", "download", "output_dir", "seeds", "save_checkpoints")
    }
    blob = json.dumps(payload, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def _run_id(spec, seed):
    return f"{spec_hash(spec)[:10]}-s{seed}"


def _base_row(spec, seed, attack_desc, defense_desc):
    row = {c: "" for c in RESULT_COLUMNS}
    row.update({
        "schema_version": SCHEMA_VERSION,
        "run_id": _run_id(spec, seed),
        "spec_hash": spec_hash(spec),
        "seed": seed,
        "dataset": spec.dataset,
        "train_subset": spec.train_subset if spec.train_subset is not None else "",
        "n_participants": spec.n_participants,
        "adversary": spec.adversary if attack_desc is not None else "",
        "split_spec": json.dumps(spec.split_spec) if not isinstance(spec.split_spec, str)
        else spec.split_spec,
        "embedding_dim": spec.embedding_dim,
        "bottom_profile": spec.bottom_profile,
        "top_profile": spec.top_profile,
        "epochs": spec.epochs,
        "batch_size": spec.batch_size,
        "lr": spec.lr,
        "momentum": spec.momentum,
        "attack": spec.attack or "",
        "defense": spec.defense or "",
        "sweep_axis": spec.sweep_axis or "",
        "sweep_value": "",
    })
    if attack_desc is not None:
        row["attack_rho"] = getattr(attack_desc, "rho", "")
        row["attack_known_labels"] = getattr(attack_desc, "known_labels", "")
        row["attack_lambda_gan"] = getattr(attack_desc, "lambda_gan", "")
        row["attack_lambda_r"] = getattr(attack_desc, "lambda_r", "")
        row["attack_beta"] = getattr(attack_desc, "beta", "")
        row["attack_start_epoch"] = attack_desc.start_epoch
    if defense_desc is not None:
        row["defense_k"] = defense_desc.k
        row["defense_calibration_epoch"] = defense_desc.calibration_epoch
    return row


def _filter_quality(records, poisoned_indices):
    """Precision/recall of the defense mask against true poison membership,
    aggregated over every filtered round."""
    poisoned = set(int(i) for i in poisoned_indices)
    tp = fp = fn = 0
    for rec in records:
        is_poison = rec["sample_index"] in poisoned
        if rec["filtered"]:
            tp += is_poison
            fp += not is_poison
        elif is_poison:
            fn += 1
    precision = tp / (tp + fp) if (tp + fp) else None
    recall = tp / (tp + fn) if (tp + fn) else None
    return precision, recall


def _build_classifier(spec, seed, data, attack_desc, defense_desc):
    return VflClassifier(
        n_participants=spec.n_participants,
        split_spec=spec.split_spec,
        adversary=spec.adversary if attack_desc is not None else None,
        attack=attack_desc,
        defense=defense_desc,
        embedding_dim=spec.embedding_dim,
        hidden=spec.hidden,
        bottom_profile=spec.bottom_profile,
        top_profile=spec.top_profile,
        epochs=spec.epochs,
        batch_size=spec.batch_size,
        lr=spec.lr,
        momentum=spec.momentum,
        value_range=data.value_range,
        flip_safe=data.flip_safe,
        freeze_bottoms_after_attack=spec.freeze_bottoms_after_attack,
        eval_every=spec.eval_every,
        checkpoint_dir=(str(Path(spec.output_dir) / "checkpoints")
                        if spec.save_checkpoints and spec.output_dir else None),
        run_id=_run_id(spec, seed),
        seed=seed,
    )


def _surrogate_only_run(spec, seed, data, attack_desc, rows, base):
    """Table-1 mode: VFL warmup to the snapshot epoch, then stage 1 only."""
    warmup = replace(spec, attack=None, defense=None, epochs=attack_desc.snapshot_epoch)
    clf = _build_classifier(warmup, seed, data, None, None)
    clf.fit(data.train_X, data.train_y, eval_set=(data.test_X, data.test_y))
    adversary = clf.participants_[spec.adversary]
    from .oracle import KnownLabelOracle

    oracle = KnownLabelOracle(data.train_y, attack_desc.known_labels, seed=seed + 7)
    known_idx, known_y = oracle.reveal()
    local_train = adversary.partition.extract(torch.as_tensor(data.train_X))
    local_test = adversary.partition.extract(torch.as_tensor(data.test_X))
    unlabeled = np.setdiff1d(np.arange(len(data.train_y)), known_idx)
    surrogate = SurrogateClassifier(
        backbone=snapshot_module(adversary.bottom), n_classes=data.n_classes,
        tau=attack_desc.tau, mu=attack_desc.mu,
        labeled_batch_size=attack_desc.labeled_batch_size,
        lambda_u=attack_desc.lambda_u, steps=attack_desc.surrogate_steps,
        lr=attack_desc.surrogate_lr, value_range=data.value_range,
        flip_safe=data.flip_safe, seed=seed + 11,
    ).fit(local_train[torch.as_tensor(known_idx)], known_y,
          local_train[torch.as_tensor(unlabeled)])
    summary = dict(base)
    summary.update({
        "kind": "summary",
        "final_f1": clf.metrics_.f1,
        "final_accuracy": clf.metrics_.top1_accuracy,
        "surrogate_train_acc": surrogate.score(local_train, data.train_y),
        "surrogate_test_acc": surrogate.score(local_test, data.test_y),
    })
    rows.append(summary)
    return rows


def single_run(spec, seed, data=None):
    """Execute one (spec, seed) run and return its result rows."""
    spec = spec.resolved()
    if data is None:
        data = ingest_dataset(spec.dataset, spec.cache_dir, spec.download)
        data = data.subset(spec.train_subset, seed=0)
    attack_desc = spec.attack_descriptor()
    defense_desc = spec.defense_descriptor()
    base = _base_row(spec, seed, attack_desc, defense_desc)
    rows = []

    if spec.stage == "surrogate":
        if attack_desc is None or spec.attack != "pgan":
            raise ConfigurationError("stage='surrogate' requires attack='pgan'")
        return _surrogate_only_run(spec, seed, data, attack_desc, rows, base)

    clf = _build_classifier(spec, seed, data, attack_desc, defense_desc)
    clf.fit(data.train_X, data.train_y, eval_set=(data.test_X, data.test_y))

    for entry in clf.history_:
        row = dict(base)
        row.update({
            "kind": "epoch",
            "epoch": entry["epoch"],
            "train_loss": entry.get("train_loss", ""),
            "f1": entry.get("f1", ""),
            "top1_accuracy": entry.get("top1_accuracy", ""),
            "f1_attacked": entry.get("f1_attacked", ""),
            "top1_accuracy_attacked": entry.get("top1_accuracy_attacked", ""),
        })
        rows.append(row)

    summary = dict(base)
    summary.update({
        "kind": "summary",
        "final_f1": clf.metrics_.f1,
        "final_accuracy": clf.metrics_.top1_accuracy,
    })
    if clf.attacked_metrics_ is not None:
        summary["final_f1_attacked"] = clf.attacked_metrics_.f1
        summary["final_accuracy_attacked"] = clf.attacked_metrics_.top1_accuracy
    adapter = clf.attack_adapter_
    if adapter is not None:
        if adapter.mean_perturbation_ is not None:
            summary["mean_perturbation_l1"] = adapter.mean_perturbation_
        if getattr(adapter, "surrogate_", None) is not None:
            adversary = clf.participants_[spec.adversary]
            local_train = adversary.partition.extract(torch.as_tensor(data.train_X))
            local_test = adversary.partition.extract(torch.as_tensor(data.test_X))
            adapter.record_surrogate_accuracy((local_train, data.train_y),
                                              (local_test, data.test_y))
            summary["surrogate_train_acc"] = adapter.surrogate_train_accuracy_
            summary["surrogate_test_acc"] = adapter.surrogate_test_accuracy_
    defense_adapter = clf.server_.defense
    if defense_adapter is not None and adapter is not None:
        precision, recall = _filter_quality(defense_adapter.records,
                                            adapter.poisoned_indices_)
        summary["filter_precision"] = precision if precision is not None else ""
        summary["filter_recall"] = recall if recall is not None else ""
    rows.append(summary)

    if spec.output_dir and defense_adapter is not None:
        _write_anomaly_log(spec, seed, defense_adapter.records)
    return rows


def _write_anomaly_log(spec, seed, records):
    out = Path(spec.output_dir) / "anomalies"
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{_run_id(spec, seed)}.csv"
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["run_id", "epoch", "sample_index", "class", "rmse",
                         "threshold", "filtered"])
        rid = _run_id(spec, seed)
        for rec in records:
            writer.writerow([rid, rec["epoch"], rec["sample_index"], rec["class"],
                             f"{rec['rmse']:.8g}", f"{rec['threshold']:.8g}",
                             int(rec["filtered"])])


def _run_file(spec, seed):
    return Path(spec.output_dir) / "runs" / f"{_run_id(spec, seed)}.csv"


def write_rows(path, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=RESULT_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row.get(k, "")) for k in RESULT_COLUMNS})


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.10g}"
    return v


def read_rows(path):
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def _is_complete(path):
    if not path.is_file():
        return False
    try:
        return any(r.get("kind") == "summary" for r in read_rows(path))
    except (OSError, csv.Error):
        return False


def run_experiment(spec):
    """Run every seed of a spec, persisting rows incrementally.

    Completed (spec-hash, seed) pairs found in the output directory are loaded
    back instead of rerun, so partially completed sweeps resume cheaply."""
    spec = spec.resolved()
    data = ingest_dataset(spec.dataset, spec.cache_dir, spec.download)
    data = data.subset(spec.train_subset, seed=0)
    all_rows = []
    for seed in spec.seeds:
        if spec.output_dir:
            path = _run_file(spec, seed)
            if _is_complete(path):
                logger.info("skipping completed run %s", path.stem)
                all_rows.extend(read_rows(path))
                continue
        rows = single_run(spec, seed, data=data)
        if spec.output_dir:
            write_rows(_run_file(spec, seed), rows)
            rows = read_rows(_run_file(spec, seed))
        all_rows.extend(rows)
    return all_rows


def _apply_axis(spec, axis, value, image_height=None):
    if axis == "poison_fraction":
        return replace(spec, attack_params={**spec.attack_params, "rho": float(value)},
                       sweep_axis=axis, sweep_grid=None)
    if axis == "known_labels":
        return replace(spec,
                       attack_params={**spec.attack_params, "known_labels": int(value)},
                       sweep_axis=axis, sweep_grid=None)
    if axis == "adversary_feature_height":
        if image_height is None:
            raise ConfigurationError("adversary_feature_height needs image data")
        height = int(value)
        if not 0 < height < image_height:
            raise ValidationError(f"band height {height} outside (0, {image_height})")
        return replace(spec, split_spec=[height, image_height - height], adversary=0,
                       sweep_axis=axis, sweep_grid=None)
    if axis == "lambda_grid":
        lam_gan, lam_r = value
        return replace(
            spec,
            attack_params={**spec.attack_params, "lambda_gan": float(lam_gan),
                           "lambda_r": float(lam_r)},
            sweep_axis=axis, sweep_grid=None,
        )
    raise ValidationError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")


def sweep(spec, axis, grid):
    """One run per grid point per seed; returns (all_rows, aggregated_table).

    The aggregate holds mean and std of the final F1/accuracy per grid point."""
    spec = spec.resolved()
    image_height = None
    if axis == "adversary_feature_height":
        probe = ingest_dataset(spec.dataset, spec.cache_dir, spec.download)
        if len(probe.feature_shape) != 3:
            raise ConfigurationError("adversary_feature_height sweep needs image data")
        image_height = probe.feature_shape[1]
    all_rows = []
    table = []
    for value in grid:
        point_spec = _apply_axis(spec, axis, value, image_height)
        rows = run_experiment(point_spec)
        for row in rows:
            row["sweep_axis"] = axis
            row["sweep_value"] = _fmt(value if not isinstance(value, (tuple, list))
                                      else json.dumps(list(value)))
        all_rows.extend(rows)
        finals = [float(r["final_f1"]) for r in rows
                  if r.get("kind") == "summary" and r.get("final_f1") not in ("", None)]
        accs = [float(r["final_accuracy"]) for r in rows
                if r.get("kind") == "summary" and r.get("final_accuracy") not in ("", None)]
        table.append({
            "sweep_axis": axis,
            "sweep_value": value if not isinstance(value, (tuple, list)) else json.dumps(list(value)),
            "n_runs": len(finals),
            "f1_mean": float(np.mean(finals)) if finals else "",
            "f1_std": float(np.std(finals)) if finals else "",
            "accuracy_mean": float(np.mean(accs)) if accs else "",
            "accuracy_std": float(np.std(accs)) if accs else "",
        })
    return all_rows, table
