"""vflab: a vertical federated learning attack/defense laboratory.

Simulates split training across feature-partitioned participants, implements a
two-stage GAN-based data poisoning attack with label-replacement and embedding
trigger baselines, and defends with server-side per-class auto-encoder anomaly
filtering. Components follow the sklearn estimator idiom (fit/predict/transform)
and compose through the experiment harness and CLI.
"""

from .attacks import LraAttack, PganAttack, VillainAttack
from .baselines import lra_poison, villain_poison, villain_trigger
from .datasets import Dataset, ingest_dataset, make_synthetic
from .defense import DaeDefense, DaeFilter, ThresholdTable, calibrate_thresholds, group_by_label, rmse
from .experiment import ExperimentSpec, run_experiment, single_run, sweep
from .metrics import Metrics, evaluate_predictions, macro_f1, top1_accuracy
from .oracle import KnownLabelOracle
from .partition import FeaturePartition, partition_features
from .pgan import PganPerturber, adv_loss, attack_objective_check, gan_loss, perturb, poison_batch
from .protocol import Participant, Server, VflClassifier, backward_round, forward_round
from .report import emit_report
from .surrogate import SurrogateClassifier, init_surrogate, supervised_loss, train_surrogate, unsupervised_loss
from .validation import (
    ConfigurationError,
    DatasetError,
    DivergenceError,
    ProtocolError,
    ValidationError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError", "DatasetError", "Dataset", "DaeDefense", "DaeFilter",
    "DivergenceError", "ExperimentSpec", "FeaturePartition", "KnownLabelOracle",
    "LraAttack", "Metrics", "Participant", "PganAttack", "PganPerturber",
    "ProtocolError", "Server", "SurrogateClassifier", "ThresholdTable",
    "ValidationError", "VflClassifier", "VillainAttack", "adv_loss",
    "attack_objective_check", "backward_round", "calibrate_thresholds",
    "emit_report", "evaluate_predictions", "forward_round", "gan_loss",
    "group_by_label", "ingest_dataset", "init_surrogate", "lra_poison",
    "macro_f1", "make_synthetic", "partition_features", "perturb",
    "poison_batch", "rmse", "run_experiment", "single_run", "supervised_loss",
    "sweep", "top1_accuracy", "train_surrogate", "unsupervised_loss",
    "villain_poison", "villain_trigger",
]
