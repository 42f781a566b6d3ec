"""Split-training protocol simulation: participants upload embeddings, the server
completes the forward pass against its labels, and per-slice gradients flow back.

Everything runs in one process with explicit message objects (EmbeddingBatch up,
gradient slices down); participants never see each other's features, embeddings,
or the server's labels.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin

from . import checkpoint as ckpt
from .metrics import Metrics, macro_f1, top1_accuracy
from .nets import build_bottom, build_top
from .oracle import KnownLabelOracle
from .partition import partition_features
from .validation import (
    ConfigurationError,
    DivergenceError,
    ProtocolError,
    as_float_tensor,
    as_label_array,
    check_matching_rows,
)


@dataclass
class EmbeddingBatch:
    """Per-participant bottom-model outputs for one aligned batch of samples."""

    sample_indices: np.ndarray
    embeddings: dict  # participant_id -> (batch, d_i) tensor, in participant order

    def concat(self):
        mats = list(self.embeddings.values())
        n = len(self.sample_indices)
        for pid, m in self.embeddings.items():
            if m.shape[0] != n:
                raise ProtocolError(
                    f"participant {pid} returned {m.shape[0]} rows for a batch of {n}"
                )
        return torch.cat(mats, dim=1)


class Participant:
    """One party: a local feature slice, a bottom model, and nothing else.

    The server addresses it with sample indices only; it answers with embedding
    messages and consumes the gradient of the loss w.r.t. its own embedding.
    """

    def __init__(self, partition, bottom_model, local_features, role="honest",
                 lr=0.01, momentum=0.9):
        self.partition = partition
        self.participant_id = partition.participant_id
        self.bottom = bottom_model
        self.local = local_features
        self.role = role
        self.trainable = True
        self.attack = None  # adapter installed on the malicious participant only
        self.optimizer = torch.optim.SGD(bottom_model.parameters(), lr=lr, momentum=momentum)
        self._pending = None

    @property
    def is_malicious(self):
        return self.role == "malicious"

    def embed(self, indices, mode="train", epoch=0):
        """Compute this participant's embedding message for the given sample indices.

        ``train`` keeps the local autograd graph for the gradient message that
        follows; ``collect`` and ``eval`` do not. The malicious participant
        perturbs its upload in train/collect modes once its attack is active;
        evaluation uploads are always clean.
        """
        x = self.local[indices]
        poison = self.attack is not None and mode in ("train", "collect")
        if poison:
            x = self.attack.poison_features(x, indices, epoch)
        if mode == "train":
            e = self.bottom(x)
            self._pending = e
            message = e.detach()
        else:
            with torch.no_grad():
                message = self.bottom(x)
        if poison:
            message = self.attack.poison_embeddings(message, indices, epoch)
        return message

    def apply_gradient(self, grad):
        """Backpropagate the server's gradient slice into the bottom model and step."""
        if self._pending is None:
            raise ProtocolError("apply_gradient called with no pending forward pass")
        if grad.shape != self._pending.shape:
            raise ProtocolError(
                f"gradient shape {tuple(grad.shape)} does not match embedding "
                f"{tuple(self._pending.shape)}"
            )
        self.optimizer.zero_grad()
        self._pending.backward(gradient=grad)
        if self.trainable:
            self.optimizer.step()
        self._pending = None


class Server:
    """Label holder and top-model owner; concatenates uploads and drives batching."""

    def __init__(self, top_model, labels, expected_input_dim, lr=0.01, momentum=0.9,
                 defense=None):
        self.top = top_model
        self.labels = torch.as_tensor(labels, dtype=torch.long)
        self.expected_input_dim = expected_input_dim
        self.defense = defense
        self.optimizer = torch.optim.SGD(top_model.parameters(), lr=lr, momentum=momentum)
        self._pending_input = None
        self._pending_indices = None

    def forward(self, batch, mode="train"):
        z = batch.concat()
        if z.shape[1] != self.expected_input_dim:
            raise ConfigurationError(
                f"concatenated embedding dim {z.shape[1]} does not match top-model "
                f"input {self.expected_input_dim}"
            )
        if mode == "train":
            z = z.requires_grad_(True)
            self._pending_input = z
            self._pending_indices = batch.sample_indices
            return self.top(z)
        with torch.no_grad():
            return self.top(z)


def forward_round(participants, server, batch_indices, mode="train", epoch=0):
    """One upload/concatenate/forward round; returns the top-model logits."""
    batch_indices = np.asarray(batch_indices)
    batch = EmbeddingBatch(
        sample_indices=batch_indices,
        embeddings={p.participant_id: p.embed(batch_indices, mode, epoch) for p in participants},
    )
    return server.forward(batch, mode=mode)


def backward_round(server, participants, logits, labels, epoch=0,
                   min_kept_fraction=0.2):
    """Cross-entropy on the server, defense filtering, and gradient messages back.

    Returns (loss_value, kept_mask); loss is None when the defense left fewer
    than ``min_kept_fraction`` of the batch (no model moves on such a round:
    tiny filtered remnants produce destabilizing high-variance updates).
    """
    z = server._pending_input
    indices = server._pending_indices
    if z is None:
        raise ProtocolError("backward_round called with no pending forward round")
    labels = torch.as_tensor(labels, dtype=torch.long)
    if len(labels) != z.shape[0]:
        raise ProtocolError("label batch does not match the pending forward batch")

    keep = np.ones(len(labels), dtype=bool)
    if server.defense is not None and server.defense.ready:
        keep = server.defense.filter_batch(
            z.detach().numpy(), labels.numpy(), indices, epoch
        )
    server._pending_input = None
    server._pending_indices = None

    if keep.mean() < min_kept_fraction:
        for p in participants:
            p._pending = None
        return None, keep

    keep_t = torch.as_tensor(keep)
    loss = torch.nn.functional.cross_entropy(logits[keep_t], labels[keep_t])
    server.optimizer.zero_grad()
    loss.backward()
    server.optimizer.step()

    grad = z.grad
    offset = 0
    for p in participants:
        width = p._pending.shape[1]
        p.apply_gradient(grad[:, offset : offset + width])
        offset += width
    return float(loss.detach()), keep


@dataclass
class AdversaryView:
    """Everything the malicious participant legitimately observes: its own slice,
    its own bottom model, training parameters, and the oracle-revealed labels."""

    partition: object
    bottom: torch.nn.Module
    local_features: torch.Tensor
    n_classes: int
    value_range: tuple
    flip_safe: bool
    run_seed: int
    known_label_indices: np.ndarray = None
    known_labels: np.ndarray = None

    @property
    def n_train(self):
        return len(self.local_features)

    @property
    def local_shape(self):
        return tuple(self.local_features.shape[1:])


class VflClassifier(BaseEstimator, ClassifierMixin):
    """Vertical federated learning simulator with optional attack and defense.

    Parameters
    ----------
    n_participants : number of local parties holding disjoint feature shares.
    split_spec : "equal", a width list, or explicit (start, stop) ranges.
    adversary : index of the malicious participant; required when ``attack`` is set.
    attack : attack descriptor (see ``vflab.attacks``) or None.
    defense : defense descriptor (see ``vflab.defense``) or None.
    embedding_dim : per-participant bottom-model output width.
    bottom_profile / top_profile : "fcnn3", "resnet18" (bottom), "fcnn4" (top).
    epochs, batch_size, lr, momentum : momentum-SGD training schedule.
    value_range, flip_safe : feature normalization metadata, forwarded to attacks.
    freeze_bottoms_after_attack : stop bottom-model updates once the attack starts.
    eval_every : epochs between history entries when an eval set is provided.
    checkpoint_dir / run_id : where to persist protocol checkpoints, if anywhere.
    seed : controls initialization, batching, and every attack/defense RNG.
    """

    def __init__(self, n_participants=2, split_spec="equal", adversary=None,
                 attack=None, defense=None, embedding_dim=64, hidden=256,
                 bottom_profile="fcnn3", top_profile="fcnn3", epochs=10,
                 batch_size=128, lr=0.01, momentum=0.9, value_range=(0.0, 1.0),
                 flip_safe=False, freeze_bottoms_after_attack=False, eval_every=1,
                 checkpoint_dir=None, run_id=None, seed=0):
        self.n_participants = n_participants
        self.split_spec = split_spec
        self.adversary = adversary
        self.attack = attack
        self.defense = defense
        self.embedding_dim = embedding_dim
        self.hidden = hidden
        self.bottom_profile = bottom_profile
        self.top_profile = top_profile
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.momentum = momentum
        self.value_range = value_range
        self.flip_safe = flip_safe
        self.freeze_bottoms_after_attack = freeze_bottoms_after_attack
        self.eval_every = eval_every
        self.checkpoint_dir = checkpoint_dir
        self.run_id = run_id
        self.seed = seed

    # ------------------------------------------------------------------ setup
    def _build(self, X, y):
        feature_shape = tuple(X.shape[1:])
        partitions = partition_features(feature_shape, self.n_participants, self.split_spec)
        if self.attack is not None and self.adversary is None:
            raise ConfigurationError("attack configured but no malicious participant set")
        if self.adversary is not None and not 0 <= self.adversary < self.n_participants:
            raise ConfigurationError(f"adversary index {self.adversary} out of range")

        participants = []
        for part in partitions:
            role = "malicious" if part.participant_id == self.adversary else "honest"
            bottom = build_bottom(self.bottom_profile, part.local_shape(feature_shape),
                                  self.embedding_dim, hidden=self.hidden)
            local = part.extract(X).clone()
            participants.append(Participant(part, bottom, local, role=role,
                                            lr=self.lr, momentum=self.momentum))

        top_in = self.embedding_dim * self.n_participants
        top = build_top(self.top_profile, top_in, self.n_classes_, hidden=self.hidden)
        defense_adapter = None
        if self.defense is not None:
            default_cal = getattr(self.attack, "start_epoch", None) or 6
            slices = [(i * self.embedding_dim, (i + 1) * self.embedding_dim)
                      for i in range(self.n_participants)]
            defense_adapter = self.defense.build(
                self.seed, default_calibration_epoch=default_cal, slices=slices)
        server = Server(top, y, top_in, lr=self.lr, momentum=self.momentum,
                        defense=defense_adapter)
        return partitions, participants, server

    def _adversary_view(self, participant, y):
        known_idx = known_labels = None
        quantity = getattr(self.attack, "known_labels", None)
        if quantity:
            oracle = KnownLabelOracle(y, quantity, seed=self.seed + 7)
            known_idx, known_labels = oracle.reveal()
        return AdversaryView(
            partition=participant.partition,
            bottom=participant.bottom,
            local_features=participant.local,
            n_classes=self.n_classes_,
            value_range=tuple(self.value_range),
            flip_safe=self.flip_safe,
            run_seed=self.seed,
            known_label_indices=known_idx,
            known_labels=known_labels,
        )

    def _collect_embeddings(self, participants, server, n, epoch):
        """Server-side pass gathering concatenated embeddings for defense training."""
        chunks = []
        for start in range(0, n, 512):
            idx = np.arange(start, min(start + 512, n))
            batch = EmbeddingBatch(
                sample_indices=idx,
                embeddings={p.participant_id: p.embed(idx, "collect", epoch)
                            for p in participants},
            )
            chunks.append(batch.concat().numpy())
        return np.concatenate(chunks, axis=0)

    # ------------------------------------------------------------------- fit
    def fit(self, X, y, eval_set=None):
        start_time = time.time()
        X = as_float_tensor(X)
        y = as_label_array(y)
        check_matching_rows(X, y)
        self.classes_ = np.unique(y)
        self.n_classes_ = len(self.classes_)

        torch.manual_seed(self.seed)
        batch_rng = np.random.default_rng(self.seed)
        self.partitions_, participants, server = self._build(X, y)
        self.participants_ = participants
        self.server_ = server

        adapter = None
        if self.attack is not None:
            malicious = participants[self.adversary]
            view = self._adversary_view(malicious, y)
            adapter = self.attack.build(view)
            malicious.attack = adapter
        self.attack_adapter_ = adapter

        n = len(y)
        labels_t = torch.as_tensor(y, dtype=torch.long)
        history = []
        for epoch in range(1, self.epochs + 1):
            # defense first: the initial calibration at the attack-start epoch
            # collects embeddings before that epoch's poisoning begins
            if server.defense is not None:
                server.defense.maybe_calibrate(
                    epoch,
                    lambda: (self._collect_embeddings(participants, server, n, epoch), y),
                )
            if adapter is not None:
                adapter.on_epoch_start(epoch)
                if adapter.active(epoch):
                    if self.freeze_bottoms_after_attack:
                        for p in participants:
                            p.trainable = False
                    elif getattr(self.attack, "freeze_own_bottom", False):
                        participants[self.adversary].trainable = False
            epoch_losses = []
            order = batch_rng.permutation(n)
            for start in range(0, n, self.batch_size):
                idx = order[start : start + self.batch_size]
                logits = forward_round(participants, server, idx, "train", epoch)
                loss, _ = backward_round(server, participants, logits, labels_t[idx], epoch)
                if loss is not None:
                    if not np.isfinite(loss):
                        raise DivergenceError(f"non-finite training loss at epoch {epoch}")
                    epoch_losses.append(loss)
            entry = {"epoch": epoch,
                     "train_loss": float(np.mean(epoch_losses)) if epoch_losses else None}
            if eval_set is not None and (epoch % self.eval_every == 0 or epoch == self.epochs):
                m = self.evaluate(*eval_set)
                entry.update({"f1": m.f1, "top1_accuracy": m.top1_accuracy})
                if adapter is not None and adapter.armed:
                    ma = self.evaluate(*eval_set, attacked=True)
                    entry.update({"f1_attacked": ma.f1,
                                  "top1_accuracy_attacked": ma.top1_accuracy})
            history.append(entry)
            self._maybe_checkpoint(epoch, participants, server)

        self.history_ = history
        eval_pair = eval_set if eval_set is not None else (X.numpy(), y)
        final = self.evaluate(*eval_pair)
        self.metrics_ = Metrics(final.f1, final.top1_accuracy, history=history)
        self.attacked_metrics_ = None
        if adapter is not None and adapter.armed:
            self.attacked_metrics_ = self.evaluate(*eval_pair, attacked=True)
        self.fit_seconds_ = time.time() - start_time
        return self

    def _maybe_checkpoint(self, epoch, participants, server):
        if self.checkpoint_dir is None:
            return
        snapshot_epoch = getattr(self.attack, "snapshot_epoch", None)
        if epoch not in (snapshot_epoch, self.epochs):
            return
        run_id = self.run_id or f"seed{self.seed}"
        for p in participants:
            ckpt.save_checkpoint(self.checkpoint_dir, run_id, epoch, p.participant_id,
                                 p.bottom.state_dict())
        ckpt.save_checkpoint(self.checkpoint_dir, run_id, epoch, "server",
                             server.top.state_dict())

    # -------------------------------------------------------------- inference
    def _predict_logits(self, X, attacked=False):
        X = as_float_tensor(X)
        n = len(X)
        outs = []
        for start in range(0, n, 512):
            idx = np.arange(start, min(start + 512, n))
            embeddings = {}
            for p in self.participants_:
                x_local = p.partition.extract(X)[idx]
                adapter = p.attack if (attacked and p.is_malicious) else None
                if adapter is not None:
                    x_local = adapter.poison_eval_features(x_local, idx, n)
                with torch.no_grad():
                    e = p.bottom(x_local)
                if adapter is not None:
                    e = adapter.poison_eval_embeddings(e, idx, n)
                embeddings[p.participant_id] = e
            batch = EmbeddingBatch(sample_indices=idx, embeddings=embeddings)
            outs.append(self.server_.forward(batch, mode="eval"))
        return torch.cat(outs, dim=0)

    def predict(self, X, attacked=False):
        logits = self._predict_logits(X, attacked=attacked)
        return self.classes_[logits.argmax(dim=1).numpy()]

    def evaluate(self, X, y, attacked=False):
        """Macro-F1 and top-1 accuracy over a clean test set.

        With ``attacked=True`` the malicious participant keeps poisoning its
        share of the uploads (its configured fraction of rows) while the model
        is scored; this is the poisoned-model metric the attack objective
        compares against the clean run."""
        y = as_label_array(y)
        pred = self.predict(X, attacked=attacked)
        return Metrics(f1=macro_f1(y, pred), top1_accuracy=top1_accuracy(y, pred))
