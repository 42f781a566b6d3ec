"""Surrogate target model: the adversary appends a classification head to a
snapshot of its own bottom model and fine-tunes it FixMatch-style, mixing a
supervised loss on the few oracle-revealed labels with a confidence-gated
consistency loss between weak and strong views of unlabeled local features."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from sklearn.base import BaseEstimator, ClassifierMixin

from .augment import policy_for
from .nets import snapshot_module
from .validation import (
    ConfigurationError,
    ValidationError,
    as_float_tensor,
    as_label_array,
    check_matching_rows,
    new_generator,
)


class SurrogateNetwork(nn.Module):
    """Bottom-model backbone plus a linear classification head."""

    def __init__(self, backbone, embedding_dim, n_classes):
        super().__init__()
        self.backbone = backbone
        self.head = nn.Linear(embedding_dim, n_classes)

    def forward(self, x):
        return self.head(self.backbone(x))

    def embed(self, x):
        return self.backbone(x)


def _probe_embedding_dim(backbone, local_shape):
    dtype = next(backbone.parameters()).dtype
    with torch.no_grad():
        out = backbone(torch.zeros(1, *local_shape, dtype=dtype))
    if out.dim() != 2:
        raise ConfigurationError("backbone must map a batch to a 2-D embedding")
    return out.shape[1]


def init_surrogate(bottom_snapshot, n_classes, local_shape, embedding_dim=None):
    """Build the surrogate network from a bottom-model snapshot.

    The backbone is a deep copy of the snapshot (its forward pass matches the
    bottom model exactly); the head is freshly initialized under the caller's
    torch seed."""
    backbone = snapshot_module(bottom_snapshot)
    probed = _probe_embedding_dim(backbone, local_shape)
    if embedding_dim is not None and embedding_dim != probed:
        raise ConfigurationError(
            f"snapshot produces {probed}-dim embeddings, head expects {embedding_dim}"
        )
    return SurrogateNetwork(backbone, probed, n_classes)


def supervised_loss(model, x_weak, y):
    """Mean cross-entropy of the model's distribution on (already weakly
    augmented) labeled examples against their true labels."""
    logits = model(x_weak)
    return F.cross_entropy(logits, torch.as_tensor(y, dtype=torch.long))


def unsupervised_loss(model, u_weak, u_strong, tau):
    """Confidence-gated consistency loss on (already augmented) unlabeled views.

    Pseudo-labels come from the weak view; the cross-entropy is charged on the
    strong view; samples whose weak-view confidence is <= tau contribute zero.
    The mean is over all unlabeled examples, gated or not."""
    with torch.no_grad():
        q = F.softmax(model(u_weak), dim=1)
        conf, pseudo = q.max(dim=1)
        gate = (conf > tau).float()
    ce = F.cross_entropy(model(u_strong), pseudo, reduction="none")
    return (ce * gate).mean()


class SurrogateClassifier(BaseEstimator, ClassifierMixin):
    """Adversary-side stand-in for the server's top model.

    Parameters
    ----------
    backbone : bottom-model snapshot (copied; the original is never touched).
    n_classes : class count for the appended head.
    tau : pseudo-label confidence threshold.
    mu : unlabeled-to-labeled batch ratio.
    labeled_batch_size : labeled examples per step (B); unlabeled batch is mu*B.
    lambda_u : weight of the unlabeled loss.
    steps : fine-tuning steps.
    lr, momentum : SGD schedule.
    value_range, flip_safe : feature metadata used to pick augmentations.
    seed : controls head init, batch sampling, and augmentation draws.
    """

    def __init__(self, backbone=None, n_classes=10, tau=0.95, mu=7,
                 labeled_batch_size=16, lambda_u=1.0, steps=1024, lr=0.01,
                 momentum=0.9, value_range=(0.0, 1.0), flip_safe=False, seed=0):
        self.backbone = backbone
        self.n_classes = n_classes
        self.tau = tau
        self.mu = mu
        self.labeled_batch_size = labeled_batch_size
        self.lambda_u = lambda_u
        self.steps = steps
        self.lr = lr
        self.momentum = momentum
        self.value_range = value_range
        self.flip_safe = flip_safe
        self.seed = seed

    def fit(self, X_labeled, y_labeled, X_unlabeled=None):
        if self.backbone is None:
            raise ConfigurationError("a bottom-model snapshot backbone is required")
        Xl = as_float_tensor(X_labeled, "X_labeled")
        yl = as_label_array(y_labeled, n_classes=self.n_classes, name="y_labeled")
        check_matching_rows(Xl, yl, ("X_labeled", "y_labeled"))
        if len(yl) == 0:
            raise ValidationError("labeled set is empty")
        Xu = as_float_tensor(X_unlabeled, "X_unlabeled") if X_unlabeled is not None else None

        torch.manual_seed(self.seed)
        gen = new_generator(self.seed + 1)
        rng = np.random.default_rng(self.seed + 2)
        local_shape = tuple(Xl.shape[1:])
        self.network_ = init_surrogate(self.backbone, self.n_classes, local_shape)
        self.policy_ = policy_for(local_shape, self.value_range, self.flip_safe)
        self.classes_ = np.arange(self.n_classes)

        yl_t = torch.as_tensor(yl, dtype=torch.long)
        opt = torch.optim.SGD(self.network_.parameters(), lr=self.lr, momentum=self.momentum)
        history = []
        n_unlabeled = 0 if Xu is None else len(Xu)
        for step in range(self.steps):
            li = torch.as_tensor(
                rng.choice(len(yl), size=min(self.labeled_batch_size, len(yl)), replace=False)
            )
            x_weak = self.policy_.weak(Xl[li], gen)
            loss_s = supervised_loss(self.network_, x_weak, yl_t[li])
            loss_u = torch.zeros(())
            if self.lambda_u > 0 and n_unlabeled > 0:
                ui = torch.as_tensor(rng.choice(
                    n_unlabeled,
                    size=min(self.mu * self.labeled_batch_size, n_unlabeled),
                    replace=False,
                ))
                u = Xu[ui]
                loss_u = unsupervised_loss(
                    self.network_, self.policy_.weak(u, gen), self.policy_.strong(u, gen),
                    self.tau,
                )
            loss = loss_s + self.lambda_u * loss_u
            opt.zero_grad()
            loss.backward()
            opt.step()
            if step % 64 == 0 or step == self.steps - 1:
                history.append({"step": step, "loss_s": float(loss_s.detach()),
                                "loss_u": float(loss_u.detach())})
        self.history_ = history
        return self

    def predict_proba(self, X):
        X = as_float_tensor(X)
        outs = []
        with torch.no_grad():
            for start in range(0, len(X), 1024):
                outs.append(F.softmax(self.network_(X[start : start + 1024]), dim=1))
        return torch.cat(outs).numpy()

    def predict(self, X):
        return self.predict_proba(X).argmax(axis=1)

    def embed(self, X):
        """Backbone output; matches the snapshot bottom model exactly."""
        with torch.no_grad():
            return self.network_.embed(as_float_tensor(X)).numpy()


def train_surrogate(backbone, labeled, unlabeled, lambda_u=1.0, tau=0.95, steps=1024,
                    eval_train=None, eval_test=None, **kwargs):
    """Convenience wrapper: fine-tune a surrogate and report its accuracies.

    ``labeled`` is an (X, y) pair; ``unlabeled`` an array or None. Returns
    (classifier, train_accuracy, test_accuracy); accuracies are None without
    the corresponding eval pair."""
    clf = SurrogateClassifier(backbone=backbone, lambda_u=lambda_u, tau=tau,
                              steps=steps, **kwargs)
    clf.fit(labeled[0], labeled[1], unlabeled)
    train_acc = clf.score(*eval_train) if eval_train is not None else None
    test_acc = clf.score(*eval_test) if eval_test is not None else None
    return clf, train_acc, test_acc
