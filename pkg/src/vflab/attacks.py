"""Attack descriptors and their runtime adapters.

A descriptor is a small config dataclass passed to ``VflClassifier(attack=...)``;
``build(view)`` turns it into an adapter that the malicious participant consults
every round. Adapters see only the adversary's view: its own features, its own
bottom model, and the oracle-revealed labels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .baselines import (
    lra_poison,
    nearest_anchor_labels,
    propagate_labels,
    villain_poison,
    villain_trigger,
)
from .nets import snapshot_module
from .pgan import PganPerturber, perturb
from .surrogate import SurrogateClassifier
from .validation import ConfigurationError, check_fraction, new_generator


def _poison_membership(n, rho, seed):
    """Seed-chosen set of floor(rho * n) training samples, fixed for the run."""
    count = int(np.floor(check_fraction(rho, "rho") * n))
    rng = np.random.default_rng(seed)
    mask = np.zeros(n, dtype=bool)
    mask[rng.permutation(n)[:count]] = True
    return mask


class _AttackAdapterBase:
    """Shared lifecycle: arm at start_epoch, report nothing before that."""

    def __init__(self, config, view):
        self.config = config
        self.view = view
        self.armed = False
        self.poison_mask_ = None  # bool over train sample indices
        self._eval_masks = {}
        self.mean_perturbation_ = None
        self.surrogate_train_accuracy_ = None
        self.surrogate_test_accuracy_ = None

    def active(self, epoch):
        return self.armed and epoch >= self.config.start_epoch

    def on_epoch_start(self, epoch):
        if not self.armed and epoch >= self.config.start_epoch:
            self._arm()
            self.armed = True
        elif self.armed and self._retrain_due(epoch):
            self._arm()

    def _retrain_due(self, epoch):
        interval = getattr(self.config, "retrain_every", None)
        return bool(interval and epoch > self.config.start_epoch
                    and (epoch - self.config.start_epoch) % interval == 0)

    def _arm(self):
        raise NotImplementedError

    @property
    def poisoned_indices_(self):
        if self.poison_mask_ is None:
            return np.empty(0, dtype=np.int64)
        return np.flatnonzero(self.poison_mask_)

    # default hooks: no-ops
    def poison_features(self, x, indices, epoch):
        return x

    def poison_embeddings(self, e, indices, epoch):
        return e

    def eval_mask(self, n_eval):
        """Fixed poisoned membership for an evaluation set: the adversary keeps
        poisoning the same fraction of its uploads while the model is scored."""
        if n_eval not in self._eval_masks:
            self._eval_masks[n_eval] = _poison_membership(
                n_eval, self.config.rho, self.view.run_seed + 31)
        return self._eval_masks[n_eval]

    def poison_eval_features(self, x, indices, n_eval):
        return x

    def poison_eval_embeddings(self, e, indices, n_eval):
        return e


def _swap_poisoned_rows(x, indices, poison_mask, cache):
    """Replace the batch rows whose sample index is poisoned with cached rows."""
    hit = poison_mask[indices]
    if not hit.any():
        return x
    out = x.clone()
    rows = np.flatnonzero(hit)
    out[torch.as_tensor(rows)] = cache[torch.as_tensor(indices[rows])]
    return out


@dataclass
class PganAttack:
    """Two-stage poisoning: surrogate via semi-supervised model completion at the
    bottom-model snapshot, then a GAN-trained perturbation generator, frozen and
    applied to a fixed fraction of the adversary's local samples.

    ``start_epoch`` is the first poisoned epoch; the snapshot is the adversary's
    bottom model as of the end of ``snapshot_epoch`` (= start_epoch - 1)."""

    rho: float = 0.2
    snapshot_epoch: int = 5
    known_labels: int = 160
    # stage 1 (surrogate fine-tuning)
    tau: float = 0.95
    mu: int = 7
    labeled_batch_size: int = 16
    lambda_u: float = 1.0
    surrogate_steps: int = 1024
    surrogate_lr: float = 0.01
    # stage 2 (perturbation GAN)
    lambda_gan: float = 1.0
    lambda_r: float = 1.0
    noise_dim: int = 64
    gan_steps: int = 400
    gan_batch_size: int = 64
    g_lr: float = 2e-4
    d_lr: float = 2e-4
    target_policy: str = "untargeted"
    target_class: int | None = None
    max_perturbation: float = 1.0
    # rebuild the surrogate and generator against the current bottom model at
    # this epoch interval, so the poison tracks the representation instead of
    # being learned away; None trains the pair once and freezes it
    retrain_every: int | None = 4
    # optionally stop updating the adversary's own bottom once the attack starts
    freeze_own_bottom: bool = False

    name = "pgan"

    @property
    def start_epoch(self):
        return self.snapshot_epoch + 1

    def build(self, view):
        return PganAttackAdapter(self, view)


class PganAttackAdapter(_AttackAdapterBase):
    def _arm(self):
        cfg, view = self.config, self.view
        if view.known_label_indices is None:
            raise ConfigurationError("P-GAN needs oracle-revealed labels")
        snapshot = snapshot_module(view.bottom)
        X = view.local_features
        labeled_idx = torch.as_tensor(view.known_label_indices)
        unlabeled = np.setdiff1d(np.arange(view.n_train), view.known_label_indices)

        self.surrogate_ = SurrogateClassifier(
            backbone=snapshot, n_classes=view.n_classes, tau=cfg.tau, mu=cfg.mu,
            labeled_batch_size=cfg.labeled_batch_size, lambda_u=cfg.lambda_u,
            steps=cfg.surrogate_steps, lr=cfg.surrogate_lr,
            value_range=view.value_range, flip_safe=view.flip_safe,
            seed=view.run_seed + 11,
        ).fit(X[labeled_idx], view.known_labels, X[torch.as_tensor(unlabeled)])

        self.perturber_ = PganPerturber(
            target_model=self.surrogate_.network_, lambda_gan=cfg.lambda_gan,
            lambda_r=cfg.lambda_r, noise_dim=cfg.noise_dim, steps=cfg.gan_steps,
            batch_size=cfg.gan_batch_size, g_lr=cfg.g_lr, d_lr=cfg.d_lr,
            target_policy=cfg.target_policy, target_class=cfg.target_class,
            value_range=view.value_range, max_perturbation=cfg.max_perturbation,
            seed=view.run_seed + 13,
        ).fit(X)

        # fixed poisoned membership; the perturbation is regenerated with fresh
        # noise on every upload, so the poison never becomes memorizable
        self.poison_mask_ = _poison_membership(view.n_train, cfg.rho, view.run_seed + 17)
        self._noise = new_generator(view.run_seed + 19)
        rows = torch.as_tensor(self.poisoned_indices_[:512])
        if len(rows):
            with torch.no_grad():
                z = torch.randn(len(rows), cfg.noise_dim, generator=new_generator(
                    view.run_seed + 21))
                self.mean_perturbation_ = float(
                    self.perturber_.generator_(X[rows], z).abs().mean())

    def poison_features(self, x, indices, epoch):
        if not self.active(epoch):
            return x
        return self._perturb_hit(x, self.poison_mask_[indices], self._noise)

    def poison_eval_features(self, x, indices, n_eval):
        if not self.armed:
            return x
        # fresh fixed-seed noise per evaluation call keeps scoring deterministic
        gen = new_generator(self.view.run_seed + 37)
        return self._perturb_hit(x, self.eval_mask(n_eval)[indices], gen)

    def _perturb_hit(self, x, hit, noise_gen):
        if not hit.any():
            return x
        rows = torch.as_tensor(np.flatnonzero(hit))
        out = x.clone()
        with torch.no_grad():
            z = torch.randn(len(rows), self.config.noise_dim, generator=noise_gen)
            out[rows] = perturb(self.perturber_.generator_, x[rows], z,
                                self.view.value_range)
        return out

    def record_surrogate_accuracy(self, train_eval, test_eval):
        """Score the surrogate for Table-1-style reporting (harness hook)."""
        self.surrogate_train_accuracy_ = self.surrogate_.score(*train_eval)
        self.surrogate_test_accuracy_ = self.surrogate_.score(*test_eval)


@dataclass
class LraAttack:
    """Label-replacement baseline: victims' local slices are replaced by donor
    slices whose believed label differs. Believed labels are the oracle-revealed
    ones propagated by nearest known neighbor."""

    rho: float = 0.2
    known_labels: int = 160
    start_epoch: int = 6
    freeze_own_bottom: bool = False

    name = "lra"

    def build(self, view):
        return LraAttackAdapter(self, view)


class LraAttackAdapter(_AttackAdapterBase):
    def _arm(self):
        cfg, view = self.config, self.view
        if view.known_label_indices is None:
            raise ConfigurationError("LRA needs oracle-revealed labels")
        self._believed_train = propagate_labels(
            view.local_features, view.known_label_indices, view.known_labels)
        poisoned, victims = lra_poison(
            view.local_features,
            (view.known_label_indices, view.known_labels),
            cfg.rho,
            seed=view.run_seed + 23,
            believed_labels=self._believed_train,
        )
        self._cache = poisoned
        self._eval_swaps = {}
        self.poison_mask_ = np.zeros(view.n_train, dtype=bool)
        self.poison_mask_[victims] = True
        diff = (poisoned - view.local_features).abs()
        self.mean_perturbation_ = float(diff[torch.as_tensor(victims)].mean()) if len(victims) else 0.0

    def poison_features(self, x, indices, epoch):
        if not self.active(epoch):
            return x
        return _swap_poisoned_rows(x, indices, self.poison_mask_, self._cache)

    def _eval_swap_plan(self, x_eval_rows, victims, seed):
        """Donor (training) row for each eval victim, believed labels via the
        same nearest-known-anchor rule used at arm time."""
        view = self.view
        believed = nearest_anchor_labels(
            x_eval_rows,
            view.local_features[torch.as_tensor(view.known_label_indices)],
            view.known_labels)
        rng = np.random.default_rng(seed)
        donors = np.full(len(victims), -1, dtype=np.int64)
        for i, b in enumerate(believed):
            pool = view.known_label_indices[view.known_labels != b]
            if len(pool):
                donors[i] = int(rng.choice(pool))
        return donors

    def poison_eval_features(self, x, indices, n_eval):
        if not self.armed:
            return x
        mask = self.eval_mask(n_eval)
        hit = mask[indices]
        if not hit.any():
            return x
        rows = np.flatnonzero(hit)
        key = n_eval
        if key not in self._eval_swaps:
            self._eval_swaps[key] = {}
        plan = self._eval_swaps[key]
        missing = [indices[r] for r in rows if int(indices[r]) not in plan]
        if missing:
            positions = {int(v): j for j, v in enumerate(indices)}
            x_missing = x[torch.as_tensor([positions[int(m)] for m in missing])]
            donors = self._eval_swap_plan(
                x_missing, missing, self.view.run_seed + 43)
            for m, d in zip(missing, donors):
                plan[int(m)] = int(d)
        out = x.clone()
        for r in rows:
            donor = plan[int(indices[r])]
            if donor >= 0:
                out[r] = self.view.local_features[donor]
        return out


@dataclass
class VillainAttack:
    """Embedding-space trigger baseline: adds mask * (beta * pattern) to the
    adversary's uploaded embedding for a fixed fraction of samples."""

    rho: float = 0.2
    beta: float = 0.4
    mask: object = "first_half"
    start_epoch: int = 6
    freeze_own_bottom: bool = False

    name = "villain"

    def build(self, view):
        return VillainAttackAdapter(self, view)


class VillainAttackAdapter(_AttackAdapterBase):
    def _arm(self):
        cfg, view = self.config, self.view
        self.poison_mask_ = _poison_membership(view.n_train, cfg.rho, view.run_seed + 29)
        self.trigger_ = None  # built lazily once the embedding dim is known

    def _apply_trigger(self, e, hit):
        if self.trigger_ is None:
            self.trigger_ = villain_trigger(e.shape[1], beta=self.config.beta,
                                            mask=self.config.mask)
            self.mean_perturbation_ = float(np.abs(self.trigger_.epsilon).mean())
        if not hit.any():
            return e
        rows = torch.as_tensor(np.flatnonzero(hit))
        out = e.clone()
        out[rows] = villain_poison(e[rows], self.trigger_)
        return out

    def poison_embeddings(self, e, indices, epoch):
        if not self.active(epoch):
            return e
        return self._apply_trigger(e, self.poison_mask_[indices])

    def poison_eval_embeddings(self, e, indices, n_eval):
        if not self.armed:
            return e
        return self._apply_trigger(e, self.eval_mask(n_eval)[indices])
