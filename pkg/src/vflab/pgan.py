"""Perturbation GAN: a generator/discriminator pair trained against the frozen
surrogate target model. The generator maps (local features, noise) to an additive
perturbation that flips the surrogate's prediction while a GAN loss and an L1
penalty keep the poisoned features close to the clean distribution."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator, TransformerMixin

from .nets import build_gan_pair
from .validation import (
    ConfigurationError,
    DivergenceError,
    ValidationError,
    as_float_tensor,
    check_fraction,
    new_generator,
)

_LOG_EPS = 1e-7
_PROB_EPS = 1e-6


def perturb(generator, x, noise, value_range=(0.0, 1.0)):
    """Poisoned features: x + G(x, noise), clamped to the valid feature range."""
    g = generator(x, noise)
    if g.shape != x.shape:
        raise ConfigurationError(
            f"generator output {tuple(g.shape)} does not match input {tuple(x.shape)}"
        )
    return (x + g).clamp(*value_range)


def perturbation_penalty(g_out):
    """Mean absolute perturbation per feature: E[|G(x)|] over batch and coordinates."""
    return g_out.abs().mean()


def adv_loss(target_model, x_poi, target_policy="untargeted", x_clean=None,
             target_class=None, n_classes=None):
    """Adversarial objective against the (frozen) surrogate.

    Untargeted: the negated cross-entropy between the poisoned prediction and the
    surrogate's own prediction on the clean input, pushing the poisoned sample
    away from its current class. Fixed-class: plain cross-entropy toward the
    chosen class. Log-probabilities are clamped for boundedness.
    """
    logits = target_model(x_poi)
    logp = torch.log(F.softmax(logits, dim=1).clamp(min=_PROB_EPS))
    if target_policy == "untargeted":
        if x_clean is None:
            raise ValidationError("untargeted adv_loss needs the clean features")
        with torch.no_grad():
            pseudo = target_model(x_clean).argmax(dim=1)
        return F.nll_loss(logp, pseudo).neg()
    if target_policy == "fixed-class":
        n_out = logits.shape[1] if n_classes is None else n_classes
        if target_class is None or not 0 <= int(target_class) < n_out:
            raise ValidationError(f"fixed-class target {target_class} out of range")
        target = torch.full((x_poi.shape[0],), int(target_class), dtype=torch.long)
        return F.nll_loss(logp, target)
    raise ValidationError(f"unknown target policy {target_policy!r}")


def gan_loss(discriminator, x_clean, x_poi):
    """E[log D(x)] + E[log(1 - D(x + G(x)))], batch-averaged, clamped away from 0/1."""
    d_clean = discriminator(x_clean).clamp(_LOG_EPS, 1 - _LOG_EPS)
    d_poi = discriminator(x_poi).clamp(_LOG_EPS, 1 - _LOG_EPS)
    return torch.log(d_clean).mean() + torch.log1p(-d_poi).mean()


def total_loss(l_adv, l_gan, penalty, lambda_gan, lambda_r):
    return l_adv + lambda_gan * l_gan + lambda_r * penalty


def poison_batch(generator, batch, rho, seed, value_range=(0.0, 1.0)):
    """Perturb exactly floor(rho * n) seed-chosen rows of a batch.

    The selection depends only on (seed, n), so a run reusing one seed poisons
    the same row positions every time. Returns (poisoned_batch, bool mask)."""
    rho = check_fraction(rho, "rho")
    x = as_float_tensor(batch)
    n = len(x)
    count = int(np.floor(rho * n))
    mask = np.zeros(n, dtype=bool)
    if count == 0:
        return x.clone(), mask
    rng = np.random.default_rng(seed)
    rows = rng.permutation(n)[:count]
    mask[rows] = True
    gen = new_generator(seed)
    noise = torch.randn(count, generator.noise_dim, generator=gen)
    out = x.clone()
    with torch.no_grad():
        out[torch.as_tensor(rows)] = perturb(generator, x[torch.as_tensor(rows)], noise,
                                             value_range)
    return out, mask


def attack_objective_check(clean_metrics, poisoned_metrics, perturbations, alpha):
    """Tabulate the attack tradeoff: metric drop vs. mean perturbation size.

    ``perturbations`` holds the additive perturbations (any shape); the norm
    reported is the mean absolute value per feature."""
    pert = as_float_tensor(perturbations, "perturbations")
    drop_f1 = clean_metrics.f1 - poisoned_metrics.f1
    drop_acc = clean_metrics.top1_accuracy - poisoned_metrics.top1_accuracy
    return {
        "f1_drop": float(drop_f1),
        "accuracy_drop": float(drop_acc),
        "mean_perturbation_l1": float(pert.abs().mean()) if pert.numel() else 0.0,
        "alpha": float(alpha),
        "exceeds_threshold": bool(drop_f1 > alpha),
    }


class PganPerturber(BaseEstimator, TransformerMixin):
    """Trainable poisoning transformer: fit() runs the GAN stage against a frozen
    target model, transform() maps clean local features to poisoned ones.

    Parameters
    ----------
    target_model : frozen surrogate network scored by the adversarial loss.
    lambda_gan, lambda_r : weights of the GAN term and the perturbation penalty.
    noise_dim : generator noise input width.
    steps : alternating G/D update steps (one D step per G step).
    batch_size, g_lr, d_lr : GAN training schedule (Adam).
    target_policy : "untargeted" or "fixed-class" (with ``target_class``).
    value_range : valid feature range for clamping poisoned outputs.
    max_perturbation : tanh bound on the raw generator output.
    seed : controls G/D init, batching, and noise.
    """

    def __init__(self, target_model=None, lambda_gan=1.0, lambda_r=10.0, noise_dim=64,
                 steps=400, batch_size=64, g_lr=2e-4, d_lr=2e-4,
                 target_policy="untargeted", target_class=None,
                 value_range=(0.0, 1.0), max_perturbation=1.0, seed=0):
        self.target_model = target_model
        self.lambda_gan = lambda_gan
        self.lambda_r = lambda_r
        self.noise_dim = noise_dim
        self.steps = steps
        self.batch_size = batch_size
        self.g_lr = g_lr
        self.d_lr = d_lr
        self.target_policy = target_policy
        self.target_class = target_class
        self.value_range = value_range
        self.max_perturbation = max_perturbation
        self.seed = seed

    def fit(self, X, y=None):
        if self.target_model is None:
            raise ConfigurationError("a trained target model is required")
        X = as_float_tensor(X)
        if self.lambda_gan < 0 or self.lambda_r < 0:
            raise ValidationError("loss weights must be >= 0")
        torch.manual_seed(self.seed)
        gen = new_generator(self.seed + 1)
        rng = np.random.default_rng(self.seed + 2)

        feature_shape = tuple(X.shape[1:])
        self.generator_, self.discriminator_ = build_gan_pair(
            feature_shape, noise_dim=self.noise_dim, max_perturbation=self.max_perturbation
        )
        self.target_model.eval()
        for p in self.target_model.parameters():
            p.requires_grad_(False)

        opt_g = torch.optim.Adam(self.generator_.parameters(), lr=self.g_lr,
                                 betas=(0.5, 0.999))
        opt_d = torch.optim.Adam(self.discriminator_.parameters(), lr=self.d_lr,
                                 betas=(0.5, 0.999))
        history = []
        for step in range(self.steps):
            idx = torch.as_tensor(rng.choice(len(X), size=min(self.batch_size, len(X)),
                                             replace=False))
            x = X[idx]
            z = torch.randn(len(x), self.noise_dim, generator=gen)

            # discriminator ascends the GAN objective
            with torch.no_grad():
                x_poi = perturb(self.generator_, x, z, self.value_range)
            loss_d = -gan_loss(self.discriminator_, x, x_poi)
            opt_d.zero_grad()
            loss_d.backward()
            opt_d.step()

            # generator descends the total loss
            g_out = self.generator_(x, z)
            x_poi = (x + g_out).clamp(*self.value_range)
            l_adv = adv_loss(self.target_model, x_poi, self.target_policy,
                             x_clean=x, target_class=self.target_class)
            l_gan = gan_loss(self.discriminator_, x, x_poi)
            penalty = perturbation_penalty(g_out)
            loss_g = total_loss(l_adv, l_gan, penalty, self.lambda_gan, self.lambda_r)
            opt_g.zero_grad()
            loss_g.backward()
            opt_g.step()

            values = {"step": step, "loss_d": float(loss_d.detach()),
                      "loss_g": float(loss_g.detach()), "adv": float(l_adv.detach()),
                      "gan": float(l_gan.detach()), "penalty": float(penalty.detach())}
            if not all(np.isfinite(v) for k, v in values.items() if k != "step"):
                raise DivergenceError(f"non-finite GAN loss at step {step}: {values}")
            if step % 25 == 0 or step == self.steps - 1:
                history.append(values)
        self.history_ = history
        return self

    def transform(self, X):
        """Poison every row; returns the same array type it was given."""
        was_numpy = isinstance(X, np.ndarray)
        Xt = as_float_tensor(X)
        gen = new_generator(self.seed + 3)
        outs = []
        with torch.no_grad():
            for start in range(0, len(Xt), 512):
                x = Xt[start : start + 512]
                z = torch.randn(len(x), self.noise_dim, generator=gen)
                outs.append(perturb(self.generator_, x, z, self.value_range))
        out = torch.cat(outs)
        return out.numpy() if was_numpy else out

    def mean_perturbation(self, X, n=512):
        """Mean |G(x)| per feature over (up to n rows of) X."""
        Xt = as_float_tensor(X)[:n]
        gen = new_generator(self.seed + 4)
        with torch.no_grad():
            z = torch.randn(len(Xt), self.noise_dim, generator=gen)
            return float(perturbation_penalty(self.generator_(Xt, z)))
