import math

import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings
from hypothesis import strategies as st

from vflab.metrics import Metrics
from vflab.nets import MlpGenerator, build_gan_pair
from vflab.pgan import (
    PganPerturber,
    adv_loss,
    attack_objective_check,
    gan_loss,
    perturb,
    perturbation_penalty,
    poison_batch,
    total_loss,
)
from vflab.validation import DivergenceError, ValidationError, new_generator


class _ZeroGenerator(nn.Module):
    noise_dim = 4

    def forward(self, x, z):
        return torch.zeros_like(x)


class _ConstGenerator(nn.Module):
    noise_dim = 4

    def __init__(self, value):
        super().__init__()
        self.value = value

    def forward(self, x, z):
        return torch.full_like(x, self.value)


class _StubLogits(nn.Module):
    def __init__(self, logits):
        super().__init__()
        self.logits = torch.as_tensor(logits, dtype=torch.float32)

    def forward(self, x):
        return self.logits[: len(x)]


class _ConstProb(nn.Module):
    def __init__(self, p):
        super().__init__()
        self.p = p

    def forward(self, x):
        return torch.full((len(x),), self.p)


def test_zero_perturbation_identity():
    x = torch.rand(6, 1, 4, 8, generator=new_generator(0))
    out = perturb(_ZeroGenerator(), x, torch.zeros(6, 4))
    assert torch.equal(out, x)


def test_clamp_at_range_maximum():
    x = torch.ones(3, 5)  # already at the top of the range
    out = perturb(_ConstGenerator(0.7), x, torch.zeros(3, 4), value_range=(0.0, 1.0))
    assert torch.equal(out, torch.ones(3, 5))


def test_penalty_matches_independent_reduction(rng):
    g = torch.as_tensor(rng.normal(size=(10, 1, 4, 8)), dtype=torch.float32)
    expected = float(np.abs(g.numpy()).sum() / g.numel())  # separate reduction path
    assert float(perturbation_penalty(g)) == pytest.approx(expected, abs=1e-6)


def test_adv_loss_fixed_class_zero_when_already_certain():
    logits = torch.full((4, 5), -60.0)
    logits[:, 2] = 60.0
    loss = adv_loss(_StubLogits(logits), torch.zeros(4, 3), "fixed-class", target_class=2)
    assert float(loss) == pytest.approx(0.0, abs=1e-6)


def test_adv_loss_fixed_class_out_of_range():
    with pytest.raises(ValidationError):
        adv_loss(_StubLogits(torch.zeros(2, 5)), torch.zeros(2, 3), "fixed-class",
                 target_class=7)


def test_adv_loss_untargeted_at_zero_perturbation():
    # with x_poi == x_clean the loss equals the negated self-cross-entropy
    logits = torch.tensor([[2.0, 0.5, -1.0], [0.1, 1.4, 0.3]])
    model = _StubLogits(logits)
    x = torch.zeros(2, 3)
    loss = adv_loss(model, x, "untargeted", x_clean=x)
    p = torch.softmax(logits, dim=1)
    expected = float(-(-torch.log(p.max(dim=1).values)).mean())
    assert float(loss) == pytest.approx(expected, abs=1e-6)


def test_adv_loss_matches_scalar_oracle(rng):
    logits = torch.as_tensor(rng.normal(size=(6, 4)), dtype=torch.float32)
    model = _StubLogits(logits)
    loss = adv_loss(model, torch.zeros(6, 3), "fixed-class", target_class=1)
    expected = 0.0
    for i in range(6):
        row = logits[i].numpy().astype(np.float64)
        p = np.exp(row - row.max())
        p /= p.sum()
        expected += -np.log(p[1])
    assert float(loss) == pytest.approx(expected / 6, abs=1e-6)


def test_gan_loss_at_half_is_two_log_half():
    loss = gan_loss(_ConstProb(0.5), torch.zeros(8, 3), torch.ones(8, 3))
    assert float(loss) == pytest.approx(2 * math.log(0.5), abs=1e-6)


def test_gan_loss_perfect_discriminator_approaches_zero_from_below():
    class Perfect(nn.Module):
        def forward(self, x):
            return torch.where(x[:, 0] > 0.5, torch.full((len(x),), 1e-9),
                               torch.full((len(x),), 1.0 - 1e-9))

    clean = torch.zeros(8, 3)
    poisoned = torch.ones(8, 3)
    loss = float(gan_loss(Perfect(), clean, poisoned))
    assert -1e-4 < loss < 0.0


def test_gan_loss_matches_scalar_oracle(rng):
    d_clean = rng.uniform(0.05, 0.95, size=7)
    d_poi = rng.uniform(0.05, 0.95, size=7)

    class Table(nn.Module):
        def forward(self, x):
            vals = d_clean if bool(x[0, 0] == 0) else d_poi
            return torch.as_tensor(vals, dtype=torch.float32)

    loss = gan_loss(Table(), torch.zeros(7, 2), torch.ones(7, 2))
    expected = np.log(d_clean).mean() + np.log1p(-d_poi).mean()
    assert float(loss) == pytest.approx(expected, abs=1e-6)


def test_total_loss_decomposes(rng):
    l_adv = torch.tensor(float(rng.normal()))
    l_gan = torch.tensor(float(rng.normal()))
    pen = torch.tensor(float(abs(rng.normal())))
    total = total_loss(l_adv, l_gan, pen, lambda_gan=0.7, lambda_r=3.0)
    assert float(total) == pytest.approx(
        float(l_adv) + 0.7 * float(l_gan) + 3.0 * float(pen), abs=1e-6)


@pytest.mark.parametrize("rho,n,expected", [(0.0, 50, 0), (1.0, 50, 50), (0.2, 100, 20),
                                            (0.33, 10, 3)])
def test_poison_batch_counts(rho, n, expected):
    gen = _ZeroGenerator()
    x = torch.rand(n, 1, 4, 8, generator=new_generator(1))
    out, mask = poison_batch(gen, x, rho, seed=3)
    assert mask.sum() == expected
    if expected == 0:
        assert torch.equal(out, x)


def test_poison_batch_fixed_selection_per_seed():
    gen = _ZeroGenerator()
    x = torch.rand(40, 1, 4, 8, generator=new_generator(1))
    _, m1 = poison_batch(gen, x, 0.25, seed=9)
    _, m2 = poison_batch(gen, x, 0.25, seed=9)
    _, m3 = poison_batch(gen, x, 0.25, seed=10)
    assert np.array_equal(m1, m2)
    assert not np.array_equal(m1, m3)


@settings(max_examples=25, deadline=None)
@given(
    h=st.integers(min_value=1, max_value=6),
    w=st.integers(min_value=2, max_value=10),
    b=st.integers(min_value=1, max_value=5),
    seed=st.integers(min_value=0, max_value=100),
)
def test_generator_shape_and_range_safety(h, w, b, seed):
    torch.manual_seed(seed)
    g, _ = build_gan_pair((1, h, w), noise_dim=8)
    x = torch.rand(b, 1, h, w, generator=new_generator(seed))
    z = torch.randn(b, 8, generator=new_generator(seed))
    out = perturb(g, x, z, value_range=(0.0, 1.0))
    assert out.shape == x.shape
    assert float(out.min()) >= 0.0 and float(out.max()) <= 1.0


def test_generator_gradient_matches_finite_differences():
    torch.manual_seed(0)
    g = MlpGenerator(4, noise_dim=3, hidden=(8, 6), bottleneck=4).double()
    target = nn.Sequential(nn.Linear(4, 3)).double()
    disc = nn.Sequential(nn.Linear(4, 1), nn.Sigmoid()).double()
    x = torch.randn(5, 4, dtype=torch.float64)
    z = torch.randn(5, 3, dtype=torch.float64)

    def compute():
        g_out = g(x, z)
        x_poi = x + g_out  # no clamp: keep the check smooth
        l_adv = adv_loss(target, x_poi, "fixed-class", target_class=1)
        d_poi = disc(x_poi).squeeze(1).clamp(1e-7, 1 - 1e-7)
        d_clean = disc(x).squeeze(1).clamp(1e-7, 1 - 1e-7)
        l_gan = torch.log(d_clean).mean() + torch.log1p(-d_poi).mean()
        return total_loss(l_adv, l_gan, perturbation_penalty(g_out), 0.8, 2.0)

    loss = compute()
    g.zero_grad()
    loss.backward()
    rng = np.random.default_rng(1)
    h = 1e-6
    for p in g.parameters():
        grad = p.grad.flatten()
        for k in rng.choice(p.numel(), size=min(4, p.numel()), replace=False):
            with torch.no_grad():
                orig = float(p.flatten()[k])
                p.flatten()[k] = orig + h
                up = float(compute())
                p.flatten()[k] = orig - h
                down = float(compute())
                p.flatten()[k] = orig
            fd = (up - down) / (2 * h)
            auto = float(grad[k])
            assert abs(fd - auto) <= 1e-4 * max(1.0, abs(fd), abs(auto))


def test_perturber_divergence_guard(synth):
    torch.manual_seed(0)
    target = nn.Sequential(nn.Linear(20, 4))
    pert = PganPerturber(target_model=target, steps=3, batch_size=16, seed=0,
                         g_lr=float("nan"))
    with pytest.raises(DivergenceError):
        pert.fit(synth.train_X[:64])


def test_large_lambda_r_drives_perturbation_small(synth):
    torch.manual_seed(0)
    target = nn.Sequential(nn.Linear(20, 4))
    pert = PganPerturber(target_model=target, lambda_r=1e4, lambda_gan=0.0, steps=250,
                         batch_size=64, seed=4)
    pert.fit(synth.train_X)
    assert pert.mean_perturbation(synth.train_X) < 0.01  # of the unit feature range


def test_penalty_monotone_in_lambda_r(synth):
    # matched seeds, everything else fixed: stronger penalty, smaller perturbations
    torch.manual_seed(0)
    target = nn.Sequential(nn.Linear(20, 4))
    sizes = []
    for lam in (0.1, 10.0, 1000.0):
        pert = PganPerturber(target_model=target, lambda_r=lam, lambda_gan=1.0,
                             steps=200, batch_size=64, seed=11)
        pert.fit(synth.train_X)
        sizes.append(pert.mean_perturbation(synth.train_X))
    drops = [sizes[i + 1] - sizes[i] for i in range(len(sizes) - 1)]
    violations = [d for d in drops if d > 0]
    assert len(violations) <= 1
    for v in violations:
        assert v <= 0.05 * max(sizes)


def test_attack_objective_check_report():
    clean = Metrics(f1=0.95, top1_accuracy=0.96)
    poisoned = Metrics(f1=0.80, top1_accuracy=0.82)
    report = attack_objective_check(clean, poisoned, np.full((4, 3), 0.25), alpha=0.1)
    assert report["f1_drop"] == pytest.approx(0.15)
    assert report["mean_perturbation_l1"] == pytest.approx(0.25)
    assert report["exceeds_threshold"] is True
    quiet = attack_objective_check(clean, Metrics(f1=0.90, top1_accuracy=0.9),
                                   np.zeros((2, 2)), alpha=0.1)
    assert quiet["exceeds_threshold"] is False
