"""Network zoo: participant/server FCNNs, ResNet bottoms, the perturbation GAN pair,
and the deep auto-encoder used by the server-side defense."""

from __future__ import annotations

import copy

import torch
import torch.nn as nn

from .validation import ConfigurationError


class Fcnn(nn.Module):
    """Plain fully connected stack: ``n_layers`` Linear layers with ReLU between them."""

    def __init__(self, in_dim, out_dim, hidden=256, n_layers=3):
        super().__init__()
        if n_layers < 1:
            raise ConfigurationError("n_layers must be >= 1")
        dims = [in_dim] + [hidden] * (n_layers - 1) + [out_dim]
        layers = []
        for i in range(n_layers):
            layers.append(nn.Linear(dims[i], dims[i + 1]))
            if i < n_layers - 1:
                layers.append(nn.ReLU())
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x.flatten(1))


class ResNetBottom(nn.Module):
    """ResNet-18 adapted to a participant's image band: 3x3 stem, no max-pool,
    final FC mapped to the embedding dimension."""

    def __init__(self, in_channels, embedding_dim):
        super().__init__()
        from torchvision.models import resnet18

        net = resnet18(weights=None, num_classes=embedding_dim)
        net.conv1 = nn.Conv2d(in_channels, 64, kernel_size=3, stride=1, padding=1, bias=False)
        net.maxpool = nn.Identity()
        self.net = net

    def forward(self, x):
        return self.net(x)


def build_bottom(profile, local_shape, embedding_dim, hidden=256):
    """Bottom model for one participant's local slice."""
    if profile == "fcnn3":
        in_dim = 1
        for s in local_shape:
            in_dim *= s
        return Fcnn(in_dim, embedding_dim, hidden=hidden, n_layers=3)
    if profile == "resnet18":
        if len(local_shape) != 3:
            raise ConfigurationError("resnet18 bottom requires image-shaped local features")
        return ResNetBottom(local_shape[0], embedding_dim)
    raise ConfigurationError(f"unknown bottom profile {profile!r}")


def build_top(profile, in_dim, n_classes, hidden=256):
    """Server-side top model mapping the concatenated embedding to class logits."""
    if profile == "fcnn3":
        return Fcnn(in_dim, n_classes, hidden=hidden, n_layers=3)
    if profile == "fcnn4":
        return Fcnn(in_dim, n_classes, hidden=hidden, n_layers=4)
    raise ConfigurationError(f"unknown top profile {profile!r}")


class ConvGenerator(nn.Module):
    """Perturbation generator for image bands: three convolutional blocks down to a
    bottleneck, noise injected there by channel concatenation, three deconvolutional
    blocks back to the input shape. Output is tanh-bounded and added to the input."""

    def __init__(self, in_shape, noise_dim=64, base=32, max_perturbation=1.0):
        super().__init__()
        c, h, w = in_shape
        self.in_shape = tuple(in_shape)
        self.noise_dim = noise_dim
        self.max_perturbation = max_perturbation
        self.conv1 = nn.Conv2d(c, base, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(base, base * 2, 3, stride=2, padding=1)
        self.conv3 = nn.Conv2d(base * 2, base * 4, 3, stride=1, padding=1)
        # bottleneck spatial size after two stride-2 convs
        self._mid = (max(1, (h + 1) // 2), max(1, (w + 1) // 2))
        self._bottom = (max(1, (self._mid[0] + 1) // 2), max(1, (self._mid[1] + 1) // 2))
        zb = self._bottom[0] * self._bottom[1]
        self.noise_proj = nn.Linear(noise_dim, base * zb)
        self._noise_channels = base
        self.deconv1 = nn.ConvTranspose2d(base * 4 + base, base * 2, 3, stride=1, padding=1)
        self.deconv2 = nn.ConvTranspose2d(base * 2, base, 3, stride=2, padding=1)
        self.deconv3 = nn.ConvTranspose2d(base, c, 3, stride=2, padding=1)
        self.act = nn.LeakyReLU(0.2)

    def forward(self, x, z):
        if x.shape[1:] != self.in_shape:
            raise ConfigurationError(
                f"generator built for {self.in_shape}, got input {tuple(x.shape[1:])}"
            )
        b = x.shape[0]
        h1 = self.act(self.conv1(x))
        h2 = self.act(self.conv2(h1))
        h3 = self.act(self.conv3(h2))
        zn = self.noise_proj(z).view(b, self._noise_channels, *self._bottom)
        d = self.act(self.deconv1(torch.cat([h3, zn], dim=1)))
        d = self.act(self.deconv2(d, output_size=h1.shape))
        d = self.deconv3(d, output_size=x.shape)
        return torch.tanh(d) * self.max_perturbation


class MlpGenerator(nn.Module):
    """Tabular counterpart of :class:`ConvGenerator`: three Linear blocks down to a
    bottleneck, noise concatenated there, three Linear blocks back out."""

    def __init__(self, n_features, noise_dim=64, hidden=(128, 64), bottleneck=32,
                 max_perturbation=1.0):
        super().__init__()
        self.n_features = n_features
        self.noise_dim = noise_dim
        self.max_perturbation = max_perturbation
        h1, h2 = hidden
        self.encode = nn.Sequential(
            nn.Linear(n_features, h1), nn.LeakyReLU(0.2),
            nn.Linear(h1, h2), nn.LeakyReLU(0.2),
            nn.Linear(h2, bottleneck), nn.LeakyReLU(0.2),
        )
        self.decode = nn.Sequential(
            nn.Linear(bottleneck + noise_dim, h2), nn.LeakyReLU(0.2),
            nn.Linear(h2, h1), nn.LeakyReLU(0.2),
            nn.Linear(h1, n_features),
        )

    def forward(self, x, z):
        code = self.encode(x.flatten(1))
        out = self.decode(torch.cat([code, z], dim=1))
        return (torch.tanh(out) * self.max_perturbation).view(x.shape)


class ConvDiscriminator(nn.Module):
    """Clean-vs-poisoned discriminator for image bands; sigmoid output in (0, 1)."""

    def __init__(self, in_shape, base=32):
        super().__init__()
        c, h, w = in_shape
        self.features = nn.Sequential(
            nn.Conv2d(c, base, 3, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(base, base * 2, 3, stride=2, padding=1), nn.LeakyReLU(0.2),
        )
        fh = max(1, (max(1, (h + 1) // 2) + 1) // 2)
        fw = max(1, (max(1, (w + 1) // 2) + 1) // 2)
        self.head = nn.Linear(base * 2 * fh * fw, 1)

    def forward(self, x):
        h = self.features(x).flatten(1)
        return torch.sigmoid(self.head(h)).squeeze(1)


class MlpDiscriminator(nn.Module):
    def __init__(self, n_features, hidden=(128, 64)):
        super().__init__()
        h1, h2 = hidden
        self.net = nn.Sequential(
            nn.Linear(n_features, h1), nn.LeakyReLU(0.2),
            nn.Linear(h1, h2), nn.LeakyReLU(0.2),
            nn.Linear(h2, 1),
        )

    def forward(self, x):
        return torch.sigmoid(self.net(x.flatten(1))).squeeze(1)


def build_gan_pair(feature_shape, noise_dim=64, max_perturbation=1.0):
    """Generator/discriminator pair matched to the local feature shape."""
    if len(feature_shape) == 3:
        g = ConvGenerator(feature_shape, noise_dim=noise_dim, max_perturbation=max_perturbation)
        d = ConvDiscriminator(feature_shape)
    else:
        n = feature_shape[0]
        g = MlpGenerator(n, noise_dim=noise_dim, max_perturbation=max_perturbation)
        d = MlpDiscriminator(n)
    return g, d


class DeepAutoEncoder(nn.Module):
    """Seven layers of units including the bottleneck: the encoder narrows the input
    through two hidden widths to the bottleneck code, the decoder mirrors it back."""

    def __init__(self, in_dim, hidden=(64, 32), bottleneck=16):
        super().__init__()
        h1, h2 = hidden
        self.encoder = nn.Sequential(
            nn.Linear(in_dim, h1), nn.ReLU(),
            nn.Linear(h1, h2), nn.ReLU(),
            nn.Linear(h2, bottleneck),
        )
        self.decoder = nn.Sequential(
            nn.Linear(bottleneck, h2), nn.ReLU(),
            nn.Linear(h2, h1), nn.ReLU(),
            nn.Linear(h1, in_dim),
        )

    def forward(self, x):
        return self.decoder(self.encoder(x))


def snapshot_module(module):
    """Detached deep copy of a model, used for bottom-model snapshots."""
    clone = copy.deepcopy(module)
    for p in clone.parameters():
        p.requires_grad_(True)
    return clone
