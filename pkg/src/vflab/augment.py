"""Seedable weak/strong augmentation policies for the adversary's local features.

Weak views are label-preserving by construction (small translations, optional
horizontal flip). Strong views chain randomly chosen tensor ops plus cutout,
in the spirit of RandAugment but restricted to channel-uniform operations so
the same list is valid for grayscale inputs.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F

from .validation import ValidationError


def _rand(shape, generator, lo=0.0, hi=1.0):
    return torch.rand(shape, generator=generator) * (hi - lo) + lo


def _affine(x, theta):
    grid = F.affine_grid(theta, list(x.shape), align_corners=False)
    return F.grid_sample(x, grid, padding_mode="zeros", align_corners=False)


def _translate(x, frac_x, frac_y):
    b = x.shape[0]
    theta = torch.zeros(b, 2, 3)
    theta[:, 0, 0] = 1.0
    theta[:, 1, 1] = 1.0
    theta[:, 0, 2] = frac_x * 2
    theta[:, 1, 2] = frac_y * 2
    return _affine(x, theta)


def _rotate(x, angle_rad):
    b = x.shape[0]
    cos, sin = torch.cos(angle_rad), torch.sin(angle_rad)
    theta = torch.zeros(b, 2, 3)
    theta[:, 0, 0] = cos
    theta[:, 0, 1] = -sin
    theta[:, 1, 0] = sin
    theta[:, 1, 1] = cos
    return _affine(x, theta)


def _shear(x, sx, sy):
    b = x.shape[0]
    theta = torch.zeros(b, 2, 3)
    theta[:, 0, 0] = 1.0
    theta[:, 1, 1] = 1.0
    theta[:, 0, 1] = sx
    theta[:, 1, 0] = sy
    return _affine(x, theta)


class ImageAugmentationPolicy:
    """Weak and strong views for image bands, all ops seeded through an explicit
    torch generator so identical seeds reproduce identical views."""

    def __init__(self, value_range=(0.0, 1.0), allow_flip=True, translate_frac=0.125,
                 n_strong_ops=2, magnitude=0.6, cutout_frac=0.4):
        self.value_range = tuple(value_range)
        self.allow_flip = allow_flip
        self.translate_frac = translate_frac
        self.n_strong_ops = n_strong_ops
        self.magnitude = magnitude
        self.cutout_frac = cutout_frac

    # -- individual strong ops; u is per-sample magnitude in [0, 1] ---------
    def _op_brightness(self, x, u, g):
        lo, hi = self.value_range
        sign = torch.where(_rand((x.shape[0],), g) < 0.5, -1.0, 1.0)
        delta = (sign * u * 0.4 * (hi - lo)).view(-1, 1, 1, 1)
        return x + delta

    def _op_contrast(self, x, u, g):
        lo, hi = self.value_range
        mid = (hi + lo) / 2
        sign = torch.where(_rand((x.shape[0],), g) < 0.5, -1.0, 1.0)
        factor = (1.0 + sign * u * 0.7).view(-1, 1, 1, 1)
        return (x - mid) * factor + mid

    def _op_solarize(self, x, u, g):
        lo, hi = self.value_range
        thresh = (hi - u * (hi - lo)).view(-1, 1, 1, 1)
        return torch.where(x >= thresh, hi + lo - x, x)

    def _op_posterize(self, x, u, g):
        lo, hi = self.value_range
        levels = (16 - (u * 12).long()).clamp(min=2).view(-1, 1, 1, 1).float()
        unit = ((x - lo) / (hi - lo)).clamp(0, 1)
        return torch.floor(unit * levels) / levels * (hi - lo) + lo

    def _op_sharpness(self, x, u, g):
        kernel = torch.full((x.shape[1], 1, 3, 3), 1 / 9.0)
        blurred = F.conv2d(F.pad(x, (1, 1, 1, 1), mode="replicate"), kernel,
                           groups=x.shape[1])
        sign = torch.where(_rand((x.shape[0],), g) < 0.5, -1.0, 1.0)
        factor = (sign * u).view(-1, 1, 1, 1)
        return x + factor * (x - blurred)

    def _op_autocontrast(self, x, u, g):
        lo, hi = self.value_range
        flat = x.flatten(1)
        mn = flat.min(dim=1).values.view(-1, 1, 1, 1)
        mx = flat.max(dim=1).values.view(-1, 1, 1, 1)
        span = (mx - mn).clamp(min=1e-6)
        return (x - mn) / span * (hi - lo) + lo

    def _op_translate_x(self, x, u, g):
        sign = torch.where(_rand((x.shape[0],), g) < 0.5, -1.0, 1.0)
        return _translate(x, sign * u * 0.3, torch.zeros(x.shape[0]))

    def _op_translate_y(self, x, u, g):
        sign = torch.where(_rand((x.shape[0],), g) < 0.5, -1.0, 1.0)
        return _translate(x, torch.zeros(x.shape[0]), sign * u * 0.3)

    def _op_rotate(self, x, u, g):
        sign = torch.where(_rand((x.shape[0],), g) < 0.5, -1.0, 1.0)
        return _rotate(x, sign * u * 0.5)  # up to ~28 degrees

    def _op_shear_x(self, x, u, g):
        sign = torch.where(_rand((x.shape[0],), g) < 0.5, -1.0, 1.0)
        return _shear(x, sign * u * 0.3, torch.zeros(x.shape[0]))

    def _strong_ops(self):
        return [
            self._op_brightness, self._op_contrast, self._op_solarize,
            self._op_posterize, self._op_sharpness, self._op_autocontrast,
            self._op_translate_x, self._op_translate_y, self._op_rotate,
            self._op_shear_x,
        ]

    def _cutout(self, x, generator):
        lo, hi = self.value_range
        b, _, h, w = x.shape
        side_h = max(1, int(h * self.cutout_frac))
        side_w = max(1, int(w * self.cutout_frac))
        top = torch.randint(0, max(1, h - side_h + 1), (b,), generator=generator)
        left = torch.randint(0, max(1, w - side_w + 1), (b,), generator=generator)
        out = x.clone()
        fill = (hi + lo) / 2
        for i in range(b):
            out[i, :, top[i] : top[i] + side_h, left[i] : left[i] + side_w] = fill
        return out

    def weak(self, x, generator):
        self._check(x)
        b = x.shape[0]
        if self.translate_frac > 0:
            fx = _rand((b,), generator, -self.translate_frac, self.translate_frac)
            fy = _rand((b,), generator, -self.translate_frac, self.translate_frac)
            out = _translate(x, fx, fy)
        else:
            out = x.clone()
        if self.allow_flip:
            flip = _rand((b,), generator) < 0.5
            out[flip] = torch.flip(out[flip], dims=[3])
        return self._clamp(out)

    def strong(self, x, generator):
        self._check(x)
        ops = self._strong_ops()
        out = x
        for _ in range(self.n_strong_ops):
            pick = int(torch.randint(0, len(ops), (1,), generator=generator))
            u = _rand((x.shape[0],), generator, 0.1, self.magnitude)
            out = ops[pick](out, u, generator)
        out = self._cutout(out, generator)
        return self._clamp(out)

    def _clamp(self, x):
        lo, hi = self.value_range
        return x.clamp(lo, hi)

    def _check(self, x):
        if x.dim() != 4:
            raise ValidationError(f"image policy expects (B, C, H, W), got {tuple(x.shape)}")


class TabularAugmentationPolicy:
    """Feature-vector analogue: weak = small Gaussian jitter, strong = larger jitter
    plus random feature masking (the cutout counterpart)."""

    def __init__(self, value_range=(0.0, 1.0), weak_sigma=0.03, strong_sigma=0.1,
                 mask_frac=0.2):
        self.value_range = tuple(value_range)
        self.weak_sigma = weak_sigma
        self.strong_sigma = strong_sigma
        self.mask_frac = mask_frac

    def weak(self, x, generator):
        lo, hi = self.value_range
        noise = torch.randn(x.shape, generator=generator) * self.weak_sigma * (hi - lo)
        return (x + noise).clamp(lo, hi)

    def strong(self, x, generator):
        lo, hi = self.value_range
        noise = torch.randn(x.shape, generator=generator) * self.strong_sigma * (hi - lo)
        out = (x + noise).clamp(lo, hi)
        mask = torch.rand(x.shape, generator=generator) < self.mask_frac
        return torch.where(mask, torch.full_like(out, (hi + lo) / 2), out)


def policy_for(feature_shape, value_range, allow_flip):
    """Pick the image or tabular policy matching the local feature shape."""
    if len(feature_shape) == 3:
        return ImageAugmentationPolicy(value_range=value_range, allow_flip=allow_flip)
    return TabularAugmentationPolicy(value_range=value_range)
