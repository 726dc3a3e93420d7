"""Image discriminator and region-matched patch co-occurrence discriminator.

Both use the non-saturating logistic loss; the image discriminator adds an R1
penalty on real images. Final layers start at zero, so an untrained
discriminator outputs logit 0 everywhere.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeError
from .init import seeded_init_
from .semantics import REGIONS, PatchSpec, SamplingError, as_numpy_mask, sample_patches, sample_region_patches


class NoRegionError(ValueError):
    pass


class PatchDiscriminator(nn.Module):
    """Scores a patch against the mean feature of a set of reference patches."""

    def __init__(self, patch_size: int = 8, width: int = 32, feat: int = 64):
        super().__init__()
        self.patch_size = patch_size
        layers, c, s = [nn.Conv2d(3, width, 3, padding=1), nn.LeakyReLU(0.2)], width, patch_size
        while s > 2:
            layers += [nn.Conv2d(c, 2 * width, 3, stride=2, padding=1), nn.LeakyReLU(0.2)]
            c, s = 2 * width, s // 2
        self.encoder = nn.Sequential(*layers, nn.Flatten(), nn.Linear(c * s * s, feat), nn.LeakyReLU(0.2))
        self.hidden = nn.Linear(2 * feat, feat)
        self.out = nn.Linear(feat, 1)

    def features(self, patches):
        if patches.shape[-2:] != (self.patch_size, self.patch_size):
            raise ShapeError(f"patch discriminator takes {self.patch_size}x{self.patch_size} patches, "
                             f"got {tuple(patches.shape[-2:])}")
        return self.encoder(patches)

    def forward(self, patches, refs):
        """Logits (n,) for ``patches`` given reference patches ``refs``."""
        f = self.features(patches)
        r = self.features(refs).mean(dim=0, keepdim=True).expand(f.shape[0], -1)
        h = F.leaky_relu(self.hidden(torch.cat([f, r], dim=1)), 0.2)
        return self.out(h).squeeze(1)


class ImageDiscriminator(nn.Module):
    def __init__(self, image_size: int = 64, width: int = 16, max_width: int = 64):
        super().__init__()
        self.image_size = image_size
        layers, c, s = [nn.Conv2d(3, width, 3, padding=1), nn.LeakyReLU(0.2)], width, image_size
        while s > 4:
            w = min(max_width, 2 * c)
            layers += [nn.Conv2d(c, w, 3, stride=2, padding=1), nn.LeakyReLU(0.2)]
            c, s = w, s // 2
        self.features = nn.Sequential(*layers, nn.Flatten())
        self.out = nn.Linear(c * s * s, 1)

    def forward(self, x):
        if x.dim() == 3:
            x = x.unsqueeze(0)
        if tuple(x.shape[-2:]) != (self.image_size, self.image_size):
            raise ShapeError(f"discriminator takes {self.image_size}px images, got {tuple(x.shape[-2:])}")
        return self.out(self.features(x)).squeeze(1)


def _zero_out(layer: nn.Linear):
    with torch.no_grad():
        layer.weight.zero_()
        layer.bias.zero_()


def build_patch_discriminator(patch_size: int = 8, seed: int = 0) -> PatchDiscriminator:
    d = seeded_init_(PatchDiscriminator(patch_size), seed, gain=math.sqrt(2))
    _zero_out(d.out)
    return d


def build_image_discriminator(image_size: int = 64, seed: int = 0) -> ImageDiscriminator:
    d = seeded_init_(ImageDiscriminator(image_size), seed, gain=math.sqrt(2))
    _zero_out(d.out)
    return d


def image_disc_loss(d: ImageDiscriminator, real, fake, r1_gamma: float = 1.0):
    """(generator_term, discriminator_term), the latter including the R1 penalty."""
    if real.shape != fake.shape:
        raise ShapeError(f"real {tuple(real.shape)} and fake {tuple(fake.shape)} differ")
    g_term = F.softplus(-d(fake)).mean()
    # R1 needs a graph even when the caller runs under no_grad
    with torch.enable_grad():
        real = real.detach().requires_grad_(True)
        logit_real = d(real)
        d_term = F.softplus(d(fake.detach())).mean() + F.softplus(-logit_real).mean()
        if r1_gamma > 0:
            grad, = torch.autograd.grad(logit_real.sum(), real, create_graph=True)
            d_term = d_term + 0.5 * r1_gamma * grad.pow(2).flatten(1).sum(1).mean()
    return g_term, d_term


class PatchLoss(NamedTuple):
    generator: torch.Tensor
    discriminator: torch.Tensor
    n_fake: int
    pairs: list  # (region, fake offsets, reference offsets); region is None when unconstrained


def _region_sample(img, mask, r, spec, rng):
    try:
        return sample_region_patches(img, mask, r, spec, rng)
    except SamplingError:
        return None


def pcd_loss(dp: PatchDiscriminator, style_img, style_mask, stylized_img, content_mask,
             spec: PatchSpec, rng: np.random.Generator, region_matched: bool = True) -> PatchLoss:
    """Patch co-occurrence loss, matching stylized and style patches region by region.

    With ``region_matched=False`` patches are drawn anywhere in either image.
    """
    if style_img.dim() == 4:
        style_img = style_img[0]
    if stylized_img.dim() == 4:
        stylized_img = stylized_img[0]
    sm, cm = as_numpy_mask(style_mask), as_numpy_mask(content_mask)
    if sm.shape != tuple(style_img.shape[-2:]) or cm.shape != tuple(stylized_img.shape[-2:]):
        raise ShapeError("masks must be aligned with their images")
    shared = [r for r in REGIONS if (sm == r).any() and (cm == r).any()]
    if not shared:
        raise NoRegionError("style and content masks share no semantic region")
    n = spec.patches_per_region
    p = spec.patch_size
    fakes, refs, reals, pairs = [], [], [], []
    if region_matched:
        for r in shared:
            fake = _region_sample(stylized_img, cm, r, spec, rng)
            ref = _region_sample(style_img, sm, r, spec, rng)
            real = _region_sample(style_img, sm, r, spec, rng)
            if fake is None or ref is None or real is None:
                continue
            fakes.append(fake.patches)
            refs.append(ref.patches)
            reals.append(real.patches)
            pairs.append((r, fake.offsets, ref.offsets))
        if not pairs:
            raise NoRegionError("no shared region can host a patch")
    else:
        for _ in range(len(shared)):
            fake, fo = sample_patches(stylized_img, n, p, rng)
            ref, ro = sample_patches(style_img, n, p, rng)
            real, _ = sample_patches(style_img, n, p, rng)
            fakes.append(fake)
            refs.append(ref)
            reals.append(real)
            pairs.append((None, fo, ro))
    g_terms, d_terms = [], []
    for fake, ref, real in zip(fakes, refs, reals):
        g_terms.append(F.softplus(-dp(fake, ref)))
        d_terms.append(F.softplus(dp(fake.detach(), ref)).mean() + F.softplus(-dp(real, ref)).mean())
    g = torch.cat(g_terms).mean()
    d = torch.stack(d_terms).mean()
    return PatchLoss(g, d, sum(f.shape[0] for f in fakes), pairs)
