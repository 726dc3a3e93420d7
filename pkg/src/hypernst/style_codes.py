"""Frozen metric style embedding built on channel-wise AdaIN statistics.

The encoder runs a small fixed-seed conv stack, collects (mean, std) of every
channel at every stage (the raw pixels count as stage 0) and projects the
concatenated statistics to a D-dimensional code.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DataError, ShapeError
from .init import seeded_init_
from .semantics import REGIONS, PatchSpec, SamplingError, code_table, sample_region_patches

MIN_SIZE = 8
STAT_EPS = 1e-5


class EmptyMaskError(DataError):
    pass


def channel_stats(x: torch.Tensor) -> torch.Tensor:
    """(B, C, H, W) -> (B, 2C): per-channel mean and population std."""
    mean = x.mean(dim=(2, 3))
    var = x.var(dim=(2, 3), unbiased=False)
    return torch.cat([mean, torch.sqrt(var + STAT_EPS)], dim=1)


class StyleEncoder(nn.Module):
    def __init__(self, dim: int = 64, widths=(16, 32, 32)):
        super().__init__()
        self.dim = dim
        convs = []
        cin = 3
        for i, w in enumerate(widths):
            convs.append(nn.Conv2d(cin, w, 3, stride=1 if i == 0 else 2, padding=1))
            cin = w
        self.convs = nn.ModuleList(convs)
        n_stats = 2 * (3 + sum(widths))
        self.proj = nn.Linear(n_stats, dim)

    def forward(self, x):
        if x.dim() == 3:
            x = x.unsqueeze(0)
        if min(x.shape[-2:]) < MIN_SIZE:
            raise ShapeError(f"style encoder needs at least {MIN_SIZE}x{MIN_SIZE} inputs, got {tuple(x.shape[-2:])}")
        stats = [channel_stats(x)]
        for conv in self.convs:
            x = F.leaky_relu(conv(x), 0.2)
            stats.append(channel_stats(x))
        return self.proj(torch.cat(stats, dim=1))


def build_style_encoder(dim: int = 64, seed: int = 0) -> StyleEncoder:
    enc = StyleEncoder(dim)
    seeded_init_(enc, seed)
    enc.requires_grad_(False)
    enc.eval()
    return enc


@dataclass
class RegionStyleCodes:
    codes: dict  # region id -> (D,) tensor, present regions only
    global_code: torch.Tensor | None = None
    tau_used: dict = field(default_factory=dict)

    @property
    def present(self) -> dict[int, bool]:
        return {r: r in self.codes for r in REGIONS}

    @classmethod
    def global_only(cls, code: torch.Tensor) -> "RegionStyleCodes":
        """Whole-image code for every region (non-portrait styles, or no mask conditioning)."""
        return cls({r: code for r in REGIONS}, code)


@torch.no_grad()
def extract_style_code(enc: StyleEncoder, img: torch.Tensor) -> torch.Tensor:
    return enc(img)[0]


@torch.no_grad()
def extract_region_style_codes(enc: StyleEncoder, img: torch.Tensor, mask, P: int = 4,
                               patch_size: int = 8, tau: float = 0.75,
                               rng: np.random.Generator | None = None) -> RegionStyleCodes:
    """Average the codes of P region-covering patches for every present region."""
    if P < 1:
        raise ValueError("P must be >= 1")
    rng = rng if rng is not None else np.random.default_rng(0)
    spec = PatchSpec(patch_size=patch_size, patches_per_region=P, tau=tau)
    codes, taus = {}, {}
    for r in REGIONS:
        try:
            sample = sample_region_patches(img, mask, r, spec, rng)
        except SamplingError:
            sample = None
        if sample is None:
            continue
        codes[r] = enc(sample.patches).mean(dim=0)
        taus[r] = sample.tau
    if not codes:
        raise EmptyMaskError("no semantic region can host a patch")
    return RegionStyleCodes(codes, extract_style_code(enc, img), taus)


def interpolate_codes(a: torch.Tensor, b: torch.Tensor, t: float) -> torch.Tensor:
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"interpolation weight must lie in [0, 1], got {t}")
    if a.shape != b.shape:
        raise ShapeError(f"code shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    return (1 - t) * a + t * b


def interpolate_region_codes(a: RegionStyleCodes, b: RegionStyleCodes, t: float) -> RegionStyleCodes:
    """Region-wise interpolation after resolving the hair fallback on both sides."""
    ta, tb = code_table(a), code_table(b)
    mixed = interpolate_codes(ta, tb, t)
    g = None
    if a.global_code is not None and b.global_code is not None:
        g = interpolate_codes(a.global_code, b.global_code, t)
    return RegionStyleCodes({r: mixed[i] for i, r in enumerate(REGIONS)}, g)


@dataclass
class EncoderTrainConfig:
    steps: int = 500
    crop: int = 16
    lr: float = 1e-3
    temperature: float = 0.1


def _random_crop(img, size, rng):
    H, W = img.shape[-2:]
    y, x = rng.integers(H - size + 1), rng.integers(W - size + 1)
    return img[:, y:y + size, x:x + size]


def contrastive_loss(enc: StyleEncoder, groups, cfg: EncoderTrainConfig, rng) -> torch.Tensor:
    """InfoNCE over one image per style: two crops of an image are the positive pair."""
    picks = [g[rng.integers(len(g))] for g in groups]
    v1 = torch.stack([_random_crop(im, cfg.crop, rng) for im in picks])
    v2 = torch.stack([_random_crop(im, cfg.crop, rng) for im in picks])
    z1 = F.normalize(enc(v1), dim=1)
    z2 = F.normalize(enc(v2), dim=1)
    logits = z1 @ z2.t() / cfg.temperature
    target = torch.arange(len(groups))
    return 0.5 * (F.cross_entropy(logits, target) + F.cross_entropy(logits.t(), target))


def pretrain_style_encoder(corpus: dict, cfg: EncoderTrainConfig | None = None, seed: int = 0,
                           dim: int = 64, log: list | None = None) -> StyleEncoder:
    """Contrastive pretraining; ``corpus`` maps a style label to a list of images."""
    cfg = cfg or EncoderTrainConfig()
    groups = [list(v) for v in corpus.values() if len(v)]
    if len(groups) < 2:
        raise DataError("contrastive pretraining needs at least two distinct style groups")
    enc = build_style_encoder(dim, seed)
    enc.requires_grad_(True)
    enc.train()
    rng = np.random.default_rng(seed)
    opt = torch.optim.Adam(enc.parameters(), lr=cfg.lr)
    for _ in range(cfg.steps):
        loss = contrastive_loss(enc, groups, cfg, rng)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if log is not None:
            log.append(loss.item())
    enc.requires_grad_(False)
    enc.eval()
    return enc
