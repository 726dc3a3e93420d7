"""Perceptual distance and single-image Frechet distance over a frozen random feature stack.

The feature extractor is a fixed-seed conv stack standing in for pretrained
backbones, so absolute values are only comparable within one extractor seed.
"""
from __future__ import annotations

import os
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .errors import ShapeError
from .init import seeded_init_

SIFID_TAP = 1
SIFID_EPS = 1e-6
BIAS_STD = 0.5


class FeatureExtractor(nn.Module):
    def __init__(self, widths=(16, 32, 64, 64)):
        super().__init__()
        convs, cin = [], 3
        for i, w in enumerate(widths):
            convs.append(nn.Conv2d(cin, w, 3, stride=1 if i == 0 else 2, padding=1))
            cin = w
        self.convs = nn.ModuleList(convs)
        self.seed = None

    def forward(self, x):
        if x.dim() == 3:
            x = x.unsqueeze(0)
        taps = []
        for conv in self.convs:
            x = F.leaky_relu(conv(x), 0.2)
            taps.append(x)
        return taps


def cache_dir() -> Path:
    return Path(os.environ.get("HYPERNST_CACHE", Path.home() / ".cache" / "hypernst"))


def build_feature_extractor(seed: int = 0, use_cache: bool = True) -> FeatureExtractor:
    f = FeatureExtractor()
    path = cache_dir() / f"features-v2-seed{seed}"
    loaded = False
    if use_cache and path.exists():
        try:
            tensors, _ = load_checkpoint(path)
            f.load_state_dict(tensors)
            loaded = True
        except (CheckpointError, RuntimeError):
            loaded = False
    if not loaded:
        seeded_init_(f, seed, gain=np.sqrt(2))
        # random biases keep every channel partly active, which steadies the normalised taps
        g = torch.Generator().manual_seed(seed + 1)
        with torch.no_grad():
            for conv in f.convs:
                conv.bias.copy_(torch.randn(conv.bias.shape, generator=g) * BIAS_STD)
        if use_cache:
            try:
                save_checkpoint(path, f.state_dict(), {"component": "feature_extractor", "seed": seed})
            except OSError:
                pass
    f.requires_grad_(False)
    f.eval()
    f.seed = seed
    return f


def _check_pair(x, y):
    if x.shape != y.shape:
        raise ShapeError(f"image shapes differ: {tuple(x.shape)} vs {tuple(y.shape)}")


def _unit(t, eps=1e-10):
    return t / torch.sqrt(t.pow(2).sum(dim=1, keepdim=True) + eps)


def perceptual_distance(f: FeatureExtractor, x, y, reduce: bool = True):
    """Mean over taps of spatially averaged squared differences of unit-normalised features."""
    _check_pair(x, y)
    fx, fy = f(x), f(y)
    per_tap = [(_unit(a) - _unit(b)).pow(2).sum(dim=1).mean(dim=(1, 2)) for a, b in zip(fx, fy)]
    d = torch.stack(per_tap).mean(dim=0)
    return d.mean() if reduce else d


def frechet_distance(mu1, cov1, mu2, cov2, eps: float = SIFID_EPS) -> float:
    """||mu1-mu2||^2 + tr(S1 + S2 - 2 (S1 S2)^1/2), in float64.

    The trace of the product root is taken as tr((A S2 A)^1/2) with A = S1^1/2,
    both roots by symmetric eigendecomposition with negative eigenvalues clamped.
    eps*I is added to both covariances only when one of them is singular.
    """
    mu1, mu2 = np.atleast_1d(np.asarray(mu1, np.float64)), np.atleast_1d(np.asarray(mu2, np.float64))
    cov1, cov2 = np.atleast_2d(np.asarray(cov1, np.float64)), np.atleast_2d(np.asarray(cov2, np.float64))
    if mu1.shape != mu2.shape or cov1.shape != cov2.shape:
        raise ShapeError("Frechet distance needs matching statistics shapes")
    w1 = np.linalg.eigvalsh(cov1)
    w2 = np.linalg.eigvalsh(cov2)
    if min(w1.min(), w2.min()) < eps:
        eye = np.eye(cov1.shape[0])
        cov1, cov2 = cov1 + eps * eye, cov2 + eps * eye
    root1 = _sqrtm_psd(cov1)
    inner = root1 @ cov2 @ root1
    inner = 0.5 * (inner + inner.T)
    tr_cross = np.sqrt(np.clip(np.linalg.eigvalsh(inner), 0, None)).sum()
    diff = mu1 - mu2
    return float(diff @ diff + np.trace(cov1) + np.trace(cov2) - 2.0 * tr_cross)


def _sqrtm_psd(a):
    w, v = np.linalg.eigh(0.5 * (a + a.T))
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def feature_stats(f: FeatureExtractor, x, tap: int = SIFID_TAP):
    with torch.no_grad():
        feat = f(x)[tap][0]
    feat = feat.reshape(feat.shape[0], -1).t().double().numpy()
    return feat.mean(axis=0), np.cov(feat, rowvar=False)


def sifid(f: FeatureExtractor, x, y, tap: int = SIFID_TAP) -> float:
    _check_pair(x, y)
    m1, c1 = feature_stats(f, x, tap)
    m2, c2 = feature_stats(f, y, tap)
    return frechet_distance(m1, c1, m2, c2)
