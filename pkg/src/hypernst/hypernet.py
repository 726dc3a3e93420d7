"""Hypernetwork that predicts per-channel weight deltas for the frozen generator.

Conditioning: the content image and the current reconstruction are encoded to a
g x g x C grid, the per-pixel style-code field to a second g x g x C grid, and
the two are stacked along channels. One head per target generator layer turns
that grid into a delta vector; the heads' last layers start at zero so an
untrained hypernetwork is the identity.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DataError, ShapeError
from .generator import Generator, mean_latent, synthesize
from .init import seeded_init_
from .semantics import rearrange_codes


def _down_stack(cin: int, size: int, target: int, widths) -> nn.Sequential:
    """Stride-1 stem then stride-2 convs until ``size`` reaches ``target``."""
    n_down = int(round(math.log2(size // target)))
    layers = [nn.Conv2d(cin, widths[0], 3, padding=1), nn.LeakyReLU(0.2)]
    c = widths[0]
    for i in range(n_down):
        w = widths[min(i + 1, len(widths) - 1)]
        layers += [nn.Conv2d(c, w, 3, stride=2, padding=1), nn.LeakyReLU(0.2)]
        c = w
    return nn.Sequential(*layers)


class Inverter(nn.Module):
    """Image -> w+ latent, predicted as an offset from the generator's mean latent."""

    def __init__(self, image_size: int, num_styles: int, latent_dim: int, w_avg: torch.Tensor):
        super().__init__()
        target = min(4, image_size)
        self.features = _down_stack(3, image_size, target, (16, 32, 32, 64, 64))
        c = self.features[-2].out_channels
        self.head = nn.Linear(c * target * target, num_styles * latent_dim)
        self.num_styles, self.latent_dim = num_styles, latent_dim
        self.register_buffer("w_avg", w_avg.reshape(1, num_styles, latent_dim).clone())

    def forward(self, x):
        if x.dim() == 3:
            x = x.unsqueeze(0)
        h = self.features(x).flatten(1)
        return self.w_avg + self.head(h).reshape(-1, self.num_styles, self.latent_dim)


def build_inverter(gen: Generator, seed: int = 0) -> Inverter:
    inv = Inverter(gen.spec.image_size, gen.num_styles, gen.spec.latent_dim, mean_latent(gen, seed=seed))
    seeded_init_(inv, seed, gain=math.sqrt(2))
    with torch.no_grad():
        inv.head.weight.mul_(0.1)
    return inv


@torch.no_grad()
def invert(inverter: Inverter, img):
    return inverter(img)


@dataclass
class InverterTrainConfig:
    steps: int = 1000
    lr: float = 1e-3
    batch_size: int = 4


def pretrain_inverter(images, gen: Generator, cfg: InverterTrainConfig | None = None, seed: int = 0,
                      log: list | None = None, init: Inverter | None = None) -> Inverter:
    """Fit an inverter by pixel L2 through the frozen generator; returned frozen.

    ``init`` warm-starts from an existing inverter (its weights are copied).
    """
    cfg = cfg or InverterTrainConfig()
    images = list(images)
    if not images:
        raise DataError("inverter pretraining needs a non-empty corpus")
    data = torch.stack(images)
    inv = build_inverter(gen, seed)
    if init is not None:
        inv.load_state_dict(init.state_dict())
    inv.requires_grad_(True)
    inv.train()
    rng = np.random.default_rng(seed)
    opt = torch.optim.Adam(inv.parameters(), lr=cfg.lr)
    for _ in range(cfg.steps):
        idx = rng.integers(len(data), size=min(cfg.batch_size, len(data)))
        x = data[idx]
        loss = F.mse_loss(gen(inv(x)), x)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if log is not None:
            log.append(loss.item())
    inv.requires_grad_(False)
    inv.eval()
    return inv


class DeltaHead(nn.Module):
    def __init__(self, cin: int, out_channels: int, hidden: int = 32):
        super().__init__()
        self.conv = nn.Conv2d(cin, hidden, 3, padding=1)
        self.out = nn.Linear(hidden, out_channels)

    def forward(self, cond):
        h = F.leaky_relu(self.conv(cond), 0.2).mean(dim=(2, 3))
        return self.out(h)


class HyperNetwork(nn.Module):
    def __init__(self, gen: Generator, code_dim: int, grid: int | None = None, channels: int = 32,
                 start_layer: int | None = None):
        super().__init__()
        size = gen.spec.image_size
        self.image_size = size
        self.grid = grid or max(1, size // 8)
        self.channels = channels
        self.code_dim = code_dim
        C = channels
        self.content_encoder = _down_stack(6, size, self.grid, (C // 2, C, C, C, C))
        self.code_encoder = _down_stack(code_dim, size, self.grid, (C // 2, C, C, C, C))
        self.targets = tuple(gen.target_layers)
        self.heads = nn.ModuleDict({
            str(i): DeltaHead(2 * C, gen.layers[i].out_channels) for i in self.targets})
        self.start_layer = start_layer if start_layer is not None else default_start_layer(gen.spec.num_layers)

    def head(self, index: int) -> DeltaHead:
        return self.heads[str(index)]

    def heads_from(self, k: int) -> list[int]:
        return [i for i in self.targets if i >= k]

    def heads_below(self, k: int) -> list[int]:
        return [i for i in self.targets if i < k]


def default_start_layer(num_layers: int) -> int:
    return math.ceil(num_layers * 13 / 25)


def build_hypernet(gen: Generator, code_dim: int, seed: int = 0, **kw) -> HyperNetwork:
    h = HyperNetwork(gen, code_dim, **kw)
    seeded_init_(h, seed, gain=math.sqrt(2))
    with torch.no_grad():
        for head in h.heads.values():
            head.out.weight.zero_()
            head.out.bias.zero_()
    return h


def encode_content(h: HyperNetwork, content, current_recon):
    if content.dim() == 3:
        content = content.unsqueeze(0)
    if current_recon.dim() == 3:
        current_recon = current_recon.unsqueeze(0)
    if content.shape != current_recon.shape:
        raise ShapeError(f"content {tuple(content.shape)} and reconstruction {tuple(current_recon.shape)} differ")
    if content.shape[-1] != h.image_size or content.shape[-2] != h.image_size:
        raise ShapeError(f"expected {h.image_size}x{h.image_size} images, got {tuple(content.shape[-2:])}")
    return h.content_encoder(torch.cat([content, current_recon], dim=1))


def encode_code_field(h: HyperNetwork, field):
    if field.dim() == 3:
        field = field.unsqueeze(0)
    want = (h.code_dim, h.image_size, h.image_size)
    if tuple(field.shape[1:]) != want:
        raise ShapeError(f"code field must be (B, {want[0]}, {want[1]}, {want[2]}), got {tuple(field.shape)}")
    return h.code_encoder(field)


def fuse_conditioning(a, b):
    if a.shape[0] != b.shape[0] or a.shape[-2:] != b.shape[-2:]:
        raise ShapeError(f"cannot fuse grids {tuple(a.shape)} and {tuple(b.shape)}")
    return torch.cat([a, b], dim=1)


def predict_deltas(h: HyperNetwork, cond) -> dict[int, torch.Tensor]:
    if cond.dim() != 4 or cond.shape[1] != 2 * h.channels:
        raise ShapeError(f"conditioning must have {2 * h.channels} channels, got {tuple(cond.shape)}")
    return {i: h.head(i)(cond) for i in h.targets}


def add_deltas(a: dict, b: dict) -> dict:
    return {k: a[k] + b[k] for k in a}


@dataclass
class RefineResult:
    deltas: dict
    image: torch.Tensor
    images: list  # images[0] is the rough inversion, images[t] after t iterations
    latent: torch.Tensor


def refine_field(h: HyperNetwork, latent, gen: Generator, content, field, R: int = 3,
                 noise: torch.Generator | None = None) -> RefineResult:
    """Iterative delta refinement from a precomputed (B, D, H, W) code field."""
    if R < 1:
        raise ValueError("R must be >= 1")
    if content.dim() == 3:
        content = content.unsqueeze(0)
    with torch.no_grad():
        recon = synthesize(gen, latent, None, noise)
    images = [recon]
    code_grid = encode_code_field(h, field)
    deltas = None
    for _ in range(R):
        cond = fuse_conditioning(encode_content(h, content, recon), code_grid)
        step = predict_deltas(h, cond)
        deltas = step if deltas is None else add_deltas(deltas, step)
        recon = synthesize(gen, latent, deltas, noise)
        images.append(recon)
    return RefineResult(deltas, recon, images, latent)


def refine(h: HyperNetwork, inverter: Inverter, gen: Generator, content, codes, content_mask,
           R: int = 3, noise: torch.Generator | None = None) -> RefineResult:
    field = rearrange_codes(codes, content_mask).unsqueeze(0)
    latent = invert(inverter, content)
    return refine_field(h, latent, gen, content, field.to(content.dtype), R, noise)
