"""Frozen components the hypernetwork is trained against.

The generator is pretrained here as the decoder of an autoencoder over an
image pool, a desk-scale substitute for a GAN-pretrained portrait generator.
The inverter is then fitted against the frozen generator, and the style
encoder is the fixed-seed statistic extractor.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import load_checkpoint, read_manifest, save_checkpoint
from .data import PortraitSet
from .errors import DataError
from .generator import Generator, GeneratorSpec, build_generator, generator_from_tensors, generator_tensors
from .hypernet import Inverter, InverterTrainConfig, build_inverter, pretrain_inverter
from .metrics import FeatureExtractor, build_feature_extractor, perceptual_distance
from .style_codes import StyleEncoder, build_style_encoder

log = logging.getLogger(__name__)


@dataclass
class Backbone:
    generator: Generator
    inverter: Inverter
    style_encoder: StyleEncoder


def pool_images(roots, size: int) -> list[torch.Tensor]:
    images = []
    for root in roots:
        for split in ("content", "style"):
            try:
                images += PortraitSet(root, split, size, require_masks=False).images
            except DataError:
                continue
    if not images:
        raise DataError(f"no images found for generator pretraining in {roots}")
    return images


def pretrain_generator(gen: Generator, images, steps: int = 3000, lr: float = 2e-3, batch_size: int = 8,
                       seed: int = 0, features: FeatureExtractor | None = None,
                       history: list | None = None) -> Inverter:
    """Fit ``gen`` as an autoencoder decoder (pixel MSE + perceptual).

    The generator is frozen afterwards; the jointly trained encoder is returned
    so it can warm-start the inverter.
    """
    features = features or build_feature_extractor(0)
    data = torch.stack(list(images))
    enc = build_inverter(gen, seed + 1)
    gen.requires_grad_(True)
    params = list(gen.parameters()) + list(enc.parameters())
    opt = torch.optim.Adam(params, lr=lr, betas=(0.5, 0.99))
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, max(1, steps))
    rng = np.random.default_rng(seed)
    for step in range(steps):
        x = data[rng.integers(len(data), size=min(batch_size, len(data)))]
        y = gen(enc(x))
        loss = F.mse_loss(y, x) + perceptual_distance(features, y, x)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched.step()
        if history is not None:
            history.append(loss.item())
        if step % 500 == 0:
            log.info("generator pretraining step %d loss %.4f", step, loss.item())
    gen.requires_grad_(False)
    enc.requires_grad_(False)
    return enc


def build_backbone(spec: GeneratorSpec, images, generator_seed: int = 7, generator_steps: int = 3000,
                   inverter_steps: int = 500, code_dim: int = 64, style_seed: int = 0,
                   features: FeatureExtractor | None = None) -> Backbone:
    gen = build_generator(spec, generator_seed)
    enc = None
    if generator_steps > 0:
        enc = pretrain_generator(gen, images, generator_steps, seed=generator_seed, features=features)
    inv = pretrain_inverter(images, gen, InverterTrainConfig(steps=inverter_steps, batch_size=8),
                            seed=generator_seed + 2, init=enc)
    return Backbone(gen, inv, build_style_encoder(code_dim, style_seed))


def save_backbone(bb: Backbone, path) -> Path:
    path = Path(path)
    tensors, info = generator_tensors(bb.generator)
    save_checkpoint(path / "generator", tensors,
                    {"component": "generator", "spec": bb.generator.spec.to_dict(),
                     "seed": getattr(bb.generator, "seed", None)}, info)
    save_inverter(bb.inverter, path / "inverter")
    save_checkpoint(path / "style_encoder", bb.style_encoder.state_dict(),
                    {"component": "style_encoder", "dim": bb.style_encoder.dim})
    return path


def save_inverter(inv: Inverter, path):
    save_checkpoint(path, inv.state_dict(),
                    {"component": "inverter", "num_styles": inv.num_styles, "latent_dim": inv.latent_dim})


def load_generator(path) -> Generator:
    tensors, manifest = load_checkpoint(path)
    meta = manifest["meta"]
    return generator_from_tensors(meta["spec"], tensors, meta.get("seed") or 0)


def load_backbone(path) -> Backbone:
    path = Path(path)
    gen = load_generator(path / "generator")
    tensors, _ = load_checkpoint(path / "inverter")
    inv = Inverter(gen.spec.image_size, gen.num_styles, gen.spec.latent_dim, tensors["w_avg"])
    inv.load_state_dict(tensors)
    inv.requires_grad_(False)
    inv.eval()
    tensors, manifest = load_checkpoint(path / "style_encoder")
    enc = StyleEncoder(manifest["meta"]["dim"])
    enc.load_state_dict(tensors)
    enc.requires_grad_(False)
    enc.eval()
    return Backbone(gen, inv, enc)


def is_backbone(path) -> bool:
    try:
        return all(read_manifest(Path(path) / c) for c in ("generator", "inverter", "style_encoder"))
    except Exception:
        return False
