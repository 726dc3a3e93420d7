"""Trained model container: frozen backbone plus hypernetwork, with persistence.

A model directory holds ``model.json`` and one checkpoint directory per
component (generator, inverter, style_encoder, hypernet).
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .backbone import Backbone, load_backbone, save_backbone
from .checkpoint import load_checkpoint, save_checkpoint
from .hypernet import HyperNetwork, RefineResult, build_hypernet, invert, refine_field
from .semantics import rearrange_codes
from .style_codes import RegionStyleCodes, extract_region_style_codes, extract_style_code

MODEL_FILE = "model.json"


@dataclass
class CodeSettings:
    codes_per_region: int = 4
    patch_size: int = 8
    tau: float = 0.75
    mask_cond: bool = True


class HyperNST:
    def __init__(self, backbone: Backbone, hypernet: HyperNetwork, iterations: int = 3,
                 codes: CodeSettings | None = None):
        self.backbone = backbone
        self.hypernet = hypernet
        self.iterations = iterations
        self.code_settings = codes or CodeSettings()

    @property
    def generator(self):
        return self.backbone.generator

    @property
    def inverter(self):
        return self.backbone.inverter

    @property
    def style_encoder(self):
        return self.backbone.style_encoder

    @property
    def image_size(self) -> int:
        return self.generator.spec.image_size

    def codes(self, img, mask=None, rng: np.random.Generator | None = None,
              global_code: bool = False) -> RegionStyleCodes:
        """Region codes of ``img``; whole-image code everywhere without a mask or mask conditioning."""
        s = self.code_settings
        if global_code or mask is None or not s.mask_cond:
            return RegionStyleCodes.global_only(extract_style_code(self.style_encoder, img))
        return extract_region_style_codes(self.style_encoder, img, mask, s.codes_per_region,
                                          s.patch_size, s.tau, rng)

    def field(self, codes: RegionStyleCodes, content_mask) -> torch.Tensor:
        return rearrange_codes(codes, content_mask)

    def stylize(self, content, content_mask, codes: RegionStyleCodes, latent=None,
                noise: torch.Generator | None = None) -> RefineResult:
        if latent is None:
            latent = invert(self.inverter, content)
        field = self.field(codes, content_mask).unsqueeze(0).to(content.dtype)
        return refine_field(self.hypernet, latent, self.generator, content, field, self.iterations, noise)

    def save(self, path) -> Path:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        save_backbone(self.backbone, path)
        save_hypernet(self.hypernet, path / "hypernet", self.iterations)
        meta = {"format": "hypernst-model/1", "iterations": self.iterations,
                "codes": asdict(self.code_settings),
                "components": ["generator", "inverter", "style_encoder", "hypernet"]}
        (path / MODEL_FILE).write_text(json.dumps(meta, indent=1))
        return path

    @classmethod
    def load(cls, path) -> "HyperNST":
        path = Path(path)
        meta = json.loads((path / MODEL_FILE).read_text())
        bb = load_backbone(path)
        h = load_hypernet(path / "hypernet", bb.generator)
        h.requires_grad_(False)
        return cls(bb, h, meta["iterations"], CodeSettings(**meta["codes"]))


def hypernet_meta(h: HyperNetwork, iterations: int) -> dict:
    return {"component": "hypernet", "start_layer": h.start_layer, "iterations": iterations,
            "grid": h.grid, "channels": h.channels, "code_dim": h.code_dim,
            "targets": list(h.targets)}


def save_hypernet(h: HyperNetwork, path, iterations: int):
    save_checkpoint(path, h.state_dict(), hypernet_meta(h, iterations))


def load_hypernet(path, gen) -> HyperNetwork:
    tensors, manifest = load_checkpoint(path)
    m = manifest["meta"]
    h = build_hypernet(gen, m["code_dim"], grid=m["grid"], channels=m["channels"],
                       start_layer=m["start_layer"])
    h.load_state_dict(tensors)
    return h
