"""Miniature style-based generator with an explicit, flat layer enumeration.

Layers are numbered contiguously: the mapping layers first, then every
synthesis block in resolution order as ``conv0, conv1, ..., torgb``. Only the
synthesis layers (modulated convs and toRGB) accept weight deltas, and a delta
for layer ``i`` is one scalar per output channel.

Weights are modulated by the per-layer style but *not* demodulated: a
per-output-channel rescale would be divided straight back out by
demodulation, which would make channel deltas a no-op.
"""
from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError

DELTA_MODES = ("multiplicative", "additive")


@dataclass(frozen=True)
class GeneratorSpec:
    image_size: int = 64
    base_channels: int = 16
    max_channels: int = 32
    num_synthesis_blocks: int | None = None
    latent_dim: int = 64
    mapping_depth: int = 3
    convs_per_block: int = 2
    delta_mode: str = "multiplicative"

    def __post_init__(self):
        s = self.image_size
        if not isinstance(s, int) or s < 4 or s & (s - 1):
            raise ConfigError(f"image_size must be a power of two >= 4, got {s}")
        blocks = int(math.log2(s)) - 1
        if self.num_synthesis_blocks is None:
            object.__setattr__(self, "num_synthesis_blocks", blocks)
        elif self.num_synthesis_blocks != blocks:
            raise ConfigError(
                f"num_synthesis_blocks={self.num_synthesis_blocks} does not reach "
                f"image_size={s} from 4x4 (needs {blocks})")
        for name in ("base_channels", "max_channels", "latent_dim", "convs_per_block"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.mapping_depth < 0:
            raise ConfigError("mapping_depth must be >= 0")
        if self.delta_mode not in DELTA_MODES:
            raise ConfigError(f"delta_mode must be one of {DELTA_MODES}")

    def channels(self, res: int) -> int:
        return min(self.max_channels, self.base_channels * self.image_size // res)

    @property
    def resolutions(self) -> list[int]:
        return [4 * 2 ** i for i in range(self.num_synthesis_blocks)]

    @property
    def num_layers(self) -> int:
        return self.mapping_depth + self.num_synthesis_blocks * (self.convs_per_block + 1)

    @property
    def num_styles(self) -> int:
        return self.num_synthesis_blocks * (self.convs_per_block + 1)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class LayerInfo:
    index: int
    name: str
    kind: str  # "mapping" | "modulated_conv" | "torgb"
    in_channels: int
    out_channels: int
    resolution: int = 0
    style_index: int | None = None


def enumerate_layers(spec: GeneratorSpec) -> list[LayerInfo]:
    layers = []
    d = spec.latent_dim
    for i in range(spec.mapping_depth):
        layers.append(LayerInfo(len(layers), f"mapping.{i}", "mapping", d, d))
    style = 0
    cin = spec.channels(4)
    for res in spec.resolutions:
        cout = spec.channels(res)
        for j in range(spec.convs_per_block):
            layers.append(LayerInfo(len(layers), f"b{res}.conv{j}", "modulated_conv",
                                    cin, cout, res, style))
            style += 1
            cin = cout
        layers.append(LayerInfo(len(layers), f"b{res}.torgb", "torgb", cout, 3, res, style))
        style += 1
    return layers


def _lrelu(x):
    return F.leaky_relu(x, 0.2) * math.sqrt(2)


class MappingNetwork(nn.Module):
    def __init__(self, dim: int, depth: int):
        super().__init__()
        self.weight = nn.ParameterList([nn.Parameter(torch.empty(dim, dim)) for _ in range(depth)])
        self.bias = nn.ParameterList([nn.Parameter(torch.zeros(dim)) for _ in range(depth)])
        self.scale = 1 / math.sqrt(dim)

    def forward(self, z):
        x = z * torch.rsqrt(z.pow(2).mean(dim=1, keepdim=True) + 1e-8)
        for w, b in zip(self.weight, self.bias):
            x = _lrelu(F.linear(x, w * self.scale, b))
        return x


def scale_weight(weight, delta, mode: str):
    """Apply a per-output-channel delta to ``weight`` (out, ...).

    ``delta`` is (out,) or batched (B, out); a batched delta returns a batched weight.
    """
    shape = delta.shape + (1,) * (weight.dim() - 1)
    delta = delta.reshape(shape)
    if mode == "multiplicative":
        return weight * (1 + delta)
    return weight + delta


class ModulatedLayer(nn.Module):
    def __init__(self, info: LayerInfo, latent_dim: int, upsample: bool, delta_mode: str):
        super().__init__()
        self.info = info
        k = 1 if info.kind == "torgb" else 3
        self.kernel = k
        self.upsample = upsample
        self.activate = info.kind != "torgb"
        self.delta_mode = delta_mode
        self.weight = nn.Parameter(torch.empty(info.out_channels, info.in_channels, k, k))
        self.bias = nn.Parameter(torch.zeros(info.out_channels))
        self.affine_weight = nn.Parameter(torch.empty(info.in_channels, latent_dim))
        self.affine_bias = nn.Parameter(torch.ones(info.in_channels))
        self.noise_strength = nn.Parameter(torch.full((), 0.05 if self.activate else 0.0))
        self.scale = 1 / math.sqrt(info.in_channels * k * k)
        # small style gain keeps activations O(1) without demodulation
        self.affine_scale = 0.2 / math.sqrt(latent_dim)
        if info.kind == "torgb":
            self.scale *= 0.5

    def forward(self, x, w, delta=None, noise: torch.Generator | None = None):
        B, cin, H, W = x.shape
        style = F.linear(w, self.affine_weight * self.affine_scale, self.affine_bias)
        if delta is None:
            weight = self.weight.unsqueeze(0).expand(B, *self.weight.shape)
        else:
            if delta.dim() == 1:
                delta = delta.unsqueeze(0).expand(B, -1)
            weight = scale_weight(self.weight, delta, self.delta_mode)
        weight = weight * self.scale * style[:, None, :, None, None]
        if self.upsample:
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
            H, W = 2 * H, 2 * W
        out = F.conv2d(x.reshape(1, B * cin, H, W),
                       weight.reshape(B * self.info.out_channels, cin, self.kernel, self.kernel),
                       padding=self.kernel // 2, groups=B)
        out = out.reshape(B, self.info.out_channels, H, W)
        if noise is not None and self.activate:
            n = torch.randn((B, 1, H, W), generator=noise, dtype=out.dtype)
            out = out + self.noise_strength * n
        out = out + self.bias.reshape(1, -1, 1, 1)
        return _lrelu(out) if self.activate else out


class Generator(nn.Module):
    """Frozen target generator. ``forward(ws, deltas)`` is ``synthesize``."""

    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        self.spec = spec
        self.layers = enumerate_layers(spec)
        self.mapping = MappingNetwork(spec.latent_dim, spec.mapping_depth)
        self.const = nn.Parameter(torch.empty(1, spec.channels(4), 4, 4))
        synth = []
        for info in self.layers[spec.mapping_depth:]:
            first_conv = info.name.endswith("conv0") and info.resolution > 4
            synth.append(ModulatedLayer(info, spec.latent_dim, first_conv, spec.delta_mode))
        self.synthesis = nn.ModuleList(synth)

    @property
    def target_layers(self) -> tuple[int, ...]:
        return tuple(l.index for l in self.layers if l.kind != "mapping")

    @property
    def num_styles(self) -> int:
        return self.spec.num_styles

    def layer(self, index: int) -> LayerInfo:
        return self.layers[index]

    def synthesis_layer(self, index: int) -> ModulatedLayer:
        return self.synthesis[index - self.spec.mapping_depth]

    def map(self, z):
        w = self.mapping(z)
        return w.unsqueeze(1).repeat(1, self.num_styles, 1)

    def forward(self, ws, deltas: Mapping[int, torch.Tensor] | None = None,
                noise: torch.Generator | None = None):
        check_latent(self, ws)
        if deltas:
            validate_deltas(self, deltas)
        deltas = deltas or {}
        B = ws.shape[0]
        x = self.const.expand(B, -1, -1, -1)
        rgb = None
        for layer in self.synthesis:
            info = layer.info
            y = layer(x, ws[:, info.style_index], deltas.get(info.index), noise)
            if info.kind == "torgb":
                if rgb is not None:
                    rgb = F.interpolate(rgb, scale_factor=2, mode="bilinear", align_corners=False)
                    y = rgb + y
                rgb = y
            else:
                x = y
        return torch.tanh(rgb)


def check_latent(gen: Generator, ws):
    want = (gen.num_styles, gen.spec.latent_dim)
    if ws.dim() != 3 or tuple(ws.shape[1:]) != want:
        raise ShapeError(f"latent must have shape (B, {want[0]}, {want[1]}), got {tuple(ws.shape)}")


def validate_deltas(gen: Generator, deltas: Mapping[int, torch.Tensor]):
    targets = set(gen.target_layers)
    for idx, d in deltas.items():
        if idx not in targets:
            raise ShapeError(f"layer {idx} does not accept weight deltas")
        n = gen.layers[idx].out_channels
        if d.shape[-1] != n or d.dim() not in (1, 2):
            raise ShapeError(f"delta for layer {idx} has shape {tuple(d.shape)}, expected (..., {n})")


def build_generator(spec: GeneratorSpec | None = None, rng_seed: int = 0) -> Generator:
    spec = spec or GeneratorSpec()
    gen = Generator(spec)
    g = torch.Generator().manual_seed(rng_seed)
    with torch.no_grad():
        for w in gen.mapping.weight:
            w.copy_(torch.randn(w.shape, generator=g))
        gen.const.copy_(torch.randn(gen.const.shape, generator=g))
        for layer in gen.synthesis:
            layer.weight.copy_(torch.randn(layer.weight.shape, generator=g))
            layer.affine_weight.copy_(torch.randn(layer.affine_weight.shape, generator=g))
    gen.requires_grad_(False)
    gen.seed = rng_seed
    return gen


def zero_deltas(gen: Generator, batch: int | None = None, dtype=torch.float32) -> dict[int, torch.Tensor]:
    out = {}
    for idx in gen.target_layers:
        n = gen.layers[idx].out_channels
        out[idx] = torch.zeros(n if batch is None else (batch, n), dtype=dtype)
    return out


def apply_weight_deltas(gen: Generator, deltas: Mapping[int, torch.Tensor]) -> Generator:
    """Return a copy of ``gen`` whose keyed layer weights carry the deltas baked in."""
    validate_deltas(gen, deltas)
    out = copy.deepcopy(gen)
    with torch.no_grad():
        for idx, d in deltas.items():
            if d.dim() == 2:
                if d.shape[0] != 1:
                    raise ShapeError(f"cannot bake a batch of {d.shape[0]} deltas into one generator")
                d = d[0]
            layer = out.synthesis_layer(idx)
            layer.weight.copy_(scale_weight(layer.weight, d.to(layer.weight.dtype), gen.spec.delta_mode))
    return out


def synthesize(gen: Generator, latent, deltas=None, noise: torch.Generator | None = None):
    return gen(latent, deltas, noise)


def sample_latent(gen: Generator, rng: torch.Generator, n: int):
    """Draw z ~ N(0, I) and push it through the mapping layers; returns w+ (n, styles, dim)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    dtype = gen.const.dtype
    z = torch.randn((n, gen.spec.latent_dim), generator=rng, dtype=dtype)
    with torch.no_grad():
        return gen.map(z)


def mean_latent(gen: Generator, n: int = 4096, seed: int = 0):
    g = torch.Generator().manual_seed(seed)
    return sample_latent(gen, g, n).mean(dim=0, keepdim=True)


def generator_tensors(gen: Generator) -> tuple[dict, dict]:
    """State tensors plus (kind, layer index) annotations for the checkpoint manifest."""
    tensors = dict(gen.state_dict())
    info = {}
    for name in tensors:
        if name.startswith("mapping."):
            i = int(name.rsplit(".", 1)[1])
            info[name] = ("mapping", i)
        elif name.startswith("synthesis."):
            layer = gen.synthesis[int(name.split(".")[1])].info
            info[name] = (layer.kind, layer.index)
        else:
            info[name] = ("const", -1)
    return tensors, info


def generator_from_tensors(spec_dict: dict, tensors: Mapping[str, torch.Tensor], seed: int = 0) -> Generator:
    gen = Generator(GeneratorSpec(**spec_dict))
    gen.load_state_dict(dict(tensors))
    gen.requires_grad_(False)
    gen.seed = seed
    return gen
