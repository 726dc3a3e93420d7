"""Latent-direction editing and a logistic-probe helper to produce directions."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import DataError, ShapeError
from .hypernet import Inverter, invert
from .semantics import HAIR, region_areas

MAGNITUDE_RANGE = (-3.0, 3.0)


@dataclass
class EditDirection:
    name: str
    vectors: torch.Tensor  # (num_styles, latent_dim), unit norm per layer

    def __post_init__(self):
        v = torch.as_tensor(self.vectors, dtype=torch.float32)
        if v.dim() != 2:
            raise ShapeError(f"direction must be (layers, dim), got {tuple(v.shape)}")
        norms = v.norm(dim=1, keepdim=True)
        # rows already at unit norm are kept as-is so save/load round-trips exactly
        keep = (norms == 0) | ((norms - 1).abs() < 1e-6)
        self.vectors = torch.where(keep, v, v / norms.clamp_min(1e-12))

    def check(self, num_styles: int, latent_dim: int):
        if tuple(self.vectors.shape) != (num_styles, latent_dim):
            raise ShapeError(f"direction {self.name!r} has shape {tuple(self.vectors.shape)}, "
                             f"generator expects ({num_styles}, {latent_dim})")


def save_direction(d: EditDirection, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    D = d.vectors.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["name", "layer"] + [f"v{i}" for i in range(D)])
        for i, row in enumerate(d.vectors.tolist()):
            w.writerow([d.name, i] + [repr(x) for x in row])
    return path


def load_direction(path) -> EditDirection:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except FileNotFoundError as exc:
        raise DataError(f"direction file not found: {path}") from exc
    if not rows:
        raise DataError(f"direction file {path} has no rows")
    rows.sort(key=lambda r: int(r["layer"]))
    cols = [k for k in rows[0] if k.startswith("v")]
    vec = torch.tensor([[float(r[c]) for c in cols] for r in rows])
    return EditDirection(rows[0]["name"], vec)


def edit_latent(latent: torch.Tensor, d: EditDirection, magnitude: float) -> torch.Tensor:
    d.check(latent.shape[-2], latent.shape[-1])
    return latent + magnitude * d.vectors.to(latent.dtype)


def hair_fraction(mask) -> float:
    areas = region_areas(mask)
    return areas[HAIR] / sum(areas.values())


@dataclass
class LinearProbe:
    weight: torch.Tensor  # (num_styles, latent_dim)
    bias: float

    def score(self, latent: torch.Tensor) -> torch.Tensor:
        return (latent * self.weight).flatten(1).sum(1) + self.bias


def fit_probe_direction(inverter: Inverter, images, attribute, name: str = "attribute",
                        steps: int = 500, lr: float = 0.05, weight_decay: float = 1e-3,
                        seed: int = 0) -> tuple[EditDirection, LinearProbe]:
    """Logistic probe on inverted latents against ``attribute > median``."""
    attribute = np.asarray(attribute, dtype=np.float64)
    if len(images) != len(attribute) or len(images) < 2:
        raise DataError("probe needs at least two images with one attribute value each")
    labels = torch.tensor(attribute > np.median(attribute), dtype=torch.float32)
    if labels.min() == labels.max():
        raise DataError("attribute is constant over the corpus; cannot fit a probe")
    with torch.no_grad():
        lat = torch.cat([invert(inverter, x) for x in images])
    mu, sd = lat.mean(0, keepdim=True), lat.std(0, keepdim=True).clamp_min(1e-6)
    x = ((lat - mu) / sd).flatten(1)
    g = torch.Generator().manual_seed(seed)
    w = (torch.randn(x.shape[1], generator=g) * 0.01).requires_grad_(True)
    b = torch.zeros((), requires_grad=True)
    opt = torch.optim.Adam([w, b], lr=lr, weight_decay=weight_decay)
    for _ in range(steps):
        loss = torch.nn.functional.binary_cross_entropy_with_logits(x @ w + b, labels)
        opt.zero_grad()
        loss.backward()
        opt.step()
    # back to raw latent coordinates
    w_raw = (w.detach() / sd.flatten()).reshape(lat.shape[1:])
    b_raw = float(b.detach() - (w.detach() * (mu / sd).flatten()).sum())
    return EditDirection(name, w_raw.clone()), LinearProbe(w_raw, b_raw)
