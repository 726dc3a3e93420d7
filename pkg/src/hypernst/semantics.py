"""Semantic masks: class grouping, region-constrained patch sampling, code rearrangement."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import torch

from .data import BACKGROUND, FACE, HAIR

REGIONS = (BACKGROUND, FACE, HAIR)
REGION_NAMES = {BACKGROUND: "background", FACE: "face", HAIR: "hair"}
TAU_FLOOR = 0.25
TAU_STEP = 0.05


class MaskError(ValueError):
    pass


class SamplingError(RuntimeError):
    pass


class MissingCodeError(KeyError):
    pass


@dataclass(frozen=True)
class PatchSpec:
    patch_size: int = 8
    patches_per_region: int = 3
    tau: float = 0.75
    max_attempts: int = 200

    def __post_init__(self):
        if not 0 < self.tau <= 1:
            raise ValueError(f"tau must lie in (0, 1], got {self.tau}")
        if self.patch_size < 1 or self.patches_per_region < 1 or self.max_attempts < 1:
            raise ValueError("patch_size, patches_per_region and max_attempts must be >= 1")


@dataclass
class PatchSample:
    region: int
    patches: torch.Tensor  # (n, C, p, p)
    offsets: list  # (y, x) top-left corners
    coverage: np.ndarray
    tau: float  # tau actually enforced (below the requested one only after relaxation)


def as_numpy_mask(mask) -> np.ndarray:
    if isinstance(mask, torch.Tensor):
        mask = mask.detach().cpu().numpy()
    return np.asarray(mask, dtype=np.int64)


def group_classes(raw_mask, grouping: Mapping[int, int]) -> np.ndarray:
    raw = as_numpy_mask(raw_mask)
    observed = np.unique(raw)
    missing = [int(c) for c in observed if int(c) not in grouping]
    if missing:
        raise MaskError(f"raw classes {missing} missing from grouping")
    bad = {k: v for k, v in grouping.items() if v not in REGIONS}
    if bad:
        raise MaskError(f"grouping targets must be in {REGIONS}: {bad}")
    lut = np.zeros(max(int(observed.max()), max(grouping)) + 1, np.int64)
    for k, v in grouping.items():
        lut[k] = v
    return lut[raw]


def region_areas(mask) -> dict[int, int]:
    m = as_numpy_mask(mask)
    counts = np.bincount(m.ravel(), minlength=3)
    return {r: int(counts[r]) for r in REGIONS}


def coverage_map(region_mask: np.ndarray, patch_size: int) -> np.ndarray:
    """Fraction of region pixels inside every patch_size window, indexed by top-left (y, x)."""
    p = patch_size
    ii = np.pad(region_mask.astype(np.int64), ((1, 0), (1, 0))).cumsum(0).cumsum(1)
    counts = ii[p:, p:] - ii[:-p, p:] - ii[p:, :-p] + ii[:-p, :-p]
    return counts / float(p * p)


def _crop(img: torch.Tensor, offsets, p: int) -> torch.Tensor:
    return torch.stack([img[:, y:y + p, x:x + p] for y, x in offsets])


def sample_region_patches(img: torch.Tensor, mask, region: int, spec: PatchSpec,
                          rng: np.random.Generator) -> PatchSample | None:
    """Sample ``spec.patches_per_region`` square patches mostly covering ``region``.

    Returns None when the region has no pixels (callers skip it). Offsets are
    rejection-sampled; if ``max_attempts`` misses, one is drawn uniformly from
    the full feasible set, so the requested tau is honoured whenever any
    window achieves it. Only when no window does is tau relaxed in 0.05 steps
    down to 0.25.
    """
    m = as_numpy_mask(mask)
    p = spec.patch_size
    H, W = m.shape
    if img.shape[-2:] != (H, W):
        raise MaskError(f"mask {m.shape} not aligned with image {tuple(img.shape[-2:])}")
    if p > min(H, W):
        raise ValueError(f"patch_size {p} exceeds image size {H}x{W}")
    region_mask = m == region
    if not region_mask.any():
        return None
    cov = coverage_map(region_mask, p)
    tau = spec.tau
    while not (cov >= tau).any():
        tau = round(tau - TAU_STEP, 10)
        if tau < TAU_FLOOR - 1e-9:
            raise SamplingError(
                f"region {REGION_NAMES.get(region, region)}: no {p}x{p} patch reaches coverage {TAU_FLOOR}")
    ny, nx = cov.shape
    offsets = []
    for _ in range(spec.patches_per_region):
        for _ in range(spec.max_attempts):
            y, x = int(rng.integers(ny)), int(rng.integers(nx))
            if cov[y, x] >= tau:
                break
        else:
            feasible = np.argwhere(cov >= tau)
            y, x = (int(v) for v in feasible[rng.integers(len(feasible))])
        offsets.append((y, x))
    covs = np.array([cov[y, x] for y, x in offsets])
    return PatchSample(region, _crop(img, offsets, p), offsets, covs, tau)


def sample_patches(img: torch.Tensor, n: int, patch_size: int, rng: np.random.Generator):
    """Unconstrained patches anywhere in the image; returns (patches, offsets)."""
    H, W = img.shape[-2:]
    offsets = [(int(rng.integers(H - patch_size + 1)), int(rng.integers(W - patch_size + 1)))
               for _ in range(n)]
    return _crop(img, offsets, patch_size), offsets


def code_table(codes, regions: Sequence[int] = REGIONS) -> torch.Tensor:
    """(3, D) lookup table; absent hair falls back to the whole-image code."""
    rows = []
    for r in regions:
        c = codes.codes.get(r)
        if c is None:
            if r == HAIR and codes.global_code is not None:
                c = codes.global_code
            else:
                raise MissingCodeError(f"no style code for region {REGION_NAMES.get(r, r)}")
        rows.append(c)
    return torch.stack(rows)


def rearrange_codes(codes, content_mask) -> torch.Tensor:
    """Per-pixel code field (D, H, W): each pixel carries its class's code."""
    m = torch.as_tensor(as_numpy_mask(content_mask))
    present = [int(r) for r in torch.unique(m)]
    unknown = [r for r in present if r not in REGIONS]
    if unknown:
        raise MaskError(f"content mask holds classes outside {REGIONS}: {unknown}")
    D = next(iter(codes.codes.values())).shape[-1] if codes.codes else codes.global_code.shape[-1]
    rows = []
    for r in REGIONS:
        if r in present:
            rows.append(code_table(codes, (r,))[0])
        else:
            rows.append(torch.zeros(D, dtype=_dtype(codes)))
    table = torch.stack(rows)
    return table[m].permute(2, 0, 1).contiguous()


def _dtype(codes):
    for c in codes.codes.values():
        return c.dtype
    return codes.global_code.dtype
