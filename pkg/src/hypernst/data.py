"""Image/mask I/O, dataset layout and the synthetic portrait corpus.

Layout::

    root/content/NNN.png   root/content_masks/NNN.png
    root/style/NNN.png     root/style_masks/NNN.png

Images are 8-bit RGB on disk and (3, H, W) float tensors in [-1, 1] in memory.
Masks are single-channel 8-bit PNGs whose value is the grouped class id.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import DataError

BACKGROUND, FACE, HAIR = 0, 1, 2


def load_image(path, size: int | None = None) -> torch.Tensor:
    try:
        img = Image.open(path).convert("RGB")
    except (FileNotFoundError, OSError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    if size is not None and img.size != (size, size):
        img = img.resize((size, size), Image.BICUBIC)
    arr = np.asarray(img, dtype=np.float32) / 127.5 - 1.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def to_uint8(img: torch.Tensor) -> np.ndarray:
    arr = img.detach().cpu().float().clamp(-1, 1).permute(1, 2, 0).numpy()
    return np.round((arr + 1.0) * 127.5).astype(np.uint8)


def save_image(img: torch.Tensor, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(img), "RGB").save(path)
    return path


def load_mask(path, size: int | None = None) -> np.ndarray:
    try:
        m = Image.open(path)
    except (FileNotFoundError, OSError) as exc:
        raise DataError(f"cannot read mask {path}: {exc}") from exc
    if m.mode not in ("L", "P", "I"):
        m = m.convert("L")
    if size is not None and m.size != (size, size):
        m = m.resize((size, size), Image.NEAREST)
    return np.asarray(m, dtype=np.int64)


def save_mask(mask: np.ndarray, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(mask, dtype=np.uint8), "L").save(path)
    return path


def mask_path_for(image_path) -> Path:
    """``root/content/007.png`` -> ``root/content_masks/007.png``."""
    p = Path(image_path)
    return p.parent.parent / f"{p.parent.name}_masks" / p.name


@dataclass
class Split:
    ids: list[str]
    images: list[Path]
    masks: list[Path]


def list_split(root, split: str) -> Split:
    root = Path(root)
    img_dir, mask_dir = root / split, root / f"{split}_masks"
    if not img_dir.is_dir():
        raise DataError(f"dataset layout: missing directory {img_dir}")
    images = sorted(img_dir.glob("*.png"))
    if not images:
        raise DataError(f"dataset layout: no PNG files in {img_dir}")
    return Split([p.stem for p in images], images, [mask_dir / p.name for p in images])


class PortraitSet:
    """Images and masks of one split, loaded eagerly (desk-scale corpora are tiny)."""

    def __init__(self, root, split: str, size: int | None = None, require_masks: bool = True):
        s = list_split(root, split)
        self.ids = s.ids
        self.images = [load_image(p, size) for p in s.images]
        self.masks = []
        for p in s.masks:
            if p.exists():
                self.masks.append(load_mask(p, size))
            elif require_masks:
                raise DataError(f"dataset layout: missing mask {p}")
            else:
                self.masks.append(None)

    def __len__(self):
        return len(self.ids)


# --- synthetic corpus -------------------------------------------------------

@dataclass
class StyleFamily:
    background: tuple
    face: tuple
    hair: tuple
    texture: str  # stripes | checker | dots | grain
    frequency: float
    angle: float
    contrast: float


@dataclass
class SyntheticCorpusSpec:
    n_content: int = 8
    n_style: int = 8
    image_size: int = 64
    n_families: int = 4
    hairless_style_fraction: float = 0.25
    hairless_content_fraction: float = 0.0
    seed: int = 0
    families: list = field(default_factory=list)

    def __post_init__(self):
        if self.n_content < 1 or self.n_style < 1 or self.n_families < 1:
            raise ValueError("corpus counts must be >= 1")


TEXTURES = ("stripes", "checker", "dots", "grain")


def make_families(n: int, rng: np.random.Generator) -> list[StyleFamily]:
    fams = []
    for i in range(n):
        pal = rng.uniform(0, 1, size=(3, 3))
        # keep the three regions distinguishable
        pal[1] = 0.5 * pal[1] + 0.5 * rng.permutation([0.95, 0.55, 0.2])
        fams.append(StyleFamily(
            background=tuple(pal[0].round(4)), face=tuple(pal[1].round(4)), hair=tuple(pal[2].round(4)),
            texture=TEXTURES[i % len(TEXTURES)],
            frequency=float(rng.uniform(0.25, 0.6)), angle=float(rng.uniform(0, np.pi)),
            contrast=float(rng.uniform(0.25, 0.45))))
    return fams


def portrait_geometry(size: int, rng: np.random.Generator, hair: bool) -> dict:
    s = size / 64
    return {
        "cx": size / 2 + rng.uniform(-3, 3) * s,
        "cy": size * 0.56 + rng.uniform(-3, 3) * s,
        "a": rng.uniform(12, 15) * s,
        "b": rng.uniform(15, 18) * s,
        "hair_pad": rng.uniform(4, 7) * s,
        "hair": hair,
    }


def portrait_mask(size: int, geo: dict) -> np.ndarray:
    """Exact 3-class partition: face ellipse wins, hair is a band above it."""
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    cx, cy, a, b = geo["cx"], geo["cy"], geo["a"], geo["b"]
    face = ((xx - cx) / a) ** 2 + ((yy - cy) / b) ** 2 <= 1.0
    mask = np.zeros((size, size), np.int64)
    if geo["hair"]:
        p = geo["hair_pad"]
        outer = ((xx - cx) / (a + p)) ** 2 + ((yy - cy + 0.3 * p) / (b + p)) ** 2 <= 1.0
        hair = outer & (yy < cy + 0.2 * b) & ~face
        mask[hair] = HAIR
    mask[face] = FACE
    return mask


def _texture(kind: str, size: int, freq: float, angle: float, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    u = xx * np.cos(angle) + yy * np.sin(angle)
    v = -xx * np.sin(angle) + yy * np.cos(angle)
    if kind == "stripes":
        t = np.sign(np.sin(u * freq * 2))
    elif kind == "checker":
        t = np.sign(np.sin(u * freq)) * np.sign(np.sin(v * freq))
    elif kind == "dots":
        t = (np.sin(u * freq * 1.5) * np.sin(v * freq * 1.5) > 0.5) * 2.0 - 1.0
    else:
        t = rng.uniform(-1, 1, size=(size, size))
    return t


def render_content(size: int, geo: dict, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Photo-like portrait: smooth shading, no pixel noise."""
    mask = portrait_mask(size, geo)
    yy, xx = np.mgrid[0:size, 0:size] / size
    bg0, bg1 = rng.uniform(0.2, 0.8, 3), rng.uniform(0.2, 0.8, 3)
    grad = xx[..., None] * 0.5 + yy[..., None] * 0.5
    img = bg0 * (1 - grad) + bg1 * grad
    skin = np.array([0.85, 0.65, 0.5]) * rng.uniform(0.6, 1.1)
    hair = rng.uniform(0.05, 0.5) * np.array([1.0, 0.8, 0.6])
    dist = np.sqrt(((xx * size - geo["cx"]) / geo["a"]) ** 2 + ((yy * size - geo["cy"]) / geo["b"]) ** 2)
    shade = (1.0 - 0.35 * dist ** 2)[..., None]
    img = np.where((mask == 1)[..., None], skin * shade, img)
    img = np.where((mask == 2)[..., None], hair * (0.9 + 0.2 * yy[..., None]), img)
    # eyes and mouth stay inside the face class
    for dx in (-0.4, 0.4):
        ex, ey = geo["cx"] + dx * geo["a"], geo["cy"] - 0.2 * geo["b"]
        eye = ((xx * size - ex) ** 2 + (yy * size - ey) ** 2 <= (0.12 * geo["a"]) ** 2) & (mask == 1)
        img[eye] = 0.1
    mouth = (np.abs(yy * size - (geo["cy"] + 0.45 * geo["b"])) < 0.06 * geo["b"] + 0.5) & \
            (np.abs(xx * size - geo["cx"]) < 0.35 * geo["a"]) & (mask == 1)
    img[mouth] = [0.6, 0.2, 0.2]
    return np.clip(img, 0, 1), mask


def render_style(size: int, geo: dict, fam: StyleFamily, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Painted portrait: flat family palette per region plus the family's texture."""
    mask = portrait_mask(size, geo)
    pal = np.stack([np.array(fam.background), np.array(fam.face), np.array(fam.hair)])
    jitter = rng.normal(0, 0.04, size=(3, 3))
    img = np.clip(pal + jitter, 0, 1)[mask]
    tex = _texture(fam.texture, size, fam.frequency, fam.angle + rng.normal(0, 0.1), rng)
    img = img + fam.contrast * tex[..., None] * np.array([1.0, 0.9, 0.8])
    return np.clip(img, 0, 1), mask


def make_synthetic_corpus(spec: SyntheticCorpusSpec, root) -> Path:
    root = Path(root)
    try:
        for sub in ("content", "content_masks", "style", "style_masks"):
            (root / sub).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot write corpus to {root}: {exc}") from exc
    rng = np.random.default_rng(spec.seed)
    fams = [StyleFamily(**f) if isinstance(f, dict) else f for f in spec.families] \
        or make_families(spec.n_families, rng)
    size = spec.image_size
    geoms = {"content": [], "style": []}
    for i in range(spec.n_content):
        geo = portrait_geometry(size, rng, hair=rng.uniform() >= spec.hairless_content_fraction)
        img, mask = render_content(size, geo, rng)
        _write_pair(root, "content", i, img, mask)
        geoms["content"].append(geo)
    for i in range(spec.n_style):
        fam_idx = i % len(fams)
        geo = portrait_geometry(size, rng, hair=rng.uniform() >= spec.hairless_style_fraction)
        img, mask = render_style(size, geo, fams[fam_idx], rng)
        _write_pair(root, "style", i, img, mask)
        geoms["style"].append(dict(geo, family=fam_idx))
    meta = {"spec": asdict(spec), "families": [asdict(f) for f in fams], "geometry": geoms}
    (root / "corpus.json").write_text(json.dumps(meta, indent=1, default=float))
    return root


def _write_pair(root: Path, split: str, i: int, img: np.ndarray, mask: np.ndarray):
    name = f"{i:03d}.png"
    Image.fromarray(np.round(img * 255).astype(np.uint8), "RGB").save(root / split / name)
    save_mask(mask, root / f"{split}_masks" / name)
