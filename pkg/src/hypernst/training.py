"""Two-stage training: reconstruction pretraining, then stylization fine-tuning.

Stage 1 trains both conditioning encoders and every delta head on the
reconstruction pass. Stage 2 freezes the encoders and the heads below the start
layer, and runs a stylization pass and a reconstruction pass on the same
content batch each step, together with the two discriminators.
"""
from __future__ import annotations

import base64
import csv
import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .adversaries import (NoRegionError, build_image_discriminator, build_patch_discriminator,
                          image_disc_loss, pcd_loss)
from .backbone import Backbone, build_backbone, is_backbone, load_backbone, pool_images, save_backbone
from .checkpoint import directory_hash, load_checkpoint, module_hash, save_checkpoint, state_hash
from .data import PortraitSet
from .errors import ConfigError, DataError, NumericError
from .generator import DELTA_MODES, GeneratorSpec
from .hypernet import build_hypernet, default_start_layer, invert, refine_field
from .metrics import build_feature_extractor, cache_dir, perceptual_distance
from .model import CodeSettings, HyperNST, load_hypernet
from .plotting import plot_losses
from .semantics import PatchSpec

log = logging.getLogger(__name__)

LOSS_COLUMNS = ["step", "stage", "pass", "l_rec", "l_pcd_g", "l_pcd_d", "l_disc_g", "l_disc_d", "total"]


@dataclass
class TrainConfig:
    lambda_rec: float = 1.0
    lambda_style: float = 2.0
    start_layer: int | None = None
    iterations: int = 3
    learning_rate: float = 1e-3
    learning_rate_stage2: float = 1e-4
    # well below the hypernet rate: per-channel deltas are a weak generator and a faster D collapses training
    learning_rate_disc: float = 2e-5
    steps_stage1: int = 2000
    steps_stage2: int = 500
    batch_size: int = 1
    seed: int = 0
    patch_size: int = 8
    patches_per_region: int = 3
    tau: float = 0.75
    codes_per_region: int = 4
    code_patch_size: int = 16
    r1_gamma: float = 1.0
    mask_cond: bool = True
    mask_loss: bool = True
    noise: bool = True
    deterministic: bool = False
    image_size: int = 64
    base_channels: int = 16
    max_channels: int = 32
    code_dim: int = 64
    grid: int | None = None
    grid_channels: int = 32
    delta_mode: str = "multiplicative"
    backbone: str | None = None
    generator_seed: int = 7
    generator_steps: int = 2000
    inverter_steps: int = 500
    pool: str | None = None
    checkpoint_every: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("lambda_rec", "lambda_style", "learning_rate", "learning_rate_stage2",
                     "learning_rate_disc", "r1_gamma"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name}: must be >= 0, got {getattr(self, name)}")
        for name in ("steps_stage1", "steps_stage2", "generator_steps", "inverter_steps", "checkpoint_every"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name}: must be >= 0, got {getattr(self, name)}")
        for name in ("iterations", "batch_size", "patches_per_region", "codes_per_region", "code_dim",
                     "grid_channels", "patch_size", "code_patch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name}: must be >= 1, got {getattr(self, name)}")
        if not 0 < self.tau <= 1:
            raise ConfigError(f"tau: must lie in (0, 1], got {self.tau}")
        if self.delta_mode not in DELTA_MODES:
            raise ConfigError(f"delta_mode: expected one of {DELTA_MODES}, got {self.delta_mode!r}")
        if self.patch_size > self.image_size:
            raise ConfigError("patch_size: larger than image_size")
        if not 8 <= self.code_patch_size <= self.image_size:
            raise ConfigError(f"code_patch_size: must lie in [8, image_size], got {self.code_patch_size}")

    def generator_spec(self) -> GeneratorSpec:
        try:
            return GeneratorSpec(image_size=self.image_size, base_channels=self.base_channels,
                                 max_channels=self.max_channels, delta_mode=self.delta_mode)
        except ConfigError as exc:
            raise ConfigError(f"image_size: {exc}") from exc

    def resolved_start_layer(self) -> int:
        L = self.generator_spec().num_layers
        k = default_start_layer(L) if self.start_layer is None else self.start_layer
        if not 0 <= k < L:
            raise ConfigError(f"start_layer: must lie in [0, {L - 1}], got {k}")
        return k

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    @classmethod
    def from_dict(cls, d: dict, source: str = "config") -> "TrainConfig":
        if not isinstance(d, dict):
            raise ConfigError(f"{source}: top level must be a JSON object")
        fields = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - set(fields))
        if unknown:
            raise ConfigError(f"{source}: unknown config key {unknown[0]!r}")
        if "lambda_style" not in d:
            log.warning("%s: lambda_style not set, falling back to default %.1f", source, cls.lambda_style)
        kw = {}
        for name, value in d.items():
            kw[name] = _coerce(name, value, fields[name].type, source)
        return cls(**kw)


def _coerce(name, value, typ, source):
    typ = str(typ)
    optional = "None" in typ
    if value is None:
        if optional:
            return None
        raise ConfigError(f"{source}.{name}: must not be null")
    if typ.startswith("bool"):
        if not isinstance(value, bool):
            raise ConfigError(f"{source}.{name}: expected boolean, got {value!r}")
        return value
    if typ.startswith("int"):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{source}.{name}: expected integer, got {value!r}")
        return value
    if typ.startswith("float"):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{source}.{name}: expected number, got {value!r}")
        return float(value)
    if not isinstance(value, str):
        raise ConfigError(f"{source}.{name}: expected string, got {value!r}")
    return value


def load_config(path) -> TrainConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return TrainConfig.from_dict(raw, source=path.name)


def recon_loss(content, recon, features=None):
    """Pixel MSE plus perceptual distance, equally weighted."""
    features = features if features is not None else build_feature_extractor(0)
    return F.mse_loss(recon, content) + perceptual_distance(features, recon, content)


# --- backbone ---------------------------------------------------------------

def backbone_key(cfg: TrainConfig, pool_root) -> str:
    pool_hash = hashlib.sha256()
    for p in sorted(Path(pool_root).glob("*/*.png")):
        pool_hash.update(p.relative_to(pool_root).as_posix().encode())
        pool_hash.update(p.read_bytes())
    key = {"spec": cfg.generator_spec().to_dict(), "seed": cfg.generator_seed,
           "generator_steps": cfg.generator_steps, "inverter_steps": cfg.inverter_steps,
           "code_dim": cfg.code_dim, "pool": pool_hash.hexdigest()}
    return hashlib.sha256(json.dumps(key, sort_keys=True).encode()).hexdigest()[:16]


def obtain_backbone(cfg: TrainConfig, data_root) -> Backbone:
    """Load ``cfg.backbone``, or build one from the pool and cache it."""
    if cfg.backbone:
        if not is_backbone(cfg.backbone):
            raise DataError(f"backbone: no backbone checkpoint at {cfg.backbone}")
        return load_backbone(cfg.backbone)
    pool = Path(cfg.pool or data_root)
    path = cache_dir() / f"backbone-{backbone_key(cfg, pool)}"
    if is_backbone(path):
        return load_backbone(path)
    log.info("building backbone at %s", path)
    with torch.random.fork_rng():
        bb = build_backbone(cfg.generator_spec(), pool_images([pool], cfg.image_size), cfg.generator_seed,
                            cfg.generator_steps, cfg.inverter_steps, cfg.code_dim)
    save_backbone(bb, path)
    return load_backbone(path)


# --- trainer ----------------------------------------------------------------

@dataclass
class TrainResult:
    out_dir: Path
    model_dir: Path | None
    losses_csv: Path
    rows: list
    step: int
    interrupted: bool = False
    frozen_before: dict = field(default_factory=dict)
    frozen_after: dict = field(default_factory=dict)


def set_deterministic(flag: bool):
    if flag:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


class Trainer:
    def __init__(self, cfg: TrainConfig, data_root, out_dir, backbone: Backbone | None = None,
                 init_from=None):
        self.cfg = cfg
        self.out_dir = Path(out_dir)
        set_deterministic(cfg.deterministic)
        size = cfg.image_size
        self.content = PortraitSet(data_root, "content", size)
        self.style = PortraitSet(data_root, "style", size) if cfg.steps_stage2 > 0 else None
        bb = backbone or obtain_backbone(cfg, data_root)
        if bb.generator.spec.image_size != size:
            raise ConfigError(f"image_size: {size} does not match the backbone's {bb.generator.spec.image_size}")
        if bb.style_encoder.dim != cfg.code_dim:
            raise ConfigError(f"code_dim: {cfg.code_dim} does not match the style encoder's {bb.style_encoder.dim}")
        k = cfg.resolved_start_layer()
        if init_from is not None:
            h = load_hypernet(Path(init_from) / "hypernet", bb.generator)
            h.start_layer = k
        else:
            h = build_hypernet(bb.generator, cfg.code_dim, seed=cfg.seed, grid=cfg.grid,
                               channels=cfg.grid_channels, start_layer=k)
        codes = CodeSettings(cfg.codes_per_region, cfg.code_patch_size, cfg.tau, cfg.mask_cond)
        self.model = HyperNST(bb, h, cfg.iterations, codes)
        self.features = build_feature_extractor(0)
        self.d_image = build_image_discriminator(size, cfg.seed + 11)
        self.d_patch = build_patch_discriminator(cfg.patch_size, cfg.seed + 12)
        self.patch_spec = PatchSpec(cfg.patch_size, cfg.patches_per_region, cfg.tau)
        self.rng = np.random.default_rng(cfg.seed)
        self.noise = torch.Generator().manual_seed(cfg.seed) if cfg.noise and not cfg.deterministic else None
        with torch.no_grad():
            self.latents = torch.cat([invert(bb.inverter, x) for x in self.content.images])
        self.step = 0
        self.stage = None
        self.opt_h = self.opt_d = None
        self.frozen_before, self.frozen_after = {}, {}

    @property
    def total_steps(self) -> int:
        return self.cfg.steps_stage1 + self.cfg.steps_stage2

    def stage_of(self, step: int) -> int:
        return 1 if step < self.cfg.steps_stage1 else 2

    # -- parameter bookkeeping

    def trainable(self, stage: int) -> list[torch.nn.Parameter]:
        h = self.model.hypernet
        if stage == 1:
            return list(h.parameters())
        params = []
        for i in h.heads_from(h.start_layer):
            params += list(h.head(i).parameters())
        return params

    def disc_params(self) -> list[torch.nn.Parameter]:
        return list(self.d_image.parameters()) + list(self.d_patch.parameters())

    def frozen_hashes(self) -> dict:
        h = self.model.hypernet
        out = {"inverter": module_hash(self.model.inverter),
               "style_encoder": module_hash(self.model.style_encoder),
               "generator": module_hash(self.model.generator),
               "content_encoder": module_hash(h.content_encoder),
               "code_encoder": module_hash(h.code_encoder)}
        below = {}
        for i in h.heads_below(h.start_layer):
            below.update({f"{i}.{n}": p for n, p in h.head(i).named_parameters()})
        out["heads_below_k"] = state_hash(below)
        return out

    def enter_stage(self, stage: int):
        cfg = self.cfg
        h = self.model.hypernet
        h.requires_grad_(False)
        for p in self.trainable(stage):
            p.requires_grad_(True)
        if stage == 1:
            self.opt_h = torch.optim.Adam(self.trainable(1), lr=cfg.learning_rate)
            self.opt_d = None
        else:
            self.opt_h = torch.optim.Adam(self.trainable(2), lr=cfg.learning_rate_stage2)
            self.opt_d = torch.optim.Adam(self.disc_params(), lr=cfg.learning_rate_disc, betas=(0.0, 0.99))
            self.frozen_before = self.frozen_hashes()
        self.stage = stage

    # -- passes

    def _batch(self, idx):
        content = torch.stack([self.content.images[i] for i in idx])
        masks = [self.content.masks[i] for i in idx]
        return content, masks, self.latents[list(idx)]

    def _field(self, codes, masks):
        return torch.stack([self.model.field(c, m) for c, m in zip(codes, masks)])

    def _refine(self, content, masks, latents, codes):
        return refine_field(self.model.hypernet, latents, self.model.generator, content,
                            self._field(codes, masks), self.cfg.iterations, self.noise)

    def reconstruction_pass(self, idx):
        """Pass B: codes from the content itself; returns the unweighted L_rec."""
        content, masks, latents = self._batch(idx)
        codes = [self.model.codes(x, m, self.rng) for x, m in zip(content, masks)]
        res = self._refine(content, masks, latents, codes)
        return recon_loss(content, res.image, self.features)

    def stylization_pass(self, idx, style_idx):
        """Pass A: codes from style images; returns generator and discriminator terms."""
        content, masks, latents = self._batch(idx)
        styles = torch.stack([self.style.images[j] for j in style_idx])
        smasks = [self.style.masks[j] for j in style_idx]
        codes = [self.model.codes(s, m, self.rng) for s, m in zip(styles, smasks)]
        fake = self._refine(content, masks, latents, codes).image
        disc_g, disc_d = image_disc_loss(self.d_image, styles, fake, self.cfg.r1_gamma)
        pcd_g, pcd_d = [], []
        for b in range(len(idx)):
            try:
                pl = pcd_loss(self.d_patch, styles[b], smasks[b], fake[b], masks[b], self.patch_spec,
                              self.rng, region_matched=self.cfg.mask_loss)
            except NoRegionError as exc:
                log.warning("step %d: patch loss skipped: %s", self.step, exc)
                continue
            pcd_g.append(pl.generator)
            pcd_d.append(pl.discriminator)
        zero = fake.new_zeros(())
        pcd_g = torch.stack(pcd_g).mean() if pcd_g else zero
        pcd_d = torch.stack(pcd_d).mean() if pcd_d else zero
        return {"disc_g": disc_g, "disc_d": disc_d, "pcd_g": pcd_g, "pcd_d": pcd_d}

    def _apply(self, opt, params, loss):
        grads = torch.autograd.grad(loss, params, allow_unused=True)
        for p, g in zip(params, grads):
            p.grad = torch.zeros_like(p) if g is None else g
        opt.step()

    def train_step(self) -> dict:
        cfg = self.cfg
        stage = self.stage_of(self.step)
        if stage != self.stage:
            self.enter_stage(stage)
        idx = self.rng.integers(len(self.content), size=cfg.batch_size)
        row = dict(step=self.step, stage=stage, l_rec=0.0, l_pcd_g=0.0, l_pcd_d=0.0,
                   l_disc_g=0.0, l_disc_d=0.0)
        params = self.trainable(stage)
        if stage == 1:
            l_rec = self.reconstruction_pass(idx)
            total = cfg.lambda_rec * l_rec
            self._check(total)
            self._apply(self.opt_h, params, total)
            row.update({"pass": "rec", "l_rec": l_rec.item(), "total": total.item()})
            return self._log(row)
        style_loss = None
        if cfg.lambda_style > 0:
            style_idx = self.rng.integers(len(self.style), size=cfg.batch_size)
            terms = self.stylization_pass(idx, style_idx)
            style_loss = terms["disc_g"] + terms["pcd_g"]
            d_loss = terms["disc_d"] + terms["pcd_d"]
            self._check(d_loss)
            row.update(l_pcd_g=terms["pcd_g"].item(), l_pcd_d=terms["pcd_d"].item(),
                       l_disc_g=terms["disc_g"].item(), l_disc_d=terms["disc_d"].item())
        l_rec = self.reconstruction_pass(idx)
        total = cfg.lambda_rec * l_rec
        if style_loss is not None:
            total = total + cfg.lambda_style * style_loss
        self._check(total)
        self._apply(self.opt_h, params, total)
        if style_loss is not None:
            self._apply(self.opt_d, self.disc_params(), d_loss)
        row.update({"pass": "style+rec" if style_loss is not None else "rec",
                    "l_rec": l_rec.item(), "total": total.item()})
        return self._log(row)

    def _check(self, loss):
        if not torch.isfinite(loss):
            raise NumericError(f"non-finite loss at step {self.step}")

    def _log(self, row: dict) -> dict:
        self.step += 1
        if self.step % 100 == 0 or self.step == self.total_steps:
            log.info("step %d stage %d total %.5f", row["step"], row["stage"], row["total"])
        return row

    # -- persistence

    def final_model(self) -> HyperNST:
        return self.model

    def save_model(self, path) -> Path:
        path = Path(path)
        self.model.save(path)
        save_checkpoint(path / "discriminators" / "image", self.d_image.state_dict(),
                        {"component": "image_discriminator", "image_size": self.cfg.image_size})
        save_checkpoint(path / "discriminators" / "patch", self.d_patch.state_dict(),
                        {"component": "patch_discriminator", "patch_size": self.cfg.patch_size})
        return path

    def save_state(self, path):
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        save_checkpoint(path / "hypernet", self.model.hypernet.state_dict(), {"component": "hypernet"})
        save_checkpoint(path / "d_image", self.d_image.state_dict(), {"component": "image_discriminator"})
        save_checkpoint(path / "d_patch", self.d_patch.state_dict(), {"component": "patch_discriminator"})
        for name, opt in (("opt_h", self.opt_h), ("opt_d", self.opt_d)):
            if opt is not None:
                _save_optimizer(opt, path / name)
        state = {"step": self.step, "stage": self.stage,
                 "rng": self.rng.bit_generator.state,
                 "noise": None if self.noise is None else
                 base64.b64encode(self.noise.get_state().numpy().tobytes()).decode(),
                 "config": self.cfg.to_dict()}
        (path / "state.json").write_text(json.dumps(state, indent=1))

    def load_state(self, path):
        path = Path(path)
        state = json.loads((path / "state.json").read_text())
        if state["config"] != self.cfg.to_dict():
            raise ConfigError("resume: saved state was produced by a different config")
        tensors, _ = load_checkpoint(path / "hypernet")
        self.model.hypernet.load_state_dict(tensors)
        self.d_image.load_state_dict(load_checkpoint(path / "d_image")[0])
        self.d_patch.load_state_dict(load_checkpoint(path / "d_patch")[0])
        self.rng.bit_generator.state = state["rng"]
        if state["noise"] is not None:
            raw = np.frombuffer(base64.b64decode(state["noise"]), dtype=np.uint8).copy()
            self.noise.set_state(torch.from_numpy(raw))
        self.step = state["step"]
        if state["stage"] is not None:
            before = json.loads((path / "frozen.json").read_text()) if (path / "frozen.json").exists() else {}
            self.enter_stage(state["stage"])
            if before:
                self.frozen_before = before
            _load_optimizer(self.opt_h, path / "opt_h")
            if self.opt_d is not None:
                _load_optimizer(self.opt_d, path / "opt_d")


def _save_optimizer(opt: torch.optim.Optimizer, path):
    sd = opt.state_dict()
    tensors = {}
    for idx, st in sd["state"].items():
        for key, val in st.items():
            tensors[f"{idx}.{key}"] = torch.as_tensor(val, dtype=torch.float32)
    save_checkpoint(path, tensors, {"param_groups": sd["param_groups"]})


def _load_optimizer(opt: torch.optim.Optimizer, path):
    tensors, manifest = load_checkpoint(path)
    state: dict = {}
    for name, t in tensors.items():
        idx, key = name.split(".", 1)
        state.setdefault(int(idx), {})[key] = t.reshape(()) if key == "step" else t
    opt.load_state_dict({"state": state, "param_groups": manifest["meta"]["param_groups"]})


def _write_rows(path: Path, rows: list[dict]):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOSS_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{r[k]:.8g}" if isinstance(r[k], float) else r[k]) for k in LOSS_COLUMNS})


def read_loss_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def run_training(cfg: TrainConfig, data_root, out_dir, backbone: Backbone | None = None, init_from=None,
                 stop_after: int | None = None, resume: bool = True) -> TrainResult:
    """Train both stages; resumable from ``out_dir/state``.

    ``stop_after`` interrupts once that many steps have run (state is saved),
    and a later call with the same config continues to the end.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1))
    tr = Trainer(cfg, data_root, out, backbone, init_from)
    state_dir = out / "state"
    losses = out / "losses.csv"
    rows: list[dict] = []
    if resume and (state_dir / "state.json").exists():
        tr.load_state(state_dir)
        if losses.exists():
            rows = [_typed(r) for r in read_loss_csv(losses) if int(r["step"]) < tr.step]
        log.info("resumed at step %d", tr.step)
    interrupted = False
    while tr.step < tr.total_steps:
        rows.append(tr.train_step())
        every = cfg.checkpoint_every
        if stop_after is not None and tr.step >= stop_after:
            interrupted = tr.step < tr.total_steps
            break
        if every and tr.step % every == 0 and tr.step < tr.total_steps:
            _checkpoint(tr, state_dir, losses, rows)
    if interrupted:
        _checkpoint(tr, state_dir, losses, rows)
        return TrainResult(out, None, losses, rows, tr.step, True, tr.frozen_before)
    _write_rows(losses, rows)
    if tr.stage == 2:
        tr.frozen_after = tr.frozen_hashes()
        changed = [k for k, v in tr.frozen_before.items() if tr.frozen_after.get(k) != v]
        if changed:
            raise RuntimeError(f"freezing contract violated for {changed}")
    model_dir = tr.save_model(out / "model")
    plot_losses(rows, out / "losses.png")
    return TrainResult(out, model_dir, losses, rows, tr.step, False, tr.frozen_before, tr.frozen_after)


def _checkpoint(tr: Trainer, state_dir: Path, losses: Path, rows):
    tr.save_state(state_dir)
    if tr.stage == 2:
        (state_dir / "frozen.json").write_text(json.dumps(tr.frozen_before))
    _write_rows(losses, rows)


def _typed(r: dict) -> dict:
    out = {k: float(v) for k, v in r.items() if k not in ("step", "stage", "pass")}
    out.update(step=int(r["step"]), stage=int(r["stage"]), **{"pass": r["pass"]})
    return out


def model_hash(model_dir) -> str:
    return directory_hash(model_dir)
