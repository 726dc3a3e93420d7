"""Content x style evaluation grid and the ablation runners.

Metrics come from a fixed-seed random feature extractor, so absolute values
are only comparable within this package; trends and orderings are what the
reports are for.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .backbone import Backbone
from .data import PortraitSet
from .errors import ConfigError, DataError
from .metrics import build_feature_extractor, perceptual_distance, sifid
from .model import HyperNST
from .plotting import plot_ablation, plot_grid_metrics
from .training import TrainConfig, run_training

log = logging.getLogger(__name__)

GRID_COLUMNS = ["content_id", "style_id", "lpips_like", "sifid", "seconds"]
AGGREGATE_ID = "mean"
METRIC_NOTE = ("metrics use a fixed-seed random feature extractor; values are not comparable "
               "to published LPIPS/SIFID numbers, only to other runs of this package")

STYLE_STRENGTHS = (0.5, 1.0, 2.0, 5.0, 10.0)
REFERENCE_START_LAYERS = (3, 7, 13, 17, 22)
REFERENCE_NUM_LAYERS = 25
MASK_USAGES = ("both", "no_cond", "no_loss", "neither")


def stylize_pair(model: HyperNST, content, content_mask, style, style_mask=None, seed: int = 0,
                 global_code: bool = False, noise=None):
    """Codes from ``style`` (per-image RNG seeded with ``seed``), then refinement."""
    codes = model.codes(style, style_mask, np.random.default_rng(seed), global_code=global_code)
    with torch.no_grad():
        return model.stylize(content, content_mask, codes, noise=noise)


@dataclass
class MetricsReport:
    rows: list
    aggregate: dict
    csv_path: Path | None = None
    skipped: list | None = None

    def __len__(self):
        return len(self.rows)


def aggregate_rows(rows: list[dict]) -> dict:
    agg = {"content_id": AGGREGATE_ID, "style_id": AGGREGATE_ID}
    for col in ("lpips_like", "sifid", "seconds"):
        agg[col] = float(np.mean([r[col] for r in rows])) if rows else float("nan")
    return agg


def write_grid_csv(rows: list[dict], agg: dict, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=GRID_COLUMNS)
        w.writeheader()
        for r in rows + [agg]:
            w.writerow({k: (f"{r[k]:.8g}" if isinstance(r[k], float) else r[k]) for k in GRID_COLUMNS})
    return path


def read_grid_csv(path) -> tuple[list[dict], dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    typed = [{**r, **{c: float(r[c]) for c in ("lpips_like", "sifid", "seconds")}} for r in rows]
    body = [r for r in typed if r["content_id"] != AGGREGATE_ID]
    agg = [r for r in typed if r["content_id"] == AGGREGATE_ID]
    return body, (agg[0] if agg else {})


def _load_model(model) -> HyperNST:
    return model if isinstance(model, HyperNST) else HyperNST.load(model)


def evaluate_grid(model, content_root, style_root, out_csv=None, seed: int = 0, global_code: bool = False,
                  features=None, figure: bool = True) -> MetricsReport:
    """Stylize every (content, style) pair; perceptual distance to content, SIFID to style, seconds."""
    model = _load_model(model)
    features = features or build_feature_extractor(0)
    size = model.image_size
    contents = PortraitSet(content_root, "content", size, require_masks=False)
    styles = PortraitSet(style_root, "style", size, require_masks=False)
    rows, skipped = [], []
    for ci in np.argsort(contents.ids, kind="stable"):
        for si in np.argsort(styles.ids, kind="stable"):
            cid, sid = contents.ids[ci], styles.ids[si]
            cmask, smask = contents.masks[ci], styles.masks[si]
            if cmask is None or (smask is None and not global_code):
                which = "content" if cmask is None else "style"
                log.warning("skipping pair (%s, %s): missing %s mask", cid, sid, which)
                skipped.append((cid, sid, f"missing {which} mask"))
                continue
            c, s = contents.images[ci], styles.images[si]
            t0 = time.perf_counter()
            out = stylize_pair(model, c, cmask, s, smask, seed, global_code).image[0]
            seconds = time.perf_counter() - t0
            rows.append({"content_id": cid, "style_id": sid,
                         "lpips_like": perceptual_distance(features, out, c).item(),
                         "sifid": sifid(features, out, s), "seconds": seconds})
    agg = aggregate_rows(rows)
    report = MetricsReport(rows, agg, None, skipped)
    if out_csv is not None:
        report.csv_path = write_grid_csv(rows, agg, out_csv)
        summary = {"note": METRIC_NOTE, "feature_seed": features.seed, "pairs": len(rows),
                   "skipped": [list(s) for s in skipped], "mean": agg,
                   "baseline": baselines(contents, styles, features)}
        Path(out_csv).with_suffix(".json").write_text(json.dumps(summary, indent=1))
        if figure and rows:
            plot_grid_metrics(rows, Path(out_csv).with_suffix(".png"))
    return report


def baselines(contents: PortraitSet, styles: PortraitSet, features) -> dict:
    """Reference levels: unstylized SIFID(content, style) and distances between random pairs."""
    imgs = contents.images + styles.images
    with torch.no_grad():
        pair = [perceptual_distance(features, imgs[i], imgs[j]).item()
                for i in range(len(imgs)) for j in range(i + 1, len(imgs))]
    cs = [sifid(features, c, s) for c in contents.images for s in styles.images]
    return {"sifid_content_style": float(np.mean(cs)),
            "perceptual_random_pairs": float(np.mean(pair)) if pair else float("nan")}


# --- ablations --------------------------------------------------------------

STAGE2_ONLY = ("lambda_style", "start_layer", "mask_loss", "steps_stage2", "learning_rate_stage2",
               "learning_rate_disc", "r1_gamma", "patch_size", "patches_per_region", "checkpoint_every")


def map_start_layer(reference: int, num_layers: int) -> int:
    """Proportional map of a 25-layer reference index onto ``num_layers``."""
    return min(num_layers - 1, math.ceil(num_layers * reference / REFERENCE_NUM_LAYERS))


def default_grid(kind: str, cfg: TrainConfig) -> list:
    if kind == "style_strength":
        return list(STYLE_STRENGTHS)
    if kind == "start_layer":
        L = cfg.generator_spec().num_layers
        return [map_start_layer(r, L) for r in REFERENCE_START_LAYERS]
    if kind == "mask_usage":
        return list(MASK_USAGES)
    raise ConfigError(f"unknown ablation kind {kind!r}")


def grid_overrides(kind: str, value) -> dict:
    if kind == "style_strength":
        return {"lambda_style": float(value)}
    if kind == "start_layer":
        return {"start_layer": int(value)}
    if kind == "mask_usage":
        if value not in MASK_USAGES:
            raise ConfigError(f"mask_usage: expected one of {MASK_USAGES}, got {value!r}")
        return {"mask_cond": value in ("both", "no_loss"), "mask_loss": value in ("both", "no_cond")}
    raise ConfigError(f"unknown ablation kind {kind!r}")


def stage1_key(cfg: TrainConfig) -> str:
    d = cfg.to_dict()
    for k in STAGE2_ONLY:
        d.pop(k)
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]


def train_two_stage(cfg: TrainConfig, data_root, out_dir, backbone: Backbone | None = None,
                    stage1_cache: dict | None = None):
    """Stage 1 (shared through ``stage1_cache`` when only stage-2 fields differ), then stage 2."""
    out_dir = Path(out_dir)
    key = stage1_key(cfg)
    cache = stage1_cache if stage1_cache is not None else {}
    if key not in cache:
        r1 = run_training(cfg.replace(steps_stage2=0), data_root, out_dir.parent / f"stage1-{key}",
                          backbone, resume=False)
        cache[key] = r1.model_dir
    return run_training(cfg.replace(steps_stage1=0), data_root, out_dir, backbone,
                        init_from=cache[key], resume=False)


def run_ablation(kind: str, base: TrainConfig, data_root, out_dir, grid=None, seeds=None, eval_root=None,
                 backbone: Backbone | None = None, features=None) -> list[dict]:
    """Train and evaluate one model per grid point and seed; writes ``<kind>.csv`` (means over seeds)."""
    grid = list(grid) if grid is not None else default_grid(kind, base)
    if not grid:
        raise ConfigError("ablation grid must not be empty")
    seeds = list(seeds) if seeds else [base.seed]
    out_dir = Path(out_dir)
    eval_root = eval_root or data_root
    features = features or build_feature_extractor(0)
    detail, stage1_cache = [], {}
    for seed in seeds:
        for value in grid:
            cfg = base.replace(seed=seed, **grid_overrides(kind, value))
            run_dir = out_dir / f"{kind}-{value}-seed{seed}"
            res = train_two_stage(cfg, data_root, run_dir, backbone, stage1_cache)
            rep = evaluate_grid(res.model_dir, eval_root, eval_root, run_dir / "eval.csv", seed=seed,
                                features=features, figure=False)
            detail.append({kind: value, "seed": seed, **{c: rep.aggregate[c] for c in ("lpips_like", "sifid", "seconds")}})
    table = []
    for value in grid:
        rs = [r for r in detail if r[kind] == value]
        table.append({kind: value, **{c: float(np.mean([r[c] for r in rs])) for c in ("lpips_like", "sifid", "seconds")}})
    _write_table(detail, [kind, "seed", "lpips_like", "sifid", "seconds"], out_dir / f"{kind}-per-seed.csv")
    _write_table(table, [kind, "lpips_like", "sifid", "seconds"], out_dir / f"{kind}.csv")
    (out_dir / f"{kind}.json").write_text(json.dumps({"note": METRIC_NOTE, "kind": kind, "grid": grid,
                                                       "seeds": seeds, "feature_seed": features.seed}, indent=1))
    plot_ablation(table, kind, out_dir / f"{kind}.png")
    return table


def _write_table(rows, columns, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns)
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{r[k]:.8g}" if isinstance(r[k], float) else r[k]) for k in columns})
