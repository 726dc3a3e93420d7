"""Command-line interface.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .checkpoint import CheckpointError, read_manifest
from .data import (SyntheticCorpusSpec, load_image, load_mask, make_synthetic_corpus, mask_path_for,
                   save_image, PortraitSet)
from .editing import MAGNITUDE_RANGE, edit_latent, fit_probe_direction, hair_fraction, load_direction, save_direction
from .errors import ConfigError, DataError, NumericError, ShapeError
from .evaluation import MASK_USAGES, evaluate_grid, run_ablation, stylize_pair
from .generator import synthesize
from .hypernet import invert
from .model import MODEL_FILE, HyperNST
from .style_codes import interpolate_region_codes
from .training import load_config, run_training, set_deterministic

log = logging.getLogger("hypernst")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _mask_for(image_path, explicit, required: bool, size: int):
    path = Path(explicit) if explicit else mask_path_for(image_path)
    if not path.exists():
        if required:
            raise DataError(f"mask not found: expected {path} (pass --global-code for an unmasked style)")
        return None
    return load_mask(path, size)


def _write_codes(path, named_codes):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        D = len(next(iter(named_codes.values())))
        w.writerow(["id"] + [f"v{i}" for i in range(D)])
        for name, code in named_codes.items():
            w.writerow([name] + [repr(float(x)) for x in code])


def _strip(images) -> torch.Tensor:
    return torch.cat(list(images), dim=-1)


def cmd_make_data(args):
    spec = SyntheticCorpusSpec(n_content=args.n_content, n_style=args.n_style, image_size=args.image_size,
                               n_families=args.families, hairless_style_fraction=args.hairless_style_fraction,
                               seed=args.seed)
    root = make_synthetic_corpus(spec, args.out)
    print(f"wrote {spec.n_content} content and {spec.n_style} style images to {root}")


def cmd_train(args):
    cfg = load_config(args.config)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.deterministic:
        overrides["deterministic"] = True
    if args.backbone:
        overrides["backbone"] = args.backbone
    if overrides:
        cfg = cfg.replace(**overrides)
        cfg.validate()
    res = run_training(cfg, args.data, args.out, init_from=args.init_from, stop_after=args.stop_after,
                       resume=not args.no_resume)
    if res.interrupted:
        print(f"stopped at step {res.step}; state saved under {res.out_dir / 'state'}")
    else:
        print(f"model written to {res.model_dir}; losses in {res.losses_csv}")


def _model_and_inputs(args):
    model = HyperNST.load(args.model)
    size = model.image_size
    content = load_image(args.content, size)
    cmask = _mask_for(args.content, args.content_mask, True, size)
    return model, size, content, cmask


def cmd_stylize(args):
    set_deterministic(args.deterministic)
    model, size, content, cmask = _model_and_inputs(args)
    style = load_image(args.style, size)
    smask = _mask_for(args.style, args.style_mask, not args.global_code, size)
    res = stylize_pair(model, content, cmask, style, smask, args.seed, args.global_code)
    save_image(res.image[0], args.out)
    print(f"wrote {args.out}")


def cmd_interpolate(args):
    if args.steps < 2:
        raise ConfigError("--steps must be >= 2")
    set_deterministic(args.deterministic)
    model, size, content, cmask = _model_and_inputs(args)
    style = load_image(args.style, size)
    smask = _mask_for(args.style, args.style_mask, not args.global_code, size)
    a = model.codes(content, cmask, np.random.default_rng(args.seed))
    b = model.codes(style, smask, np.random.default_rng(args.seed), global_code=args.global_code)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    frames, named = [], {}
    latent = invert(model.inverter, content)
    for i in range(args.steps):
        t = i / (args.steps - 1)
        codes = interpolate_region_codes(a, b, t)
        with torch.no_grad():
            img = model.stylize(content, cmask, codes, latent=latent).image[0]
        save_image(img, out / f"frame_{i:02d}.png")
        frames.append(img)
        for r, c in codes.codes.items():
            named[f"frame{i}:region{r}"] = c.tolist()
    save_image(_strip(frames), out / "strip.png")
    _write_codes(out / "codes.csv", named)
    print(f"wrote {args.steps} frames and strip.png to {out}")


def cmd_edit(args):
    set_deterministic(args.deterministic)
    model, size, content, cmask = _model_and_inputs(args)
    if args.fit_direction:
        corpus = PortraitSet(args.fit_direction, "content", size)
        d, _ = fit_probe_direction(model.inverter, corpus.images, [hair_fraction(m) for m in corpus.masks],
                                   name="hair_area", seed=args.seed)
        save_direction(d, args.direction)
        print(f"wrote direction {args.direction}")
    d = load_direction(args.direction)
    gen = model.generator
    d.check(gen.num_styles, gen.spec.latent_dim)
    if args.style:
        style = load_image(args.style, size)
        smask = _mask_for(args.style, args.style_mask, not args.global_code, size)
    else:
        style, smask = content, cmask
    res = stylize_pair(model, content, cmask, style, smask, args.seed, args.global_code)
    lo, hi = MAGNITUDE_RANGE
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    images = []
    for m in args.magnitudes:
        if not lo <= m <= hi:
            log.warning("magnitude %.2f lies outside the usual range [%g, %g]", m, lo, hi)
        with torch.no_grad():
            img = synthesize(gen, edit_latent(res.latent, d, m), res.deltas)[0]
        save_image(img, out / f"edit_{m:+.2f}.png")
        images.append(img)
    save_image(_strip(images), out / "row.png")
    print(f"wrote {len(images)} edits to {out}")


def cmd_evaluate(args):
    set_deterministic(args.deterministic)
    rep = evaluate_grid(args.model, args.content_root, args.style_root or args.content_root, args.out,
                        seed=args.seed, global_code=args.global_code)
    a = rep.aggregate
    print(f"{len(rep)} pairs: lpips_like {a['lpips_like']:.5f} sifid {a['sifid']:.5f} "
          f"seconds {a['seconds']:.4f} -> {rep.csv_path}")


def _parse_grid(kind, values):
    if values is None:
        return None
    if kind == "mask_usage":
        return values
    try:
        return [float(v) if kind == "style_strength" else int(v) for v in values]
    except ValueError as exc:
        raise ConfigError(f"--grid: bad value for {kind}: {exc}") from exc


def cmd_ablate(args):
    cfg = load_config(args.config)
    if args.deterministic:
        cfg = cfg.replace(deterministic=True)
    table = run_ablation(args.kind, cfg, args.data, args.out, _parse_grid(args.kind, args.grid),
                         args.seeds, args.eval_data)
    for row in table:
        print(", ".join(f"{k}={v:.5g}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))


def cmd_inspect(args):
    path = Path(args.path)
    if (path / MODEL_FILE).exists():
        meta = json.loads((path / MODEL_FILE).read_text())
        print(f"model {path}: iterations={meta['iterations']} codes={meta['codes']}")
        dirs = [path / c for c in meta["components"]]
    else:
        dirs = [path]
    for d in dirs:
        try:
            m = read_manifest(d)
        except CheckpointError as exc:
            raise DataError(str(exc)) from exc
        n = sum(int(np.prod(e["shape"])) for e in m["tensors"])
        print(f"{d.name}: {len(m['tensors'])} tensors, {n} values, {m['total_bytes']} bytes")
        for k, v in (m.get("meta") or {}).items():
            print(f"  {k}: {v}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hypernst", description="Hypernetwork style transfer at desk scale.")
    p.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("make-data", help="write a synthetic portrait corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--n-content", type=int, default=8)
    s.add_argument("--n-style", type=int, default=8)
    s.add_argument("--image-size", type=int, default=64)
    s.add_argument("--families", type=int, default=4)
    s.add_argument("--hairless-style-fraction", type=float, default=0.25)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_make_data)

    s = sub.add_parser("train", help="two-stage training from a JSON config")
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--backbone")
    s.add_argument("--init-from", help="model directory whose hypernetwork seeds training")
    s.add_argument("--seed", type=int)
    s.add_argument("--deterministic", action="store_true")
    s.add_argument("--stop-after", type=int, help="interrupt after this many steps (resumable)")
    s.add_argument("--no-resume", action="store_true")
    s.set_defaults(func=cmd_train)

    def image_args(s, style=True):
        s.add_argument("--model", required=True)
        s.add_argument("--content", required=True)
        s.add_argument("--content-mask")
        if style:
            s.add_argument("--style", required=True)
        s.add_argument("--style-mask")
        s.add_argument("--global-code", action="store_true", help="use the whole-image style code")
        s.add_argument("--seed", type=int, default=0)
        s.add_argument("--deterministic", action="store_true")
        s.add_argument("--out", required=True)

    s = sub.add_parser("stylize", help="stylize one content image")
    image_args(s)
    s.set_defaults(func=cmd_stylize)

    s = sub.add_parser("interpolate", help="interpolate from the content's own style to a target style")
    image_args(s)
    s.add_argument("--steps", type=int, default=5)
    s.set_defaults(func=cmd_interpolate)

    s = sub.add_parser("edit", help="move the inverted latent along a direction")
    image_args(s, style=False)
    s.add_argument("--style")
    s.add_argument("--direction", required=True, help="direction CSV (written first with --fit-direction)")
    s.add_argument("--fit-direction", metavar="DATA", help="fit a hair-area probe direction on DATA")
    s.add_argument("--magnitudes", type=float, nargs="+", default=[-3.0, 0.0, 3.0])
    s.set_defaults(func=cmd_edit)

    s = sub.add_parser("evaluate", help="metrics over every content x style pair")
    s.add_argument("--model", required=True)
    s.add_argument("--content-root", required=True)
    s.add_argument("--style-root")
    s.add_argument("--out", required=True, help="CSV path; a JSON summary and PNG go next to it")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--global-code", action="store_true")
    s.add_argument("--deterministic", action="store_true")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("ablate", help="train and evaluate over an ablation grid")
    s.add_argument("--kind", required=True, choices=["style_strength", "start_layer", "mask_usage"])
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--grid", nargs="+", help=f"grid values (mask_usage: {', '.join(MASK_USAGES)})")
    s.add_argument("--seeds", type=int, nargs="+")
    s.add_argument("--eval-data")
    s.add_argument("--deterministic", action="store_true")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("inspect-checkpoint", help="summarize a checkpoint or model directory")
    s.add_argument("--path", required=True)
    s.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ShapeError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
