import json

import numpy as np
import pytest
from PIL import Image

from hypernst.cli import main


def run(*args):
    return main([str(a) for a in args])


def test_make_data(tmp_path, capsys):
    assert run("make-data", "--out", tmp_path, "--n-content", 8, "--n-style", 2, "--image-size", 32) == 0
    assert len(list((tmp_path / "content").glob("*.png"))) == 8
    assert len(list((tmp_path / "content_masks").glob("*.png"))) == 8


def test_stylize_outputs(tiny_model, corpus32, tmp_path):
    out = tmp_path / "s.png"
    assert run("stylize", "--model", tiny_model, "--content", corpus32 / "content/000.png",
               "--style", corpus32 / "style/001.png", "--out", out, "--deterministic") == 0
    im = Image.open(out)
    assert im.mode == "RGB" and im.size == (32, 32)
    again = tmp_path / "s2.png"
    run("stylize", "--model", tiny_model, "--content", corpus32 / "content/000.png",
        "--style", corpus32 / "style/001.png", "--out", again, "--deterministic")
    assert out.read_bytes() == again.read_bytes()


def test_missing_mask_and_global_code(tiny_model, corpus32, tmp_path, capsys):
    style = tmp_path / "loose" / "painting.png"
    style.parent.mkdir()
    style.write_bytes((corpus32 / "style/002.png").read_bytes())
    code = run("stylize", "--model", tiny_model, "--content", corpus32 / "content/000.png",
               "--style", style, "--out", tmp_path / "x.png")
    assert code == 3
    assert "loose_masks/painting.png" in capsys.readouterr().err
    assert run("stylize", "--model", tiny_model, "--content", corpus32 / "content/000.png",
               "--style", style, "--global-code", "--out", tmp_path / "x.png") == 0


def test_interpolate_strip_and_endpoints(tiny_model, corpus32, tmp_path):
    c, s = corpus32 / "content/001.png", corpus32 / "style/003.png"
    assert run("interpolate", "--model", tiny_model, "--content", c, "--style", s, "--steps", 4,
               "--out", tmp_path / "i") == 0
    assert Image.open(tmp_path / "i/strip.png").size == (4 * 32, 32)
    run("stylize", "--model", tiny_model, "--content", c, "--style", c, "--out", tmp_path / "a.png")
    run("stylize", "--model", tiny_model, "--content", c, "--style", s, "--out", tmp_path / "b.png")
    assert (tmp_path / "i/frame_00.png").read_bytes() == (tmp_path / "a.png").read_bytes()
    assert (tmp_path / "i/frame_03.png").read_bytes() == (tmp_path / "b.png").read_bytes()
    assert run("interpolate", "--model", tiny_model, "--content", c, "--style", s, "--steps", 1,
               "--out", tmp_path / "j") == 2


def test_edit(tiny_model, corpus32, tmp_path):
    c = corpus32 / "content/002.png"
    assert run("edit", "--model", tiny_model, "--content", c, "--direction", tmp_path / "dir.csv",
               "--fit-direction", corpus32, "--magnitudes", -3, 0, 3, "--out", tmp_path / "e") == 0
    assert len(list((tmp_path / "e").glob("edit_*.png"))) == 3
    assert Image.open(tmp_path / "e/row.png").size == (3 * 32, 32)
    run("stylize", "--model", tiny_model, "--content", c, "--style", c, "--out", tmp_path / "plain.png")
    assert (tmp_path / "e/edit_+0.00.png").read_bytes() == (tmp_path / "plain.png").read_bytes()


def test_edit_arity_mismatch(tiny_model, corpus32, tmp_path):
    from hypernst.editing import EditDirection, save_direction
    import torch
    save_direction(EditDirection("bad", torch.ones(2, 64)), tmp_path / "bad.csv")
    assert run("edit", "--model", tiny_model, "--content", corpus32 / "content/000.png",
               "--direction", tmp_path / "bad.csv", "--out", tmp_path / "e") == 3


def test_evaluate_two_by_two(tiny_model, corpus32, tmp_path):
    run("make-data", "--out", tmp_path / "d", "--n-content", 2, "--n-style", 2, "--image-size", 32)
    assert run("evaluate", "--model", tiny_model, "--content-root", tmp_path / "d", "--out", tmp_path / "g.csv") == 0
    assert len((tmp_path / "g.csv").read_text().strip().splitlines()) == 1 + 4 + 1


def test_config_errors(corpus32, tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"lambda_style": 2.0, "mystery": 1}))
    assert run("train", "--config", bad, "--data", corpus32, "--out", tmp_path / "o") == 2
    assert "mystery" in capsys.readouterr().err
    bad.write_text("{not json")
    assert run("train", "--config", bad, "--data", corpus32, "--out", tmp_path / "o") == 2
    with pytest.raises(SystemExit):
        run("stylize", "-m", "x")


def test_numeric_failure_exit_code(corpus32, tmp_path, monkeypatch):
    import hypernst.cli as cli
    from hypernst.errors import NumericError

    def boom(*a, **k):
        raise NumericError("non-finite loss at step 3")
    monkeypatch.setattr(cli, "run_training", boom)
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"lambda_style": 2.0}))
    assert run("train", "--config", cfg, "--data", corpus32, "--out", tmp_path / "o") == 4


def test_train_cli_and_inspect(corpus32, tiny_backbone, tmp_path, capsys):
    from hypernst.backbone import save_backbone
    from conftest import TINY
    bb = save_backbone(tiny_backbone, tmp_path / "bb")
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({**TINY, "lambda_style": 2.0}))
    assert run("train", "--config", cfg, "--data", corpus32, "--out", tmp_path / "o", "--backbone", bb) == 0
    assert len((tmp_path / "o/losses.csv").read_text().strip().splitlines()) == 1 + 8
    assert run("inspect-checkpoint", "--path", tmp_path / "o/model") == 0
    out = capsys.readouterr().out
    assert "start_layer" in out and "hypernet" in out
    assert run("inspect-checkpoint", "--path", tmp_path / "nothing") == 3
