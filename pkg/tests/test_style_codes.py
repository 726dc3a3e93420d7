import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from hypernst.checkpoint import module_hash
from hypernst.data import PortraitSet, SyntheticCorpusSpec, make_synthetic_corpus
from hypernst.errors import ShapeError
from hypernst.semantics import BACKGROUND, FACE, HAIR, PatchSpec, sample_region_patches
from hypernst.style_codes import (STAT_EPS, EmptyMaskError, EncoderTrainConfig, RegionStyleCodes,
                                  build_style_encoder, channel_stats, extract_region_style_codes,
                                  extract_style_code, interpolate_codes, pretrain_style_encoder)

from conftest import rand_image


@pytest.fixture(scope="module")
def enc():
    return build_style_encoder(64, 0)


def test_channel_stats_population_std():
    x = torch.tensor([[[[1.0, 3.0]]]])
    s = channel_stats(x)
    assert s[0, 0] == 2.0
    assert s[0, 1] == pytest.approx(np.sqrt(1.0 + STAT_EPS))
    const = channel_stats(torch.full((1, 2, 4, 4), 0.7))
    assert torch.isfinite(const).all() and const[0, 2:].allclose(torch.full((2,), STAT_EPS ** 0.5))


def test_code_deterministic_and_dim(enc):
    x = rand_image(0)
    a, b = extract_style_code(enc, x), extract_style_code(enc, x)
    assert a.shape == (64,) and torch.equal(a, b)
    assert torch.equal(extract_style_code(build_style_encoder(64, 0), x), a)


def test_brightness_changes_code(enc):
    x = rand_image(1) * 0.4
    assert not torch.allclose(extract_style_code(enc, x), extract_style_code(enc, 2 * x))


def test_too_small_image(enc):
    with pytest.raises(ShapeError):
        extract_style_code(enc, torch.zeros(3, 4, 4))


def test_rotation_invariance_relative_to_unrelated(enc, corpus32):
    styles = PortraitSet(corpus32, "style")
    fams = [g["family"] for g in json.loads((corpus32 / "corpus.json").read_text())["geometry"]["style"]]
    codes = [extract_style_code(enc, x) for x in styles.images]
    rot = [(c - extract_style_code(enc, torch.rot90(x, 1, (1, 2)))).norm().item()
           for c, x in zip(codes, styles.images)]
    unrelated = [(codes[i] - codes[j]).norm().item() for i in range(len(codes)) for j in range(i)
                 if fams[i] != fams[j]]
    # threshold from the measured distribution: half the median cross-family distance
    assert max(rot) < 0.5 * np.median(unrelated)


def test_region_codes_single_patch_equals_patch_code(enc):
    img = rand_image(2)
    mask = np.ones((32, 32), int)
    rc = extract_region_style_codes(enc, img, mask, P=1, patch_size=8, rng=np.random.default_rng(3))
    s = sample_region_patches(img, mask, FACE, PatchSpec(8, 1, 0.75), np.random.default_rng(3))
    assert torch.equal(rc.codes[FACE], extract_style_code(enc, s.patches[0]))
    assert rc.present == {BACKGROUND: False, FACE: True, HAIR: False}


def test_region_code_is_mean_of_patch_codes(enc):
    img = rand_image(3)
    mask = np.zeros((32, 32), int)
    mask[8:30, 4:28] = FACE
    rc = extract_region_style_codes(enc, img, mask, P=4, patch_size=8, rng=np.random.default_rng(9))
    rng = np.random.default_rng(9)
    s_bg = sample_region_patches(img, mask, BACKGROUND, PatchSpec(8, 4, 0.75), rng)
    s_face = sample_region_patches(img, mask, FACE, PatchSpec(8, 4, 0.75), rng)
    for r, s in ((BACKGROUND, s_bg), (FACE, s_face)):
        manual = torch.stack([extract_style_code(enc, p) for p in s.patches]).mean(0)
        assert torch.allclose(rc.codes[r], manual, atol=1e-6)


def test_hairless_image_flags_hair_absent(enc, corpus32):
    img = rand_image(4)
    mask = np.zeros((32, 32), int)
    mask[10:30, 8:24] = FACE
    rc = extract_region_style_codes(enc, img, mask, rng=np.random.default_rng(0))
    assert rc.present == {BACKGROUND: True, FACE: True, HAIR: False}
    assert rc.global_code is not None


def test_face_code_ignores_background_pixels(enc):
    img = rand_image(5)
    mask = np.zeros((32, 32), int)
    mask[4:28, 4:28] = FACE
    a = extract_region_style_codes(enc, img, mask, tau=1.0, rng=np.random.default_rng(1))
    edited = img.clone()
    edited[:, torch.from_numpy(mask == BACKGROUND)] = 0.9
    b = extract_region_style_codes(enc, edited, mask, tau=1.0, rng=np.random.default_rng(1))
    assert torch.equal(a.codes[FACE], b.codes[FACE])
    assert not torch.equal(a.codes[BACKGROUND], b.codes[BACKGROUND])


def test_empty_mask_error(enc):
    mask = np.full((32, 32), 7)
    with pytest.raises(EmptyMaskError):
        extract_region_style_codes(enc, rand_image(6), mask)


def test_global_only():
    c = RegionStyleCodes.global_only(torch.ones(3))
    assert all(c.present.values())


def test_interpolation_examples():
    a, b = torch.tensor([0.0, 2.0]), torch.tensor([2.0, 0.0])
    assert torch.equal(interpolate_codes(a, b, 0.0), a)
    assert torch.equal(interpolate_codes(a, b, 1.0), b)
    assert torch.equal(interpolate_codes(a, b, 0.5), torch.tensor([1.0, 1.0]))
    with pytest.raises(ValueError):
        interpolate_codes(a, b, 1.5)
    with pytest.raises(ShapeError):
        interpolate_codes(a, torch.zeros(3), 0.5)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0, 1))
def test_interpolation_linearity(seed, t):
    g = torch.Generator().manual_seed(seed)
    a, b = torch.randn(8, generator=g, dtype=torch.float64), torch.randn(8, generator=g, dtype=torch.float64)
    assert torch.allclose(interpolate_codes(a, b, t) + interpolate_codes(b, a, t), a + b, atol=1e-12)


def test_encoder_frozen_flag():
    enc = build_style_encoder(16, 3)
    assert not any(p.requires_grad for p in enc.parameters())


@pytest.mark.slow
def test_contrastive_pretraining(tmp_path):
    root = make_synthetic_corpus(SyntheticCorpusSpec(n_content=1, n_style=8, image_size=32, seed=2), tmp_path)
    styles = PortraitSet(root, "style")
    fams = [g["family"] for g in json.loads((root / "corpus.json").read_text())["geometry"]["style"]]
    corpus = {}
    for img, f in zip(styles.images, fams):
        corpus.setdefault(f, []).append(img)
    log = []
    enc = pretrain_style_encoder(corpus, EncoderTrainConfig(steps=500), seed=0, dim=32, log=log)
    assert np.mean(log[-50:]) < np.mean(log[:50])
    assert module_hash(enc) == module_hash(pretrain_style_encoder(corpus, EncoderTrainConfig(steps=500), 0, 32))
    codes = [extract_style_code(enc, x) for x in styles.images]
    intra = [(codes[i] - codes[j]).norm() for i in range(8) for j in range(i) if fams[i] == fams[j]]
    inter = [(codes[i] - codes[j]).norm() for i in range(8) for j in range(i) if fams[i] != fams[j]]
    assert np.mean(intra) < np.mean(inter)


def test_degenerate_corpus():
    from hypernst.errors import DataError
    with pytest.raises(DataError):
        pretrain_style_encoder({"a": [torch.zeros(3, 16, 16)]})
