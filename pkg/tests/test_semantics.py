import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from hypernst.semantics import (BACKGROUND, FACE, HAIR, REGIONS, MaskError, MissingCodeError, PatchSpec,
                                SamplingError, coverage_map, group_classes, rearrange_codes, region_areas,
                                sample_patches, sample_region_patches)
from hypernst.style_codes import RegionStyleCodes


def test_group_identity():
    m = np.random.default_rng(0).integers(0, 3, (8, 8))
    assert np.array_equal(group_classes(m, {0: 0, 1: 1, 2: 2}), m)


def test_group_sums_raw_counts():
    rng = np.random.default_rng(1)
    raw = rng.choice([0, 1, 4, 5, 6, 7], size=(16, 16))
    g = group_classes(raw, {0: 0, 1: 1, 4: 1, 5: 1, 6: 1, 7: 2})
    assert (g == FACE).sum() == sum((raw == c).sum() for c in (1, 4, 5, 6))


def test_group_missing_class_named():
    with pytest.raises(MaskError, match="9"):
        group_classes(np.array([[0, 9]]), {0: 0})


def test_region_areas():
    assert region_areas(np.zeros((4, 5), int)) == {BACKGROUND: 20, FACE: 0, HAIR: 0}
    half = np.zeros((4, 4), int)
    half[:, 2:] = FACE
    a = region_areas(half)
    assert a[BACKGROUND] == a[FACE] == 8


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_region_areas_brute_force(seed):
    m = np.random.default_rng(seed).integers(0, 3, (7, 9))
    a = region_areas(m)
    assert sum(a.values()) == 63
    for r in REGIONS:
        assert a[r] == sum(int(v == r) for v in m.flat)


def test_coverage_map_brute_force():
    rng = np.random.default_rng(2)
    reg = rng.random((12, 10)) > 0.5
    cov = coverage_map(reg, 4)
    for y in range(cov.shape[0]):
        for x in range(cov.shape[1]):
            assert cov[y, x] == pytest.approx(reg[y:y + 4, x:x + 4].mean())


def test_full_face_coverage_one(rng):
    img = torch.zeros(3, 32, 32)
    s = sample_region_patches(img, np.ones((32, 32), int), FACE, PatchSpec(8, 5, 0.75), rng)
    assert len(s.offsets) == 5 and np.all(s.coverage == 1.0)
    assert s.patches.shape == (5, 3, 8, 8)


def test_left_half_offsets():
    m = np.zeros((64, 64), int)
    m[:, :32] = FACE
    # feasible x offsets by brute force: at least 12 of 16 columns in the face half
    feasible = [x for x in range(64 - 16 + 1) if max(0, min(32, x + 16) - x) / 16 >= 0.75]
    # 12 of 16 columns inside [0, 32) means x + 12 <= 32
    assert max(feasible) == 20
    for seed in range(20):
        s = sample_region_patches(torch.zeros(3, 64, 64), m, FACE, PatchSpec(16, 3, 0.75),
                                  np.random.default_rng(seed))
        assert all(x <= 20 for _, x in s.offsets)


def test_absent_region_signals(rng):
    assert sample_region_patches(torch.zeros(3, 16, 16), np.zeros((16, 16), int), HAIR,
                                 PatchSpec(4), rng) is None


def test_tau_relaxation_and_failure(rng):
    m = np.zeros((16, 16), int)
    m[:, 0:2] = HAIR  # 2-column strip: 8x8 windows reach coverage 0.25 at most
    s = sample_region_patches(torch.zeros(3, 16, 16), m, HAIR, PatchSpec(8, 3, 0.75), rng)
    assert s.tau == pytest.approx(0.25)
    assert np.all(s.coverage >= 0.25)
    m2 = np.zeros((16, 16), int)
    m2[0, 0] = HAIR
    with pytest.raises(SamplingError):
        sample_region_patches(torch.zeros(3, 16, 16), m2, HAIR, PatchSpec(8, 3, 0.75), rng)


def test_sampler_deterministic():
    m = np.random.default_rng(0).integers(0, 3, (32, 32))
    m[8:24, 8:24] = FACE
    a = sample_region_patches(torch.zeros(3, 32, 32), m, FACE, PatchSpec(8, 3, 0.75), np.random.default_rng(4))
    b = sample_region_patches(torch.zeros(3, 32, 32), m, FACE, PatchSpec(8, 3, 0.75), np.random.default_rng(4))
    assert a.offsets == b.offsets


def test_misaligned_mask(rng):
    with pytest.raises(MaskError):
        sample_region_patches(torch.zeros(3, 16, 16), np.zeros((8, 8), int), 0, PatchSpec(4), rng)


def test_unconstrained_patches(rng):
    p, off = sample_patches(torch.zeros(3, 16, 16), 4, 8, rng)
    assert p.shape == (4, 3, 8, 8) and all(0 <= y <= 8 and 0 <= x <= 8 for y, x in off)


def _codes(with_hair=True):
    c = {BACKGROUND: torch.tensor([1.0, 0.0]), FACE: torch.tensor([0.0, 1.0])}
    if with_hair:
        c[HAIR] = torch.tensor([2.0, 2.0])
    return RegionStyleCodes(c, torch.tensor([5.0, 5.0]))


def test_rearrange_uniform_face():
    f = rearrange_codes(_codes(), np.ones((4, 4), int))
    assert f.shape == (2, 4, 4)
    assert torch.equal(f, torch.tensor([0.0, 1.0])[:, None, None].expand(2, 4, 4))


def test_rearrange_checkerboard():
    m = (np.indices((6, 6)).sum(0) % 2).astype(int)
    f = rearrange_codes(_codes(), m)
    table = {0: torch.tensor([1.0, 0.0]), 1: torch.tensor([0.0, 1.0])}
    for y in range(6):
        for x in range(6):
            assert torch.equal(f[:, y, x], table[m[y, x]])


def test_rearrange_hair_fallback():
    m = np.full((3, 3), HAIR)
    f = rearrange_codes(_codes(with_hair=False), m)
    assert torch.equal(f[:, 0, 0], torch.tensor([5.0, 5.0]))


def test_rearrange_missing_face_code():
    codes = RegionStyleCodes({BACKGROUND: torch.zeros(2)}, torch.ones(2))
    with pytest.raises(MissingCodeError):
        rearrange_codes(codes, np.ones((2, 2), int))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_rearrange_exact_property(seed):
    rng = np.random.default_rng(seed)
    m = rng.integers(0, 3, (5, 7))
    codes = RegionStyleCodes({r: torch.tensor(rng.normal(size=4), dtype=torch.float32) for r in REGIONS},
                             torch.zeros(4))
    f = rearrange_codes(codes, m)
    for y in range(5):
        for x in range(7):
            assert torch.equal(f[:, y, x], codes.codes[int(m[y, x])])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([0.3, 0.5, 0.75, 1.0]))
def test_coverage_guarantee_property(seed, tau):
    rng = np.random.default_rng(seed)
    m = np.zeros((24, 24), int)
    y0, x0 = rng.integers(0, 12, 2)
    m[y0:y0 + 12, x0:x0 + 12] = FACE
    s = sample_region_patches(torch.zeros(3, 24, 24), m, FACE, PatchSpec(6, 3, tau), rng)
    assert s.tau == tau and np.all(s.coverage >= tau)
    for (y, x), c in zip(s.offsets, s.coverage):
        assert (m[y:y + 6, x:x + 6] == FACE).mean() == pytest.approx(c)
