import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dualsynth.data import (
    ConfigurationError,
    InsufficientSlicesError,
    PhantomError,
    PhantomSpec,
    Volume,
    VolumeFormatError,
    denormalize_intensity,
    extract_patches,
    generate_phantom,
    global_mapping,
    load_phantom_spec,
    load_volume,
    make_dataset,
    normalize_intensity,
    save_phantom_spec,
    save_volume,
    synthesize_volume,
)

from oracles import window_average

SMALL = PhantomSpec(shape=(16, 32, 32), lesion_radius=(3.0, 5.0), seed=3)


def center_slice(batch):
    return batch[:, 2:3]


# phantom

def test_phantom_deterministic():
    a, b = generate_phantom(SMALL), generate_phantom(SMALL)
    for va, vb in zip(a, b):
        assert va.voxels.tobytes() == vb.voxels.tobytes()
    c = generate_phantom(PhantomSpec(shape=(16, 32, 32), lesion_radius=(3.0, 5.0), seed=4))
    assert a[0].voxels.tobytes() != c[0].voxels.tobytes()


def test_no_lesions_gives_global_mapping():
    src, tgt, mask = generate_phantom(PhantomSpec(shape=(16, 32, 32), lesion_count=0, noise=0.0))
    np.testing.assert_array_equal(tgt.voxels, global_mapping(src.voxels.astype(np.float64)).astype(np.float32))
    assert not mask.voxels.any()


@pytest.mark.parametrize("seed", range(5))
def test_lesion_fraction_within_radius_bounds(seed):
    spec = PhantomSpec(seed=seed)
    _, _, mask = generate_phantom(spec)
    rmin, rmax = spec.lesion_radius
    ball = lambda r: 4.0 / 3.0 * math.pi * (r + spec.dilation) ** 3  # noqa: E731
    zcap = (spec.shape[0] - 2 * spec.dilation - 2) / 2 + spec.dilation
    lo = spec.lesion_count * ball(rmin)
    hi = spec.lesion_count * 4.0 / 3.0 * math.pi * (rmax + spec.dilation) ** 2 * min(rmax + spec.dilation, zcap)
    n = mask.voxels.sum()
    assert 0.8 * lo <= n <= 1.2 * hi


def test_lesion_mask_binary_nonempty_and_contrast():
    src, tgt, mask = generate_phantom(SMALL)
    m = mask.voxels
    assert set(np.unique(m)) == {0.0, 1.0}
    inside = m.astype(bool)
    expected = global_mapping(src.voxels.astype(np.float64))
    # outside the lesion the target follows the global map up to noise
    assert np.abs(tgt.voxels[~inside] - expected[~inside]).mean() < 3 * SMALL.noise
    assert np.abs(tgt.voxels[inside] - expected[inside]).mean() > 0.1


def test_phantom_rejects_small_extents():
    with pytest.raises(ValueError):
        generate_phantom(PhantomSpec(shape=(8, 32, 32)))


def test_infeasible_lesions():
    with pytest.raises(PhantomError):
        generate_phantom(PhantomSpec(shape=(16, 16, 16), lesion_count=40, lesion_radius=(5.0, 6.0), max_retries=50))


def test_phantom_spec_file_round_trip(tmp_path):
    p = str(tmp_path / "spec.json")
    save_phantom_spec(SMALL, p)
    assert load_phantom_spec(p) == SMALL
    raw = json.load(open(p))
    raw["colour"] = 1
    json.dump(raw, open(p, "w"))
    with pytest.raises(ConfigurationError, match="colour"):
        load_phantom_spec(p)


# patches

def _vols(d=8, h=20, w=20, seed=0):
    rng = np.random.default_rng(seed)
    return Volume(rng.random((d, h, w)).astype(np.float32)), Volume(rng.random((d, h, w)).astype(np.float32))


def test_depth_five_single_center():
    s, t = _vols(5)
    assert all(p.center[0] == 2 for p in extract_patches(s, t, 30, 8, np.random.default_rng(0)))


def test_full_scale_shapes():
    s, t = _vols(6, 150, 150)
    p = extract_patches(s, t, 2, 144, np.random.default_rng(0))[0]
    assert p.source.shape == (5, 144, 144) and p.target.shape == (1, 144, 144)


def test_too_few_slices():
    s, t = _vols(4)
    with pytest.raises(InsufficientSlicesError):
        extract_patches(s, t, 1, 8)


def test_patch_too_big():
    s, t = _vols(6, 10, 10)
    with pytest.raises(ValueError):
        extract_patches(s, t, 1, 12)


@settings(max_examples=30, deadline=None)
@given(st.integers(5, 9), st.integers(4, 12), st.integers(0, 10_000))
def test_patch_slicing_identity(d, hw, seed):
    s, t = _vols(d, 12, 14, seed)
    for p in extract_patches(s, t, 5, hw, np.random.default_rng(seed)):
        z, cy, cx = p.center
        y, x = cy - hw // 2, cx - hw // 2
        assert 2 <= z <= d - 3
        np.testing.assert_array_equal(p.target, t.voxels[z:z + 1, y:y + hw, x:x + hw])
        np.testing.assert_array_equal(p.source, s.voxels[z - 2:z + 3, y:y + hw, x:x + hw])


def test_make_dataset_deterministic_with_mask():
    a = make_dataset(SMALL, 12, 16, seed=1)
    b = make_dataset(SMALL, 12, 16, seed=1)
    assert a.source.tobytes() == b.source.tobytes() and a.target.tobytes() == b.target.tobytes()
    assert a.source.shape == (12, 5, 16, 16) and a.mask.shape == (12, 1, 16, 16)
    assert a.source.min() >= -1 and a.source.max() <= 1


# synthesis

def test_identity_synthesis():
    src, _, _ = generate_phantom(SMALL)
    out = synthesize_volume(center_slice, src, patch_hw=16, stride=8)
    err = np.abs(out.voxels - src.voxels).max() / np.abs(src.voxels).max()
    assert err <= 1e-6


def test_overlap_average_of_two_constants():
    d, h, w = 5, 16, 24
    vox = np.broadcast_to(np.arange(w, dtype=np.float32), (d, h, w)).copy()
    a, b = 3.0, 7.0

    def gen(batch):
        return np.stack([np.full((1, 16, 16), a if s[2, 0, 0] == 0 else b) for s in batch])

    out = synthesize_volume(gen, Volume(vox), patch_hw=16, stride=8).voxels
    np.testing.assert_array_equal(out[:, :, :8], a)
    np.testing.assert_array_equal(out[:, :, 8:16], (a + b) / 2)
    np.testing.assert_array_equal(out[:, :, 16:], b)


def test_stride_equal_patch_tiles_exactly():
    rng = np.random.default_rng(0)
    src = Volume(rng.random((6, 16, 16)).astype(np.float32))
    calls = []

    def gen(batch):
        calls.append(len(batch))
        return batch[:, 2:3] * 2.0

    out = synthesize_volume(gen, src, patch_hw=8, stride=8)
    assert sum(calls) == 6 * 4
    np.testing.assert_allclose(out.voxels, 2.0 * src.voxels, rtol=1e-7)


def test_coverage_gap_rejected():
    src = Volume(np.zeros((6, 16, 16), np.float32))
    with pytest.raises(ConfigurationError):
        synthesize_volume(center_slice, src, patch_hw=8, stride=9)


def test_synthesis_too_few_slices():
    with pytest.raises(InsufficientSlicesError):
        synthesize_volume(center_slice, Volume(np.zeros((4, 16, 16), np.float32)), patch_hw=8)


def test_synthesis_matches_window_oracle():
    rng = np.random.default_rng(5)
    src = Volume(rng.random((6, 12, 14)).astype(np.float32))

    def gen(batch):
        # position-dependent nonlinear map so overlaps differ between windows
        return (np.sin(3 * batch[:, 1:2]) + batch[:, 4:5] * batch[:, 0:1]).astype(np.float32)

    out = synthesize_volume(gen, src, patch_hw=8, stride=3).voxels
    ref = window_average(gen, src.voxels, 8, 3)
    np.testing.assert_allclose(out, ref, rtol=1e-6, atol=1e-7)


# file format

def test_volume_round_trip(tmp_path):
    src, _, _ = generate_phantom(SMALL)
    save_volume(src, str(tmp_path / "src"))
    back = load_volume(str(tmp_path / "src.json"))
    assert back.voxels.tobytes() == src.voxels.tobytes()
    assert back.intensity_range == (float(src.voxels.min()), float(src.voxels.max()))
    meta = json.load(open(tmp_path / "src.json"))
    assert meta["byte_order"] == "little" and meta["extents"] == [16, 32, 32]
    raw = np.fromfile(tmp_path / "src.raw", dtype="<f4")
    np.testing.assert_array_equal(raw, src.voxels.ravel())


def test_wrong_voxel_count_rejected(tmp_path):
    save_volume(Volume(np.ones((2, 3, 4), np.float32)), str(tmp_path / "v"))
    meta = json.load(open(tmp_path / "v.json"))
    meta["extents"] = [2, 3, 5]
    json.dump(meta, open(tmp_path / "v.json", "w"))
    with pytest.raises(VolumeFormatError, match="30.*24"):
        load_volume(str(tmp_path / "v"))


def test_wrong_stored_range_rejected(tmp_path):
    save_volume(Volume(np.arange(24, dtype=np.float32).reshape(2, 3, 4)), str(tmp_path / "v"))
    meta = json.load(open(tmp_path / "v.json"))
    meta["intensity_range"] = [0.0, 1.0]
    json.dump(meta, open(tmp_path / "v.json", "w"))
    with pytest.raises(VolumeFormatError):
        load_volume(str(tmp_path / "v"))


# normalization

def test_normalize_examples():
    v = Volume(np.array([0.0, 50.0, 100.0, 25.0]).reshape(1, 2, 2))
    n = normalize_intensity(v)
    np.testing.assert_array_equal(n.voxels.ravel(), [-1.0, 0.0, 1.0, -0.5])
    assert n.original_range == (0.0, 100.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(-1e3, 1e3), st.floats(1e-2, 1e3))
def test_normalize_inverts(seed, lo, span):
    vox = (lo + span * np.random.default_rng(seed).random((2, 3, 4))).astype(np.float64)
    if np.ptp(vox) == 0:
        return
    back = denormalize_intensity(normalize_intensity(Volume(vox))).voxels
    np.testing.assert_allclose(back, vox, rtol=1e-6, atol=1e-6 * max(abs(lo), span))


def test_normalize_constant_volume():
    with pytest.raises(ValueError):
        normalize_intensity(Volume(np.full((2, 2, 2), 3.0)))


def test_denormalize_needs_range():
    with pytest.raises(ValueError):
        denormalize_intensity(Volume(np.zeros((1, 2, 2))))
