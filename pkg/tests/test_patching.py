import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from genmvi.patching import (PatchSet, SamplerConfig, SamplingError, grid_positions, reassemble, resize_down,
                             resize_up, retained, sample_training_patches, tile_test_patches, upsample_matrix,
                             window_brain_counts)
from genmvi.volume import LabelVolume, Mask, Subject, Volume


def _toy_subject(ny=40, nx=40, nz=2, seed=0):
    rng = np.random.default_rng(seed)
    vols = {c: Volume(rng.random((nz, ny, nx)), channel_name=c) for c in ("R1", "R2", "PD", "SyMVF", "MTMVI")}
    return Subject("toy", vols, LabelVolume(np.zeros((nz, ny, nx), int), {}))


def test_grid_arithmetic_for_160_at_stride_5():
    g = grid_positions(160, 32, 5, clamp=False)
    assert len(g) == (160 - 32) // 5 + 1 == 26
    assert len(g) ** 2 == 676
    assert grid_positions(160, 32, 5)[-1] == 128  # clamped far edge
    assert grid_positions(96, 32, 32) == [0, 32, 64]
    with pytest.raises(SamplingError):
        grid_positions(20, 32, 5)


def test_retention_boundary_at_half_brain():
    assert not retained(511, 32)
    assert retained(512, 32)
    brain = np.zeros((1, 32, 32), bool)
    brain.ravel()[:511] = True
    assert window_brain_counts(Mask(brain), 32)[0, 0, 0] == 511


def test_window_counts_match_direct_sums(rng):
    b = rng.random((2, 15, 13)) < 0.5
    counts = window_brain_counts(Mask(b), 4)
    for z, r, c in np.ndindex(*counts.shape):
        assert counts[z, r, c] == b[z, r:r + 4, c:c + 4].sum()


def test_resize_preserves_constants_and_ramps():
    assert np.allclose(resize_up(np.full((32, 32), 0.7)), 0.7, atol=1e-7)
    ramp = np.tile(np.arange(32.0), (32, 1))
    out = resize_up(ramp)
    u = (np.arange(128) + 0.5) / 4 - 0.5
    inside = (u >= 0) & (u <= 31)
    assert np.abs(out[:, inside] - u[inside]).max() < 1e-5
    assert out.shape == (128, 128)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_resize_output_stays_within_input_range(seed):
    x = np.random.default_rng(seed).normal(size=(32, 32))
    y = resize_up(x)
    assert y.min() >= np.float32(x.min()) - 1e-6 and y.max() <= np.float32(x.max()) + 1e-6


def test_upsample_rows_are_convex_weights():
    a = upsample_matrix(32)
    assert np.allclose(a.sum(1), 1.0) and a.min() >= 0


def test_reduction_inverts_the_upsample(rng):
    x = rng.normal(size=(3, 32, 32))
    assert np.abs(resize_down(resize_up(x)) - x).max() < 1e-5


def test_sampling_is_deterministic_and_respects_retention(prepared):
    p = prepared[0]
    cfg = SamplerConfig(per_subject_target=50, seed=11)
    a = sample_training_patches(p.subject, p.brain, cfg)
    b = sample_training_patches(p.subject, p.brain, cfg)
    assert len(a) == 50
    for ch in a.channels:
        assert a.native[ch].tobytes() == b.native[ch].tobytes()
    assert np.all(a.brain_fraction >= 0.5)
    counts = window_brain_counts(p.brain, 32)
    assert np.all(2 * counts[a.z, a.row0, a.col0] >= 1024)
    # channels come from the same window
    z, r, c = a.provenance(0)[1:]
    assert np.array_equal(a.native["SyMVF"][0], p.subject["SyMVF"].data[z, r:r + 32, c:c + 32])
    other = sample_training_patches(p.subject, p.brain, SamplerConfig(per_subject_target=50, seed=12))
    assert not np.array_equal(a.z, other.z) or not np.array_equal(a.row0, other.row0)


def test_sampling_empty_brain_raises():
    s = _toy_subject()
    with pytest.raises(SamplingError):
        sample_training_patches(s, Mask(np.zeros(s.shape, bool)), SamplerConfig(per_subject_target=5))


def test_tiling_covers_every_brain_pixel_of_some_retained_window(prepared):
    p = prepared[1]
    cfg = SamplerConfig(test_stride=5)
    tiles = tile_test_patches(p.subject, p.brain, cfg)
    covered = np.zeros(p.subject.shape, bool)
    for i in range(len(tiles)):
        _, z, r, c = tiles.provenance(i)
        covered[z, r:r + 32, c:c + 32] = True
    # brute force: brain pixels inside any retained window at any position
    counts = window_brain_counts(p.brain, 32)
    want = np.zeros_like(covered)
    for z, r, c in zip(*np.nonzero(2 * counts >= 1024)):
        want[z, r:r + 32, c:c + 32] = True
    want &= p.brain.bits
    assert not (want & ~covered).any()


def test_identity_round_trip_of_mtmvi_is_below_1e3_rms(prepared):
    p = prepared[2]
    tiles = tile_test_patches(p.subject, p.brain, SamplerConfig())
    vol = reassemble(tiles.images("MTMVI"), tiles, p.subject.shape)
    hit = np.zeros(p.subject.shape, bool)
    for i in range(len(tiles)):
        _, z, r, c = tiles.provenance(i)
        hit[z, r:r + 32, c:c + 32] = True
    err = vol.data[hit] - p.subject["MTMVI"].data[hit]
    assert np.sqrt(np.mean(err.astype(np.float64) ** 2)) < 1e-3
    assert np.all(vol.data[~hit] == 0)


def test_reassembly_of_constant_patches_and_single_patch():
    s = _toy_subject()
    brain = Mask(np.ones(s.shape, bool))
    tiles = tile_test_patches(s, brain, SamplerConfig(test_stride=3))
    vol = reassemble(np.full((len(tiles), 128, 128), 0.25), tiles, s.shape)
    assert np.allclose(vol.data, 0.25, atol=1e-7)

    one = tiles.subset([5])
    native = np.random.default_rng(0).random((1, 32, 32))
    vol = reassemble(resize_up(native), one, s.shape)
    _, z, r, c = one.provenance(0)
    assert np.abs(vol.data[z, r:r + 32, c:c + 32] - native[0]).max() < 1e-5
    assert vol.data.sum() == pytest.approx(vol.data[z, r:r + 32, c:c + 32].sum())


def test_reassembly_ignores_patch_order(rng):
    s = _toy_subject()
    tiles = tile_test_patches(s, Mask(np.ones(s.shape, bool)), SamplerConfig(test_stride=4))
    outs = rng.normal(size=(len(tiles), 128, 128)).astype(np.float32)
    perm = rng.permutation(len(tiles))
    a = reassemble(outs, tiles, s.shape)
    b = reassemble(outs[perm], tiles.subset(perm), s.shape)
    assert a.data.tobytes() == b.data.tobytes()


def test_reassembly_rejects_out_of_range_provenance():
    s = _toy_subject()
    tiles = tile_test_patches(s, Mask(np.ones(s.shape, bool)), SamplerConfig())
    with pytest.raises(ValueError, match="outside"):
        reassemble(np.zeros((len(tiles), 128, 128)), tiles, (2, 35, 40))
    with pytest.raises(ValueError):
        reassemble(np.zeros((1, 128, 128)), tiles, s.shape)


def test_patchset_save_load_round_trip(tmp_path, prepared):
    p = prepared[0]
    ps = sample_training_patches(p.subject, p.brain, SamplerConfig(per_subject_target=7))
    back = PatchSet.load(ps.save(tmp_path / "ps"))
    assert [back.provenance(i) for i in range(7)] == [ps.provenance(i) for i in range(7)]
    for ch in ps.channels:
        assert back.native[ch].tobytes() == ps.native[ch].tobytes()


def test_sampler_config_validation():
    with pytest.raises(ValueError):
        SamplerConfig(patch_resized=100)
    with pytest.raises(ValueError):
        SamplerConfig(test_stride=0)
