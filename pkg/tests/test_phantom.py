import numpy as np
import pytest

from genmvi.phantom import TISSUES, PhantomConfig, context_map, generate_subject, symvf_standin
from genmvi.preprocess import brain_mask
from genmvi.stats import pearson

CHANNELS = {"R1", "R2", "PD", "BAP", "SyMVF", "MTMVI"}


def test_same_config_and_index_give_identical_bits(phantom_cfg):
    a, ta = generate_subject(phantom_cfg, 3)
    b, tb = generate_subject(phantom_cfg, 3)
    for ch in CHANNELS:
        assert a[ch].data.tobytes() == b[ch].data.tobytes()
    assert np.array_equal(a.labels.labels, b.labels.labels)
    assert ta.mvi_true.data.tobytes() == tb.mvi_true.data.tobytes()


def test_subjects_differ_but_share_legend_and_channels(cohort):
    (a, _), (b, _) = cohort[0], cohort[1]
    assert not np.array_equal(a.labels.labels, b.labels.labels)
    assert a.labels.legend == b.labels.legend
    assert set(a.volumes) == set(b.volumes) == CHANNELS


def test_index_and_size_errors(phantom_cfg):
    with pytest.raises(IndexError):
        generate_subject(phantom_cfg, phantom_cfg.n_subjects)
    with pytest.raises(IndexError):
        generate_subject(phantom_cfg, -1)
    with pytest.raises(ValueError, match="too small"):
        generate_subject(PhantomConfig.default(shape=(2, 40, 64)), 0)


def test_ground_truth_is_zero_on_background_and_non_negative(cohort):
    for _, truth in cohort:
        mvi = truth.mvi_true.data
        assert mvi.min() >= 0
        assert np.all(mvi[truth.tissue.labels == 0] == 0)
        assert truth.tissue.legend == TISSUES


def test_tissues_cover_the_brain_mask(cohort):
    for s, truth in cohort:
        brain = brain_mask(s["BAP"]).bits
        assert np.all(truth.tissue.labels[brain] > 0)


def test_without_context_or_noise_symvf_tracks_mtmvi_within_each_tissue():
    cfg = PhantomConfig.default(context_gain=0.0, noise_sd_mtmvi=0.0, relax_true_fraction=1.0)
    s, truth = generate_subject(cfg, 0)
    for t in (1, 2, 3, 4):
        sel = truth.tissue.labels == t
        assert pearson(s["SyMVF"].data[sel], s["MTMVI"].data[sel]) > 1 - 1e-6


def test_context_term_lowers_wm_correlation_on_the_same_seed():
    def r_wm(gain):
        s, truth = generate_subject(PhantomConfig.default(context_gain=gain), 2)
        sel = truth.tissue.labels == 3
        return pearson(s["SyMVF"].data[sel], s["MTMVI"].data[sel])

    assert r_wm(0.2) < r_wm(0.0)


def test_standin_is_pixelwise_bounded_and_monotone():
    r1 = np.linspace(0.2, 1.6, 15)
    r2 = np.linspace(1.0, 20.0, 15)
    pd = np.linspace(0.5, 1.05, 15)
    R1, R2, PD = np.meshgrid(r1, r2, pd, indexing="ij")
    out = symvf_standin(R1, R2, PD)
    assert out.dtype == np.float32
    assert out.min() >= 0 and out.max() <= 0.6
    assert np.all(np.diff(out, axis=0) >= 0)
    assert np.all(np.diff(out, axis=1) >= 0)
    assert np.all(np.diff(out, axis=2) <= 0)
    assert symvf_standin(1.1, 14.0, 0.7) == symvf_standin(np.array([1.1]), np.array([14.0]), np.array([0.7]))[0]


def test_context_map_grows_with_depth_and_saturates():
    t = np.zeros((1, 21, 21), int)
    t[0, 2:19, 2:19] = 3
    ctx = context_map(t, 4.0)
    assert ctx[0, 0, 0] == 0
    assert ctx[0, 2, 10] < ctx[0, 5, 10] <= ctx[0, 10, 10] == 1.0


def test_config_round_trips_through_dict(phantom_cfg):
    assert PhantomConfig.from_dict(phantom_cfg.to_dict()) == phantom_cfg
    with pytest.raises(ValueError):
        PhantomConfig.default(n_subjects=1)
