import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rgcmodes import stimgen
from rgcmodes.stimgen import GratingSpec


def test_two_luminance_levels():
    seq = stimgen.gen_grating(GratingSpec(michelson_contrast=0.5, mean_luminance=1.36, duration_s=2))
    np.testing.assert_allclose(np.unique(seq.frames), [0.68, 2.04], rtol=1e-12)


def test_zero_contrast_is_constant():
    seq = stimgen.gen_grating(GratingSpec(michelson_contrast=0.0, duration_s=1))
    assert np.all(seq.frames == 1.36)


def test_opposite_orientations_retrace_the_same_frames():
    a = stimgen.grating_frame(GratingSpec(orientation_deg=0.0), (20, 24), 0.0)
    b = stimgen.grating_frame(GratingSpec(orientation_deg=180.0), (20, 24), math.pi)
    assert np.array_equal(a, b)


def test_michelson_identity():
    for c in (0.0, 0.1, 0.5, 1.0):
        s = GratingSpec(michelson_contrast=c, mean_luminance=2.0)
        if s.l_max + s.l_min > 0:
            assert (s.l_max - s.l_min) / (s.l_max + s.l_min) == pytest.approx(c, abs=1e-12)


def test_spec_validation_names_the_field():
    with pytest.raises(ValueError, match="michelson_contrast"):
        GratingSpec(michelson_contrast=1.5)
    with pytest.raises(ValueError, match="duration_s"):
        GratingSpec(duration_s=0)
    with pytest.raises(ValueError, match="orientation_deg"):
        GratingSpec(orientation_deg=360)


def test_bar_width_conversion():
    spec = GratingSpec.from_bar_width(800.0)
    assert spec.period_um == pytest.approx(1600.0)


def test_phase_zero_puts_edge_at_origin():
    spec = GratingSpec(spatial_freq_cpd=31.0 / (8 * 42.0))  # period of 8 pixels
    row = stimgen.grating_frame(spec, (1, 16), 0.0)[0]
    assert row.tolist() == [spec.l_max] * 5 + [spec.l_min] * 3 + [spec.l_max] * 5 + [spec.l_min] * 3


@settings(max_examples=30, deadline=None)
@given(orientation=st.floats(0, 359.9), sf=st.floats(0.005, 0.1),
       contrast=st.floats(0, 1), lum=st.floats(0.1, 10))
def test_frames_within_luminance_bounds(orientation, sf, contrast, lum):
    spec = GratingSpec(orientation_deg=orientation, spatial_freq_cpd=sf,
                       michelson_contrast=contrast, mean_luminance=lum, duration_s=0.5)
    seq = stimgen.gen_grating(spec, (8, 9))
    assert seq.frames.min() >= spec.l_min - 1e-12
    assert seq.frames.max() <= spec.l_max + 1e-12
    assert len(seq.labels) == seq.n_frames and seq.shape == (8, 9)


@pytest.mark.parametrize("tf", [0.5, 1.0, 2.0, 3.0])
def test_grating_is_periodic(tf):
    spec = GratingSpec(temporal_freq_hz=tf, orientation_deg=30.0, duration_s=4)
    seq = stimgen.gen_grating(spec, (12, 12), frame_rate_hz=30)
    period = int(round(30 / tf))
    np.testing.assert_allclose(seq.frames[period:], seq.frames[:-period], atol=1e-9)


def test_gen_grating_labels():
    seq = stimgen.gen_grating(GratingSpec(orientation_deg=45.0, duration_s=2), protocol_id=3)
    assert np.all(seq.labels.orientation_deg == 45.0)
    assert np.all(seq.labels.protocol_id == 3)
    assert seq.labels.frame_index.tolist() == list(range(60))
    k = np.arange(60)
    assert np.array_equal(seq.labels.phase_bin, (k % 30) * 8 // 30)


def test_gen_grating_too_short():
    with pytest.raises(ValueError, match="shorter than one frame"):
        stimgen.gen_grating(GratingSpec(duration_s=0.01))


def test_natural_scan_constant_trajectory():
    img = np.random.default_rng(0).random((40, 40))
    seq = stimgen.gen_natural_scan(img, [[20, 20]], (8, 8), duration_s=1)
    assert np.all(seq.frames == seq.frames[0])


def test_natural_scan_closed_path_repeats():
    img = np.random.default_rng(1).random((64, 64))
    n = 25
    path = stimgen.ellipse_trajectory(n, (32, 32), (10, 14))
    seq = stimgen.gen_natural_scan(img, path, (16, 16), duration_s=2, frame_rate_hz=30)
    assert np.array_equal(seq.frames[0], seq.frames[n])


def test_natural_scan_matches_direct_crops():
    checker = (np.indices((60, 60)).sum(axis=0) // 3 % 2).astype(float) + 0.5
    path = stimgen.ellipse_trajectory(30, (30, 30), (12, 12))
    seq = stimgen.gen_natural_scan(checker, path, (10, 12), duration_s=1)
    for t in range(seq.n_frames):
        r, c = np.floor(path[t % 30] + 0.5).astype(int)
        np.testing.assert_array_equal(seq.frames[t], checker[r - 5:r + 5, c - 6:c + 6])


def test_natural_scan_out_of_bounds_names_frame():
    with pytest.raises(ValueError, match="frame 0"):
        stimgen.gen_natural_scan(np.ones((20, 20)), [[2, 2]], (8, 8), duration_s=1)


def test_ellipse_is_equispaced_in_arc_length():
    path = stimgen.ellipse_trajectory(400, (0, 0), (5, 20))
    closed = np.vstack([path, path[:1]])
    seg = np.hypot(*np.diff(closed, axis=0).T)
    assert seg.std() / seg.mean() < 1e-3


def _eight_orientations(n_bins=4):
    seqs = [stimgen.gen_grating(GratingSpec(orientation_deg=float(o), duration_s=1), (6, 6),
                                n_phase_bins=n_bins) for o in range(0, 360, 45)]
    return stimgen.concatenate(seqs)


def test_label_schemes():
    seq = _eight_orientations()
    assert len(np.unique(stimgen.label_frames(seq, "orientation"))) == 8
    assert np.all(stimgen.label_frames(seq, "phase", n_phase_bins=1) == 0)
    combo = stimgen.label_frames(seq, "orientation×phase", n_phase_bins=4)
    orient = np.searchsorted(np.unique(seq.labels.orientation_deg), seq.labels.orientation_deg)
    bins = np.floor(seq.labels.phase_frac * 4).astype(int)
    assert np.array_equal(combo, orient * 4 + bins)
    assert len(np.unique(combo)) <= 32
    assert np.array_equal(stimgen.label_frames(seq, "frame_id"), np.arange(seq.n_frames))


def test_label_frames_is_pure():
    seq = _eight_orientations()
    a = stimgen.label_frames(seq, "orientation_phase")
    b = stimgen.label_frames(seq, "orientation_phase")
    assert np.array_equal(a, b)


def test_label_frames_unknown_scheme():
    with pytest.raises(ValueError, match="unknown label scheme"):
        stimgen.label_frames(_eight_orientations(), "colour")


def test_concatenate_renumbers_and_checks_shapes():
    a = stimgen.gen_grating(GratingSpec(duration_s=1), (4, 4))
    seq = stimgen.concatenate([a, a])
    assert seq.labels.frame_index.tolist() == list(range(60))
    with pytest.raises(ValueError, match="frame shape"):
        stimgen.concatenate([a, stimgen.gen_grating(GratingSpec(duration_s=1), (5, 4))])


def test_sequence_rejects_negative_luminance():
    seq = stimgen.gen_grating(GratingSpec(duration_s=1), (4, 4))
    with pytest.raises(ValueError, match="non-negative"):
        stimgen.StimulusSequence(-seq.frames, 30.0, seq.labels)


def test_brick_wall_mean_luminance():
    img = stimgen.synthetic_brick_wall((64, 80), seed=2, mean_luminance=1.36)
    assert img.shape == (64, 80)
    assert img.mean() == pytest.approx(1.36)
    assert img.min() >= 0
