import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rgcmodes import evaluation, stimgen
from rgcmodes.evaluation import InsufficientOccupancy
from rgcmodes.mcrbm import LatentStates


def direct_mi(joint):
    """Mutual information straight from a count table, in bits."""
    joint = np.asarray(joint, dtype=float)
    n = joint.sum()
    px, py = joint.sum(1) / n, joint.sum(0) / n
    total = 0.0
    for i in range(joint.shape[0]):
        for j in range(joint.shape[1]):
            if joint[i, j] > 0:
                p = joint[i, j] / n
                total += p * math.log2(p / (px[i] * py[j]))
    return total


def expand(joint):
    xs, ys = [], []
    for i, j in np.ndindex(joint.shape):
        xs += [f"s{i}"] * int(joint[i, j])
        ys += [j] * int(joint[i, j])
    return np.array(xs, dtype=object), np.array(ys)


def entropy(counts):
    p = np.asarray(counts, float)
    p = p[p > 0] / p.sum()
    return -np.sum(p * np.log2(p))


def test_identity_coupling():
    labels = np.tile(np.arange(4), 5)
    rep = evaluation.mutual_information([f"k{x}" for x in labels], labels)
    assert rep.mi_bits == pytest.approx(2.0, abs=1e-12)
    assert rep.normalized_mi == pytest.approx(1.0, abs=1e-12)


def test_independent_product_table():
    joint = np.outer([1, 2, 3], [2, 2, 4])
    rep = evaluation.mutual_information(*expand(joint))
    assert rep.mi_bits == pytest.approx(0.0, abs=1e-12)


def test_two_by_two_table():
    rep = evaluation.mutual_information(*expand(np.array([[3, 1], [1, 3]])))
    assert rep.mi_bits == pytest.approx(0.188722, abs=1e-6)
    assert rep.normalized_mi == pytest.approx(0.188722, abs=1e-6)
    assert rep.n_samples == 8 and rep.n_distinct_states == 2
    assert rep.contingency == {("s0", 0): 3, ("s0", 1): 1, ("s1", 0): 1, ("s1", 1): 3}


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31), nx=st.integers(1, 8), ny=st.integers(1, 8))
def test_matches_direct_evaluation(seed, nx, ny):
    rng = np.random.default_rng(seed)
    joint = rng.integers(0, 6, (nx, ny))
    joint[0, 0] += 1
    rep = evaluation.mutual_information(*expand(joint))
    nz_rows = joint[joint.sum(1) > 0][:, joint.sum(0) > 0]
    assert abs(rep.mi_bits - direct_mi(nz_rows)) <= 1e-12
    h_min = min(entropy(joint.sum(1)), entropy(joint.sum(0)))
    assert -1e-12 <= rep.mi_bits <= h_min + 1e-12
    assert 0.0 <= rep.normalized_mi <= 1.0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 5)), min_size=1, max_size=60))
def test_symmetry_and_relabeling(pairs):
    x = np.array([p[0] for p in pairs])
    y = np.array([p[1] for p in pairs])
    a = evaluation.mutual_information([str(v) for v in x], y)
    b = evaluation.mutual_information([str(v) for v in y], x)
    assert abs(a.mi_bits - b.mi_bits) <= 1e-12
    perm = np.array([3, 0, 5, 1, 4, 2])
    c = evaluation.mutual_information([f"z{perm[v]}" for v in x], 10 * perm[y] + 7)
    assert abs(a.mi_bits - c.mi_bits) <= 1e-12
    assert 0 <= a.mi_bits <= min(a.h_states_bits, a.h_labels_bits) + 1e-12


def test_miller_madow_reduces_small_sample_bias():
    rng = np.random.default_rng(0)
    x = rng.integers(0, 8, 200)
    y = rng.integers(0, 8, 200)
    rep = evaluation.mutual_information([str(v) for v in x], y, miller_madow=True)
    assert rep.mi_bits_miller_madow < rep.mi_bits
    assert "mi_bits_miller_madow" in rep.summary()


def test_mi_input_validation():
    with pytest.raises(ValueError, match="labels"):
        evaluation.mutual_information(["a", "b"], [1])
    with pytest.raises(ValueError, match="empty"):
        evaluation.mutual_information([], [])


def test_mi_accepts_latent_states():
    h_m = np.array([[1, 0], [1, 0], [0, 1]], np.uint8)
    h_c = np.zeros((3, 1), np.uint8)
    rep = evaluation.mutual_information(LatentStates(h_m, h_c), [0, 0, 1])
    assert rep.normalized_mi == pytest.approx(1.0)


# --- occupancy -------------------------------------------------------------------


def test_occupancy():
    assert evaluation.state_occupancy(["a"] * 5) == {"a": 5}
    assert evaluation.state_occupancy(["a", "b"] * 3) == {"a": 3, "b": 3}
    rng = np.random.default_rng(1)
    keys = rng.choice(["x", "y", "z", "w"], 500)
    occ = evaluation.state_occupancy(keys)
    assert occ == {k: int(np.sum(keys == k)) for k in occ}
    assert list(occ.values()) == sorted(occ.values(), reverse=True)


# --- triggered averages -------------------------------------------------------------


def stim_from(frames):
    n = len(frames)
    labels = stimgen.FrameLabels(np.zeros(n, int), np.zeros(n), np.zeros(n, int),
                                 np.arange(n), np.zeros(n))
    return stimgen.StimulusSequence(np.asarray(frames, float), 30.0, labels)


def test_single_occurrence_reproduces_frame():
    rng = np.random.default_rng(2)
    frames = rng.random((5, 4, 4))
    avg = evaluation.state_triggered_average(["a", "b", "c", "d", "e"], stim_from(frames), "c",
                                             min_count=1)
    assert np.array_equal(avg.image, frames[2]) and avg.n_contributing == 1


def test_negatives_average_to_mean_luminance():
    rng = np.random.default_rng(3)
    frame = 1.0 + 0.5 * rng.uniform(-1, 1, (6, 6))
    avg = evaluation.state_triggered_average(["a", "b", "a"], stim_from([frame, frame, 2 - frame]),
                                             "a", min_count=2)
    np.testing.assert_allclose(avg.image, 1.0)


def test_phase_bin_average_is_a_smoother_grating():
    spec = stimgen.GratingSpec(orientation_deg=30.0, duration_s=10)
    stim = stimgen.gen_grating(spec, (24, 24))
    keys = stim.labels.phase_bin.astype(str)
    avg = evaluation.state_triggered_average(keys, stim, "3")
    direct = stim.frames[stim.labels.phase_bin == 3].mean(axis=0)
    np.testing.assert_allclose(avg.image, direct)
    # RMS contrast drops because edges move within the bin
    rms = avg.image.std() / avg.image.mean()
    frame_rms = np.mean([f.std() / f.mean() for f in stim.frames[stim.labels.phase_bin == 3]])
    assert rms < frame_rms - 1e-3
    assert len(np.unique(avg.image)) > 2


def test_occupancy_weighted_averages_give_global_mean():
    rng = np.random.default_rng(4)
    stim = stim_from(rng.random((40, 3, 3)))
    keys = rng.choice(["p", "q", "r"], 40)
    occ = evaluation.state_occupancy(keys)
    total = sum(n * evaluation.state_triggered_average(keys, stim, k, min_count=1).image
                for k, n in occ.items()) / 40
    np.testing.assert_allclose(total, stim.frames.mean(axis=0), atol=1e-10)


def test_insufficient_occupancy():
    stim = stim_from(np.ones((20, 2, 2)))
    with pytest.raises(InsufficientOccupancy, match="insufficient occupancy"):
        evaluation.state_triggered_average(["a"] * 20, stim, "never", min_count=10)
    with pytest.raises(InsufficientOccupancy):
        evaluation.state_triggered_average(["a"] * 5 + ["b"] * 15, stim, "a", min_count=10)


def test_sample_times_map_to_frames():
    frames = np.arange(10, dtype=float)[:, None, None] * np.ones((1, 2, 2))
    stim = stim_from(frames)
    t = np.array([0.05, 0.12, 0.2])  # frames 1, 3, 6
    avg = evaluation.state_triggered_average(["a", "b", "a"], stim, "a", min_count=1,
                                             sample_times_s=t)
    np.testing.assert_allclose(avg.image, 3.5)


def test_unit_averages():
    rng = np.random.default_rng(5)
    stim = stim_from(rng.random((30, 3, 3)))
    h_m = np.ones((30, 2), np.uint8)
    h_m[:, 1] = rng.integers(0, 2, 30)
    h_c = rng.integers(0, 2, (30, 2)).astype(np.uint8)
    states = LatentStates(h_m, h_c)
    all_on = evaluation.unit_triggered_average(states, stim, "mean", 0, min_count=1)
    np.testing.assert_allclose(all_on.image, stim.frames.mean(axis=0))
    # a unit that is on exactly when one state occurs
    key = states.keys[0]
    ind = (states.keys == key).astype(np.uint8)
    marked = LatentStates(np.column_stack([h_m, ind]), h_c)
    u = evaluation.unit_triggered_average(marked, stim, "mean", 2, min_count=1)
    s = evaluation.state_triggered_average(states, stim, key, min_count=1)
    np.testing.assert_allclose(u.image, s.image)
    with pytest.raises(ValueError, match="layer"):
        evaluation.unit_triggered_average(states, stim, "both", 0)


# --- stage ordering ---------------------------------------------------------------


def test_mi_by_stage():
    v = evaluation.mi_by_stage({"none": 0.8, "gabac_blocked": 0.5, "gabaabc_blocked": 0.2})
    assert v.ordered and v.violations == []
    v = evaluation.mi_by_stage({"none": 0.5, "gabac_blocked": 0.6, "gabaabc_blocked": 0.2})
    assert not v.ordered
    assert v.violations == [("none", "gabac_blocked", 0.5, 0.6)]
    assert v.table().splitlines()[0] == "stage,normalized_mi"
    with pytest.raises(ValueError):
        evaluation.mi_by_stage({"none": 0.5})
