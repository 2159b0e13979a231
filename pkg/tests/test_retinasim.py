import dataclasses

import numpy as np
import pytest

from rgcmodes import retinasim, stimgen
from rgcmodes.retinasim import ImpairmentLevel, RFParamRanges


def grating(seconds, contrast=0.5, shape=(16, 16), tf=1.0):
    spec = stimgen.GratingSpec(michelson_contrast=contrast, duration_s=seconds,
                               temporal_freq_hz=tf)
    return stimgen.gen_grating(spec, shape)


def test_population_size_and_reproducibility():
    a = retinasim.make_population(1344, seed=3)
    b = retinasim.make_population(1344, seed=3)
    assert len(a.neurons) == 1344
    assert a == b
    assert repr(a.neurons) == repr(b.neurons)
    c = retinasim.make_population(1344, seed=4)
    assert not np.array_equal(a.centers_um, c.centers_um)


def test_single_neuron_is_interior():
    r = retinasim.make_population(1, seed=0)
    x, y = r.centers_um[0]
    assert 0 < x < 63 * 42 and 0 < y < 63 * 42


def test_centres_inside_lattice_and_ids_unique():
    r = retinasim.make_population(300, seed=1, extent=(20, 30))
    assert len(set(r.neuron_ids.tolist())) == 300
    assert r.centers_um[:, 0].max() <= 29 * 42 and r.centers_um[:, 1].max() <= 19 * 42
    assert r.centers_um.min() >= 0


def test_model_validation():
    r = retinasim.make_population(2, seed=0)
    bad = dataclasses.replace(r.neurons[1], id=r.neurons[0].id)
    with pytest.raises(ValueError, match="unique"):
        dataclasses.replace(r, neurons=(r.neurons[0], bad))
    far = dataclasses.replace(r.neurons[0], center_um=(99999.0, 0.0))
    with pytest.raises(ValueError, match="outside the lattice"):
        dataclasses.replace(r, neurons=(far,))
    with pytest.raises(ValueError, match="malformed range"):
        RFParamRanges(gain=(5.0, 1.0))
    with pytest.raises(ValueError, match="polarity"):
        dataclasses.replace(r.neurons[0], polarity="both")


def test_impairment_none_is_identity():
    r = retinasim.make_population(10, seed=0)
    assert retinasim.apply_impairment(r, ImpairmentLevel.for_stage("none")) is r


def test_impairment_gabac_halves_surrounds():
    r = retinasim.make_population(10, seed=0, noise_std=0.5)
    imp = retinasim.apply_impairment(r, ImpairmentLevel.for_stage("gabac_blocked"))
    for a, b in zip(r.neurons, imp.neurons):
        assert b.surround_weight == pytest.approx(0.5 * a.surround_weight)
        assert dataclasses.replace(b, surround_weight=a.surround_weight) == a
    assert imp.noise_gain == 1.5
    assert imp.neuron_ids.tolist() == r.neuron_ids.tolist()


def test_impairment_level_validation():
    with pytest.raises(ValueError, match="unknown impairment stage"):
        ImpairmentLevel.for_stage("ttx")
    with pytest.raises(ValueError, match="noise_gain"):
        ImpairmentLevel("gabac_blocked", 0.5, 0.5)


def test_surround_removal_blurs_spatial_tuning():
    # without a surround the DoG passes low frequencies, so a fine grating
    # loses relative modulation against a coarse one
    r = retinasim.make_population(16, seed=2, extent=(16, 16))
    cut = retinasim.apply_impairment(r, ImpairmentLevel.for_stage("gabaabc_blocked"))

    def selectivity(model):
        f = retinasim.spatial_filters(model, (16, 16), 42.0)
        coarse = np.abs(f.sum(axis=1))
        fine = np.abs(f @ np.tile([1.0, -1.0], 128))
        return np.mean(fine / (coarse + fine))

    assert selectivity(cut) < selectivity(r)


def test_zero_contrast_rates_equal_baseline():
    r = retinasim.make_population(12, seed=5, extent=(16, 16))
    stim = grating(120, contrast=0.0)
    spikes = retinasim.respond(r, stim, seed=1)
    base = np.array([n.baseline_rate_hz for n in r.neurons])
    emp = spikes.counts() / 120
    se = np.sqrt(base / 120)
    assert np.all(np.abs(emp - base) <= 3 * se + 1 / 120)


def test_zero_gain_equals_zero_contrast():
    r = retinasim.make_population(8, seed=6, extent=(16, 16))
    r0 = dataclasses.replace(r, neurons=tuple(dataclasses.replace(n, gain=0.0) for n in r.neurons))
    rates_a = retinasim.firing_rates(r0, grating(5), seed=0)
    rates_b = retinasim.firing_rates(r, grating(5, contrast=0.0), seed=0)
    np.testing.assert_allclose(rates_a, rates_b)
    np.testing.assert_allclose(rates_a, np.tile([n.baseline_rate_hz for n in r.neurons], (150, 1)))


def test_psth_locks_to_the_drift_frequency():
    r = retinasim.make_population(9, seed=7, extent=(16, 16))
    spikes = retinasim.respond(r, grating(60), seed=2)
    for train in spikes.trains:
        counts = np.bincount((np.asarray(train) * 30).astype(int), minlength=1800)[:1800]
        spec = np.abs(np.fft.rfft(counts - counts.mean()))
        freqs = np.fft.rfftfreq(1800, 1 / 30)
        assert freqs[np.argmax(spec)] == pytest.approx(1.0)


def test_spike_count_matches_integrated_rate():
    r = retinasim.make_population(6, seed=8, extent=(16, 16))
    stim = grating(20)
    rates = retinasim.firing_rates(r, stim, seed=0)
    expected = rates.sum(axis=0) / 30
    counts = np.mean([retinasim.respond(r, stim, seed=s).counts() for s in range(20)], axis=0)
    # the mean of 20 runs has standard error sqrt(mu / 20)
    assert np.all(np.abs(counts - expected) <= 3 * np.sqrt(expected / 20) + 1)


def test_respond_deterministic_and_quantized():
    r = retinasim.make_population(5, seed=9, extent=(16, 16), noise_std=0.5)
    stim = grating(5)
    a, b = retinasim.respond(r, stim, seed=4), retinasim.respond(r, stim, seed=4)
    for x, y in zip(a.trains, b.trains):
        assert np.array_equal(x, y)
        ticks = x * retinasim.TIMESTAMP_HZ
        np.testing.assert_allclose(ticks, np.round(ticks), atol=1e-6)
        assert np.all(np.diff(x) > 0)
    c = retinasim.respond(r, stim, seed=5)
    assert any(not np.array_equal(x, y) for x, y in zip(a.trains, c.trains))


def test_rates_are_capped(caplog):
    r = retinasim.make_population(3, seed=0, extent=(16, 16))
    hot = dataclasses.replace(r, neurons=tuple(dataclasses.replace(n, gain=5000.0)
                                               for n in r.neurons))
    rates = retinasim.firing_rates(hot, grating(2), seed=0)
    assert rates.max() <= retinasim.MAX_RATE_HZ
    assert "clipped" in caplog.text


def test_stimulus_must_cover_the_population():
    r = retinasim.make_population(4, seed=0, extent=(32, 32))
    with pytest.raises(ValueError, match="does not cover"):
        retinasim.firing_rates(r, grating(1, shape=(8, 8)))


def test_noise_raises_rate_variability():
    r = retinasim.make_population(10, seed=0, extent=(16, 16))
    stim = grating(30)
    quiet = retinasim.firing_rates(r, stim, seed=0)
    noisy = retinasim.firing_rates(dataclasses.replace(r, noise_std=1.0), stim, seed=0)
    assert np.std(noisy - quiet) > 0.5


def test_biphasic_kernel_shape():
    k = retinasim.biphasic_kernel(0.04, 0.1, 0.7, 12, 30.0)
    assert np.abs(k).max() == pytest.approx(1.0)
    assert k[0] > 0 and k.min() < 0


def test_electrode_positions():
    st = retinasim.SpikeTrains([np.array([0.1])], 1.0, [3], [[84.0, 42.0]])
    assert st.electrode_positions().tolist() == [[1.0, 2.0]]
    with pytest.raises(ValueError, match="strictly increasing"):
        retinasim.SpikeTrains([np.array([0.5, 0.2])], 1.0, [0], [[0, 0]])
