"""Synthetic RGC population on the 64x64 electrode lattice.

Each neuron is linear-nonlinear-Poisson: a difference-of-Gaussians spatial
filter on stimulus contrast, a biphasic temporal kernel, a static
nonlinearity, then inhomogeneous Poisson spiking by thinning. GABA blockade
is modelled phenomenologically as surround loss plus extra rate noise.
"""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
from scipy.signal import lfilter

logger = logging.getLogger(__name__)

LATTICE_SHAPE = (64, 64)
PITCH_UM = 42.0
TIMESTAMP_HZ = 7500.0
MAX_RATE_HZ = 200.0
NOISE_TAU_S = 0.2

STAGE_DEFAULTS = {
    "none": (1.0, 1.0),
    "gabac_blocked": (0.5, 1.5),
    "gabaabc_blocked": (0.0, 2.5),
}


@dataclass(frozen=True)
class ImpairmentLevel:
    stage: str = "none"
    surround_scale: float = 1.0
    noise_gain: float = 1.0

    def __post_init__(self):
        if self.stage not in STAGE_DEFAULTS:
            raise ValueError(f"unknown impairment stage {self.stage!r}")
        if not 0.0 <= self.surround_scale <= 1.0:
            raise ValueError(f"surround_scale must lie in [0, 1], got {self.surround_scale}")
        if self.noise_gain < 1.0:
            raise ValueError(f"noise_gain must be >= 1, got {self.noise_gain}")
        if self.stage == "none" and (self.surround_scale != 1.0 or self.noise_gain != 1.0):
            raise ValueError("stage 'none' requires surround_scale=1 and noise_gain=1")

    @classmethod
    def for_stage(cls, stage):
        if stage not in STAGE_DEFAULTS:
            raise ValueError(f"unknown impairment stage {stage!r}")
        scale, gain = STAGE_DEFAULTS[stage]
        return cls(stage, scale, gain)


@dataclass(frozen=True)
class NeuronSpec:
    id: int
    center_um: Tuple[float, float]  # (x, y)
    sigma_center_um: float
    sigma_surround_um: float
    surround_weight: float
    temporal_kernel: Tuple[float, ...]
    polarity: str  # "ON" or "OFF"
    baseline_rate_hz: float
    gain: float

    def __post_init__(self):
        if not self.sigma_surround_um > self.sigma_center_um > 0:
            raise ValueError(f"neuron {self.id}: need sigma_surround > sigma_center > 0")
        if not 0.0 <= self.surround_weight <= 1.0:
            raise ValueError(f"neuron {self.id}: surround_weight outside [0, 1]")
        if not np.all(np.isfinite(self.temporal_kernel)):
            raise ValueError(f"neuron {self.id}: non-finite temporal kernel")
        if self.polarity not in ("ON", "OFF"):
            raise ValueError(f"neuron {self.id}: polarity must be ON or OFF")
        if self.baseline_rate_hz < 0:
            raise ValueError(f"neuron {self.id}: negative baseline rate")
        if self.gain < 0:
            raise ValueError(f"neuron {self.id}: negative gain")


@dataclass(frozen=True)
class RFParamRanges:
    """Uniform sampling ranges ``(low, high)`` for neuron parameters."""

    sigma_center_um: Tuple[float, float] = (45.0, 80.0)
    surround_ratio: Tuple[float, float] = (3.0, 5.0)
    surround_weight: Tuple[float, float] = (0.6, 0.9)
    tau_fast_s: Tuple[float, float] = (0.03, 0.06)
    tau_slow_s: Tuple[float, float] = (0.08, 0.15)
    biphasic_ratio: Tuple[float, float] = (0.5, 0.8)
    baseline_rate_hz: Tuple[float, float] = (4.0, 12.0)
    gain: Tuple[float, float] = (20.0, 50.0)
    frac_on: float = 0.5
    n_taps: int = 12
    frame_rate_hz: float = 30.0

    def __post_init__(self):
        for f in dataclasses.fields(self):
            val = getattr(self, f.name)
            if isinstance(val, tuple) and (len(val) != 2 or val[1] < val[0]):
                raise ValueError(f"empty or malformed range for {f.name}: {val}")
        if self.n_taps < 1:
            raise ValueError("n_taps must be >= 1")


@dataclass(frozen=True)
class RetinaModel:
    neurons: Tuple[NeuronSpec, ...]
    seed: int = 0
    impairment: ImpairmentLevel = field(default_factory=ImpairmentLevel)
    lattice_shape: Tuple[int, int] = LATTICE_SHAPE
    pitch_um: float = PITCH_UM
    noise_std: float = 0.0
    noise_shared_frac: float = 0.5
    noise_gain: float = 1.0
    nonlinearity: str = "softplus"

    def __post_init__(self):
        ids = [n.id for n in self.neurons]
        if len(set(ids)) != len(ids):
            raise ValueError("neuron ids must be unique")
        hi_x = (self.lattice_shape[1] - 1) * self.pitch_um
        hi_y = (self.lattice_shape[0] - 1) * self.pitch_um
        for n in self.neurons:
            x, y = n.center_um
            if not (0 <= x <= hi_x and 0 <= y <= hi_y):
                raise ValueError(f"neuron {n.id} centre {n.center_um} outside the lattice")
        if not 0.0 <= self.noise_shared_frac <= 1.0:
            raise ValueError("noise_shared_frac must lie in [0, 1]")
        if self.nonlinearity not in ("softplus", "exp"):
            raise ValueError(f"unknown nonlinearity {self.nonlinearity!r}")

    @property
    def neuron_ids(self):
        return np.array([n.id for n in self.neurons], dtype=np.int64)

    @property
    def centers_um(self):
        return np.array([n.center_um for n in self.neurons], dtype=float).reshape(-1, 2)


@dataclass
class SpikeTrains:
    trains: list  # one sorted float array per neuron
    recording_duration_s: float
    neuron_ids: np.ndarray
    centers_um: np.ndarray  # (n, 2) as (x, y)

    def __post_init__(self):
        self.neuron_ids = np.asarray(self.neuron_ids, dtype=np.int64)
        self.centers_um = np.asarray(self.centers_um, dtype=float).reshape(-1, 2)
        if not (len(self.trains) == len(self.neuron_ids) == len(self.centers_um)):
            raise ValueError("trains, neuron_ids and centers_um differ in length")
        for nid, t in zip(self.neuron_ids, self.trains):
            t = np.asarray(t)
            if t.size and (np.any(np.diff(t) <= 0) or t[0] < 0 or t[-1] > self.recording_duration_s):
                raise ValueError(f"neuron {nid}: spike times must be strictly increasing "
                                 f"within [0, {self.recording_duration_s}]")

    def __len__(self):
        return len(self.trains)

    def counts(self):
        return np.array([len(t) for t in self.trains])

    def electrode_positions(self, pitch_um=PITCH_UM):
        """(row, col) electrode coordinates of each neuron (fractional)."""
        return np.column_stack([self.centers_um[:, 1], self.centers_um[:, 0]]) / pitch_um


def biphasic_kernel(tau_fast, tau_slow, ratio, n_taps, frame_rate_hz):
    """Difference of gamma-like lobes sampled at frame times, peak-normalized."""
    t = (np.arange(n_taps) + 0.5) / frame_rate_hz
    fast = (t / tau_fast) * np.exp(1 - t / tau_fast)
    slow = (t / tau_slow) * np.exp(1 - t / tau_slow)
    k = fast - ratio * slow
    return k / np.abs(k).max()


def make_population(n_neurons, rf_param_ranges: Optional[RFParamRanges] = None, seed=0,
                    extent=LATTICE_SHAPE, pitch_um=PITCH_UM, **model_kwargs) -> RetinaModel:
    """Neurons on a jittered grid covering the top-left ``extent`` electrodes."""
    if n_neurons < 1:
        raise ValueError("n_neurons must be >= 1")
    ranges = rf_param_ranges or RFParamRanges()
    rng = np.random.default_rng(seed)
    rows, cols = extent
    side = math.ceil(math.sqrt(n_neurons))
    span_y, span_x = (rows - 1) * pitch_um, (cols - 1) * pitch_um
    step_y, step_x = span_y / side, span_x / side
    cells = rng.permutation(side * side)[:n_neurons]
    cells.sort()
    cy = (cells // side + 0.5) * step_y + rng.uniform(-0.4, 0.4, n_neurons) * step_y
    cx = (cells % side + 0.5) * step_x + rng.uniform(-0.4, 0.4, n_neurons) * step_x
    cy = np.clip(cy, 0, span_y)
    cx = np.clip(cx, 0, span_x)

    def draw(rng_pair):
        lo, hi = rng_pair
        return rng.uniform(lo, hi, n_neurons)

    sig_c = draw(ranges.sigma_center_um)
    sig_s = sig_c * draw(ranges.surround_ratio)
    w_s = draw(ranges.surround_weight)
    tau_f = draw(ranges.tau_fast_s)
    tau_s = draw(ranges.tau_slow_s)
    ratio = draw(ranges.biphasic_ratio)
    base = draw(ranges.baseline_rate_hz)
    gain = draw(ranges.gain)
    on = rng.random(n_neurons) < ranges.frac_on
    neurons = tuple(
        NeuronSpec(
            id=i, center_um=(float(cx[i]), float(cy[i])),
            sigma_center_um=float(sig_c[i]), sigma_surround_um=float(sig_s[i]),
            surround_weight=float(w_s[i]),
            temporal_kernel=tuple(float(x) for x in biphasic_kernel(
                tau_f[i], max(tau_s[i], tau_f[i] * 1.5), ratio[i], ranges.n_taps,
                ranges.frame_rate_hz)),
            polarity="ON" if on[i] else "OFF",
            baseline_rate_hz=float(base[i]), gain=float(gain[i]),
        )
        for i in range(n_neurons)
    )
    return RetinaModel(neurons=neurons, seed=seed, pitch_um=pitch_um, **model_kwargs)


def apply_impairment(retina: RetinaModel, level: ImpairmentLevel) -> RetinaModel:
    """Copy of ``retina`` with surrounds scaled and rate noise amplified."""
    if level.stage == "none":
        return retina
    neurons = tuple(dataclasses.replace(n, surround_weight=n.surround_weight * level.surround_scale)
                    for n in retina.neurons)
    return dataclasses.replace(retina, neurons=neurons, impairment=level,
                               noise_gain=retina.noise_gain * level.noise_gain)


def spatial_filters(retina: RetinaModel, shape, um_per_pixel):
    """DoG weights ``(n_neurons, H*W)``, each lobe normalized to unit mass."""
    H, W = shape
    y, x = np.mgrid[0:H, 0:W] * um_per_pixel
    x = x.ravel()[None, :]
    y = y.ravel()[None, :]
    c = retina.centers_um
    r2 = (x - c[:, :1]) ** 2 + (y - c[:, 1:]) ** 2
    sc = np.array([n.sigma_center_um for n in retina.neurons])[:, None]
    ss = np.array([n.sigma_surround_um for n in retina.neurons])[:, None]
    ws = np.array([n.surround_weight for n in retina.neurons])[:, None]
    area = um_per_pixel ** 2
    center = area * np.exp(-r2 / (2 * sc ** 2)) / (2 * np.pi * sc ** 2)
    surround = area * np.exp(-r2 / (2 * ss ** 2)) / (2 * np.pi * ss ** 2)
    return center - ws * surround


def _nonlinearity(name, x):
    if name == "softplus":
        return np.logaddexp(0.0, x) - math.log(2.0)
    return np.expm1(np.minimum(x, 50.0))


def firing_rates(retina: RetinaModel, stim, duration_s=None, seed=0):
    """Per-frame rates ``(n_frames, n_neurons)`` in Hz for the frames covering
    ``duration_s``; noise draws are seeded by ``seed``."""
    fps = stim.frame_rate_hz
    duration_s = stim.duration_s if duration_s is None else duration_s
    n_frames = int(math.ceil(duration_s * fps - 1e-9))
    if n_frames > stim.n_frames:
        raise ValueError(f"stimulus covers {stim.duration_s:.3f} s, need {duration_s:.3f} s")
    H, W = stim.shape
    fov_x = (W - 1) * stim.um_per_pixel
    fov_y = (H - 1) * stim.um_per_pixel
    c = retina.centers_um
    if c.size and (c[:, 0].max() > fov_x + 1e-9 or c[:, 1].max() > fov_y + 1e-9):
        raise ValueError(
            f"stimulus field {fov_x:.0f}x{fov_y:.0f} um does not cover all receptive-field "
            f"centres (max x {c[:, 0].max():.0f}, max y {c[:, 1].max():.0f} um)")
    frames = stim.frames[:n_frames].reshape(n_frames, -1)
    ref = stim.frames.mean()
    contrast = (frames - ref) / ref if ref > 0 else np.zeros_like(frames)
    spatial = contrast @ spatial_filters(retina, (H, W), stim.um_per_pixel).T
    drive = np.empty_like(spatial)
    for j, n in enumerate(retina.neurons):
        sign = 1.0 if n.polarity == "ON" else -1.0
        drive[:, j] = sign * lfilter(np.asarray(n.temporal_kernel), [1.0], spatial[:, j])
    noise_sd = retina.noise_std * retina.noise_gain
    if noise_sd > 0:
        rng = np.random.default_rng([seed, 7])
        rho = math.exp(-1.0 / (fps * NOISE_TAU_S))
        # private + population-wide components, unit total variance per neuron
        shared = retina.noise_shared_frac
        white = (math.sqrt(1 - shared) * rng.standard_normal(drive.shape)
                 + math.sqrt(shared) * rng.standard_normal((drive.shape[0], 1)))
        innov = white * noise_sd * math.sqrt(1 - rho ** 2)
        innov[0] = white[0] * noise_sd
        drive += lfilter([1.0], [1.0, -rho], innov, axis=0)
    base = np.array([n.baseline_rate_hz for n in retina.neurons])
    gain = np.array([n.gain for n in retina.neurons])
    rates = np.maximum(base + gain * _nonlinearity(retina.nonlinearity, drive), 0.0)
    if np.any(rates > MAX_RATE_HZ):
        logger.warning("%d rate samples above %.0f Hz clipped",
                       int(np.sum(rates > MAX_RATE_HZ)), MAX_RATE_HZ)
        rates = np.minimum(rates, MAX_RATE_HZ)
    return rates


def respond(retina: RetinaModel, stim, duration_s=None, seed=0) -> SpikeTrains:
    """Spike trains of every neuron in response to ``stim``.

    Rates are piecewise constant over frames; spikes are drawn by thinning a
    homogeneous process at each neuron's peak rate, then quantized to the
    7.5 kHz acquisition clock (coincident ticks merge).
    """
    duration_s = stim.duration_s if duration_s is None else float(duration_s)
    if duration_s <= 0:
        raise ValueError("duration_s must be positive")
    rates = firing_rates(retina, stim, duration_s, seed)
    fps = stim.frame_rate_hz
    rng = np.random.default_rng([seed, 11])
    trains = []
    for j in range(rates.shape[1]):
        lam = rates[:, j].max()
        if lam <= 0:
            trains.append(np.empty(0))
            continue
        n = rng.poisson(lam * duration_s)
        t = np.sort(rng.uniform(0.0, duration_s, n))
        frame = np.minimum((t * fps).astype(int), rates.shape[0] - 1)
        keep = rng.random(n) * lam < rates[frame, j]
        ticks = np.unique(np.floor(t[keep] * TIMESTAMP_HZ))
        trains.append(ticks / TIMESTAMP_HZ)
    return SpikeTrains(trains, duration_s, retina.neuron_ids, retina.centers_um)
