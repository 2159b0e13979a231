"""Spike trains to the rate matrix the mcRBM consumes.

Rates come from kernel smoothing: a Gaussian kernel on spike times, or the
same smoothing in log space on binned counts. Both stand in for the
log-Gaussian Cox process intensity and are labelled as such in the
``meta`` of every :class:`RateMatrix`.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.ndimage import gaussian_filter1d

from .stimgen import DEFAULT_N_PHASE_BINS, label_frames

N_PATCH_SIDE = 4
PATCH_SIZE = 16
LATTICE_SIDE = 64
SURROGATE_NOTE = "kernel-smoothing surrogate for a log-Gaussian Cox process intensity"


@dataclass
class RateMatrix:
    values: np.ndarray  # (n_samples, n_neurons)
    sample_times_s: np.ndarray
    neuron_ids: np.ndarray
    labels: Optional[np.ndarray] = None
    standardized: bool = False
    mean: Optional[np.ndarray] = None
    std: Optional[np.ndarray] = None
    bin_s: Optional[float] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2:
            raise ValueError(f"values must be 2-D, got shape {self.values.shape}")
        self.sample_times_s = np.asarray(self.sample_times_s, dtype=float)
        self.neuron_ids = np.asarray(self.neuron_ids, dtype=np.int64)
        n_s, n_n = self.values.shape
        if self.sample_times_s.shape != (n_s,):
            raise ValueError("sample_times_s length differs from the number of rows")
        if self.neuron_ids.shape != (n_n,):
            raise ValueError("neuron_ids length differs from the number of columns")
        if self.labels is None:
            self.labels = np.full(n_s, -1, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.shape != (n_s,):
            raise ValueError("labels must align one-to-one with rows")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("rate matrix contains NaN or Inf")
        if n_s > 1 and np.any(np.diff(self.sample_times_s) <= 0):
            raise ValueError("sample times must be strictly increasing")
        if self.bin_s is None and n_s > 1:
            self.bin_s = float(self.sample_times_s[1] - self.sample_times_s[0])

    @property
    def n_samples(self):
        return self.values.shape[0]

    @property
    def n_neurons(self):
        return self.values.shape[1]

    def columns(self, idx):
        """Column subset, keeping standardization statistics aligned."""
        idx = np.asarray(idx)
        return dataclasses.replace(
            self, values=self.values[:, idx], neuron_ids=self.neuron_ids[idx],
            mean=None if self.mean is None else self.mean[idx],
            std=None if self.std is None else self.std[idx],
            meta=dict(self.meta))

    def rows(self, idx):
        idx = np.asarray(idx)
        return dataclasses.replace(
            self, values=self.values[idx], sample_times_s=self.sample_times_s[idx],
            labels=self.labels[idx], meta=dict(self.meta))


def _gauss_rates(train, centers, bin_s, bandwidth_s):
    n = len(centers)
    out = np.zeros(n)
    if len(train) == 0:
        return out
    half = int(math.ceil(6 * bandwidth_s / bin_s)) + 1
    nearest = np.floor(train / bin_s).astype(np.int64)
    norm = 1.0 / (math.sqrt(2 * math.pi) * bandwidth_s)
    for off in range(-half, half + 1):
        idx = nearest + off
        ok = (idx >= 0) & (idx < n)
        if not ok.any():
            continue
        dt = centers[idx[ok]] - train[ok]
        w = norm * np.exp(-0.5 * (dt / bandwidth_s) ** 2)
        out += np.bincount(idx[ok], weights=w, minlength=n)
    return out


def estimate_rates(spikes, bin_s=0.01, method="gauss_kernel", bandwidth_s=0.05) -> RateMatrix:
    """Sample smoothed firing rates on the grid ``(k + 1/2) * bin_s``.

    ``gauss_kernel`` sums a unit-area Gaussian of width ``bandwidth_s`` over
    spikes. ``log_gauss_kernel`` smooths ``log(1 + count)`` per bin with the
    same width and maps back through ``expm1(.) / bin_s``.
    """
    if not bin_s > 0:
        raise ValueError(f"bin_s must be positive, got {bin_s}")
    if not bandwidth_s > 0:
        raise ValueError(f"bandwidth_s must be positive, got {bandwidth_s}")
    if method not in ("gauss_kernel", "log_gauss_kernel"):
        raise ValueError(f"unknown rate method {method!r}")
    T = spikes.recording_duration_s
    n_bins = int(math.floor(T / bin_s + 1e-9))
    centers = (np.arange(n_bins) + 0.5) * bin_s
    values = np.zeros((n_bins, len(spikes)))
    for j, train in enumerate(spikes.trains):
        train = np.asarray(train, dtype=float)
        if method == "gauss_kernel":
            values[:, j] = _gauss_rates(train, centers, bin_s, bandwidth_s)
        else:
            counts = np.bincount(np.minimum((train / bin_s).astype(np.int64), n_bins),
                                 minlength=n_bins + 1)[:n_bins]
            smooth = gaussian_filter1d(np.log1p(counts.astype(float)), bandwidth_s / bin_s,
                                       mode="constant")
            values[:, j] = np.expm1(smooth) / bin_s
    meta = {"rate_method": method, "bandwidth_s": bandwidth_s, "surrogate": SURROGATE_NOTE}
    return RateMatrix(values, centers, spikes.neuron_ids, bin_s=bin_s, meta=meta)


def derivative_range(rates: RateMatrix):
    """Per-neuron ``max - min`` of the forward-difference time derivative."""
    if rates.n_samples < 2:
        return np.zeros(rates.n_neurons)
    deriv = np.diff(rates.values, axis=0) / rates.bin_s
    return deriv.max(axis=0) - deriv.min(axis=0)


def select_active(rates: RateMatrix, threshold=1e-8) -> RateMatrix:
    """Drop neurons whose rate derivative spans less than ``threshold``."""
    if rates.standardized:
        raise ValueError("select_active expects unstandardized rates")
    keep = np.flatnonzero(derivative_range(rates) >= threshold)
    if keep.size == 0:
        raise ValueError(f"all {rates.n_neurons} neurons removed by the activity threshold "
                         f"{threshold:g}; lower the threshold")
    return rates.columns(keep)


def patch_index(row, col):
    """Row-major patch id (0..15) of electrode coordinates, t0 at top-left."""
    row = np.asarray(row, dtype=float)
    col = np.asarray(col, dtype=float)
    if np.any((row < 0) | (row >= LATTICE_SIDE) | (col < 0) | (col >= LATTICE_SIDE)):
        raise ValueError("electrode position outside [0, 64)^2")
    return (np.floor(row / PATCH_SIZE) * N_PATCH_SIDE + np.floor(col / PATCH_SIZE)).astype(int)


def partition_patches(rates: RateMatrix, neuron_positions) -> dict:
    """Split columns by patch. ``neuron_positions`` maps neuron id to
    (row, col) electrode coordinates. Returns ``{"t<k>": RateMatrix}`` for
    every patch holding at least one neuron."""
    try:
        pos = np.array([neuron_positions[int(i)] for i in rates.neuron_ids], dtype=float)
    except KeyError as err:
        raise ValueError(f"neuron {err.args[0]} has no lattice position") from None
    pos = pos.reshape(-1, 2)
    pid = patch_index(pos[:, 0], pos[:, 1])
    return {f"t{p}": rates.columns(np.flatnonzero(pid == p)) for p in np.unique(pid)}


def standardize(rates: RateMatrix) -> RateMatrix:
    if rates.standardized:
        raise ValueError("rates are already standardized")
    mean = rates.values.mean(axis=0)
    std = rates.values.std(axis=0)
    bad = np.flatnonzero(~(std > 0))
    if bad.size:
        raise ValueError(f"zero-variance column for neuron {rates.neuron_ids[bad[0]]}")
    return dataclasses.replace(rates, values=(rates.values - mean) / std, standardized=True,
                               mean=mean, std=std, meta=dict(rates.meta))


def unstandardize(rates: RateMatrix) -> RateMatrix:
    if not rates.standardized:
        raise ValueError("rates are not standardized")
    return dataclasses.replace(rates, values=rates.values * rates.std + rates.mean,
                               standardized=False, mean=None, std=None, meta=dict(rates.meta))


def frame_indices(sample_times_s, frame_rate_hz, n_frames):
    """Index of the frame on screen at each sample time (floor convention)."""
    idx = np.floor(np.asarray(sample_times_s) * frame_rate_hz + 1e-9).astype(np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= n_frames):
        bad = np.flatnonzero((idx < 0) | (idx >= n_frames))[0]
        raise ValueError(f"sample time {sample_times_s[bad]:.4f} s lies outside the stimulus "
                         f"({n_frames / frame_rate_hz:.4f} s)")
    return idx


def align_labels(rates: RateMatrix, stim, scheme="orientation_phase",
                 n_phase_bins=DEFAULT_N_PHASE_BINS) -> RateMatrix:
    labels = label_frames(stim, scheme, n_phase_bins)
    idx = frame_indices(rates.sample_times_s, stim.frame_rate_hz, stim.n_frames)
    meta = dict(rates.meta, label_scheme=scheme, n_phase_bins=n_phase_bins)
    return dataclasses.replace(rates, labels=labels[idx], meta=meta)
