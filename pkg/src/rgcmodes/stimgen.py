"""Labeled stimulus sequences: drifting square gratings and natural-scene scans."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

DEFAULT_FRAME_RATE_HZ = 30.0
DEFAULT_UM_PER_DEGREE = 31.0
DEFAULT_UM_PER_PIXEL = 42.0
DEFAULT_N_PHASE_BINS = 8

LABEL_SCHEMES = ("orientation", "phase", "orientation_phase", "frame_id")
_SCHEME_ALIASES = {"orientation×phase": "orientation_phase",
                   "orientation_x_phase": "orientation_phase"}


@dataclass
class FrameLabels:
    protocol_id: np.ndarray
    orientation_deg: np.ndarray
    phase_bin: np.ndarray
    frame_index: np.ndarray
    # fraction of a stimulus cycle in [0, 1); phase_bin is derived from it
    phase_frac: np.ndarray

    def __len__(self):
        return len(self.frame_index)

    def __getitem__(self, idx):
        return FrameLabels(**{f.name: getattr(self, f.name)[idx]
                              for f in dataclasses.fields(self)})


@dataclass
class StimulusSequence:
    frames: np.ndarray  # (n_frames, H, W), cd/m^2
    frame_rate_hz: float
    labels: FrameLabels
    um_per_pixel: float = DEFAULT_UM_PER_PIXEL
    n_phase_bins: int = DEFAULT_N_PHASE_BINS

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=float)
        if self.frames.ndim != 3:
            raise ValueError(f"frames must be (n, H, W), got shape {self.frames.shape}")
        if not self.frame_rate_hz > 0:
            raise ValueError("frame_rate_hz must be positive")
        if len(self.labels) != self.frames.shape[0]:
            raise ValueError(
                f"{len(self.labels)} labels for {self.frames.shape[0]} frames")
        if self.frames.size and self.frames.min() < 0:
            raise ValueError("luminance values must be non-negative")

    @property
    def n_frames(self):
        return self.frames.shape[0]

    @property
    def shape(self):
        return self.frames.shape[1:]

    @property
    def duration_s(self):
        return self.n_frames / self.frame_rate_hz

    def frame_times(self):
        return np.arange(self.n_frames) / self.frame_rate_hz


@dataclass(frozen=True)
class GratingSpec:
    orientation_deg: float = 0.0
    spatial_freq_cpd: float = 0.011
    temporal_freq_hz: float = 1.0
    michelson_contrast: float = 0.5
    mean_luminance: float = 1.36
    bar_profile: str = "square"
    duration_s: float = 10.0
    um_per_degree: float = DEFAULT_UM_PER_DEGREE
    um_per_pixel: float = DEFAULT_UM_PER_PIXEL

    def __post_init__(self):
        checks = {
            "orientation_deg": 0.0 <= self.orientation_deg < 360.0,
            "spatial_freq_cpd": self.spatial_freq_cpd > 0,
            "temporal_freq_hz": self.temporal_freq_hz > 0,
            "michelson_contrast": 0.0 <= self.michelson_contrast <= 1.0,
            "mean_luminance": self.mean_luminance > 0,
            "bar_profile": self.bar_profile == "square",
            "duration_s": self.duration_s > 0,
            "um_per_degree": self.um_per_degree > 0,
            "um_per_pixel": self.um_per_pixel > 0,
        }
        for name, ok in checks.items():
            if not ok:
                raise ValueError(f"invalid GratingSpec.{name}: {getattr(self, name)!r}")

    @classmethod
    def from_bar_width(cls, bar_width_um, **kwargs):
        """Spec for a square grating whose bars are ``bar_width_um`` wide."""
        um_per_degree = kwargs.get("um_per_degree", DEFAULT_UM_PER_DEGREE)
        return cls(spatial_freq_cpd=um_per_degree / (2.0 * bar_width_um), **kwargs)

    @property
    def l_max(self):
        return self.mean_luminance * (1.0 + self.michelson_contrast)

    @property
    def l_min(self):
        return self.mean_luminance * (1.0 - self.michelson_contrast)

    @property
    def period_um(self):
        return self.um_per_degree / self.spatial_freq_cpd


def _phase_bins(phase_frac, n_phase_bins):
    bins = np.floor(np.asarray(phase_frac) * n_phase_bins).astype(np.int64)
    return np.clip(bins, 0, n_phase_bins - 1)


def grating_frame(spec: GratingSpec, resolution, phase):
    """One frame of a square grating at drift phase ``phase`` (radians).

    Phase 0 puts a bar edge at the frame origin; pixels on an edge get L_max.
    """
    H, W = resolution
    theta = math.radians(spec.orientation_deg)
    y, x = np.mgrid[0:H, 0:W] * spec.um_per_pixel
    along = (x * math.cos(theta) + y * math.sin(theta)) / spec.period_um
    s = np.mod(along - phase / (2 * math.pi), 1.0)
    # rounding guards the edge tie rule against float noise
    s = np.round(s, 12) % 1.0
    return np.where(s <= 0.5, spec.l_max, spec.l_min)


def gen_grating(spec: GratingSpec, resolution=(32, 32), seed=0,
                frame_rate_hz=DEFAULT_FRAME_RATE_HZ, n_phase_bins=DEFAULT_N_PHASE_BINS,
                protocol_id=0, start_phase=0.0):
    """Drifting square grating; the grating is deterministic so ``seed`` is unused
    but kept for a uniform generator signature."""
    H, W = resolution
    if H < 1 or W < 1:
        raise ValueError(f"resolution must be positive, got {resolution}")
    n = int(math.floor(spec.duration_s * frame_rate_hz + 1e-9))
    if n == 0:
        raise ValueError("grating duration is shorter than one frame")
    t = np.arange(n) / frame_rate_hz
    phase_frac = np.mod(spec.temporal_freq_hz * t + start_phase / (2 * math.pi), 1.0)
    phase_frac = np.round(phase_frac, 12) % 1.0
    # the frame set is periodic, so render each distinct phase once
    uniq, inverse = np.unique(phase_frac, return_inverse=True)
    rendered = np.stack([grating_frame(spec, (H, W), 2 * math.pi * p) for p in uniq])
    frames = rendered[inverse]
    labels = FrameLabels(
        protocol_id=np.full(n, protocol_id, dtype=np.int64),
        orientation_deg=np.full(n, float(spec.orientation_deg)),
        phase_bin=_phase_bins(phase_frac, n_phase_bins),
        frame_index=np.arange(n, dtype=np.int64),
        phase_frac=phase_frac,
    )
    return StimulusSequence(frames, frame_rate_hz, labels, um_per_pixel=spec.um_per_pixel,
                            n_phase_bins=n_phase_bins)


def ellipse_trajectory(n_points, center, radii, n_dense=4096):
    """Closed ellipse sampled at ``n_points`` positions equally spaced in arc length.

    Returns ``(n_points, 2)`` (row, col) centers; the path wraps from the last
    point back to the first.
    """
    t = np.linspace(0.0, 2 * np.pi, n_dense + 1)
    pts = np.column_stack([center[0] + radii[0] * np.sin(t), center[1] + radii[1] * np.cos(t)])
    seg = np.hypot(*np.diff(pts, axis=0).T)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    target = np.arange(n_points) / n_points * s[-1]
    tt = np.interp(target, s, t)
    return np.column_stack([center[0] + radii[0] * np.sin(tt), center[1] + radii[1] * np.cos(tt)])


def _arc_fraction(path):
    closed = np.vstack([path, path[:1]])
    seg = np.hypot(*np.diff(closed, axis=0).T)
    total = seg.sum()
    if total == 0:
        return np.zeros(len(path))
    return np.concatenate([[0.0], np.cumsum(seg)[:-1]]) / total


def gen_natural_scan(image, trajectory, window=(32, 32), duration_s=10.0,
                     frame_rate_hz=DEFAULT_FRAME_RATE_HZ, n_phase_bins=DEFAULT_N_PHASE_BINS,
                     protocol_id=2, um_per_pixel=DEFAULT_UM_PER_PIXEL):
    """Crop ``window`` out of ``image`` centred on successive points of a closed path.

    ``trajectory`` holds one loop of (row, col) centres; frame ``t`` uses point
    ``t mod len(trajectory)``. A repeated closing point is dropped.
    """
    image = np.asarray(image, dtype=float)
    path = np.atleast_2d(np.asarray(trajectory, dtype=float))
    if len(path) > 1 and np.allclose(path[0], path[-1]):
        path = path[:-1]
    n = int(math.floor(duration_s * frame_rate_hz + 1e-9))
    if n == 0:
        raise ValueError("scan duration is shorter than one frame")
    h, w = window
    idx = np.arange(n) % len(path)
    centers = np.floor(path[idx] + 0.5).astype(int)
    top = centers[:, 0] - h // 2
    left = centers[:, 1] - w // 2
    bad = np.flatnonzero((top < 0) | (left < 0) | (top + h > image.shape[0])
                         | (left + w > image.shape[1]))
    if bad.size:
        raise ValueError(f"window leaves the image at frame {bad[0]} "
                         f"(center {tuple(centers[bad[0]])})")
    frames = np.stack([image[r:r + h, c:c + w] for r, c in zip(top, left)])
    phase_frac = _arc_fraction(path)[idx]
    labels = FrameLabels(
        protocol_id=np.full(n, protocol_id, dtype=np.int64),
        orientation_deg=np.zeros(n),
        phase_bin=_phase_bins(phase_frac, n_phase_bins),
        frame_index=np.arange(n, dtype=np.int64),
        phase_frac=phase_frac,
    )
    return StimulusSequence(frames, frame_rate_hz, labels, um_per_pixel=um_per_pixel,
                            n_phase_bins=n_phase_bins)


def synthetic_brick_wall(shape=(128, 128), brick=(8, 18), mortar=2, seed=0,
                         mean_luminance=1.36):
    """Procedural brick-wall texture with per-brick shading and pixel grain."""
    rng = np.random.default_rng(seed)
    H, W = shape
    bh, bw = brick
    img = np.empty((H, W))
    rows = np.arange(H) // bh
    for r in range(rows.max() + 1):
        offset = (bw // 2) * (r % 2)
        cols = (np.arange(W) + offset) // bw
        shade = rng.uniform(0.6, 1.4, size=cols.max() + 1)
        img[rows == r] = shade[cols]
    y, x = np.mgrid[0:H, 0:W]
    in_mortar = (y % bh < mortar) | (((x + (bw // 2) * ((y // bh) % 2)) % bw) < mortar)
    img[in_mortar] = 0.25
    img *= 1.0 + 0.1 * rng.standard_normal(shape)
    img = np.clip(img, 0.0, None)
    return img * (mean_luminance / img.mean())


def concatenate(seqs: Sequence[StimulusSequence]) -> StimulusSequence:
    """Join sequences in time; frame_index is renumbered globally."""
    if not seqs:
        raise ValueError("nothing to concatenate")
    first = seqs[0]
    for s in seqs[1:]:
        if s.shape != first.shape or s.frame_rate_hz != first.frame_rate_hz:
            raise ValueError("sequences differ in frame shape or frame rate")
    frames = np.concatenate([s.frames for s in seqs])
    labels = FrameLabels(**{
        f.name: np.concatenate([getattr(s.labels, f.name) for s in seqs])
        for f in dataclasses.fields(FrameLabels)})
    labels.frame_index = np.arange(len(labels), dtype=np.int64)
    return StimulusSequence(frames, first.frame_rate_hz, labels,
                            um_per_pixel=first.um_per_pixel, n_phase_bins=first.n_phase_bins)


def label_frames(seq: StimulusSequence, scheme="orientation_phase",
                 n_phase_bins=DEFAULT_N_PHASE_BINS):
    """Integer label per frame under ``scheme``.

    Orientation ids are ranks of the distinct orientations present. The
    combined scheme is ``orientation_id * n_phase_bins + phase_bin``.
    """
    scheme = _SCHEME_ALIASES.get(scheme, scheme)
    if scheme not in LABEL_SCHEMES:
        raise ValueError(f"unknown label scheme {scheme!r}; expected one of {LABEL_SCHEMES}")
    if n_phase_bins < 1:
        raise ValueError("n_phase_bins must be >= 1")
    lab = seq.labels
    if scheme == "frame_id":
        return lab.frame_index.astype(np.int64).copy()
    phase = _phase_bins(lab.phase_frac, n_phase_bins)
    if scheme == "phase":
        return phase
    _, orient_id = np.unique(lab.orientation_deg, return_inverse=True)
    orient_id = orient_id.astype(np.int64)
    if scheme == "orientation":
        return orient_id
    return orient_id * n_phase_bins + phase
