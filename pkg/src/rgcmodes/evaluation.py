"""What did the model learn: state/label mutual information and
state- or unit-triggered stimulus averages."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .mcrbm import LatentStates
from .rates import frame_indices

STAGE_ORDER = ("none", "gabac_blocked", "gabaabc_blocked")


class InsufficientOccupancy(ValueError):
    pass


@dataclass
class MIReport:
    mi_bits: float
    normalized_mi: float
    h_states_bits: float
    h_labels_bits: float
    n_samples: int
    n_distinct_states: int
    contingency: dict = field(repr=False)
    mi_bits_miller_madow: Optional[float] = None

    def summary(self):
        out = {
            "mi_bits": self.mi_bits,
            "normalized_mi": self.normalized_mi,
            "h_states_bits": self.h_states_bits,
            "h_labels_bits": self.h_labels_bits,
            "n_samples": self.n_samples,
            "n_distinct_states": self.n_distinct_states,
        }
        if self.mi_bits_miller_madow is not None:
            out["mi_bits_miller_madow"] = self.mi_bits_miller_madow
        return out


@dataclass
class TriggeredAverage:
    image: np.ndarray
    n_contributing: int
    trigger: dict


def _keys(states):
    if isinstance(states, LatentStates):
        return states.keys
    return np.asarray([getattr(s, "key", s) for s in states], dtype=object)


def _entropy_bits(counts):
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log2(p)).sum())


def mutual_information(states, labels, miller_madow=False) -> MIReport:
    """Plug-in mutual information (bits) between latent states and labels.

    The state alphabet is the set of observed keys. ``normalized_mi`` divides
    by the smaller marginal entropy and is 0 when that entropy is 0.
    """
    keys = _keys(states)
    labels = np.asarray(labels)
    if len(keys) != len(labels):
        raise ValueError(f"{len(keys)} states but {len(labels)} labels")
    n = len(keys)
    if n == 0:
        raise ValueError("mutual information of an empty sample")
    state_vals, xi = np.unique(keys.astype(str), return_inverse=True)
    label_vals, yi = np.unique(labels, return_inverse=True)
    joint = np.zeros((len(state_vals), len(label_vals)))
    np.add.at(joint, (xi, yi), 1.0)
    px = joint.sum(axis=1) / n
    py = joint.sum(axis=0) / n
    nz = joint > 0
    pxy = joint[nz] / n
    outer = np.outer(px, py)[nz]
    mi = float(np.sum(pxy * np.log2(pxy / outer)))
    hx = _entropy_bits(joint.sum(axis=1))
    hy = _entropy_bits(joint.sum(axis=0))
    mi = min(max(mi, 0.0), min(hx, hy))
    h_min = min(hx, hy)
    norm = mi / h_min if h_min > 0 else 0.0
    contingency = {(str(state_vals[i]), label_vals[j].item()): int(joint[i, j])
                   for i, j in zip(*np.nonzero(joint))}
    mm = None
    if miller_madow:
        correction = ((len(state_vals) - 1) + (len(label_vals) - 1) - (nz.sum() - 1)) / (2 * n)
        mm = mi + correction / math.log(2)
    return MIReport(mi, min(norm, 1.0), hx, hy, n, len(state_vals), contingency, mm)


def state_occupancy(states) -> dict:
    """Counts per state key, most occupied first (ties broken by key)."""
    keys = _keys(states)
    if len(keys) == 0:
        raise ValueError("no states")
    counts = Counter(str(k) for k in keys)
    return dict(sorted(counts.items(), key=lambda kv: (-kv[1], kv[0])))


def _aligned_frames(stim, n_samples, sample_times_s):
    if sample_times_s is None:
        if n_samples > stim.n_frames:
            raise ValueError("more states than frames and no sample times given")
        return np.arange(n_samples)
    return frame_indices(sample_times_s, stim.frame_rate_hz, stim.n_frames)


def _average(stim, frame_idx, mask, min_count, trigger):
    count = int(mask.sum())
    if count < max(min_count, 1):
        raise InsufficientOccupancy(
            f"insufficient occupancy for {trigger}: {count} samples, need {max(min_count, 1)}")
    image = stim.frames[frame_idx[mask]].mean(axis=0)
    return TriggeredAverage(image, count, trigger)


def state_triggered_average(states, stim, state_key, min_count=10,
                            sample_times_s=None) -> TriggeredAverage:
    """Mean stimulus frame over the samples encoded as ``state_key``.

    Samples map to frames through ``sample_times_s``; without times, sample
    ``i`` is taken to be frame ``i``.
    """
    keys = _keys(states)
    frame_idx = _aligned_frames(stim, len(keys), sample_times_s)
    mask = keys.astype(str) == str(state_key)
    return _average(stim, frame_idx, mask, min_count, {"state": str(state_key)})


def unit_triggered_average(states: LatentStates, stim, layer, unit_index, on_value=1,
                           min_count=10, sample_times_s=None) -> TriggeredAverage:
    """Mean stimulus frame over samples whose chosen hidden unit equals ``on_value``."""
    if layer not in ("mean", "cov"):
        raise ValueError(f"layer must be 'mean' or 'cov', got {layer!r}")
    bits = states.h_m if layer == "mean" else states.h_c
    frame_idx = _aligned_frames(stim, len(states), sample_times_s)
    mask = bits[:, unit_index] == on_value
    trigger = {"unit": [layer, int(unit_index)], "on_value": int(on_value)}
    return _average(stim, frame_idx, mask, min_count, trigger)


@dataclass
class StageVerdict:
    ordered: bool
    values: dict
    violations: list

    def table(self):
        lines = ["stage,normalized_mi"]
        lines += [f"{stage},{value:.6f}" for stage, value in self.values.items()]
        return "\n".join(lines) + "\n"


def mi_by_stage(reports, order=STAGE_ORDER) -> StageVerdict:
    """Check that normalized MI does not increase along the impairment stages.

    ``reports`` maps stage name to an :class:`MIReport` or a float.
    """
    stages = [s for s in order if s in reports] + [s for s in reports if s not in order]
    if len(stages) < 2:
        raise ValueError("need at least two stages to compare")
    values = {s: float(getattr(reports[s], "normalized_mi", reports[s])) for s in stages}
    violations = [(a, b, values[a], values[b]) for a, b in zip(stages, stages[1:])
                  if values[b] > values[a]]
    return StageVerdict(not violations, values, violations)
