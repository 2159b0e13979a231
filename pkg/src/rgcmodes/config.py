"""Experiment configuration: a YAML file validated against pydantic models.

A bare ``protocol: gratings8`` runs end to end; every other field has a
default, some of which depend on the protocol (see ``PROTOCOL_DEFAULTS``).
Seeds left unset are derived from the top-level ``seed``.
"""
from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path
from typing import List, Literal, Optional, Tuple

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

Protocol = Literal["gratings8", "gaba3", "natural"]
Stage = Literal["none", "gabac_blocked", "gabaabc_blocked"]


class ConfigError(ValueError):
    pass


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class StimulusConfig(_Section):
    resolution: Tuple[int, int] = Field((32, 32), description="frame height, width in pixels")
    frame_rate_hz: float = Field(30.0, gt=0)
    um_per_pixel: float = Field(42.0, gt=0, description="one pixel per electrode pitch")
    um_per_degree: float = Field(31.0, gt=0, description="retinal micrometres per visual degree")
    mean_luminance: float = Field(1.36, gt=0, description="cd/m^2")
    contrast: float = Field(0.5, ge=0, le=1, description="Michelson contrast")
    temporal_freq_hz: float = Field(1.0, gt=0)
    orientations_deg: List[float] = Field(
        [0.0, 45.0, 90.0, 135.0, 180.0, 225.0, 270.0, 315.0], description="gratings8 orientations")
    bar_width_um: float = Field(800.0, gt=0, description="gratings8 bar width")
    repetitions: int = Field(10, ge=1, description="gratings8 repetitions per orientation")
    repetition_s: float = Field(7.5, gt=0, description="gratings8 length of one repetition")
    spatial_freqs_cpd: List[float] = Field([0.011, 0.023, 0.045], description="gaba3 gratings")
    gaba_orientation_deg: float = Field(0.0, ge=0, lt=360)
    duration_s: float = Field(120.0, gt=0, description="gaba3 / natural recording per condition")
    image_path: Optional[str] = Field(None, description="natural: PGM image; synthetic wall if unset")
    scan_radii_px: Tuple[float, float] = (20.0, 28.0)
    scan_period_s: float = Field(10.0, gt=0, description="natural: time per loop of the path")
    image_size: Tuple[int, int] = (128, 128)
    pgm_bits: Literal[8, 16] = 16


class RetinaConfig(_Section):
    n_neurons: int = Field(256, ge=1)
    extent: Tuple[int, int] = Field((32, 32), description="electrodes covered, from top-left")
    noise_std: float = Field(0.0, ge=0, description="rate-noise SD on the generator signal; "
                             "the impairment noise gain scales it, so 0 disables both")
    noise_shared_frac: float = Field(0.5, ge=0, le=1)
    nonlinearity: Literal["softplus", "exp"] = "softplus"
    stages: List[Stage] = ["none", "gabac_blocked", "gabaabc_blocked"]
    seed: Optional[int] = None
    response_seed: Optional[int] = None


class RatesConfig(_Section):
    bin_s: float = Field(0.01, gt=0)
    bandwidth_s: float = Field(0.05, gt=0)
    method: Literal["gauss_kernel", "log_gauss_kernel"] = "gauss_kernel"
    threshold: float = Field(1e-8, ge=0)
    export_csv: bool = False


class ModelConfig(_Section):
    n_mean: int = Field(64, ge=1)
    n_factors: int = Field(128, ge=1)
    n_cov: int = Field(64, ge=1)
    learning_rate: float = Field(1e-3, ge=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    initial_momentum: float = Field(0.5, ge=0, lt=1)
    momentum_switch_epoch: int = Field(5, ge=0)
    weight_decay: float = Field(1e-4, ge=0)
    minibatch_size: int = Field(100, ge=1)
    n_chains: Optional[int] = Field(None, ge=1)
    epochs: int = Field(10, ge=0)
    precision_floor: float = Field(1.0, gt=0)
    seed: Optional[int] = None
    n_workers: int = Field(1, ge=1)


class EvalConfig(_Section):
    label_scheme: Literal["orientation", "phase", "orientation_phase", "frame_id"] = \
        "orientation_phase"
    n_phase_bins: int = Field(8, ge=1)
    min_count: int = Field(10, ge=1)
    top_k_states: int = Field(4, ge=0)
    unit_averages: bool = True
    states: List[str] = Field([], description="explicit state keys to average")
    holdout_fraction: float = Field(0.2, gt=0, lt=1)
    holdout_block_s: float = Field(1.0, gt=0)
    split_seed: Optional[int] = None


class ExperimentConfig(_Section):
    protocol: Protocol
    seed: int = 0
    output_dir: str = "runs/out"
    patches: Optional[List[str]] = None
    stimulus: StimulusConfig = StimulusConfig()
    retina: RetinaConfig = RetinaConfig()
    rates: RatesConfig = RatesConfig()
    model: ModelConfig = ModelConfig()
    evaluation: EvalConfig = EvalConfig()

    @model_validator(mode="after")
    def _derive_seeds(self):
        offsets = [(self.retina, "seed", 1), (self.retina, "response_seed", 2),
                   (self.model, "seed", 3), (self.evaluation, "split_seed", 4)]
        for section, name, off in offsets:
            if getattr(section, name) is None:
                setattr(section, name, self.seed * 1000 + off)
        if self.model.n_chains is None:
            self.model.n_chains = self.model.minibatch_size
        for p in self.patches or []:
            if not (p.startswith("t") and p[1:].isdigit() and 0 <= int(p[1:]) < 16):
                raise ValueError(f"unknown patch id {p!r}; expected t0..t15")
        if self.protocol == "natural" and self.stimulus.image_path:
            if not Path(self.stimulus.image_path).is_file():
                raise ValueError(f"image_path {self.stimulus.image_path!r} does not exist")
        return self

    def digest(self) -> str:
        """Hash of everything that determines results (the output path excluded)."""
        data = self.model_dump(mode="json")
        data.pop("output_dir")
        blob = json.dumps(data, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


PROTOCOL_DEFAULTS = {
    "gratings8": {},
    "gaba3": {
        "retina": {"n_neurons": 64, "extent": [16, 16], "noise_std": 1.0},
        "stimulus": {"resolution": [16, 16], "duration_s": 120.0},
        "model": {"n_mean": 16, "n_cov": 16, "n_factors": 32, "epochs": 8},
        "evaluation": {"label_scheme": "phase"},
    },
    "natural": {
        "stimulus": {"duration_s": 300.0},
        "evaluation": {"label_scheme": "phase"},
    },
}


def _merge(base, override):
    out = copy.deepcopy(base)
    for key, val in override.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = val
    return out


def build_config(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict) or "protocol" not in data:
        raise ConfigError("config must be a mapping with a 'protocol' key")
    defaults = PROTOCOL_DEFAULTS.get(data["protocol"], {})
    try:
        return ExperimentConfig.model_validate(_merge(defaults, data))
    except ValidationError as err:
        raise ConfigError(str(err)) from None


def load_config(path, **overrides) -> ExperimentConfig:
    try:
        data = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as err:
        raise ConfigError(f"cannot read config {path}: {err}") from None
    data = data or {}
    data.update({k: v for k, v in overrides.items() if v is not None})
    return build_config(data)


def json_schema() -> dict:
    return ExperimentConfig.model_json_schema()
