"""Reproducible experiments: simulate -> rates -> train -> eval -> report.

Every stage reads the files written by the stage before it under
``config.output_dir`` and records SHA-256 digests of what it wrote in
``manifest.json``.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import List, Optional

import numpy as np
import scipy

from . import __version__, evaluation, mcrbm, persist, rates, retinasim, stimgen
from .config import ExperimentConfig

logger = logging.getLogger(__name__)

STAGES = ("simulate", "rates", "train", "eval", "report")


class StageError(RuntimeError):
    def __init__(self, stage, message):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@dataclass(frozen=True)
class Condition:
    name: str
    stimulus_dirs: tuple  # relative to <out>/stimulus
    stage: str = "none"
    spatial_freq_cpd: Optional[float] = None


def conditions(cfg: ExperimentConfig) -> List[Condition]:
    if cfg.protocol == "gratings8":
        dirs = tuple(f"gratings8/orient_{int(round(o)):03d}" for o in cfg.stimulus.orientations_deg)
        return [Condition("gratings8", dirs)]
    if cfg.protocol == "natural":
        return [Condition("natural", ("natural/scan",))]
    return [Condition(f"sf{sf:g}_{stage}", (f"gaba3/sf{sf:g}",), stage, sf)
            for sf in cfg.stimulus.spatial_freqs_cpd for stage in cfg.retina.stages]


# --- manifest ----------------------------------------------------------------


def _sha256(path, skip_first_line=False):
    data = Path(path).read_bytes()
    if skip_first_line:
        data = data.split(b"\n", 1)[1] if b"\n" in data else b""
    return hashlib.sha256(data).hexdigest()


def read_manifest(out: Path) -> dict:
    path = out / "manifest.json"
    if path.exists():
        return json.loads(path.read_text())
    return {}


def _record(cfg, out, stage, files, seconds, inputs=()):
    manifest = read_manifest(out)
    manifest["config_hash"] = cfg.digest()
    manifest["versions"] = {"rgcmodes": __version__, "numpy": np.__version__,
                            "scipy": scipy.__version__, "python": platform.python_version()}
    stages = manifest.setdefault("stages", {})
    stages[stage] = {
        "inputs": sorted(str(Path(p).relative_to(out)) for p in inputs),
        "outputs": {str(Path(p).relative_to(out)): _sha256(p, skip_first_line=p.name == "report.txt")
                    for p in sorted(files)},
    }
    manifest.setdefault("timings_s", {})[stage] = round(seconds, 3)
    persist.atomic_write_text(out / "manifest.json", json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def manifest_digests(manifest: dict) -> dict:
    """The reproducible part of a manifest (timings dropped)."""
    return {k: v for k, v in manifest.items() if k != "timings_s"}


def _outdir(cfg, out):
    return Path(out if out is not None else cfg.output_dir)


# --- simulate ----------------------------------------------------------------


def _stimuli(cfg):
    """Yield ``(relative_dir, StimulusSequence)`` for every stimulus group."""
    st = cfg.stimulus
    common = dict(temporal_freq_hz=st.temporal_freq_hz, michelson_contrast=st.contrast,
                  mean_luminance=st.mean_luminance, um_per_degree=st.um_per_degree,
                  um_per_pixel=st.um_per_pixel)
    nb = cfg.evaluation.n_phase_bins
    if cfg.protocol == "gratings8":
        for k, o in enumerate(st.orientations_deg):
            spec = stimgen.GratingSpec.from_bar_width(
                st.bar_width_um, orientation_deg=float(o) % 360.0, duration_s=st.repetition_s,
                **common)
            one = stimgen.gen_grating(spec, st.resolution, frame_rate_hz=st.frame_rate_hz,
                                      n_phase_bins=nb, protocol_id=0)
            seq = stimgen.concatenate([one] * st.repetitions)
            yield f"gratings8/orient_{int(round(o)):03d}", seq
    elif cfg.protocol == "gaba3":
        for k, sf in enumerate(st.spatial_freqs_cpd):
            spec = stimgen.GratingSpec(orientation_deg=st.gaba_orientation_deg,
                                       spatial_freq_cpd=sf, duration_s=st.duration_s, **common)
            yield f"gaba3/sf{sf:g}", stimgen.gen_grating(
                spec, st.resolution, frame_rate_hz=st.frame_rate_hz, n_phase_bins=nb,
                protocol_id=1 + k)
    else:
        if st.image_path:
            image = persist.read_pgm(st.image_path)
            image *= st.mean_luminance / image.mean()
        else:
            image = stimgen.synthetic_brick_wall(st.image_size, seed=cfg.seed,
                                                 mean_luminance=st.mean_luminance)
        H, W = image.shape
        n_loop = max(int(round(st.scan_period_s * st.frame_rate_hz)), 1)
        path = stimgen.ellipse_trajectory(n_loop, (H / 2, W / 2), st.scan_radii_px)
        yield "natural/scan", stimgen.gen_natural_scan(
            image, path, st.resolution, st.duration_s, st.frame_rate_hz, nb,
            um_per_pixel=st.um_per_pixel)


def _load_condition_stimulus(out, cond, with_frames):
    seqs = [persist.load_stimulus(out / "stimulus" / d, with_frames) for d in cond.stimulus_dirs]
    return seqs[0] if len(seqs) == 1 else stimgen.concatenate(seqs)


def cmd_simulate(cfg: ExperimentConfig, out=None):
    out = _outdir(cfg, out)
    t0 = time.perf_counter()
    written = []
    stims = {}
    for rel, seq in _stimuli(cfg):
        d = out / "stimulus" / rel
        persist.save_stimulus(seq, d, bits=cfg.stimulus.pgm_bits)
        written += sorted(d.iterdir())
        stims[rel] = seq
    rc = cfg.retina
    base = retinasim.make_population(
        rc.n_neurons, seed=rc.seed, extent=tuple(rc.extent), noise_std=rc.noise_std,
        noise_shared_frac=rc.noise_shared_frac, nonlinearity=rc.nonlinearity)
    for cond in conditions(cfg):
        seq = stimgen.concatenate([stims[d] for d in cond.stimulus_dirs])
        retina = retinasim.apply_impairment(base, retinasim.ImpairmentLevel.for_stage(cond.stage))
        try:
            spikes = retinasim.respond(retina, seq, seed=rc.response_seed)
        except ValueError as err:
            raise StageError("simulate", f"{cond.name}: {err}") from err
        d = out / "spikes" / cond.name
        d.mkdir(parents=True, exist_ok=True)
        persist.save_spikes(spikes, d / "spikes.csv", d / "neurons.csv")
        written += [d / "spikes.csv", d / "neurons.csv"]
        logger.info("simulate %s: %d neurons, %d spikes", cond.name, len(spikes),
                    int(spikes.counts().sum()))
    return _record(cfg, out, "simulate", written, time.perf_counter() - t0)


# --- rates -------------------------------------------------------------------


def _wanted(cfg, patch_ids):
    if not cfg.patches:
        return list(patch_ids)
    return [p for p in patch_ids if p in cfg.patches]


def cmd_rates(cfg: ExperimentConfig, out=None):
    out = _outdir(cfg, out)
    t0 = time.perf_counter()
    written, inputs = [], []
    rc = cfg.rates
    for cond in conditions(cfg):
        sdir = out / "spikes" / cond.name
        if not (sdir / "spikes.csv").exists():
            raise StageError("rates", f"missing spike files for {cond.name} in {sdir}")
        spikes = persist.load_spikes(sdir / "spikes.csv", sdir / "neurons.csv")
        inputs += [sdir / "spikes.csv", sdir / "neurons.csv"]
        stim = _load_condition_stimulus(out, cond, with_frames=False)
        rm = rates.estimate_rates(spikes, rc.bin_s, rc.method, rc.bandwidth_s)
        rm = rates.align_labels(rm, stim, cfg.evaluation.label_scheme, cfg.evaluation.n_phase_bins)
        positions = {int(i): tuple(p) for i, p in zip(spikes.neuron_ids,
                                                      spikes.electrode_positions())}
        patches = rates.partition_patches(rm, positions)
        rdir = out / "rates" / cond.name
        rdir.mkdir(parents=True, exist_ok=True)
        report = {}
        for pid in _wanted(cfg, [f"t{k}" for k in range(16)]):
            if pid not in patches:
                report[pid] = {"n_recorded": 0, "n_kept": 0}
                continue
            pm = patches[pid]
            try:
                kept = rates.select_active(pm, rc.threshold)
            except ValueError as err:
                raise StageError("rates", f"{cond.name} patch {pid}: {err}") from err
            z = rates.standardize(kept)
            path = rdir / f"patch_{pid}.rgcr"
            persist.save_rates(z, path)
            written.append(path)
            if rc.export_csv:
                persist.export_rates_csv(z, rdir / f"patch_{pid}.csv")
                written.append(rdir / f"patch_{pid}.csv")
            report[pid] = {"n_recorded": pm.n_neurons, "n_kept": z.n_neurons,
                           "n_removed": pm.n_neurons - z.n_neurons}
        sel = rdir / "selection.json"
        persist.atomic_write_text(sel, json.dumps(report, indent=1, sort_keys=True))
        written.append(sel)
        logger.info("rates %s: %d neurons kept across %d patches", cond.name,
                    sum(r["n_kept"] for r in report.values()),
                    sum(r["n_kept"] > 0 for r in report.values()))
    return _record(cfg, out, "rates", written, time.perf_counter() - t0, inputs)


# --- train -------------------------------------------------------------------


def holdout_mask(n_samples, bin_s, cfg: ExperimentConfig):
    """Held-out rows: a seeded random subset of contiguous time blocks."""
    ev = cfg.evaluation
    block = max(int(round(ev.holdout_block_s / bin_s)), 1)
    n_blocks = math.ceil(n_samples / block)
    rng = np.random.default_rng(ev.split_seed)
    n_test = max(1, int(round(ev.holdout_fraction * n_blocks)))
    chosen = np.zeros(n_blocks, dtype=bool)
    chosen[rng.choice(n_blocks, size=n_test, replace=False)] = True
    return np.repeat(chosen, block)[:n_samples]


def _hyper(cfg, n_vis, patch_id):
    m = cfg.model
    return mcrbm.Hyperparams(
        n_vis=n_vis, n_mean=m.n_mean, n_factors=m.n_factors, n_cov=m.n_cov,
        learning_rate=m.learning_rate, momentum=m.momentum, initial_momentum=m.initial_momentum,
        momentum_switch_epoch=m.momentum_switch_epoch, weight_decay=m.weight_decay,
        minibatch_size=m.minibatch_size, n_chains=m.n_chains, epochs=m.epochs,
        precision_floor=m.precision_floor, seed=m.seed + int(patch_id[1:]))


def _train_one(args):
    cfg_json, rate_path, ckpt_path, curve_path, patch_id = args
    cfg = ExperimentConfig.model_validate_json(cfg_json)
    rm = persist.load_rates(rate_path)
    train_rows = ~holdout_mask(rm.n_samples, rm.bin_s, cfg)
    hyper = _hyper(cfg, rm.n_neurons, patch_id)
    try:
        model = mcrbm.train(rm.rows(np.flatnonzero(train_rows)), hyper)
    except mcrbm.TrainingError as err:
        raise StageError("train", f"patch {patch_id}: {err}") from err
    mcrbm.save_checkpoint(model, ckpt_path)
    lines = ["epoch,recon_error,free_energy_gap,mean_free_energy"]
    lines += [f"{h['epoch']},{h['recon_error']!r},{h['free_energy_gap']!r},"
              f"{h['mean_free_energy']!r}" for h in model.history]
    persist.atomic_write_text(curve_path, "\n".join(lines) + "\n")
    return ckpt_path, curve_path


def cmd_train(cfg: ExperimentConfig, out=None):
    out = _outdir(cfg, out)
    t0 = time.perf_counter()
    jobs, inputs = [], []
    cfg_json = cfg.model_dump_json()
    for cond in conditions(cfg):
        rdir = out / "rates" / cond.name
        sel_path = rdir / "selection.json"
        if not sel_path.exists():
            raise StageError("train", f"missing rate files for {cond.name} in {rdir}")
        selection = json.loads(sel_path.read_text())
        mdir = out / "models" / cond.name
        mdir.mkdir(parents=True, exist_ok=True)
        for pid in _wanted(cfg, sorted(selection, key=lambda p: int(p[1:]))):
            if selection[pid]["n_kept"] == 0:
                logger.info("train %s: patch %s has no surviving neurons, skipped", cond.name, pid)
                continue
            rate_path = rdir / f"patch_{pid}.rgcr"
            inputs.append(rate_path)
            jobs.append((cfg_json, rate_path, mdir / f"patch_{pid}.mcrb",
                         mdir / f"curves_{pid}.csv", pid))
    written = []
    if cfg.model.n_workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(cfg.model.n_workers) as pool:
            results = list(pool.map(_train_one, jobs))
    else:
        results = [_train_one(j) for j in jobs]
    for ckpt, curve in results:
        written += [ckpt, curve]
    logger.info("train: %d checkpoints", len(results))
    return _record(cfg, out, "train", written, time.perf_counter() - t0, inputs)


# --- eval --------------------------------------------------------------------


def _mean_frame_of_label(stim, label_scheme, n_phase_bins, label):
    labels = stimgen.label_frames(stim, label_scheme, n_phase_bins)
    return stim.frames[labels == label].mean(axis=0)


def evaluate_patch(cfg, rm, model, stim):
    """Held-out states, their MI report and a shuffled-label baseline."""
    test = holdout_mask(rm.n_samples, rm.bin_s, cfg)
    held = rm.rows(np.flatnonzero(test))
    states = mcrbm.encode(held.values, model, mode="map")
    report = evaluation.mutual_information(states, held.labels, miller_madow=True)
    perm = np.random.default_rng(cfg.evaluation.split_seed).permutation(len(held.labels))
    shuffled = evaluation.mutual_information(states, held.labels[perm])
    return held, states, report, shuffled.normalized_mi


def cmd_eval(cfg: ExperimentConfig, out=None):
    out = _outdir(cfg, out)
    t0 = time.perf_counter()
    ev = cfg.evaluation
    written, inputs = [], []
    per_condition = {}
    for cond in conditions(cfg):
        rdir, mdir = out / "rates" / cond.name, out / "models" / cond.name
        if not (rdir / "selection.json").exists():
            raise StageError("eval", f"missing rate files for {cond.name} in {rdir}")
        if not mdir.exists():
            raise StageError("eval", f"missing checkpoints for {cond.name} in {mdir}")
        selection = json.loads((rdir / "selection.json").read_text())
        stim = _load_condition_stimulus(out, cond, with_frames=True)
        edir = out / "eval" / cond.name
        edir.mkdir(parents=True, exist_ok=True)
        summary = {}
        for pid in _wanted(cfg, sorted(selection, key=lambda p: int(p[1:]))):
            if selection[pid]["n_kept"] == 0:
                continue
            ckpt = mdir / f"patch_{pid}.mcrb"
            if not ckpt.exists():
                raise StageError("eval", f"missing checkpoint {ckpt}")
            rpath = rdir / f"patch_{pid}.rgcr"
            inputs += [rpath, ckpt]
            rm = persist.load_rates(rpath)
            model = mcrbm.load_checkpoint(ckpt)
            held, states, report, shuffled_nmi = evaluate_patch(cfg, rm, model, stim)
            persist.save_mi_report(report, edir / f"mi_{pid}.csv", edir / f"mi_{pid}.json")
            written += [edir / f"mi_{pid}.csv", edir / f"mi_{pid}.json"]
            occ = evaluation.state_occupancy(states)
            entry = dict(report.summary(), shuffled_label_normalized_mi=shuffled_nmi,
                         top_state_count=next(iter(occ.values())), state_images=[],
                         unit_images=[])
            top = [k for k, n in list(occ.items())[:ev.top_k_states] if n >= ev.min_count]
            for rank, key in enumerate(top + list(ev.states)):
                try:
                    avg = evaluation.state_triggered_average(
                        states, stim, key, ev.min_count, held.sample_times_s)
                except evaluation.InsufficientOccupancy as err:
                    raise StageError("eval", f"{cond.name} patch {pid}: {err}") from err
                name = f"state_{pid}_{rank:02d}.pgm"
                persist.save_triggered_average(avg, edir / name)
                written += [edir / name, (edir / name).with_suffix(".json")]
                keys = states.keys.astype(str)
                dominant = int(np.bincount(held.labels[keys == key] - held.labels.min()).argmax()
                               + held.labels.min())
                ref = _mean_frame_of_label(stim, ev.label_scheme, ev.n_phase_bins, dominant)
                r = float(np.corrcoef(avg.image.ravel(), ref.ravel())[0, 1]) \
                    if avg.image.std() > 0 and ref.std() > 0 else 0.0
                entry["state_images"].append({"file": name, "state": key, "count": avg.n_contributing,
                                              "dominant_label": dominant, "pearson_r": r})
            if ev.unit_averages:
                for layer, n_units in (("mean", model.n_mean), ("cov", model.n_cov)):
                    for u in range(n_units):
                        try:
                            avg = evaluation.unit_triggered_average(
                                states, stim, layer, u, 1, ev.min_count, held.sample_times_s)
                        except evaluation.InsufficientOccupancy:
                            logger.debug("unit %s/%d of %s rarely active, no image", layer, u, pid)
                            continue
                        name = f"unit_{pid}_{layer}_{u:03d}.pgm"
                        persist.save_triggered_average(avg, edir / name)
                        written += [edir / name, (edir / name).with_suffix(".json")]
                        entry["unit_images"].append(name)
            summary[pid] = entry
            logger.info("eval %s %s: normalized MI %.3f (%d states)", cond.name, pid,
                        report.normalized_mi, report.n_distinct_states)
        persist.atomic_write_text(edir / "summary.json", json.dumps(summary, indent=1, sort_keys=True))
        written.append(edir / "summary.json")
        per_condition[cond] = summary
    if cfg.protocol == "gaba3":
        written += _stage_verdicts(cfg, out, per_condition)
    return _record(cfg, out, "eval", written, time.perf_counter() - t0, inputs)


def condition_mi(summary):
    """Patch-averaged normalized MI of one condition."""
    vals = [e["normalized_mi"] for e in summary.values()]
    return float(np.mean(vals)) if vals else float("nan")


def _stage_verdicts(cfg, out, per_condition):
    rows = ["spatial_freq_cpd,stage,normalized_mi,ordered,violations"]
    verdicts = {}
    for sf in cfg.stimulus.spatial_freqs_cpd:
        values = {c.stage: condition_mi(s) for c, s in per_condition.items()
                  if c.spatial_freq_cpd == sf}
        if len(values) < 2:
            continue
        v = evaluation.mi_by_stage(values)
        verdicts[f"{sf:g}"] = {"ordered": v.ordered, "values": v.values,
                               "violations": [list(x) for x in v.violations]}
        viol = ";".join(f"{a}<{b}" for a, b, _, _ in v.violations)
        rows += [f"{sf:g},{stage},{val!r},{v.ordered},{viol}" for stage, val in v.values.items()]
    edir = out / "eval"
    persist.atomic_write_text(edir / "stage_verdicts.csv", "\n".join(rows) + "\n")
    persist.atomic_write_text(edir / "stage_verdicts.json",
                              json.dumps(verdicts, indent=1, sort_keys=True))
    return [edir / "stage_verdicts.csv", edir / "stage_verdicts.json"]


# --- report ------------------------------------------------------------------


def cmd_report(cfg: ExperimentConfig, out=None):
    out = _outdir(cfg, out)
    t0 = time.perf_counter()
    manifest = read_manifest(out)
    done = manifest.get("stages", {})
    lines = [f"protocol: {cfg.protocol}", f"config_hash: {cfg.digest()}", ""]
    for stage in STAGES[:-1]:
        lines.append(f"stage {stage}: {'done' if stage in done else 'MISSING'}")
    lines.append("")
    for cond in conditions(cfg):
        lines.append(f"== condition {cond.name}")
        spath = out / "eval" / cond.name / "summary.json"
        if not spath.exists():
            lines.append("  MISSING: eval outputs")
            lines.append("")
            continue
        summary = json.loads(spath.read_text())
        lines.append("  patch,n_samples,n_distinct_states,top_state_count,mi_bits,"
                     "normalized_mi,shuffled_label_normalized_mi")
        for pid in sorted(summary, key=lambda p: int(p[1:])):
            e = summary[pid]
            lines.append(f"  {pid},{e['n_samples']},{e['n_distinct_states']},{e['top_state_count']},"
                         f"{e['mi_bits']:.6f},{e['normalized_mi']:.6f},"
                         f"{e['shuffled_label_normalized_mi']:.6f}")
        lines.append("  images:")
        for pid in sorted(summary, key=lambda p: int(p[1:])):
            for img in summary[pid]["state_images"]:
                lines.append(f"    eval/{cond.name}/{img['file']} (state, n={img['count']}, "
                             f"r={img['pearson_r']:.3f})")
            n_units = len(summary[pid]["unit_images"])
            if n_units:
                lines.append(f"    eval/{cond.name}/unit_{pid}_*.pgm ({n_units} unit averages)")
        lines.append("")
    vpath = out / "eval" / "stage_verdicts.csv"
    if cfg.protocol == "gaba3":
        lines.append("== MI by impairment stage")
        lines += [f"  {row}" for row in vpath.read_text().splitlines()] if vpath.exists() \
            else ["  MISSING: stage verdicts"]
    stamp = datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")
    text = f"# generated {stamp}\n" + "\n".join(lines) + "\n"
    persist.atomic_write_text(out / "report.txt", text)
    return _record(cfg, out, "report", [out / "report.txt"], time.perf_counter() - t0)


COMMANDS = {"simulate": cmd_simulate, "rates": cmd_rates, "train": cmd_train,
            "eval": cmd_eval, "report": cmd_report}


def run(cfg: ExperimentConfig, out=None):
    """All stages in order; returns the final manifest."""
    out = _outdir(cfg, out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = None
    for stage in STAGES:
        manifest = COMMANDS[stage](cfg, out)
    return manifest
