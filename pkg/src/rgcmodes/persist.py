"""File formats: PGM frame stacks, spike CSVs, the binary rate matrix,
MI reports and triggered-average images."""
from __future__ import annotations

import csv
import json
import os
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .rates import RateMatrix
from .retinasim import SpikeTrains
from .stimgen import FrameLabels, StimulusSequence

RATE_MAGIC = b"RGCR"
RATE_VERSION = 1


def atomic_write_bytes(path, data: bytes):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode())


# --- PGM -------------------------------------------------------------------


def write_pgm(path, image, scale, bits=16):
    """Write ``image / scale`` rounded to an 8- or 16-bit PGM."""
    if bits not in (8, 16):
        raise ValueError("PGM depth must be 8 or 16 bits")
    top = 255 if bits == 8 else 65535
    levels = np.clip(np.rint(np.asarray(image, dtype=float) / scale), 0, top)
    arr = levels.astype(np.uint8 if bits == 8 else np.uint16)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    Image.fromarray(arr).save(tmp, format="PPM")
    os.replace(tmp, path)


def read_pgm(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im).astype(float)


def write_image_pgm(path, image, bits=16):
    """PGM of a non-negative image with its luminance scale in a JSON sidecar."""
    image = np.asarray(image, dtype=float)
    top = 255 if bits == 8 else 65535
    peak = float(image.max()) if image.size else 0.0
    scale = peak / top if peak > 0 else 1.0
    write_pgm(path, image, scale, bits)
    return scale


# --- stimulus --------------------------------------------------------------


def save_stimulus(seq: StimulusSequence, directory, bits=16):
    """One PGM per frame plus ``labels.csv`` and ``meta.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    top = 255 if bits == 8 else 65535
    peak = float(seq.frames.max()) if seq.n_frames else 0.0
    scale = peak / top if peak > 0 else 1.0
    for i, frame in enumerate(seq.frames):
        write_pgm(directory / f"frame_{i:06d}.pgm", frame, scale, bits)
    lab = seq.labels
    rows = ["frame_index,protocol_id,orientation_deg,phase_bin,phase_frac"]
    rows += [f"{lab.frame_index[i]},{lab.protocol_id[i]},{float(lab.orientation_deg[i])!r},"
             f"{lab.phase_bin[i]},{float(lab.phase_frac[i])!r}" for i in range(len(lab))]
    atomic_write_text(directory / "labels.csv", "\n".join(rows) + "\n")
    meta = {"n_frames": seq.n_frames, "frame_rate_hz": seq.frame_rate_hz,
            "luminance_per_level": scale, "bits": bits, "um_per_pixel": seq.um_per_pixel,
            "n_phase_bins": seq.n_phase_bins}
    atomic_write_text(directory / "meta.json", json.dumps(meta, sort_keys=True, indent=1))


def load_stimulus(directory, with_frames=True) -> StimulusSequence:
    directory = Path(directory)
    meta = json.loads((directory / "meta.json").read_text())
    cols = {k: [] for k in ("frame_index", "protocol_id", "orientation_deg", "phase_bin",
                            "phase_frac")}
    with open(directory / "labels.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            for k in cols:
                cols[k].append(row[k])
    labels = FrameLabels(
        protocol_id=np.array(cols["protocol_id"], dtype=np.int64),
        orientation_deg=np.array(cols["orientation_deg"], dtype=float),
        phase_bin=np.array(cols["phase_bin"], dtype=np.int64),
        frame_index=np.array(cols["frame_index"], dtype=np.int64),
        phase_frac=np.array(cols["phase_frac"], dtype=float),
    )
    n = meta["n_frames"]
    if with_frames:
        frames = np.stack([read_pgm(directory / f"frame_{i:06d}.pgm") for i in range(n)])
        frames *= meta["luminance_per_level"]
    else:
        frames = np.zeros((n, 1, 1))
    return StimulusSequence(frames, meta["frame_rate_hz"], labels,
                            um_per_pixel=meta["um_per_pixel"], n_phase_bins=meta["n_phase_bins"])


# --- spikes ----------------------------------------------------------------


def save_spikes(spikes: SpikeTrains, spikes_csv, neurons_csv):
    lines = ["neuron_id,spike_time_s"]
    for nid, train in zip(spikes.neuron_ids, spikes.trains):
        lines.extend(f"{nid},{t!r}" for t in np.asarray(train, dtype=float).tolist())
    atomic_write_text(spikes_csv, "\n".join(lines) + "\n")
    meta = [f"# recording_duration_s={float(spikes.recording_duration_s)!r}", "neuron_id,x_um,y_um"]
    meta += [f"{nid},{float(x)!r},{float(y)!r}"
             for nid, (x, y) in zip(spikes.neuron_ids, spikes.centers_um)]
    atomic_write_text(neurons_csv, "\n".join(meta) + "\n")


def load_spikes(spikes_csv, neurons_csv) -> SpikeTrains:
    with open(neurons_csv) as fh:
        first = fh.readline().strip()
        duration = float(first.split("=", 1)[1])
        reader = csv.DictReader(fh)
        ids, centers = [], []
        for row in reader:
            ids.append(int(row["neuron_id"]))
            centers.append((float(row["x_um"]), float(row["y_um"])))
    data = np.loadtxt(spikes_csv, delimiter=",", skiprows=1, ndmin=2)
    by_id = {i: [] for i in ids}
    if data.size:
        nid = data[:, 0].astype(np.int64)
        order = np.argsort(nid, kind="stable")
        nid, times = nid[order], data[order, 1]
        bounds = np.flatnonzero(np.diff(nid)) + 1
        for chunk_ids, chunk in zip(np.split(nid, bounds), np.split(times, bounds)):
            by_id[int(chunk_ids[0])] = chunk
    trains = [np.asarray(by_id[i], dtype=float) for i in ids]
    return SpikeTrains(trains, duration, np.array(ids), np.array(centers).reshape(-1, 2))


# --- rate matrix -----------------------------------------------------------


def save_rates(rates: RateMatrix, path):
    """``RGCR`` binary: magic, u32 version, u64 N_s, u64 N_n, row-major f64
    values, i64 neuron ids, f64 sample times, i64 labels, then u8
    standardized flag, per-neuron mean/std when set, and a JSON metadata block."""
    n_s, n_n = rates.values.shape
    parts = [RATE_MAGIC, struct.pack("<IQQ", RATE_VERSION, n_s, n_n),
             np.ascontiguousarray(rates.values, dtype="<f8").tobytes(),
             rates.neuron_ids.astype("<i8").tobytes(),
             rates.sample_times_s.astype("<f8").tobytes(),
             rates.labels.astype("<i8").tobytes(),
             struct.pack("<B", int(rates.standardized))]
    if rates.standardized:
        parts += [rates.mean.astype("<f8").tobytes(), rates.std.astype("<f8").tobytes()]
    meta = json.dumps(dict(rates.meta, bin_s=rates.bin_s), sort_keys=True).encode()
    parts += [struct.pack("<Q", len(meta)), meta]
    atomic_write_bytes(path, b"".join(parts))


def load_rates(path) -> RateMatrix:
    buf = Path(path).read_bytes()
    if buf[:4] != RATE_MAGIC:
        raise ValueError(f"{path}: not a rate matrix file")
    version, n_s, n_n = struct.unpack_from("<IQQ", buf, 4)
    if version != RATE_VERSION:
        raise ValueError(f"{path}: unsupported rate file version {version}")
    off = 4 + struct.calcsize("<IQQ")

    def take(dtype, count):
        nonlocal off
        arr = np.frombuffer(buf, dtype=dtype, count=count, offset=off)
        off += arr.nbytes
        return arr.copy()

    values = take("<f8", n_s * n_n).reshape(n_s, n_n)
    ids = take("<i8", n_n)
    times = take("<f8", n_s)
    labels = take("<i8", n_s)
    standardized = bool(take("<u1", 1)[0])
    mean = std = None
    if standardized:
        mean, std = take("<f8", n_n), take("<f8", n_n)
    (n_meta,) = struct.unpack_from("<Q", buf, off)
    meta = json.loads(buf[off + 8: off + 8 + n_meta].decode())
    bin_s = meta.pop("bin_s", None)
    return RateMatrix(values, times, ids, labels, standardized, mean, std, bin_s, meta)


def export_rates_csv(rates: RateMatrix, path):
    header = "sample_time_s,label," + ",".join(f"n{i}" for i in rates.neuron_ids)
    body = np.column_stack([rates.sample_times_s, rates.labels, rates.values])
    fmt = ["%.6f", "%d"] + ["%.10g"] * rates.n_neurons
    np.savetxt(path, body, delimiter=",", header=header, comments="", fmt=fmt)


# --- evaluation outputs ----------------------------------------------------


def save_mi_report(report, csv_path, json_path):
    rows = ["state_key,label,count"]
    rows += [f"{k},{lab},{n}" for (k, lab), n in sorted(report.contingency.items())]
    atomic_write_text(csv_path, "\n".join(rows) + "\n")
    atomic_write_text(json_path, json.dumps(report.summary(), sort_keys=True, indent=1) + "\n")


def save_triggered_average(avg, pgm_path, bits=16):
    scale = write_image_pgm(pgm_path, avg.image, bits)
    side = {"trigger": avg.trigger, "n_contributing": avg.n_contributing,
            "luminance_per_level": scale}
    atomic_write_text(Path(pgm_path).with_suffix(".json"),
                      json.dumps(side, sort_keys=True, indent=1) + "\n")
