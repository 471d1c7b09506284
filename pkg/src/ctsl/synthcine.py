"""Synthetic multi-view 4D cine studies with a planted risk signal.

Each study is a beating annulus phantom rendered as one short-axis stack and
three long-axis slabs at different azimuths. A latent risk score drawn
uniformly from [-1, 1] controls the contraction amplitude monotonically and
drives an exponential survival time through a proportional hazard; censoring
is an independent exponential. The latent score never enters the tabular
record handed to models; it is written to a sidecar truth file only.

View volumes are stored in a small binary container: a 16-byte header
(magic ``CTSL``, one rank byte, 11 reserved zero bytes), four little-endian
u32 dims (H, W, T, D), then the float32 payload in C row-major order.
"""

from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"CTSL"
RANK = 4
HEADER_SIZE = 16
SCHEMA_VERSION = 1

VIEW_NAMES = ("SA", "CH2", "CH3", "CH4")
_LONG_AXIS_AZIMUTH = {"CH2": 0.0, "CH3": math.pi / 3.0, "CH4": 2.0 * math.pi / 3.0}

EHR_FILE = "ehr.csv"
TRUTH_FILE = "truth.csv"
MANIFEST_FILE = "manifest.json"


class FormatError(ValueError):
    """Raised when a view container or dataset file fails validation."""


@dataclass(frozen=True)
class PhantomParams:
    """Geometry, signal, and outcome parameters for the phantom generator."""

    height: int = 32
    width: int = 32
    frames: int = 16
    depths: int = 8
    center_jitter: float = 0.5
    radius: float = 9.0
    thickness: float = 1.6
    amp_range: tuple[float, float] = (1.0, 6.0)
    depth_taper: float = 0.35
    azimuthal_mod: float = 0.25
    azimuth_jitter: float = 0.15
    slab_spacing: float = 1.0
    noise: float = 0.015
    ehr_dim: int = 12
    ehr_informative: int = 3
    ehr_signal: float = 0.6
    baseline_hazard: float = 0.1
    beta_true: float = 2.0
    censor_rate: float = 0.2

    def validate(self) -> None:
        if min(self.height, self.width) < 8 or self.frames < 2 or self.depths < 1:
            raise ValueError("need height, width >= 8, frames >= 2, depths >= 1")
        if self.radius <= 0 or self.thickness <= 0:
            raise ValueError("radius and thickness must be > 0")
        amp_min, amp_max = self.amp_range
        if amp_min < 0 or amp_min > amp_max:
            raise ValueError("amp_range must satisfy 0 <= amp_min <= amp_max")
        if amp_max >= self.radius:
            raise ValueError(
                "max contraction amplitude must stay below the ring radius"
            )
        if not (0.0 <= self.depth_taper < 1.0):
            raise ValueError("depth_taper must be in [0, 1)")
        if abs(self.azimuthal_mod) >= 1.0:
            raise ValueError("azimuthal modulation must keep intensity positive")
        if self.ehr_dim < 1 or not (0 <= self.ehr_informative <= self.ehr_dim):
            raise ValueError("need 0 <= ehr_informative <= ehr_dim, ehr_dim >= 1")
        if not (0.0 <= self.ehr_signal < 1.0):
            raise ValueError("ehr_signal must be in [0, 1)")
        if self.baseline_hazard <= 0:
            raise ValueError("baseline_hazard must be > 0")
        if not (0.0 <= self.censor_rate < 1.0):
            raise ValueError("censor_rate must be in [0, 1)")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")


@dataclass(frozen=True)
class VoxelVideo:
    """One view volume, indexed (H, W, T, D), float32."""

    view: str
    data: np.ndarray

    def __post_init__(self):
        if self.data.ndim != RANK:
            raise ValueError(f"expected rank-{RANK} volume, got {self.data.ndim}")

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return tuple(self.data.shape)


@dataclass
class StudyRecord:
    """One synthetic study: views, tabular covariates, and outcome."""

    study_id: str
    views: dict[str, VoxelVideo]
    ehr: np.ndarray
    time: float
    event: int
    latent_risk: float | None = None


def _ring_intensity(params, rad, azim, z_frac, t_frac, amplitude, phi0):
    """Annulus brightness at radial distance rad from the axis.

    The ring radius contracts by up to ``amplitude`` over a cycle, shrinks
    toward the apex (z_frac -> 1), and carries an azimuthal brightness
    modulation so long-axis slabs at different azimuths genuinely differ.
    """
    taper = 1.0 - params.depth_taper * z_frac
    contraction = 0.5 * amplitude * (1.0 - math.cos(2.0 * math.pi * t_frac))
    r_t = taper * (params.radius - contraction)
    brightness = 1.0 + params.azimuthal_mod * np.cos(azim - phi0)
    return brightness * np.exp(-((rad - r_t) ** 2) / (2.0 * params.thickness**2))


def _render_short_axis(params, cy, cx, amplitude, phi0):
    h, w, t_n, d_n = params.height, params.width, params.frames, params.depths
    ys = np.arange(h, dtype=float)[:, None, None]
    xs = np.arange(w, dtype=float)[None, :, None]
    rad = np.hypot(ys - cy, xs - cx)
    azim = np.arctan2(ys - cy, xs - cx)
    z_frac = (np.arange(d_n, dtype=float)[None, None, :] + 0.5) / d_n
    vol = np.empty((h, w, t_n, d_n), dtype=float)
    for t in range(t_n):
        vol[:, :, t, :] = _ring_intensity(
            params, rad, azim, z_frac, t / t_n, amplitude, phi0
        )
    return vol


def _render_long_axis(params, azimuth, amplitude, phi0):
    """Slab through the long axis: rows sweep depth, columns the in-plane
    offset, and the D dimension steps perpendicular to the slab plane."""
    h, w, t_n, d_n = params.height, params.width, params.frames, params.depths
    z_frac = (np.arange(h, dtype=float)[:, None, None] + 0.5) / h
    u = np.arange(w, dtype=float)[None, :, None] - (w - 1) / 2.0
    off = (np.arange(d_n, dtype=float)[None, None, :] - (d_n - 1) / 2.0) * params.slab_spacing
    rad = np.hypot(u, off)
    azim = azimuth + np.arctan2(off, u)
    vol = np.empty((h, w, t_n, d_n), dtype=float)
    for t in range(t_n):
        vol[:, :, t, :] = _ring_intensity(
            params, rad, azim, z_frac, t / t_n, amplitude, phi0
        )
    return vol


def generate_study(params: PhantomParams, seed, study_id: str | None = None) -> StudyRecord:
    """Deterministic study synthesis; identical (params, seed) give identical
    records. Draw order is fixed, so adding parameters must append draws."""
    params.validate()
    rng = np.random.default_rng(seed)
    if study_id is None:
        study_id = f"study{int(np.abs(np.asarray(seed)).ravel()[0]) % 10**6:06d}"

    latent = float(rng.uniform(-1.0, 1.0))
    phi0 = float(rng.uniform(0.0, 2.0 * math.pi))
    jitter = rng.uniform(-1.0, 1.0, size=2) * params.center_jitter
    cy = (params.height - 1) / 2.0 + jitter[0]
    cx = (params.width - 1) / 2.0 + jitter[1]
    az_jit = rng.uniform(-params.azimuth_jitter, params.azimuth_jitter, size=3)

    amp_min, amp_max = params.amp_range
    amplitude = amp_min + (amp_max - amp_min) * (latent + 1.0) / 2.0

    k = params.ehr_informative
    ehr = np.empty(params.ehr_dim)
    # informative covariates correlate with the latent score (unit variance),
    # the rest are pure noise
    z_unit = latent * math.sqrt(3.0)
    noise_part = rng.normal(size=k)
    ehr[:k] = params.ehr_signal * z_unit + math.sqrt(1.0 - params.ehr_signal**2) * noise_part
    ehr[k:] = rng.normal(size=params.ehr_dim - k)

    hazard = params.baseline_hazard * math.exp(params.beta_true * latent)
    t_event = float(rng.exponential(1.0 / hazard))
    if params.censor_rate > 0.0:
        cens_rate = hazard * params.censor_rate / (1.0 - params.censor_rate)
        t_cens = float(rng.exponential(1.0 / cens_rate))
    else:
        t_cens = math.inf
    time = max(min(t_event, t_cens), 1e-9)
    event = int(t_event <= t_cens)

    views: dict[str, VoxelVideo] = {}
    for idx, name in enumerate(VIEW_NAMES):
        if name == "SA":
            vol = _render_short_axis(params, cy, cx, amplitude, phi0)
        else:
            azimuth = _LONG_AXIS_AZIMUTH[name] + float(az_jit[idx - 1])
            vol = _render_long_axis(params, azimuth, amplitude, phi0)
        if params.noise > 0.0:
            static = rng.normal(0.0, params.noise, size=vol.shape[:2] + (1, vol.shape[3]))
            vol = vol + static
        vol -= vol.min()
        peak = vol.max()
        if peak > 0:
            vol /= peak
        views[name] = VoxelVideo(view=name, data=vol.astype(np.float32))

    return StudyRecord(
        study_id=study_id,
        views=views,
        ehr=ehr,
        time=time,
        event=event,
        latent_risk=latent,
    )


def write_view_binary(path, data) -> None:
    data = np.ascontiguousarray(data, dtype=np.float32)
    if data.ndim != RANK:
        raise FormatError(f"view volume must be rank {RANK}")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<B", RANK))
        fh.write(b"\x00" * 11)
        fh.write(struct.pack("<4I", *data.shape))
        fh.write(data.tobytes(order="C"))


def read_view_binary(path) -> np.ndarray:
    path = Path(path)
    with open(path, "rb") as fh:
        header = fh.read(HEADER_SIZE)
        if len(header) != HEADER_SIZE:
            raise FormatError(f"{path.name}: truncated header")
        if header[:4] != MAGIC:
            raise FormatError(f"{path.name}: bad magic {header[:4]!r}")
        rank = header[4]
        if rank != RANK:
            raise FormatError(f"{path.name}: unsupported rank {rank}")
        if any(header[5:]):
            raise FormatError(f"{path.name}: reserved header bytes must be zero")
        dim_bytes = fh.read(4 * RANK)
        if len(dim_bytes) != 4 * RANK:
            raise FormatError(f"{path.name}: truncated dims")
        dims = struct.unpack("<4I", dim_bytes)
        payload = fh.read()
    expected = int(np.prod(dims)) * 4
    if len(payload) != expected:
        raise FormatError(
            f"{path.name}: payload is {len(payload)} bytes, dims imply {expected}"
        )
    return np.frombuffer(payload, dtype="<f4").reshape(dims).copy()


def _view_filename(study_id: str, view: str) -> str:
    return f"{study_id}_{view}.bin"


def save_study(record: StudyRecord, out_dir) -> dict:
    """Write view binaries and append the tabular rows; returns the manifest
    entry. EHR floats are written with repr so they round-trip exactly."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    view_paths = {}
    for name, video in record.views.items():
        fname = _view_filename(record.study_id, name)
        write_view_binary(out_dir / fname, video.data)
        view_paths[name] = fname

    ehr_path = out_dir / EHR_FILE
    new_file = not ehr_path.exists()
    with open(ehr_path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if new_file:
            writer.writerow(
                ["study_id", "time", "event"]
                + [f"f{j}" for j in range(record.ehr.size)]
            )
        writer.writerow(
            [record.study_id, repr(float(record.time)), str(int(record.event))]
            + [repr(float(v)) for v in record.ehr]
        )

    if record.latent_risk is not None:
        truth_path = out_dir / TRUTH_FILE
        new_truth = not truth_path.exists()
        with open(truth_path, "a", newline="") as fh:
            writer = csv.writer(fh)
            if new_truth:
                writer.writerow(["study_id", "latent_risk"])
            writer.writerow([record.study_id, repr(float(record.latent_risk))])

    return {"study_id": record.study_id, "views": view_paths}


def load_ehr_table(data_dir):
    """Read ehr.csv into (study_ids, times, events, X, feature_names)."""
    path = Path(data_dir) / EHR_FILE
    if not path.exists():
        raise FormatError(f"missing {EHR_FILE} in {data_dir}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:3] != ["study_id", "time", "event"]:
            raise FormatError(f"{EHR_FILE}: unexpected header {header[:3]}")
        feature_names = header[3:]
        ids, times, events, rows = [], [], [], []
        for row in reader:
            if not row:
                continue
            ids.append(row[0])
            times.append(float(row[1]))
            events.append(int(row[2]))
            rows.append([float(v) for v in row[3:]])
    X = np.asarray(rows, dtype=float).reshape(len(ids), len(feature_names))
    return ids, np.asarray(times), np.asarray(events, dtype=int), X, feature_names


def load_truth(data_dir) -> dict[str, float]:
    path = Path(data_dir) / TRUTH_FILE
    if not path.exists():
        raise FormatError(f"missing {TRUTH_FILE} in {data_dir}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        return {row[0]: float(row[1]) for row in reader if row}


def load_study(data_dir, study_id: str) -> StudyRecord:
    """Load one study's views and tabular row. The latent truth stays out."""
    data_dir = Path(data_dir)
    ids, times, events, X, _ = load_ehr_table(data_dir)
    try:
        i = ids.index(study_id)
    except ValueError:
        raise FormatError(f"study {study_id!r} not in {EHR_FILE}") from None
    views = {}
    for name in VIEW_NAMES:
        p = data_dir / _view_filename(study_id, name)
        if not p.exists():
            raise FormatError(f"missing view file {p.name}")
        views[name] = VoxelVideo(view=name, data=read_view_binary(p))
    return StudyRecord(
        study_id=study_id,
        views=views,
        ehr=X[i],
        time=float(times[i]),
        event=int(events[i]),
        latent_risk=None,
    )


def _assign_splits(n: int, fracs, seed) -> list[str]:
    f_train, f_val, f_test = fracs
    if min(fracs) < 0 or abs(sum(fracs) - 1.0) > 1e-9:
        raise ValueError("split fractions must be >= 0 and sum to 1")
    n_train = int(round(f_train * n))
    n_val = int(round(f_val * n))
    n_test = n - n_train - n_val
    if n_train < 1 or n_test < 1:
        raise ValueError("train and test splits must be non-empty")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 104729]))
    perm = rng.permutation(n)
    labels = [""] * n
    for pos, idx in enumerate(perm):
        if pos < n_train:
            labels[idx] = "train"
        elif pos < n_train + n_val:
            labels[idx] = "val"
        else:
            labels[idx] = "test"
    return labels


def generate_dataset(
    params: PhantomParams,
    n_studies: int,
    seed: int,
    out_dir,
    split_fracs=(0.6, 0.2, 0.2),
) -> dict:
    """Synthesize a dataset directory: view binaries, ehr.csv, truth.csv,
    and manifest.json with train/val/test assignment. Fully deterministic
    in (params, n_studies, seed, split_fracs)."""
    if n_studies < 2:
        raise ValueError("need at least 2 studies")
    params.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for fname in (EHR_FILE, TRUTH_FILE):
        p = out_dir / fname
        if p.exists():
            p.unlink()

    labels = _assign_splits(n_studies, split_fracs, seed)
    entries = []
    for i in range(n_studies):
        child = np.random.SeedSequence([int(seed), i])
        record = generate_study(params, child, study_id=f"study{i:04d}")
        entry = save_study(record, out_dir)
        entry["split"] = labels[i]
        entries.append(entry)

    manifest = {
        "schema_version": SCHEMA_VERSION,
        "seed": int(seed),
        "n_studies": int(n_studies),
        "split_fracs": list(split_fracs),
        "params": asdict(params),
        "views": list(VIEW_NAMES),
        "studies": entries,
    }
    with open(out_dir / MANIFEST_FILE, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def load_manifest(data_dir) -> dict:
    path = Path(data_dir) / MANIFEST_FILE
    if not path.exists():
        raise FormatError(f"missing {MANIFEST_FILE} in {data_dir}")
    with open(path) as fh:
        manifest = json.load(fh)
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise FormatError(
            f"manifest schema {manifest.get('schema_version')!r} unsupported"
        )
    return manifest
