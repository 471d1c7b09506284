"""Experiment orchestration: dataset synthesis, ROI preprocessing, two-stage
training, survival fitting, evaluation, and ablations behind one CLI.

Every artifact (dataset, ROI cache, checkpoints, feature table, report) is
stamped with a fingerprint of the configuration slice that produced it, so
re-running a stage is a no-op unless something upstream changed, and a stale
checkpoint is never silently reused.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import os
import shutil
import sys
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .codebook import Codebook, Stage2Config, export_representation, train_stage2
from .distill import StageIConfig, train_stage1
from .encoder import EncoderConfig, MotionEncoder
from .flowroi import FlowConfig, crop_roi, locate_roi
from .metrics import c_index, km_curve, log_rank, stratify_median
from .survival import (
    CoxModel,
    fit_cox,
    linear_attribution,
    predict_risk,
    samples_from_arrays,
)
from .synthcine import (
    VIEW_NAMES,
    PhantomParams,
    generate_dataset,
    load_ehr_table,
    load_manifest,
    load_study,
)

REPORT_SCHEMA_VERSION = 1
MODES = ("full_ctsl", "distilled_no_vq", "random_encoder", "ehr_only_cox")
DEVICES = ("cpu", "accelerator")
ENV_DATA_DIR = "CTSL_DATA_DIR"

_STAGE1_CSV = ("epoch", "loss", "kl", "contrastive", "lr", "steps")
_STAGE2_CSV = (
    "epoch",
    "loss",
    "reconstruction",
    "commit_tau",
    "commit_sigma",
    "usage_tau",
    "usage_sigma",
    "active_tau",
    "active_sigma",
    "samples",
)


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class DataConfig:
    """Dataset location and synthesis settings."""

    n_studies: int = 200
    data_dir: str | None = None  # default: $CTSL_DATA_DIR, else <out>/data
    split_fracs: tuple[float, float, float] = (0.6, 0.2, 0.2)
    phantom: PhantomParams = field(default_factory=PhantomParams)

    def validate(self) -> None:
        if self.n_studies < 2:
            raise ValueError("n_studies must be >= 2")
        if len(self.split_fracs) != 3:
            raise ValueError("split_fracs must have 3 entries")
        self.phantom.validate()


@dataclass(frozen=True)
class RoiConfig:
    """Motion-window extraction settings."""

    size: int = 24
    frame_stride: int = 1
    depth_stride: int = 1
    flow: FlowConfig = field(default_factory=FlowConfig)

    def validate(self) -> None:
        if self.size <= 0 or self.size % 2 != 0:
            raise ValueError("roi size must be a positive even integer")
        if self.frame_stride < 1 or self.depth_stride < 1:
            raise ValueError("strides must be >= 1")
        self.flow.validate()


@dataclass(frozen=True)
class SurvivalConfig:
    penalizer: float = 0.3
    correlation_threshold: float | None = 0.98

    def validate(self) -> None:
        if self.penalizer < 0:
            raise ValueError("penalizer must be >= 0")
        if self.correlation_threshold is not None and not (
            0.0 < self.correlation_threshold <= 1.0
        ):
            raise ValueError("correlation_threshold must be in (0, 1]")


def desk_encoder_config() -> EncoderConfig:
    """Encoder sized for the 32x32x16x8 synthetic benchmark."""
    return EncoderConfig(
        depths=8,
        agg_channels=32,
        embed_dim=64,
        num_heads=4,
        local_blocks=2,
        global_blocks=2,
        mlp_ratio=2.0,
    )


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one run needs; round-trips through JSON."""

    mode: str = "full_ctsl"
    seed: int = 0
    out_dir: str = "runs/ctsl"
    device: str = "cpu"
    data: DataConfig = field(default_factory=DataConfig)
    roi: RoiConfig = field(default_factory=RoiConfig)
    encoder: EncoderConfig = field(default_factory=desk_encoder_config)
    stage1: StageIConfig = field(default_factory=StageIConfig)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    survival: SurvivalConfig = field(default_factory=SurvivalConfig)

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.device not in DEVICES:
            raise ValueError(f"device must be one of {DEVICES}")
        self.data.validate()
        self.roi.validate()
        self.encoder.validate()
        self.stage1.validate()
        self.stage2.validate()
        self.survival.validate()
        ph = self.data.phantom
        if self.encoder.depths != ph.depths:
            raise ValueError(
                f"encoder depths {self.encoder.depths} != phantom depths {ph.depths}"
            )
        if self.roi.size % 8 != 0:
            raise ValueError("roi size must be divisible by 8 for the token grid")
        if self.roi.size > min(ph.height, ph.width):
            raise ValueError("roi size exceeds the rendered frame")
        if ph.frames % 2 != 0:
            raise ValueError("phantom frame count must be even")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: dict) -> "ExperimentConfig":
        d = dict(payload)
        d.pop("schema_version", None)
        if "data" in d:
            sub = dict(d["data"])
            if "phantom" in sub:
                ph = dict(sub["phantom"])
                if "amp_range" in ph:
                    ph["amp_range"] = tuple(ph["amp_range"])
                sub["phantom"] = PhantomParams(**ph)
            if "split_fracs" in sub:
                sub["split_fracs"] = tuple(sub["split_fracs"])
            d["data"] = DataConfig(**sub)
        if "roi" in d:
            sub = dict(d["roi"])
            if "flow" in sub:
                sub["flow"] = FlowConfig(**sub["flow"])
            d["roi"] = RoiConfig(**sub)
        if "encoder" in d:
            d["encoder"] = EncoderConfig(**d["encoder"])
        if "stage1" in d:
            d["stage1"] = StageIConfig(**d["stage1"])
        if "stage2" in d:
            d["stage2"] = Stage2Config(**d["stage2"])
        if "survival" in d:
            d["survival"] = SurvivalConfig(**d["survival"])
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path) -> None:
        _write_json(Path(path), self.to_dict())


@dataclass(frozen=True)
class FeatureBundle:
    """Per-study feature matrix with outcomes and split labels."""

    ids: list[str]
    split: np.ndarray
    X: np.ndarray
    times: np.ndarray
    events: np.ndarray
    names: list[str]
    n_image: int
    quantized: bool


@dataclass(frozen=True)
class RunReport:
    mode: str
    seed: int
    c_index: float
    log_rank_p: float | None
    data: dict
    report_path: str


# ---------------------------------------------------------------------------
# filesystem layout, locking, fingerprints


class RunPaths:
    def __init__(self, out_dir):
        self.out = Path(out_dir)
        self.preproc = self.out / "preproc"
        self.preproc_meta = self.preproc / "meta.json"
        self.checkpoints = self.out / "checkpoints"
        self.stage1_ckpt = self.checkpoints / "stage1.pt"
        self.stage2_ckpt = self.checkpoints / "stage2.pt"
        self.cox_model = self.checkpoints / "cox.npz"
        self.cox_meta = self.checkpoints / "cox.json"
        self.features = self.out / "features.npz"
        self.features_meta = self.out / "features.json"
        self.losses = self.out / "losses"
        self.plots = self.out / "plots"
        self.report = self.out / "report.json"
        self.ablation_json = self.out / "ablation.json"
        self.ablation_csv = self.out / "ablation.csv"


class DirLock:
    """Exclusive ownership of a directory while a run mutates it."""

    def __init__(self, directory):
        self.path = Path(directory) / ".lock"

    def __enter__(self) -> "DirLock":
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RuntimeError(
                f"{self.path.parent} is locked by another run; "
                f"remove {self.path} if none is active"
            ) from None
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))
        return self

    def __exit__(self, *exc) -> bool:
        self.path.unlink(missing_ok=True)
        return False


def _fingerprint(payload) -> str:
    blob = json.dumps(payload, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _fp_data(cfg: ExperimentConfig) -> str:
    return _fingerprint(
        {
            "phantom": asdict(cfg.data.phantom),
            "n_studies": cfg.data.n_studies,
            "split_fracs": list(cfg.data.split_fracs),
            "seed": cfg.seed,
        }
    )


def _fp_roi(cfg: ExperimentConfig) -> str:
    return _fingerprint({"data": _fp_data(cfg), "roi": asdict(cfg.roi)})


def _fp_stage1(cfg: ExperimentConfig) -> str:
    return _fingerprint(
        {
            "roi": _fp_roi(cfg),
            "encoder": asdict(cfg.encoder),
            "stage1": asdict(cfg.stage1),
            "seed": cfg.seed,
        }
    )


def _fp_stage2(cfg: ExperimentConfig) -> str:
    return _fingerprint({"stage1": _fp_stage1(cfg), "stage2": asdict(cfg.stage2)})


def _fp_features(cfg: ExperimentConfig) -> str:
    if cfg.mode == "ehr_only_cox":
        upstream = _fp_data(cfg)
    elif cfg.mode == "random_encoder":
        upstream = _fingerprint(
            {"roi": _fp_roi(cfg), "encoder": asdict(cfg.encoder), "seed": cfg.seed}
        )
    elif cfg.mode == "distilled_no_vq":
        upstream = _fp_stage1(cfg)
    else:
        upstream = _fp_stage2(cfg)
    return _fingerprint({"mode": cfg.mode, "upstream": upstream})


def _fp_cox(cfg: ExperimentConfig) -> str:
    return _fingerprint(
        {"features": _fp_features(cfg), "survival": asdict(cfg.survival)}
    )


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n")


def _write_csv(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow(
                [repr(v) if isinstance(v, float) else v for v in row]
            )


def resolve_device(name: str) -> str:
    if name == "cpu":
        return "cpu"
    if name == "accelerator":
        if torch.cuda.is_available():
            return "cuda"
        raise RuntimeError("no accelerator available; use --device cpu")
    raise ValueError(f"unknown device {name!r}")


def resolve_data_dir(cfg: ExperimentConfig) -> Path:
    if cfg.data.data_dir is not None:
        return Path(cfg.data.data_dir)
    env = os.environ.get(ENV_DATA_DIR)
    if env:
        return Path(env)
    return Path(cfg.out_dir) / "data"


# ---------------------------------------------------------------------------
# pipeline stages (each skips itself when its fingerprint already matches)


def ensure_dataset(cfg: ExperimentConfig, build: bool = True) -> Path:
    """Synthesize the dataset unless a matching one already exists.

    A manifest generated under different settings is an error, never
    silently overwritten.
    """
    data_dir = resolve_data_dir(cfg)
    manifest_path = data_dir / "manifest.json"
    expected = {
        "seed": cfg.seed,
        "n_studies": cfg.data.n_studies,
        "split_fracs": list(cfg.data.split_fracs),
        "params": asdict(cfg.data.phantom),
    }
    if manifest_path.exists():
        manifest = load_manifest(data_dir)
        actual = {k: manifest.get(k) for k in expected}
        if _fingerprint(actual) != _fingerprint(expected):
            raise ValueError(
                f"dataset at {data_dir} was generated with different settings; "
                "delete it or point data_dir elsewhere"
            )
        return data_dir
    if not build:
        raise RuntimeError(f"no dataset at {data_dir}; run the synth stage first")
    with DirLock(data_dir):
        generate_dataset(
            cfg.data.phantom,
            cfg.data.n_studies,
            cfg.seed,
            data_dir,
            split_fracs=cfg.data.split_fracs,
        )
    return data_dir


def _study_ids(manifest: dict, split: str | None = None) -> list[str]:
    return [
        e["study_id"]
        for e in manifest["studies"]
        if split is None or e["split"] == split
    ]


def ensure_preprocessed(cfg: ExperimentConfig, build: bool = True) -> Path:
    """Locate the motion window on each short-axis video and cache crops of
    all four views per study."""
    data_dir = ensure_dataset(cfg, build=build)
    paths = RunPaths(cfg.out_dir)
    manifest = load_manifest(data_dir)
    ids = _study_ids(manifest)
    fp = _fp_roi(cfg)
    if paths.preproc_meta.exists():
        meta = json.loads(paths.preproc_meta.read_text())
        if meta.get("fingerprint") == fp and all(
            (paths.preproc / f"{sid}.npz").exists() for sid in ids
        ):
            return paths.preproc
    if not build:
        raise RuntimeError(
            f"ROI cache missing or stale in {paths.preproc}; run preprocess first"
        )
    paths.preproc.mkdir(parents=True, exist_ok=True)
    windows = {}
    for sid in ids:
        record = load_study(data_dir, sid)
        window = locate_roi(
            record.views["SA"],
            cfg.roi.size,
            cfg.roi.flow,
            frame_stride=cfg.roi.frame_stride,
            depth_stride=cfg.roi.depth_stride,
        )
        arrays = {v: crop_roi(record.views[v], window).data for v in VIEW_NAMES}
        np.savez(paths.preproc / f"{sid}.npz", **arrays)
        windows[sid] = [
            window.center_y,
            window.center_x,
            window.size,
            window.used_pairs,
        ]
    _write_json(paths.preproc_meta, {"fingerprint": fp, "windows": windows})
    return paths.preproc


def _load_crops(preproc_dir: Path, ids) -> list[dict[str, np.ndarray]]:
    studies = []
    for sid in ids:
        with np.load(preproc_dir / f"{sid}.npz") as z:
            studies.append({view: z[view] for view in VIEW_NAMES})
    return studies


def ensure_stage1(cfg: ExperimentConfig, device: str, build: bool = True):
    """Distillation training; returns (encoder, loss_log)."""
    paths = RunPaths(cfg.out_dir)
    fp = _fp_stage1(cfg)
    if paths.stage1_ckpt.exists():
        blob = torch.load(paths.stage1_ckpt, map_location="cpu", weights_only=True)
        if blob.get("fingerprint") == fp:
            encoder = MotionEncoder(cfg.encoder)
            encoder.load_state_dict(blob["student"])
            return encoder.to(device), blob["loss_log"]
    if not build:
        raise RuntimeError(
            "stage 1 checkpoint missing or stale (checkpoint/stage mismatch); "
            "run train-stage1 first"
        )
    data_dir = ensure_dataset(cfg)
    preproc = ensure_preprocessed(cfg)
    train_ids = _study_ids(load_manifest(data_dir), "train")
    studies = _load_crops(preproc, train_ids)
    result = train_stage1(
        studies, cfg.stage1, cfg.encoder, seed=cfg.seed, device=device
    )
    paths.checkpoints.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "fingerprint": fp,
            "student": {k: v.cpu() for k, v in result.student.state_dict().items()},
            "loss_log": result.loss_log,
        },
        paths.stage1_ckpt,
    )
    _write_csv(
        paths.losses / "stage1.csv",
        _STAGE1_CSV,
        [[row[k] for k in _STAGE1_CSV] for row in result.loss_log],
    )
    return result.student, result.loss_log


def ensure_stage2(cfg: ExperimentConfig, device: str, build: bool = True):
    """Quantization training; returns (encoder, cb_tau, cb_sigma, loss_log)."""
    paths = RunPaths(cfg.out_dir)
    fp = _fp_stage2(cfg)
    if paths.stage2_ckpt.exists():
        blob = torch.load(paths.stage2_ckpt, map_location="cpu", weights_only=True)
        if blob.get("fingerprint") == fp:
            encoder, _ = ensure_stage1(cfg, device, build=False)
            if "encoder" in blob:
                encoder = MotionEncoder(cfg.encoder)
                encoder.load_state_dict(blob["encoder"])
                encoder = encoder.to(device)
            dim = cfg.encoder.embed_dim
            cbs = []
            for key in ("cb_tau", "cb_sigma"):
                cb = Codebook(
                    cfg.stage2.n_entries,
                    dim,
                    cfg.stage2.ema_decay,
                    cfg.stage2.laplace_eps,
                ).to(device)
                cb.load_state_dict(blob[key])
                cbs.append(cb)
            return encoder, cbs[0], cbs[1], blob["loss_log"]
    if not build:
        raise RuntimeError(
            "stage 2 checkpoint missing or stale (checkpoint/stage mismatch); "
            "run train-stage2 first"
        )
    encoder, _ = ensure_stage1(cfg, device, build=False)
    data_dir = ensure_dataset(cfg)
    preproc = ensure_preprocessed(cfg)
    train_ids = _study_ids(load_manifest(data_dir), "train")
    studies = _load_crops(preproc, train_ids)
    result = train_stage2(studies, encoder, cfg.stage2, seed=cfg.seed, device=device)
    paths.checkpoints.mkdir(parents=True, exist_ok=True)
    blob = {
        "fingerprint": fp,
        "decoder": {k: v.cpu() for k, v in result.decoder.state_dict().items()},
        "cb_tau": {k: v.cpu() for k, v in result.cb_tau.state_dict().items()},
        "cb_sigma": {k: v.cpu() for k, v in result.cb_sigma.state_dict().items()},
        "loss_log": result.loss_log,
    }
    if cfg.stage2.finetune_encoder:
        blob["encoder"] = {
            k: v.cpu() for k, v in result.encoder.state_dict().items()
        }
    torch.save(blob, paths.stage2_ckpt)
    _write_csv(
        paths.losses / "stage2.csv",
        _STAGE2_CSV,
        [[row[k] for k in _STAGE2_CSV] for row in result.loss_log],
    )
    return result.encoder, result.cb_tau, result.cb_sigma, result.loss_log


def _image_model(cfg: ExperimentConfig, device: str):
    """The encoder (and codebooks, if any) the current mode evaluates with."""
    if cfg.mode == "random_encoder":
        torch.manual_seed(cfg.seed)
        return MotionEncoder(cfg.encoder).to(device), None, None
    if cfg.mode == "distilled_no_vq":
        encoder, _ = ensure_stage1(cfg, device, build=False)
        return encoder, None, None
    encoder, cb_tau, cb_sigma, _ = ensure_stage2(cfg, device, build=False)
    return encoder, cb_tau, cb_sigma


def ensure_features(
    cfg: ExperimentConfig, device: str, build: bool = True
) -> FeatureBundle:
    """Per-study feature table: image representation columns (mode permitting)
    followed by the tabular covariates, cached with outcomes and splits."""
    paths = RunPaths(cfg.out_dir)
    data_dir = ensure_dataset(cfg, build=build)
    fp = _fp_features(cfg)
    if paths.features.exists() and paths.features_meta.exists():
        meta = json.loads(paths.features_meta.read_text())
        if meta.get("fingerprint") == fp:
            with np.load(paths.features) as z:
                return FeatureBundle(
                    ids=[str(s) for s in z["ids"]],
                    split=z["split"].astype(str),
                    X=z["X"],
                    times=z["times"],
                    events=z["events"].astype(int),
                    names=list(meta["names"]),
                    n_image=int(meta["n_image"]),
                    quantized=bool(meta["quantized"]),
                )
    if not build:
        raise RuntimeError("feature table missing or stale; run fit-surv first")
    ids, times, events, ehr_X, ehr_names = load_ehr_table(data_dir)
    manifest = load_manifest(data_dir)
    split_of = {e["study_id"]: e["split"] for e in manifest["studies"]}
    split = np.array([split_of[sid] for sid in ids])
    if cfg.mode == "ehr_only_cox":
        X, names, n_image, quantized = ehr_X, list(ehr_names), 0, False
    else:
        preproc = ensure_preprocessed(cfg)
        encoder, cb_tau, cb_sigma = _image_model(cfg, device)
        vectors = []
        quantized = False
        for sid in ids:
            with np.load(preproc / f"{sid}.npz") as z:
                sa = z["SA"]
            # the fallback warning is the expected path for the VQ-free modes
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                vec, meta = export_representation(
                    sa, encoder, cb_tau, cb_sigma, device=device
                )
            quantized = bool(meta["codebook_trained"])
            vectors.append(vec)
        image = np.stack(vectors)
        X = np.hstack([image, ehr_X])
        names = [f"img{j}" for j in range(image.shape[1])] + list(ehr_names)
        n_image = image.shape[1]
    np.savez(
        paths.features,
        X=X,
        times=times,
        events=events,
        ids=np.array(ids),
        split=split,
    )
    _write_json(
        paths.features_meta,
        {
            "schema_version": REPORT_SCHEMA_VERSION,
            "fingerprint": fp,
            "names": names,
            "n_image": n_image,
            "quantized": quantized,
        },
    )
    return FeatureBundle(
        ids=list(ids),
        split=split,
        X=X,
        times=np.asarray(times, dtype=float),
        events=np.asarray(events, dtype=int),
        names=names,
        n_image=n_image,
        quantized=quantized,
    )


def ensure_cox(cfg: ExperimentConfig, device: str, build: bool = True) -> CoxModel:
    paths = RunPaths(cfg.out_dir)
    fp = _fp_cox(cfg)
    if paths.cox_model.exists() and paths.cox_meta.exists():
        meta = json.loads(paths.cox_meta.read_text())
        if meta.get("fingerprint") == fp:
            with np.load(paths.cox_model) as z:
                return CoxModel(
                    theta=z["theta"],
                    kept_idx=z["kept_idx"],
                    feature_means=z["feature_means"],
                    feature_scales=z["feature_scales"],
                    n_features=int(meta["n_features"]),
                    baseline_times=z["baseline_times"],
                    baseline_cumhaz=z["baseline_cumhaz"],
                    penalizer=float(meta["penalizer"]),
                    feature_names=list(meta["feature_names"]),
                    n_iter=int(meta["n_iter"]),
                    converged=bool(meta["converged"]),
                    final_loss=float(meta["final_loss"]),
                    grad_norm=float(meta["grad_norm"]),
                )
    if not build:
        raise RuntimeError("no fitted survival model; run fit-surv first")
    features = ensure_features(cfg, device, build=True)
    train = features.split == "train"
    samples = samples_from_arrays(
        features.X[train],
        features.times[train],
        features.events[train],
        study_ids=[sid for sid, keep in zip(features.ids, train) if keep],
    )
    model = fit_cox(
        samples,
        penalizer=cfg.survival.penalizer,
        correlation_threshold=cfg.survival.correlation_threshold,
        feature_names=features.names,
    )
    paths.checkpoints.mkdir(parents=True, exist_ok=True)
    np.savez(
        paths.cox_model,
        theta=model.theta,
        kept_idx=model.kept_idx,
        feature_means=model.feature_means,
        feature_scales=model.feature_scales,
        baseline_times=model.baseline_times,
        baseline_cumhaz=model.baseline_cumhaz,
    )
    _write_json(
        paths.cox_meta,
        {
            "schema_version": REPORT_SCHEMA_VERSION,
            "fingerprint": fp,
            "n_features": model.n_features,
            "penalizer": model.penalizer,
            "feature_names": model.feature_names,
            "n_iter": model.n_iter,
            "converged": model.converged,
            "final_loss": model.final_loss,
            "grad_norm": model.grad_norm,
        },
    )
    return model


def _peek_stage_logs(cfg: ExperimentConfig):
    """Loss logs from checkpoints matching this config, if the mode ran them."""
    paths = RunPaths(cfg.out_dir)
    stage1_log = stage2_log = None
    if cfg.mode in ("distilled_no_vq", "full_ctsl") and paths.stage1_ckpt.exists():
        blob = torch.load(paths.stage1_ckpt, map_location="cpu", weights_only=True)
        if blob.get("fingerprint") == _fp_stage1(cfg):
            stage1_log = blob["loss_log"]
    if cfg.mode == "full_ctsl" and paths.stage2_ckpt.exists():
        blob = torch.load(paths.stage2_ckpt, map_location="cpu", weights_only=True)
        if blob.get("fingerprint") == _fp_stage2(cfg):
            stage2_log = blob["loss_log"]
    return stage1_log, stage2_log


def evaluate(cfg: ExperimentConfig, features: FeatureBundle, model: CoxModel) -> dict:
    """Test-split metrics, risk-group curves, and attribution; writes
    report.json and the plot CSVs."""
    paths = RunPaths(cfg.out_dir)
    mask = features.split == "test"
    X_test = features.X[mask]
    t_test = features.times[mask]
    e_test = features.events[mask]
    risks = predict_risk(model, X_test)
    ci = float(c_index(t_test, e_test, risks))
    high, low = stratify_median(risks)
    km_high = km_curve(t_test[high], e_test[high])
    km_low = km_curve(t_test[low], e_test[low])
    try:
        chi2, p_value = log_rank(
            t_test[high], e_test[high], t_test[low], e_test[low]
        )
        lr_entry = {"chi2": float(chi2), "p": float(p_value)}
    except ValueError as exc:
        lr_entry = {"chi2": None, "p": None, "error": str(exc)}
    attribution = linear_attribution(model, X_test, feature_names=features.names)
    stage1_log, stage2_log = _peek_stage_logs(cfg)

    def km_entry(curve, idx):
        ts, ss = curve.step_points()
        return {
            "n": int(len(idx)),
            "times": [float(v) for v in ts],
            "survival": [float(v) for v in ss],
        }

    report = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "mode": cfg.mode,
        "seed": cfg.seed,
        "dataset": {
            "n_studies": len(features.ids),
            "n_train": int(np.sum(features.split == "train")),
            "n_val": int(np.sum(features.split == "val")),
            "n_test": int(np.sum(mask)),
        },
        "features": {
            "n_image": features.n_image,
            "n_ehr": len(features.names) - features.n_image,
            "n_kept": int(len(model.kept_idx)),
            "quantized_image_features": features.quantized,
        },
        "cox": {
            "converged": bool(model.converged),
            "n_iter": int(model.n_iter),
            "final_loss": float(model.final_loss),
            "penalizer": float(model.penalizer),
        },
        "c_index": ci,
        "log_rank": lr_entry,
        "km": {"high": km_entry(km_high, high), "low": km_entry(km_low, low)},
        "attribution": [
            {"feature": name, "mean_abs_contribution": float(value)}
            for name, value in attribution.ranking
        ],
        "stage1": None
        if stage1_log is None
        else {
            "epochs": len(stage1_log),
            "final_loss": float(stage1_log[-1]["loss"]) if stage1_log else None,
        },
        "stage2": None
        if stage2_log is None
        else {
            "epochs": len(stage2_log),
            "first_reconstruction": float(stage2_log[0]["reconstruction"])
            if stage2_log
            else None,
            "final_reconstruction": float(stage2_log[-1]["reconstruction"])
            if stage2_log
            else None,
        },
    }
    _write_json(paths.report, report)
    km_rows = []
    for label, curve in (("high", km_high), ("low", km_low)):
        ts, ss = curve.step_points()
        km_rows.extend([label, float(t), float(s)] for t, s in zip(ts, ss))
    _write_csv(paths.plots / "km.csv", ("group", "time", "survival"), km_rows)
    _write_csv(
        paths.plots / "attribution.csv",
        ("rank", "feature", "mean_abs_contribution"),
        [
            [rank + 1, name, float(value)]
            for rank, (name, value) in enumerate(attribution.ranking)
        ],
    )
    return report


def _coerce_config(config) -> ExperimentConfig:
    if isinstance(config, ExperimentConfig):
        return config
    if isinstance(config, (str, Path)):
        return ExperimentConfig.load(config)
    if isinstance(config, dict):
        return ExperimentConfig.from_dict(config)
    raise TypeError(f"cannot build a config from {type(config).__name__}")


def run(config) -> RunReport:
    """Execute the stages the mode implies and evaluate on the test split."""
    cfg = _coerce_config(config)
    cfg.validate()
    device = resolve_device(cfg.device)
    paths = RunPaths(cfg.out_dir)
    paths.out.mkdir(parents=True, exist_ok=True)
    with DirLock(paths.out):
        ensure_dataset(cfg)
        if cfg.mode in ("distilled_no_vq", "full_ctsl"):
            ensure_stage1(cfg, device, build=True)
        if cfg.mode == "full_ctsl":
            ensure_stage2(cfg, device, build=True)
        features = ensure_features(cfg, device, build=True)
        model = ensure_cox(cfg, device, build=True)
        report = evaluate(cfg, features, model)
    return RunReport(
        mode=cfg.mode,
        seed=cfg.seed,
        c_index=report["c_index"],
        log_rank_p=report["log_rank"]["p"],
        data=report,
        report_path=str(paths.report),
    )


ABLATION_MODES = ("random_encoder", "distilled_no_vq", "full_ctsl")


def ablate(config) -> dict:
    """Run the three image modes on identical data/splits/seed and tabulate
    their test C-indices."""
    cfg = _coerce_config(config)
    cfg.validate()
    paths = RunPaths(cfg.out_dir)
    paths.out.mkdir(parents=True, exist_ok=True)
    with DirLock(paths.out):
        data_dir = ensure_dataset(cfg).resolve()
        shared = dataclasses.replace(cfg.data, data_dir=str(data_dir))
        preproc = ensure_preprocessed(cfg).resolve()
        rows = []
        stage1_src = None
        for mode in ABLATION_MODES:
            sub_out = paths.out / "ablate" / mode
            sub = dataclasses.replace(
                cfg, mode=mode, out_dir=str(sub_out), data=shared
            )
            sub_out.mkdir(parents=True, exist_ok=True)
            link = sub_out / "preproc"
            if not link.exists():
                os.symlink(preproc, link, target_is_directory=True)
            if mode == "full_ctsl" and stage1_src is not None and stage1_src.exists():
                # stage 1 is identical for both trained modes; reuse it
                ck_dir = sub_out / "checkpoints"
                ck_dir.mkdir(exist_ok=True)
                shutil.copy2(stage1_src, ck_dir / "stage1.pt")
            result = run(sub)
            if mode == "distilled_no_vq":
                stage1_src = sub_out / "checkpoints" / "stage1.pt"
            rows.append({"mode": mode, "c_index": float(result.c_index)})
        table = {"schema_version": REPORT_SCHEMA_VERSION, "rows": rows}
        _write_json(paths.ablation_json, table)
        _write_csv(
            paths.ablation_csv,
            ("mode", "c_index"),
            [[r["mode"], r["c_index"]] for r in rows],
        )
    return table


# ---------------------------------------------------------------------------
# CLI


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", default=None, help="JSON experiment config")
    parser.add_argument("--seed", type=int, default=None, help="override seed")
    parser.add_argument("--out", default=None, help="override output directory")
    parser.add_argument(
        "--mode", choices=MODES, default=None, help="override pipeline mode"
    )
    parser.add_argument(
        "--device", choices=DEVICES, default=None, help="compute device"
    )


def _config_from_args(args) -> ExperimentConfig:
    cfg = (
        ExperimentConfig.load(args.config)
        if args.config
        else ExperimentConfig()
    )
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out_dir"] = args.out
    if args.mode is not None:
        overrides["mode"] = args.mode
    if args.device is not None:
        overrides["device"] = args.device
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    cfg.validate()
    return cfg


_COMMANDS = (
    ("synth", "generate the synthetic dataset"),
    ("preprocess", "locate motion windows and cache view crops"),
    ("train-stage1", "distill the motion encoder"),
    ("train-stage2", "fit codebooks and the reconstruction decoder"),
    ("fit-surv", "export features and fit the survival model"),
    ("eval", "evaluate the fitted model on the test split"),
    ("ablate", "compare the three image modes on one dataset"),
    ("report", "print an existing report.json"),
    ("run", "execute the full pipeline for the configured mode"),
)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="ctsl",
        description="Multi-view cine survival pipeline on synthetic phantoms.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in _COMMANDS:
        _add_common(sub.add_parser(name, help=help_text))
    args = parser.parse_args(argv)
    try:
        cfg = _config_from_args(args)
        paths = RunPaths(cfg.out_dir)
        if args.command == "synth":
            data_dir = ensure_dataset(cfg)
            print(f"dataset ready at {data_dir} ({cfg.data.n_studies} studies)")
        elif args.command == "preprocess":
            with DirLock(paths.out):
                preproc = ensure_preprocessed(cfg)
            print(f"ROI crops cached at {preproc}")
        elif args.command == "train-stage1":
            device = resolve_device(cfg.device)
            with DirLock(paths.out):
                _, log = ensure_stage1(cfg, device, build=True)
            last = log[-1]["loss"] if log else float("nan")
            print(f"stage 1 done ({len(log)} epochs, final loss {last:.6f})")
        elif args.command == "train-stage2":
            device = resolve_device(cfg.device)
            with DirLock(paths.out):
                _, _, _, log = ensure_stage2(cfg, device, build=True)
            last = log[-1]["reconstruction"] if log else float("nan")
            print(f"stage 2 done ({len(log)} epochs, final recon {last:.6f})")
        elif args.command == "fit-surv":
            device = resolve_device(cfg.device)
            with DirLock(paths.out):
                model = ensure_cox(cfg, device, build=True)
            print(
                f"survival model fit: kept {len(model.kept_idx)}/"
                f"{model.n_features} features, converged={model.converged}"
            )
        elif args.command == "eval":
            device = resolve_device(cfg.device)
            with DirLock(paths.out):
                model = ensure_cox(cfg, device, build=False)
                features = ensure_features(cfg, device, build=True)
                report = evaluate(cfg, features, model)
            print(f"C-index {report['c_index']:.4f}; report at {paths.report}")
        elif args.command == "ablate":
            table = ablate(cfg)
            for row in table["rows"]:
                print(f"{row['mode']:>16}  C-index {row['c_index']:.4f}")
            print(f"table at {paths.ablation_json}")
        elif args.command == "report":
            if not paths.report.exists():
                raise RuntimeError(f"no report at {paths.report}; run eval first")
            print(paths.report.read_text(), end="")
        else:
            result = run(cfg)
            print(
                f"{result.mode}: C-index {result.c_index:.4f}; "
                f"report at {result.report_path}"
            )
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
