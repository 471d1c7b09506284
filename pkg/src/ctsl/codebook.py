"""Stage II: dual codebook quantization with cross-attention fusion and a
reconstruction decoder.

Temporal and spatial queries are each snapped to their nearest codebook
entry (squared Euclidean distance, ties to the lowest index). Codebooks
are not trained by gradient descent: entries move as exponential moving
averages of their assigned queries, with Laplace smoothing keeping rarely
used entries finite, and entries dead for a whole epoch are reseeded from
recent queries. Gradients reach the encoder through a straight-through
estimator plus a stop-gradient commitment penalty; the decoder upsamples
the fused quantized queries, conditioned on the aggregated video grid,
back to the input volume.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .distill import STUDENT_VIEW, video_to_tensor
from .encoder import MotionEncoder


class Codebook(nn.Module):
    """EMA-updated vector codebook.

    Entries initialize lazily from the first batch of queries, so the
    codebook starts inside the data distribution instead of random space.
    ``usage`` counts assignments since its last reset.
    """

    def __init__(
        self,
        n_entries: int = 128,
        dim: int = 512,
        ema_decay: float = 0.99,
        laplace_eps: float = 1e-5,
    ):
        super().__init__()
        if n_entries < 1 or dim < 1:
            raise ValueError("n_entries and dim must be >= 1")
        if not (0.0 <= ema_decay < 1.0):
            raise ValueError("ema_decay must be in [0, 1)")
        if laplace_eps <= 0:
            raise ValueError("laplace_eps must be > 0")
        self.n_entries = n_entries
        self.dim = dim
        self.ema_decay = ema_decay
        self.laplace_eps = laplace_eps
        self.register_buffer("entries", torch.zeros(n_entries, dim))
        self.register_buffer("ema_cluster_size", torch.zeros(n_entries))
        self.register_buffer("ema_cluster_sum", torch.zeros(n_entries, dim))
        self.register_buffer("usage", torch.zeros(n_entries, dtype=torch.long))
        self.register_buffer("initialized", torch.tensor(False))

    @torch.no_grad()
    def init_from_data(self, queries: Tensor, generator: torch.Generator | None = None) -> None:
        """Seed entries by sampling query rows (with replacement if scarce)
        plus a small jitter to break duplicates."""
        q = queries.detach().reshape(-1, self.dim)
        if q.shape[0] == 0:
            raise ValueError("cannot initialize from an empty batch")
        idx = torch.randint(
            0, q.shape[0], (self.n_entries,), generator=generator, device=q.device
        )
        jitter = 1e-3 * torch.randn(
            self.n_entries, self.dim, generator=generator, device=q.device
        )
        self.entries.copy_(q[idx] + jitter)
        self.ema_cluster_size.fill_(1.0)
        self.ema_cluster_sum.copy_(self.entries)
        self.initialized.fill_(True)

    @torch.no_grad()
    def ema_update(self, queries: Tensor, indices: Tensor) -> None:
        """Move entries toward the mean of their assigned queries."""
        if not bool(self.initialized):
            raise RuntimeError("codebook not initialized")
        q = queries.detach().reshape(-1, self.dim)
        idx = indices.detach().reshape(-1)
        counts = torch.bincount(idx, minlength=self.n_entries).to(q.dtype)
        sums = torch.zeros_like(self.ema_cluster_sum)
        sums.index_add_(0, idx, q)
        d = self.ema_decay
        self.ema_cluster_size.mul_(d).add_(counts, alpha=1.0 - d)
        self.ema_cluster_sum.mul_(d).add_(sums, alpha=1.0 - d)
        n = self.ema_cluster_size.sum()
        smoothed = (
            (self.ema_cluster_size + self.laplace_eps)
            / (n + self.n_entries * self.laplace_eps)
            * n
        )
        self.entries.copy_(self.ema_cluster_sum / smoothed.unsqueeze(1))
        self.usage += torch.bincount(idx, minlength=self.n_entries)

    @torch.no_grad()
    def reseed_dead_entries(self, pool: Tensor, generator: torch.Generator | None = None) -> int:
        """Replace entries unused since the last usage reset with rows drawn
        from ``pool``. Returns how many entries were reseeded."""
        dead = torch.nonzero(self.usage == 0, as_tuple=False).flatten()
        if dead.numel() == 0:
            return 0
        pool = pool.detach().reshape(-1, self.dim)
        if pool.shape[0] == 0:
            return 0
        pick = torch.randint(
            0, pool.shape[0], (dead.numel(),), generator=generator, device=pool.device
        )
        self.entries[dead] = pool[pick]
        self.ema_cluster_sum[dead] = pool[pick]
        self.ema_cluster_size[dead] = 1.0
        return int(dead.numel())

    def reset_usage(self) -> None:
        self.usage.zero_()


def _entries_of(codebook) -> Tensor:
    if isinstance(codebook, Codebook):
        if not bool(codebook.initialized):
            raise RuntimeError("codebook not initialized")
        return codebook.entries
    entries = torch.as_tensor(codebook)
    if entries.ndim != 2 or entries.shape[0] == 0:
        raise ValueError("codebook must be a non-empty (n_entries, dim) matrix")
    return entries


def vec_quant(queries: Tensor, codebook) -> tuple[Tensor, Tensor]:
    """Nearest-entry lookup by squared L2; ties resolve to the lowest index.

    Accepts (..., dim) queries; returns (quantized, indices) with matching
    leading shape. No gradients flow (pure lookup).
    """
    entries = _entries_of(codebook)
    if queries.shape[-1] != entries.shape[1]:
        raise ValueError("query dim does not match codebook dim")
    lead = queries.shape[:-1]
    q = queries.detach().reshape(-1, entries.shape[1])
    d2 = (
        (q * q).sum(dim=1, keepdim=True)
        - 2.0 * q @ entries.t()
        + (entries * entries).sum(dim=1)
    )
    indices = torch.argmin(d2, dim=1)
    quantized = entries[indices]
    return quantized.reshape(*lead, -1), indices.reshape(lead)


def quantize_st(queries: Tensor, codebook) -> tuple[Tensor, Tensor]:
    """Straight-through quantization: values come from the codebook, the
    gradient of the output w.r.t. ``queries`` is exactly the identity.

    The residual form ``q + (q_hat - q)`` would re-round the forward value;
    adding the exactly-zero ``queries - queries.detach()`` to the detached
    codebook rows keeps both halves of the contract bit-exact.
    """
    quantized, indices = vec_quant(queries, codebook)
    return quantized.detach() + (queries - queries.detach()), indices


def fuse(q_tau: Tensor, q_sigma: Tensor) -> Tensor:
    """Cross-attention of temporal onto spatial queries.

    softmax(Q_tau Q_sigma^T / sqrt(d)) Q_sigma; each output row is a convex
    combination of spatial query rows. Accepts (N, d) or (B, N, d).
    """
    if q_tau.shape[-1] != q_sigma.shape[-1]:
        raise ValueError("query dims differ")
    squeeze = q_tau.ndim == 2
    qt = q_tau.unsqueeze(0) if squeeze else q_tau
    qs = q_sigma.unsqueeze(0) if squeeze else q_sigma
    scores = qt @ qs.transpose(1, 2) / math.sqrt(qt.shape[-1])
    out = torch.softmax(scores, dim=-1) @ qs
    return out.squeeze(0) if squeeze else out


class ReconstructionDecoder(nn.Module):
    """Upsample the aggregated grid, conditioned on fused queries, back to
    the (B, D, T, H, W) input volume.

    The fused temporal queries are projected to the grid's channel width and
    broadcast-added per frame; two transposed convolutions undo the
    aggregator's (2, 4, 4) downsampling.
    """

    def __init__(self, agg_channels: int = 64, dim: int = 512, depths: int = 8):
        super().__init__()
        if agg_channels < 4:
            raise ValueError("agg_channels must be >= 4")
        self.depths = depths
        self.cond = nn.Linear(dim, agg_channels)
        self.up1 = nn.ConvTranspose3d(
            agg_channels,
            agg_channels // 2,
            kernel_size=(4, 4, 4),
            stride=(2, 2, 2),
            padding=(1, 1, 1),
        )
        self.up2 = nn.ConvTranspose3d(
            agg_channels // 2,
            agg_channels // 4,
            kernel_size=(1, 4, 4),
            stride=(1, 2, 2),
            padding=(0, 1, 1),
        )
        self.head = nn.Conv3d(agg_channels // 4, depths, kernel_size=1)

    def forward(self, q_img: Tensor, skip: Tensor) -> Tensor:
        if q_img.ndim != 3:
            raise ValueError("q_img must be (B, N_tau, dim)")
        if skip.ndim != 5:
            raise ValueError("skip must be (B, C, T', H', W')")
        if q_img.shape[1] != skip.shape[2]:
            raise ValueError("one fused query per retained frame is required")
        cond = self.cond(q_img).transpose(1, 2)[..., None, None]
        x = skip + cond
        x = F.gelu(self.up1(x))
        x = F.gelu(self.up2(x))
        return self.head(x)


def stage2_loss(
    video: Tensor,
    z_tau: Tensor,
    z_sigma: Tensor,
    skip: Tensor,
    cb_tau: Codebook,
    cb_sigma: Codebook,
    decoder: nn.Module,
    alpha: float = 0.25,
):
    """Reconstruction plus commitment.

    loss = MSE(decoder(fuse(Q_tau, Q_sigma), skip), video)
         + alpha * (MSE(z_tau, sg(Q_tau)) + MSE(z_sigma, sg(Q_sigma)))

    Quantized queries carry straight-through gradients, so the
    reconstruction term trains both decoder and (if unfrozen) encoder; the
    commitment terms pull queries toward their codes and never move the
    codebook, which updates only by EMA. Returns (loss, parts, indices).
    """
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    q_tau, idx_tau = quantize_st(z_tau, cb_tau)
    q_sigma, idx_sigma = quantize_st(z_sigma, cb_sigma)
    q_img = fuse(q_tau, q_sigma)
    recon = decoder(q_img, skip)
    if recon.shape != video.shape:
        raise ValueError(f"decoder produced {tuple(recon.shape)}, video is {tuple(video.shape)}")
    rec = F.mse_loss(recon, video)
    commit_tau = F.mse_loss(z_tau, q_tau.detach())
    commit_sigma = F.mse_loss(z_sigma, q_sigma.detach())
    loss = rec + alpha * (commit_tau + commit_sigma)
    parts = {
        "reconstruction": rec,
        "commit_tau": commit_tau,
        "commit_sigma": commit_sigma,
    }
    return loss, parts, (idx_tau, idx_sigma)


@dataclass(frozen=True)
class Stage2Config:
    n_entries: int = 128
    alpha: float = 0.25
    ema_decay: float = 0.99
    laplace_eps: float = 1e-5
    lr: float = 1e-3
    weight_decay: float = 0.0
    batch_size: int = 8
    epochs: int = 20
    finetune_encoder: bool = False

    def validate(self) -> None:
        if self.n_entries < 1:
            raise ValueError("n_entries must be >= 1")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if not (0.0 <= self.ema_decay < 1.0):
            raise ValueError("ema_decay must be in [0, 1)")
        if self.laplace_eps <= 0 or self.lr <= 0 or self.weight_decay < 0:
            raise ValueError("bad optimizer or smoothing settings")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size >= 1 and epochs >= 0 required")


@dataclass
class Stage2Result:
    encoder: MotionEncoder
    decoder: ReconstructionDecoder
    cb_tau: Codebook
    cb_sigma: Codebook
    loss_log: list[dict]


def train_stage2(
    studies: Sequence[Mapping[str, np.ndarray]],
    encoder: MotionEncoder,
    cfg: Stage2Config | None = None,
    seed: int = 0,
    device: str = "cpu",
) -> Stage2Result:
    """Fit decoder and codebooks on top of a (normally frozen) encoder.

    Codebooks initialize from the first batch's queries, move by EMA after
    every step, and reseed dead entries from the last batch of each epoch.
    With ``finetune_encoder`` the straight-through and commitment gradients
    also reach the encoder.
    """
    cfg = cfg or Stage2Config()
    cfg.validate()
    if len(studies) == 0:
        raise ValueError("empty dataset")
    for s in studies:
        if STUDENT_VIEW not in s:
            raise ValueError(f"study is missing view {STUDENT_VIEW!r}")

    torch.manual_seed(seed)
    gen = torch.Generator(device="cpu").manual_seed(seed)
    encoder = encoder.to(device)
    dim = encoder.cfg.embed_dim
    decoder = ReconstructionDecoder(
        agg_channels=encoder.cfg.agg_channels, dim=dim, depths=encoder.cfg.depths
    ).to(device)
    cb_tau = Codebook(cfg.n_entries, dim, cfg.ema_decay, cfg.laplace_eps).to(device)
    cb_sigma = Codebook(cfg.n_entries, dim, cfg.ema_decay, cfg.laplace_eps).to(device)

    params = list(decoder.parameters())
    encoder.train(cfg.finetune_encoder)
    if cfg.finetune_encoder:
        params += list(encoder.parameters())
    else:
        for p in encoder.parameters():
            p.requires_grad_(False)
    opt = torch.optim.Adam(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(seed)

    n = len(studies)
    loss_log: list[dict] = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        sums = {"loss": 0.0, "reconstruction": 0.0, "commit_tau": 0.0, "commit_sigma": 0.0}
        steps = 0
        samples = 0
        cb_tau.reset_usage()
        cb_sigma.reset_usage()
        last_z = None
        for start in range(0, n, cfg.batch_size):
            batch_idx = order[start : start + cfg.batch_size]
            sa = torch.stack(
                [video_to_tensor(studies[i][STUDENT_VIEW], device) for i in batch_idx]
            )
            if cfg.finetune_encoder:
                skip = encoder.aggregate(sa)
                queries = encoder.encode(skip)
                z_tau, z_sigma = queries.z_tau, queries.z_sigma
            else:
                with torch.no_grad():
                    skip = encoder.aggregate(sa)
                    queries = encoder.encode(skip)
                z_tau, z_sigma = queries.z_tau.detach(), queries.z_sigma.detach()

            if not bool(cb_tau.initialized):
                cb_tau.init_from_data(z_tau, gen)
            if not bool(cb_sigma.initialized):
                cb_sigma.init_from_data(z_sigma, gen)

            loss, parts, (idx_tau, idx_sigma) = stage2_loss(
                sa, z_tau, z_sigma, skip, cb_tau, cb_sigma, decoder, cfg.alpha
            )
            opt.zero_grad()
            loss.backward()
            opt.step()
            cb_tau.ema_update(z_tau, idx_tau)
            cb_sigma.ema_update(z_sigma, idx_sigma)
            last_z = (z_tau.detach(), z_sigma.detach())

            for key in ("reconstruction", "commit_tau", "commit_sigma"):
                sums[key] += float(parts[key].detach())
            sums["loss"] += float(loss.detach())
            steps += 1
            samples += int(batch_idx.size)

        if last_z is not None:
            cb_tau.reseed_dead_entries(last_z[0], gen)
            cb_sigma.reseed_dead_entries(last_z[1], gen)
        loss_log.append(
            {
                "epoch": epoch,
                "loss": sums["loss"] / steps,
                "reconstruction": sums["reconstruction"] / steps,
                "commit_tau": sums["commit_tau"] / steps,
                "commit_sigma": sums["commit_sigma"] / steps,
                "usage_tau": int(cb_tau.usage.sum()),
                "usage_sigma": int(cb_sigma.usage.sum()),
                "active_tau": int((cb_tau.usage > 0).sum()),
                "active_sigma": int((cb_sigma.usage > 0).sum()),
                "samples": samples,
            }
        )
    return Stage2Result(
        encoder=encoder,
        decoder=decoder,
        cb_tau=cb_tau,
        cb_sigma=cb_sigma,
        loss_log=loss_log,
    )


def export_representation(
    video: np.ndarray,
    encoder: MotionEncoder,
    cb_tau: Codebook | None,
    cb_sigma: Codebook | None,
    device: str = "cpu",
) -> tuple[np.ndarray, dict]:
    """One study's image feature vector: the mean fused quantized query.

    If either codebook is missing or untrained the pooled (unquantized)
    query is returned instead, flagged in the metadata, so an untrained
    quantization stage degrades to the plain encoder representation rather
    than emitting garbage.
    """
    encoder.eval()
    sa = video_to_tensor(video, device).unsqueeze(0)
    with torch.no_grad():
        queries = encoder(sa)
        trained = (
            cb_tau is not None
            and cb_sigma is not None
            and bool(cb_tau.initialized)
            and bool(cb_sigma.initialized)
        )
        if trained:
            q_tau, _ = vec_quant(queries.z_tau, cb_tau)
            q_sigma, _ = vec_quant(queries.z_sigma, cb_sigma)
            vec = fuse(q_tau, q_sigma).mean(dim=1)[0]
        else:
            warnings.warn(
                "codebooks untrained; falling back to the pooled query",
                RuntimeWarning,
                stacklevel=2,
            )
            vec = queries.pooled[0]
    return vec.cpu().numpy().astype(np.float64), {"codebook_trained": bool(trained)}
