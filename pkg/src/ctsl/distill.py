"""Stage I: multi-view distillation with a momentum teacher plus a motion
contrastive term.

The student encodes the short-axis view; the teacher, updated only as an
exponential moving average of the student, encodes the fused long-axis
views. The student matches the teacher's pooled query through a
temperature-softened KL term. A second term contrasts two temporal crops
of the same study (positives) against crops of other studies in the batch
(negatives) on cosine similarity.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

from .encoder import EncoderConfig, MotionEncoder

STUDENT_VIEW = "SA"
TEACHER_VIEWS = ("CH2", "CH3", "CH4")


@dataclass(frozen=True)
class StageIConfig:
    tau: float = 0.1
    tau_c: float = 0.2
    lam: float = 1.0
    ema_momentum: float = 0.996
    lr: float = 5e-5
    weight_decay: float = 1e-5
    batch_size: int = 16
    epochs: int = 50
    lr_step_epochs: int = 30
    lr_gamma: float = 0.1
    crop_frames: int | None = None  # default: half the clip, wrapping around

    def validate(self) -> None:
        if self.tau <= 0 or self.tau_c <= 0:
            raise ValueError("temperatures must be > 0")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if not (0.0 <= self.ema_momentum <= 1.0):
            raise ValueError("ema_momentum must be in [0, 1]")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ValueError("need lr > 0 and weight_decay >= 0")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (contrastive negatives)")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.lr_step_epochs < 1 or not (0 < self.lr_gamma <= 1):
            raise ValueError("bad lr schedule")
        if self.crop_frames is not None and (
            self.crop_frames < 2 or self.crop_frames % 2 != 0
        ):
            raise ValueError("crop_frames must be even and >= 2")


def kl_distill_loss(z_student: Tensor, z_teacher: Tensor, tau: float) -> Tensor:
    """tau^2 * KL(softmax(z_s / tau) || softmax(z_t / tau)).

    The teacher side is detached. Accepts single vectors or batches;
    batches average over rows. Invariant to adding a constant to either
    logit vector.
    """
    if tau <= 0:
        raise ValueError("tau must be > 0")
    if z_student.shape != z_teacher.shape:
        raise ValueError("student and teacher logits must match in shape")
    zs = z_student if z_student.ndim == 2 else z_student.unsqueeze(0)
    zt = z_teacher if z_teacher.ndim == 2 else z_teacher.unsqueeze(0)
    log_ps = F.log_softmax(zs / tau, dim=-1)
    log_pt = F.log_softmax(zt.detach() / tau, dim=-1)
    kl = (log_ps.exp() * (log_ps - log_pt)).sum(dim=-1)
    return tau * tau * kl.mean()


def motion_contrastive_loss(anchors: Tensor, positives: Tensor, tau_c: float) -> Tensor:
    """InfoNCE on cosine similarity; each anchor's negatives are the other
    anchors in the batch, so a batch of two all-orthogonal embeddings gives
    exactly log 2."""
    if tau_c <= 0:
        raise ValueError("tau_c must be > 0")
    if anchors.ndim != 2 or anchors.shape != positives.shape:
        raise ValueError("anchors and positives must be matching (B, C) tensors")
    b = anchors.shape[0]
    if b < 2:
        raise ValueError("need a batch of at least 2 for negatives")
    eps = 1e-12
    if (
        anchors.norm(dim=1).min().item() < eps
        or positives.norm(dim=1).min().item() < eps
    ):
        raise ValueError("zero-norm embedding cannot be normalized")
    a = F.normalize(anchors, dim=1)
    p = F.normalize(positives, dim=1)
    sim_aa = a @ a.t() / tau_c
    sim_ap = (a * p).sum(dim=1) / tau_c
    # logits row i: positive on the diagonal, other anchors elsewhere
    logits = sim_aa.clone()
    logits.fill_diagonal_(0.0)
    logits = logits + torch.diag_embed(sim_ap)
    log_prob = sim_ap - torch.logsumexp(logits, dim=1)
    return -log_prob.mean()


def ema_update(teacher: MotionEncoder, student: MotionEncoder, momentum: float) -> None:
    """teacher <- momentum * teacher + (1 - momentum) * student, per weight."""
    if not (0.0 <= momentum <= 1.0):
        raise ValueError("momentum must be in [0, 1]")
    t_params = dict(teacher.named_parameters())
    s_params = dict(student.named_parameters())
    if t_params.keys() != s_params.keys():
        raise ValueError("teacher and student parameter sets differ")
    with torch.no_grad():
        for name, tp in t_params.items():
            tp.mul_(momentum).add_(s_params[name], alpha=1.0 - momentum)


def video_to_tensor(vol: np.ndarray, device="cpu") -> Tensor:
    """(H, W, T, D) numpy view volume -> (D, T, H, W) float32 tensor."""
    if vol.ndim != 4:
        raise ValueError("expected (H, W, T, D)")
    return torch.from_numpy(
        np.ascontiguousarray(np.transpose(vol, (3, 2, 0, 1)), dtype=np.float32)
    ).to(device)


def _check_study(study: Mapping[str, np.ndarray]) -> None:
    for key in (STUDENT_VIEW,) + TEACHER_VIEWS:
        if key not in study:
            raise ValueError(f"study is missing view {key!r}")


def _temporal_crop(batch: Tensor, offsets: np.ndarray, length: int) -> Tensor:
    """Per-sample cyclic window of ``length`` frames starting at offsets[b]."""
    t_n = batch.shape[2]
    crops = []
    for b in range(batch.shape[0]):
        idx = (int(offsets[b]) + np.arange(length)) % t_n
        crops.append(batch[b][:, torch.from_numpy(idx).long()])
    return torch.stack(crops, dim=0)


@dataclass
class Stage1Result:
    student: MotionEncoder
    teacher: MotionEncoder
    loss_log: list[dict]


def train_stage1(
    studies: Sequence[Mapping[str, np.ndarray]],
    cfg: StageIConfig | None = None,
    encoder_cfg: EncoderConfig | None = None,
    seed: int = 0,
    device: str = "cpu",
) -> Stage1Result:
    """Train the student on short-axis clips against the momentum teacher's
    fused long-axis encoding. Deterministic in (studies, cfg, seed).

    The teacher starts as a copy of the student and is advanced by
    ``ema_update`` after every optimizer step; it receives no gradients.
    Batches with fewer than 2 studies are dropped (the contrastive term
    needs a negative), so at least 2 studies are required.
    """
    cfg = cfg or StageIConfig()
    cfg.validate()
    if len(studies) == 0:
        raise ValueError("empty dataset")
    if len(studies) < 2:
        raise ValueError("need at least 2 studies")
    for s in studies:
        _check_study(s)

    torch.manual_seed(seed)
    student = MotionEncoder(encoder_cfg).to(device)
    teacher = copy.deepcopy(student)
    for p in teacher.parameters():
        p.requires_grad_(False)
    opt = torch.optim.Adam(
        student.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay
    )
    sched = torch.optim.lr_scheduler.StepLR(
        opt, step_size=cfg.lr_step_epochs, gamma=cfg.lr_gamma
    )
    rng = np.random.default_rng(seed)

    n = len(studies)
    t_n = studies[0][STUDENT_VIEW].shape[2]
    crop_len = cfg.crop_frames if cfg.crop_frames is not None else max(2, t_n // 2)
    if crop_len % 2 != 0 or crop_len > t_n:
        raise ValueError(f"crop of {crop_len} frames does not fit T={t_n}")

    loss_log: list[dict] = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        sums = {"loss": 0.0, "kl": 0.0, "contrastive": 0.0}
        steps = 0
        for start in range(0, n, cfg.batch_size):
            batch_idx = order[start : start + cfg.batch_size]
            if batch_idx.size < 2:
                continue
            offsets = rng.integers(0, t_n, size=(2, batch_idx.size))
            sa = torch.stack(
                [video_to_tensor(studies[i][STUDENT_VIEW], device) for i in batch_idx]
            )
            teacher_in = [
                torch.stack(
                    [video_to_tensor(studies[i][v], device) for i in batch_idx]
                )
                for v in TEACHER_VIEWS
            ]

            q_student = student(sa)
            with torch.no_grad():
                q_teacher = teacher.encode_views(teacher_in)
            kl = kl_distill_loss(q_student.pooled, q_teacher.pooled, cfg.tau)

            if cfg.lam > 0:
                anchors = student(_temporal_crop(sa, offsets[0], crop_len)).pooled
                positives = student(_temporal_crop(sa, offsets[1], crop_len)).pooled
                con = motion_contrastive_loss(anchors, positives, cfg.tau_c)
            else:
                con = torch.zeros((), device=sa.device)

            loss = kl + cfg.lam * con
            opt.zero_grad()
            loss.backward()
            opt.step()
            ema_update(teacher, student, cfg.ema_momentum)

            sums["loss"] += float(loss.detach())
            sums["kl"] += float(kl.detach())
            sums["contrastive"] += float(con.detach())
            steps += 1
        epoch_lr = float(opt.param_groups[0]["lr"])
        sched.step()
        if steps == 0:
            raise ValueError("every batch was dropped; need at least 2 studies")
        loss_log.append(
            {
                "epoch": epoch,
                "loss": sums["loss"] / steps,
                "kl": sums["kl"] / steps,
                "contrastive": sums["contrastive"] / steps,
                "lr": epoch_lr,
                "steps": steps,
            }
        )
    return Stage1Result(student=student, teacher=teacher, loss_log=loss_log)
