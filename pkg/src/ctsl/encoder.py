"""Video encoder: depthwise slab aggregation, a small conv+attention
backbone, and temporal/spatial query pooling.

Input videos are (B, D, T, H, W): D depth planes of a T-frame cine loop.
Each depth plane is downsampled by a shared space-time convolution
(T -> T/2, H, W -> H/4, W/4), the per-depth maps are concatenated and
projected back to a fixed channel width, and a stem plus two local (conv)
and two global (attention) mixing stages produce a token grid. Queries
pool that grid: z_tau averages space per frame, z_sigma averages time per
position, and the pooled query averages everything.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor, nn


@dataclass(frozen=True)
class EncoderConfig:
    depths: int = 8
    agg_channels: int = 64
    embed_dim: int = 512
    num_heads: int = 8
    local_blocks: int = 2
    global_blocks: int = 2
    mlp_ratio: float = 2.0
    n_fused_views: int = 3

    def validate(self) -> None:
        if self.depths < 1 or self.agg_channels < 1 or self.embed_dim < 1:
            raise ValueError("depths, agg_channels, embed_dim must be >= 1")
        if self.embed_dim % self.num_heads != 0:
            raise ValueError("embed_dim must be divisible by num_heads")
        if self.local_blocks < 0 or self.global_blocks < 0:
            raise ValueError("block counts must be >= 0")
        if self.mlp_ratio <= 0:
            raise ValueError("mlp_ratio must be > 0")
        if self.n_fused_views < 1:
            raise ValueError("n_fused_views must be >= 1")


@dataclass
class MotionQueries:
    """Pooled encoder outputs.

    z_tau: (B, T', C) temporal queries, one per retained frame.
    z_sigma: (B, N_sigma, C) spatial queries, one per grid position.
    pooled: (B, C) global query.
    """

    z_tau: Tensor
    z_sigma: Tensor
    pooled: Tensor


def _init_weights(module: nn.Module) -> None:
    if isinstance(module, (nn.Conv3d, nn.Linear)):
        nn.init.trunc_normal_(module.weight, std=0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)


class DepthAggregator(nn.Module):
    """Shared per-depth space-time downsampling, then channel fusion.

    Each depth plane passes through the same Conv3d(1 -> C) with kernel
    (3, 4, 4), stride (2, 4, 4), padding (1, 0, 0); outputs are concatenated
    on channels and projected D*C -> C by a pointwise conv.
    """

    def __init__(self, depths: int, channels: int):
        super().__init__()
        self.depths = depths
        self.channels = channels
        self.slab = nn.Conv3d(
            1, channels, kernel_size=(3, 4, 4), stride=(2, 4, 4), padding=(1, 0, 0)
        )
        self.project = nn.Conv3d(depths * channels, channels, kernel_size=1)

    def forward(self, video: Tensor) -> Tensor:
        if video.ndim != 5:
            raise ValueError("expected (B, D, T, H, W)")
        b, d, t, h, w = video.shape
        if d != self.depths:
            raise ValueError(f"expected {self.depths} depth planes, got {d}")
        if t % 2 != 0 or h % 4 != 0 or w % 4 != 0:
            raise ValueError("need T even and H, W divisible by 4")
        per_depth = [self.slab(video[:, k : k + 1]) for k in range(d)]
        return self.project(torch.cat(per_depth, dim=1))


class LocalBlock(nn.Module):
    """Depthwise 3x3x3 conv mixing plus a pointwise channel MLP, residual."""

    def __init__(self, dim: int, mlp_ratio: float):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.GroupNorm(1, dim)
        self.mix = nn.Conv3d(dim, dim, kernel_size=3, padding=1, groups=dim)
        self.norm2 = nn.GroupNorm(1, dim)
        self.mlp = nn.Sequential(
            nn.Conv3d(dim, hidden, 1), nn.GELU(), nn.Conv3d(hidden, dim, 1)
        )

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.mix(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class GlobalBlock(nn.Module):
    """Multi-head self-attention over all space-time tokens, residual."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, num_heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim)
        )

    def forward(self, tokens: Tensor) -> Tensor:
        y = self.norm1(tokens)
        attn_out, _ = self.attn(y, y, y, need_weights=False)
        tokens = tokens + attn_out
        return tokens + self.mlp(self.norm2(tokens))


class MotionEncoder(nn.Module):
    """Aggregation, optional multi-view fusion, backbone, and pooling.

    The fusion conv combines several aggregated view grids into one; a
    single-view pass never touches it, so a student and a weight-averaged
    teacher share one parameter layout.
    """

    def __init__(self, cfg: EncoderConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or EncoderConfig()
        cfg.validate()
        self.aggregator = DepthAggregator(cfg.depths, cfg.agg_channels)
        self.view_fusion = nn.Conv3d(
            cfg.n_fused_views * cfg.agg_channels, cfg.agg_channels, kernel_size=1
        )
        self.stem = nn.Conv3d(
            cfg.agg_channels, cfg.embed_dim, kernel_size=(1, 2, 2), stride=(1, 2, 2)
        )
        self.local = nn.Sequential(
            *[LocalBlock(cfg.embed_dim, cfg.mlp_ratio) for _ in range(cfg.local_blocks)]
        )
        self.global_blocks = nn.ModuleList(
            [
                GlobalBlock(cfg.embed_dim, cfg.num_heads, cfg.mlp_ratio)
                for _ in range(cfg.global_blocks)
            ]
        )
        self.apply(_init_weights)

    def aggregate(self, video: Tensor) -> Tensor:
        """(B, D, T, H, W) -> (B, C_agg, T/2, H/4, W/4)."""
        return self.aggregator(video)

    def fuse_views(self, grids: list[Tensor]) -> Tensor:
        if len(grids) != self.cfg.n_fused_views:
            raise ValueError(
                f"expected {self.cfg.n_fused_views} view grids, got {len(grids)}"
            )
        return self.view_fusion(torch.cat(grids, dim=1))

    def _token_grid(self, agg_grid: Tensor) -> Tensor:
        x = agg_grid
        if x.shape[-1] % 2 != 0 or x.shape[-2] % 2 != 0:
            raise ValueError("aggregated grid spatial dims must be even")
        x = self.stem(x)
        x = self.local(x)
        b, c, t, h, w = x.shape
        tokens = x.flatten(2).transpose(1, 2)
        for block in self.global_blocks:
            tokens = block(tokens)
        return tokens.transpose(1, 2).reshape(b, c, t, h, w)

    @staticmethod
    def pool_queries(grid: Tensor) -> MotionQueries:
        """Pool a (B, C, T, H, W) token grid into temporal, spatial, and
        global queries. Pure means: permutation of spatial positions leaves
        z_tau unchanged, permutation of frames leaves z_sigma unchanged."""
        if grid.ndim != 5:
            raise ValueError("expected (B, C, T, H, W)")
        z_tau = grid.mean(dim=(3, 4)).transpose(1, 2)
        z_sigma = grid.mean(dim=2).flatten(2).transpose(1, 2)
        pooled = grid.mean(dim=(2, 3, 4))
        return MotionQueries(z_tau=z_tau, z_sigma=z_sigma, pooled=pooled)

    def encode(self, agg_grid: Tensor) -> MotionQueries:
        return self.pool_queries(self._token_grid(agg_grid))

    def encode_views(self, videos: list[Tensor]) -> MotionQueries:
        """Aggregate each view, fuse, and encode (the teacher path)."""
        return self.encode(self.fuse_views([self.aggregate(v) for v in videos]))

    def forward(self, video: Tensor) -> MotionQueries:
        return self.encode(self.aggregate(video))
