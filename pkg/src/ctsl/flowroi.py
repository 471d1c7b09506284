"""Motion-based region-of-interest localization.

Dense optical flow is computed between consecutive frames of each depth
plane with the Farneback polynomial-expansion method; the flow-magnitude
weighted centroid, averaged over all frame pairs with meaningful motion,
centers a fixed square crop. Static inputs fall back to the image center.

Flow fields are stored (dy, dx) to match (row, column) indexing.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import cv2
import numpy as np

# single-threaded keeps flow fields bit-identical across runs
cv2.setNumThreads(0)


@dataclass(frozen=True)
class FlowConfig:
    """Farneback parameters; defaults suit small cine frames."""

    pyr_scale: float = 0.5
    levels: int = 3
    winsize: int = 9
    iterations: int = 3
    poly_n: int = 5
    poly_sigma: float = 1.1

    def validate(self) -> None:
        if not (0.0 < self.pyr_scale < 1.0):
            raise ValueError("pyr_scale must be in (0, 1)")
        if self.levels < 1 or self.iterations < 1:
            raise ValueError("levels and iterations must be >= 1")
        if self.winsize < 3 or self.poly_n < 3:
            raise ValueError("winsize and poly_n must be >= 3")
        if self.poly_sigma <= 0:
            raise ValueError("poly_sigma must be > 0")


@dataclass(frozen=True)
class MotionField:
    """Flow between one frame pair of one depth plane, (H, W, 2) as (dy, dx)."""

    flow: np.ndarray
    frame_index: int
    depth_index: int

    @property
    def magnitude(self) -> np.ndarray:
        return np.hypot(self.flow[..., 0], self.flow[..., 1])


@dataclass(frozen=True)
class ROIWindow:
    """Square crop of side ``size`` centered at (center_y, center_x).

    The crop spans [center - size/2, center + size/2) on each axis and is
    always fully inside the frame.
    """

    center_y: int
    center_x: int
    size: int
    used_pairs: int = 0

    def slices(self):
        half = self.size // 2
        return (
            slice(self.center_y - half, self.center_y + half),
            slice(self.center_x - half, self.center_x + half),
        )


def _video_data(video) -> np.ndarray:
    if dataclasses.is_dataclass(video):
        data = np.asarray(video.data)
    else:
        data = np.asarray(video)
    if data.ndim != 4:
        raise ValueError("expected a (H, W, T, D) video")
    return data


def _joint_uint8(a, b):
    """Scale a frame pair to uint8 with a shared affine map, as the flow
    estimator expects 8-bit input; shared scaling preserves the brightness
    constancy between the frames."""
    lo = float(min(a.min(), b.min()))
    hi = float(max(a.max(), b.max()))
    if hi <= lo:
        z = np.zeros(a.shape, dtype=np.uint8)
        return z, z.copy()
    scale = 255.0 / (hi - lo)
    ua = np.clip(np.rint((a - lo) * scale), 0, 255).astype(np.uint8)
    ub = np.clip(np.rint((b - lo) * scale), 0, 255).astype(np.uint8)
    return ua, ub


def farneback_flow(
    frame_a,
    frame_b,
    cfg: FlowConfig | None = None,
    frame_index: int = 0,
    depth_index: int = 0,
) -> MotionField:
    """Dense flow from frame_a to frame_b, returned as (dy, dx) per pixel."""
    cfg = cfg or FlowConfig()
    cfg.validate()
    a = np.asarray(frame_a, dtype=float)
    b = np.asarray(frame_b, dtype=float)
    if a.ndim != 2 or a.shape != b.shape:
        raise ValueError("frames must be 2-d and equal-shaped")
    if min(a.shape) < cfg.poly_n:
        raise ValueError(
            f"frame {a.shape} smaller than polynomial neighborhood {cfg.poly_n}"
        )
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("frames must be finite")
    ua, ub = _joint_uint8(a, b)
    flow_xy = cv2.calcOpticalFlowFarneback(
        ua,
        ub,
        None,
        cfg.pyr_scale,
        cfg.levels,
        cfg.winsize,
        cfg.iterations,
        cfg.poly_n,
        cfg.poly_sigma,
        0,
    )
    flow = np.stack([flow_xy[..., 1], flow_xy[..., 0]], axis=-1)
    return MotionField(flow=flow, frame_index=frame_index, depth_index=depth_index)


MAGNITUDE_FLOOR_PER_PIXEL = 1e-3


def locate_roi(
    video,
    size: int,
    cfg: FlowConfig | None = None,
    frame_stride: int = 1,
    depth_stride: int = 1,
) -> ROIWindow:
    """Find the motion-weighted crop center.

    Every consecutive frame pair of every depth plane (subsampled by the
    strides) contributes its flow-magnitude centroid, unless its total
    magnitude falls below 1e-3 per pixel; frames with no usable motion
    anywhere leave the window at the image center. The returned center is
    clamped so the crop stays in bounds.
    """
    data = _video_data(video)
    h, w, t_n, d_n = data.shape
    if t_n < 2:
        raise ValueError("need at least 2 frames for flow")
    if size <= 0 or size % 2 != 0:
        raise ValueError("crop size must be a positive even integer")
    if size > min(h, w):
        raise ValueError(f"crop size {size} exceeds frame {h}x{w}")
    if frame_stride < 1 or depth_stride < 1:
        raise ValueError("strides must be >= 1")
    cfg = cfg or FlowConfig()

    ys = np.arange(h, dtype=float)[:, None]
    xs = np.arange(w, dtype=float)[None, :]
    floor = MAGNITUDE_FLOOR_PER_PIXEL * h * w
    cents = []
    for d in range(0, d_n, depth_stride):
        for t in range(0, t_n - 1, frame_stride):
            field = farneback_flow(
                data[:, :, t, d], data[:, :, t + 1, d], cfg, t, d
            )
            mag = field.magnitude
            total = float(mag.sum())
            if total < floor:
                continue
            cents.append(
                (float((mag * ys).sum() / total), float((mag * xs).sum() / total))
            )

    if cents:
        cy = float(np.mean([c[0] for c in cents]))
        cx = float(np.mean([c[1] for c in cents]))
    else:
        cy = (h - 1) / 2.0
        cx = (w - 1) / 2.0

    half = size // 2
    cy_i = int(np.clip(round(cy), half, h - half))
    cx_i = int(np.clip(round(cx), half, w - half))
    return ROIWindow(center_y=cy_i, center_x=cx_i, size=size, used_pairs=len(cents))


def crop_roi(video, window: ROIWindow):
    """Extract the window; returns the same container type it was given."""
    data = _video_data(video)
    h, w = data.shape[:2]
    half = window.size // 2
    if not (half <= window.center_y <= h - half and half <= window.center_x <= w - half):
        raise ValueError("window does not fit inside the video")
    sy, sx = window.slices()
    out = data[sy, sx].copy()
    if dataclasses.is_dataclass(video):
        return dataclasses.replace(video, data=out)
    return out
