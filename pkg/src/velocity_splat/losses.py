"""
Flow-based training losses and the photometric term.

All L1 norms are realized as means so the scale does not depend on image
resolution. Masked means over an empty set are defined as 0.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from .errors import ShapeMismatch, WindowLengthMismatch
from .scene import DTYPE


@dataclass
class FlowField:
    """Dense forward flow (H, W, 2) in px/frame plus a validity mask."""

    data: torch.Tensor
    valid: torch.Tensor

    def __post_init__(self):
        self.data = torch.as_tensor(self.data, dtype=DTYPE)
        self.valid = torch.as_tensor(self.valid, dtype=torch.bool)
        if self.data.dim() != 3 or self.data.shape[-1] != 2 or self.valid.shape != self.data.shape[:2]:
            raise ShapeMismatch("flow must be (H, W, 2) with an (H, W) validity mask")

    @classmethod
    def dense(cls, data) -> "FlowField":
        data = torch.as_tensor(data, dtype=DTYPE)
        return cls(data, torch.ones(data.shape[:2], dtype=torch.bool))


@dataclass
class DynamicMask:
    mask: torch.Tensor

    def __post_init__(self):
        self.mask = torch.as_tensor(self.mask, dtype=torch.bool)


@dataclass
class LossWeights:
    photometric: float = 1.0
    win: float = 0.1
    warp: float = 0.1
    dyn: float = 1.0


@dataclass
class LossReport:
    photometric: torch.Tensor
    win: torch.Tensor
    warp: torch.Tensor
    dyn: torch.Tensor
    total: torch.Tensor
    win_map: Optional[torch.Tensor] = None
    warp_map: Optional[torch.Tensor] = None

    def scalars(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in ("photometric", "win", "warp", "dyn", "total")}


def _check_same(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise ShapeMismatch(f"{what}: shapes {tuple(a.shape)} and {tuple(b.shape)} differ")


def _masked_mean(values: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean of ``values`` (H, W, C) over pixels where ``mask`` (H, W) holds."""
    n = int(mask.sum())
    if n == 0:
        return values.sum() * 0.0
    return (values * mask[..., None]).sum() / (n * values.shape[-1])


def loss_photometric(rendered, truth) -> torch.Tensor:
    rendered, truth = torch.as_tensor(rendered, dtype=DTYPE), torch.as_tensor(truth, dtype=DTYPE)
    _check_same(rendered, truth, "photometric")
    return (rendered - truth).abs().mean()


def loss_win(rendered_flows: Sequence[torch.Tensor], truth_flows: Sequence[FlowField], tau: int):
    """Windowed velocity error.

    Returns the mean over the window of per-frame masked L1 means, and the
    per-pixel L1 map (|du| + |dv|, zero where invalid) at the first stamp.
    """
    if len(rendered_flows) != tau or len(truth_flows) != tau:
        raise WindowLengthMismatch(f"expected {tau} frames, got {len(rendered_flows)} rendered and {len(truth_flows)} truth")
    terms = []
    first_map = None
    for k, (v, gt) in enumerate(zip(rendered_flows, truth_flows)):
        v = torch.as_tensor(v, dtype=DTYPE)
        _check_same(v, gt.data, "velocity window")
        err = (v - gt.data).abs()
        terms.append(_masked_mean(err, gt.valid))
        if k == 0:
            first_map = err.sum(-1) * gt.valid
    return torch.stack(terms).mean(), first_map


def bilinear_sample(img: torch.Tensor, x: torch.Tensor, y: torch.Tensor):
    """Sample (H, W, C) at float pixel coordinates with border clamping.

    Returns the samples and a mask that is False where the point fell outside
    [0, W-1] x [0, H-1].
    """
    h, w = img.shape[:2]
    inside = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    xc = x.clamp(0, w - 1)
    yc = y.clamp(0, h - 1)
    x0 = torch.floor(xc.detach()).long().clamp(max=max(w - 2, 0))
    y0 = torch.floor(yc.detach()).long().clamp(max=max(h - 2, 0))
    x1 = (x0 + 1).clamp(max=w - 1)
    y1 = (y0 + 1).clamp(max=h - 1)
    fx = (xc - x0.to(DTYPE))[..., None]
    fy = (yc - y0.to(DTYPE))[..., None]
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bottom = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bottom * fy, inside


def pixel_grid(height: int, width: int) -> tuple[torch.Tensor, torch.Tensor]:
    ys, xs = torch.meshgrid(torch.arange(height, dtype=DTYPE), torch.arange(width, dtype=DTYPE), indexing="ij")
    return xs, ys


def warp_image(src, flow):
    """Backward warp: out(p) = src(p + flow(p)), bilinear, border-clamped.

    Returns ``(warped, inside)``; ``inside`` marks samples that stayed in the image.
    """
    src, flow = torch.as_tensor(src, dtype=DTYPE), torch.as_tensor(flow, dtype=DTYPE)
    if src.shape[:2] != flow.shape[:2] or flow.shape[-1] != 2:
        raise ShapeMismatch(f"image {tuple(src.shape)} and flow {tuple(flow.shape)} disagree")
    xs, ys = pixel_grid(src.shape[0], src.shape[1])
    return bilinear_sample(src, xs + flow[..., 0], ys + flow[..., 1])


def loss_warp(rendered_next, sampling_flow, truth_current):
    """Flow warping error between the warped next render and the current ground truth.

    ``sampling_flow`` holds, for every pixel of the current frame, where that
    pixel lands in the next frame (the rendered forward velocity at the
    current stamp). Out-of-image samples are excluded.
    """
    rendered_next = torch.as_tensor(rendered_next, dtype=DTYPE)
    truth_current = torch.as_tensor(truth_current, dtype=DTYPE)
    _check_same(rendered_next, truth_current, "warp")
    warped, inside = warp_image(rendered_next, sampling_flow)
    err = (warped - truth_current).abs()
    return _masked_mean(err, inside), err.mean(-1) * inside


def loss_dyn(rendered, truth, mask) -> torch.Tensor:
    rendered, truth = torch.as_tensor(rendered, dtype=DTYPE), torch.as_tensor(truth, dtype=DTYPE)
    m = mask.mask if isinstance(mask, DynamicMask) else torch.as_tensor(mask, dtype=torch.bool)
    _check_same(rendered, truth, "dyn")
    if tuple(m.shape) != tuple(rendered.shape[:2]):
        raise ShapeMismatch("mask does not match image size")
    return _masked_mean((rendered - truth).abs(), m)


def combine(photometric, win, warp, dyn, weights: LossWeights, win_map=None, warp_map=None) -> LossReport:
    total = weights.photometric * photometric + weights.win * win + weights.warp * warp + weights.dyn * dyn
    return LossReport(photometric, win, warp, dyn, total, win_map, warp_map)
