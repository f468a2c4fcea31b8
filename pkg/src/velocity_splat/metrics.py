"""Image and flow metrics plus held-out evaluation of a trained model."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
import torch

from .deformation import TimeStamp
from .losses import DynamicMask, FlowField
from .rasterizer import render
from .scene import CanonicalScene

PSNR_CAP = 99.0
MSE_FLOOR = 1e-10
NA = "n/a"
SSIM_SIGMA = 1.5
SSIM_RADIUS = 5  # 11 x 11 window
C1 = 0.01 ** 2
C2 = 0.03 ** 2

Metric = Union[float, str]


def _np(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().numpy()
    return np.asarray(x, dtype=np.float64)


def _psnr_from_mse(mse: float) -> float:
    if mse < MSE_FLOOR:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def psnr(a, b) -> float:
    """PSNR in dB for images in [0, 1], capped at 99 dB."""
    a, b = _np(a), _np(b)
    if a.shape != b.shape:
        raise ValueError(f"image shapes {a.shape} and {b.shape} differ")
    return _psnr_from_mse(float(np.mean((a - b) ** 2)))


def dpsnr(a, b, mask) -> Metric:
    """PSNR over mask-true pixels; ``"n/a"`` for an empty mask."""
    a, b = _np(a), _np(b)
    m = mask.mask if isinstance(mask, DynamicMask) else mask
    m = _np(m).astype(bool)
    if not m.any():
        return NA
    return _psnr_from_mse(float(np.mean((a[m] - b[m]) ** 2)))


def gaussian_window(radius: int = SSIM_RADIUS, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def _filter_valid(img: np.ndarray, w: np.ndarray) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(img, w.shape)
    return np.einsum("ijkl,kl->ij", win, w)


def ssim(a, b) -> float:
    """Single-scale SSIM, Gaussian 11x11 window (sigma 1.5), averaged over channels.

    Statistics are taken only where the window fits inside the image.
    """
    a, b = _np(a), _np(b)
    if a.shape != b.shape:
        raise ValueError(f"image shapes {a.shape} and {b.shape} differ")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    w = gaussian_window()
    if min(a.shape[:2]) < w.shape[0]:
        raise ValueError("image smaller than the SSIM window")
    vals = []
    for c in range(a.shape[2]):
        x, y = a[..., c], b[..., c]
        mx, my = _filter_valid(x, w), _filter_valid(y, w)
        sxx = _filter_valid(x * x, w) - mx * mx
        syy = _filter_valid(y * y, w) - my * my
        sxy = _filter_valid(x * y, w) - mx * my
        num = (2 * mx * my + C1) * (2 * sxy + C2)
        den = (mx * mx + my * my + C1) * (sxx + syy + C2)
        vals.append(float(np.mean(num / den)))
    return float(np.mean(vals))


def velocity_epe(rendered, truth: FlowField) -> Metric:
    """Mean endpoint error over valid pixels; ``"n/a"`` when none are valid."""
    r = _np(rendered)
    d = _np(truth.data)
    v = _np(truth.valid).astype(bool)
    if r.shape != d.shape:
        raise ValueError(f"flow shapes {r.shape} and {d.shape} differ")
    if not v.any():
        return NA
    return float(np.mean(np.linalg.norm(r - d, axis=-1)[v]))


def _mean_metric(values: Sequence[Metric]) -> Metric:
    nums = [v for v in values if not isinstance(v, str)]
    return float(np.mean(nums)) if nums else NA


@dataclass
class EvalReport:
    psnr: float
    dpsnr: Metric
    ssim: float
    velocity_epe: Metric
    per_frame: list = field(default_factory=list)
    cameras: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def evaluate(scene: CanonicalScene, fld, dataset, cameras: Sequence[int], frames: Optional[Sequence[int]] = None,
             with_ssim: bool = True) -> EvalReport:
    """Render the model at every frame of the given cameras and compare with the dataset.

    Image metrics are averaged over frames (DPSNR skips frames with an empty
    mask); EPE is pooled over all valid flow pixels.
    """
    n = dataset.n_frames
    frames = list(range(n)) if frames is None else list(frames)
    rows = []
    err_sum, err_cnt = 0.0, 0
    with torch.no_grad():
        for c in cameras:
            cam = dataset.cameras[c]
            for k in frames:
                buf = render(scene, fld, TimeStamp.frame(k, n), cam, with_velocity=k < n - 1)
                gt = dataset.images[c][k]
                row = {"camera": int(c), "frame": int(k), "psnr": psnr(buf.color, gt),
                       "dpsnr": dpsnr(buf.color, gt, dataset.masks[c][k])}
                if with_ssim:
                    row["ssim"] = ssim(buf.color, gt)
                if k < n - 1:
                    fl = dataset.flows[c][k]
                    row["velocity_epe"] = velocity_epe(buf.velocity, fl)
                    v = fl.valid.numpy()
                    if v.any():
                        err_sum += float(np.linalg.norm((buf.velocity - fl.data).numpy(), axis=-1)[v].sum())
                        err_cnt += int(v.sum())
                rows.append(row)
    return EvalReport(
        psnr=_mean_metric([r["psnr"] for r in rows]),
        dpsnr=_mean_metric([r["dpsnr"] for r in rows]),
        ssim=_mean_metric([r["ssim"] for r in rows]) if with_ssim else NA,
        velocity_epe=err_sum / err_cnt if err_cnt else NA,
        per_frame=rows,
        cameras=[int(c) for c in cameras],
    )


def compare_datasets(pred, truth, cameras: Sequence[int]) -> EvalReport:
    """Score a dataset-shaped prediction (images and flows) against ground truth."""
    rows = []
    err_sum, err_cnt = 0.0, 0
    n = truth.n_frames
    for c in cameras:
        for k in range(n):
            img, gt = pred.images[c][k], truth.images[c][k]
            row = {"camera": int(c), "frame": int(k), "psnr": psnr(img, gt), "dpsnr": dpsnr(img, gt, truth.masks[c][k]),
                   "ssim": ssim(img, gt)}
            if k < n - 1:
                fl = truth.flows[c][k]
                row["velocity_epe"] = velocity_epe(pred.flows[c][k].data, fl)
                v = fl.valid.numpy()
                if v.any():
                    err_sum += float(np.linalg.norm((pred.flows[c][k].data - fl.data).numpy(), axis=-1)[v].sum())
                    err_cnt += int(v.sum())
            rows.append(row)
    return EvalReport(
        psnr=_mean_metric([r["psnr"] for r in rows]),
        dpsnr=_mean_metric([r["dpsnr"] for r in rows]),
        ssim=_mean_metric([r["ssim"] for r in rows]),
        velocity_epe=err_sum / err_cnt if err_cnt else NA,
        per_frame=rows,
        cameras=[int(c) for c in cameras],
    )
