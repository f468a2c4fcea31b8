"""
Differentiable software rasterizer for color, 2D velocity, depth and alpha.

Gaussians are sorted once per view by camera depth (index tie-break) and
composited front to back with T_i = prod_{j<i} (1 - alpha_i). Each Gaussian
only touches pixels inside its 3-sigma ellipse; evaluation works on the
resulting sparse (gaussian, pixel) pair list, so cost scales with footprint
area rather than N * H * W.

The reverse pass is torch autograd over the same pair computation.
``render_backward`` stops at the projected per-Gaussian quantities and
``chain_to_scene`` carries those gradients on to the scene parameters.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from .deformation import TimeStamp, deform, gaussian_velocity_2d
from .errors import ShapeMismatch
from .scene import (
    BLUR_FLOOR,
    DTYPE,
    Z_NEAR,
    CameraModel,
    CanonicalScene,
    covariance_from_factors,
    project_covariances,
    project_points,
)

ALPHA_MAX = 0.99
ALPHA_MIN = 1.0 / 255.0
T_MIN = 1e-4
EPS_DIV = 1e-10
MAHA_CUT = 9.0  # 3 sigma


@dataclass
class ProjectedGaussians:
    """Per-view state of the Gaussians that survived near-plane culling.

    ``index`` maps rows back to scene positions.
    """

    index: torch.Tensor
    means2d: torch.Tensor
    cov2d: torch.Tensor
    depth: torch.Tensor
    color: torch.Tensor
    opacity: torch.Tensor
    velocity: Optional[torch.Tensor] = None

    def __len__(self) -> int:
        return self.index.shape[0]

    def differentiable(self) -> list[tuple[str, torch.Tensor]]:
        names = ["means2d", "cov2d", "color", "opacity", "velocity"]
        return [(n, getattr(self, n)) for n in names if getattr(self, n) is not None]


@dataclass
class RenderBuffers:
    color: torch.Tensor
    velocity: Optional[torch.Tensor]
    depth: torch.Tensor
    alpha: torch.Tensor
    meta: ProjectedGaussians
    leaves: dict = field(default_factory=dict)

    @property
    def height(self) -> int:
        return self.color.shape[0]

    @property
    def width(self) -> int:
        return self.color.shape[1]


@dataclass
class RenderGradients:
    """Gradients on the projected quantities, rows aligned with ``meta.index``."""

    index: torch.Tensor
    means2d: torch.Tensor
    cov2d: torch.Tensor
    color: torch.Tensor
    opacity: torch.Tensor
    velocity: Optional[torch.Tensor]


def conic_of(cov2d: torch.Tensor) -> torch.Tensor:
    """Entries (a, b, c) of the inverse 2x2 covariance, shape (M, 3)."""
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    return torch.stack([c / det, -b / det, a / det], dim=-1)


def depth_rank(depth: torch.Tensor) -> torch.Tensor:
    """Rank of each Gaussian in the front-to-back order (ties -> lower index first)."""
    order = torch.sort(depth.detach(), stable=True).indices
    rank = torch.empty_like(order)
    rank[order] = torch.arange(order.shape[0])
    return rank


@dataclass
class _Pairs:
    g: torch.Tensor  # gaussian row in meta
    pix: torch.Tensor  # flat pixel index, sorted major
    row: torch.Tensor  # index into unique-pixel list
    pos: torch.Tensor  # slot within the pixel's contribution list
    upix: torch.Tensor  # unique pixels touched
    kmax: int


def footprint_pairs(means2d, cov2d, opacity, depth, width: int, height: int) -> _Pairs:
    """Enumerate (gaussian, pixel) pairs with Mahalanobis <= 9 and alpha >= 1/255.

    Pixel centers sit at integer coordinates (x = column, y = row). The result
    is ordered by pixel, then by depth rank.
    """
    with torch.no_grad():
        m = means2d.shape[0]
        empty = torch.zeros(0, dtype=torch.long)
        if m == 0:
            return _Pairs(empty, empty, empty, empty, empty, 0)
        ex = 3.0 * torch.sqrt(cov2d[:, 0, 0])
        ey = 3.0 * torch.sqrt(cov2d[:, 1, 1])
        x0 = torch.ceil(means2d[:, 0] - ex).clamp(min=0)
        x1 = torch.floor(means2d[:, 0] + ex).clamp(max=width - 1)
        y0 = torch.ceil(means2d[:, 1] - ey).clamp(min=0)
        y1 = torch.floor(means2d[:, 1] + ey).clamp(max=height - 1)
        nx = (x1 - x0 + 1).clamp(min=0).long()
        ny = (y1 - y0 + 1).clamp(min=0).long()
        counts = nx * ny
        total = int(counts.sum())
        if total == 0:
            return _Pairs(empty, empty, empty, empty, empty, 0)
        g = torch.repeat_interleave(torch.arange(m), counts)
        start = torch.cumsum(counts, 0) - counts
        local = torch.arange(total) - torch.repeat_interleave(start, counts)
        px = x0.long()[g] + local % nx[g]
        py = y0.long()[g] + torch.div(local, nx[g], rounding_mode="floor")
        conic = conic_of(cov2d)
        dx = px.to(DTYPE) - means2d[g, 0]
        dy = py.to(DTYPE) - means2d[g, 1]
        maha = conic[g, 0] * dx * dx + 2 * conic[g, 1] * dx * dy + conic[g, 2] * dy * dy
        keep = (maha <= MAHA_CUT) & (opacity[g] * torch.exp(-0.5 * maha) >= ALPHA_MIN)
        g = g[keep]
        pix = (py * width + px)[keep]
        if g.numel() == 0:
            return _Pairs(empty, empty, empty, empty, empty, 0)
        key = pix * m + depth_rank(depth)[g]
        order = torch.sort(key).indices
        g, pix = g[order], pix[order]
        upix, counts = torch.unique_consecutive(pix, return_counts=True)
        start = torch.cumsum(counts, 0) - counts
        row = torch.repeat_interleave(torch.arange(upix.shape[0]), counts)
        pos = torch.arange(g.shape[0]) - start[row]
        return _Pairs(g, pix, row, pos, upix, int(counts.max()))


def pair_alpha(meta: ProjectedGaussians, pairs: _Pairs, width: int) -> torch.Tensor:
    # one gather for all per-Gaussian inputs keeps the backward pass cheap
    packed = torch.cat([meta.means2d, conic_of(meta.cov2d), meta.opacity[:, None]], dim=1)
    q = packed.index_select(0, pairs.g)
    dx = (pairs.pix % width).to(DTYPE) - q[:, 0]
    dy = torch.div(pairs.pix, width, rounding_mode="floor").to(DTYPE) - q[:, 1]
    maha = q[:, 2] * dx * dx + 2 * q[:, 3] * dx * dy + q[:, 4] * dy * dy
    return torch.clamp(q[:, 5] * torch.exp(-0.5 * maha), max=ALPHA_MAX)


def _transmittance(alpha: torch.Tensor, pairs: _Pairs) -> tuple[torch.Tensor, torch.Tensor]:
    """Exclusive transmittance per pair and final transmittance per touched pixel."""
    n_pix = pairs.upix.shape[0]
    flat = pairs.row * pairs.kmax + pairs.pos
    one_minus = torch.ones(n_pix * pairs.kmax, dtype=DTYPE).index_put((flat,), 1.0 - alpha)
    incl = torch.cumprod(one_minus.reshape(n_pix, pairs.kmax), dim=1)
    excl = torch.cat([torch.ones(n_pix, 1, dtype=DTYPE), incl[:, :-1]], dim=1)
    return excl.reshape(-1).index_select(0, flat), incl[:, -1]


def composite_weights(meta: ProjectedGaussians, pairs: _Pairs, width: int):
    """Blend weights alpha_i * T_i per pair and the final transmittance per pixel."""
    alpha = pair_alpha(meta, pairs, width)
    T, T_final = _transmittance(alpha, pairs)
    with torch.no_grad():
        live = T >= T_MIN
    if not bool(live.all()):
        # stop a pixel once its transmittance falls under T_MIN; T is nonincreasing
        alpha = alpha * live
        T, T_final = _transmittance(alpha, pairs)
    return alpha * T, T_final


def rasterize(meta: ProjectedGaussians, width: int, height: int, background, with_velocity: bool = True) -> RenderBuffers:
    bg = torch.as_tensor(background, dtype=DTYPE).reshape(3)
    hw = width * height
    pairs = footprint_pairs(meta.means2d, meta.cov2d, meta.opacity, meta.depth, width, height)
    if pairs.g.numel() == 0:
        alpha_img = torch.zeros(hw, dtype=DTYPE)
        color = bg.expand(hw, 3).clone()
        velocity = torch.zeros(hw, 2, dtype=DTYPE) if with_velocity else None
        depth = torch.full((hw,), float("inf"), dtype=DTYPE)
    else:
        w, T_final = composite_weights(meta, pairs, width)
        g = pairs.g

        def accumulate(values: torch.Tensor) -> torch.Tensor:
            return torch.zeros(hw, values.shape[1], dtype=DTYPE).index_add(0, pairs.pix, w[:, None] * values[g])

        alpha_img = torch.zeros(hw, dtype=DTYPE).index_put((pairs.upix,), 1.0 - T_final)
        color = accumulate(meta.color) + (1.0 - alpha_img)[:, None] * bg
        velocity = accumulate(meta.velocity) if with_velocity and meta.velocity is not None else (
            torch.zeros(hw, 2, dtype=DTYPE) if with_velocity else None)
        zsum = accumulate(meta.depth[:, None])[:, 0]
        depth = torch.where(alpha_img > 0, zsum / alpha_img.clamp(min=EPS_DIV), torch.full_like(zsum, float("inf")))
    return RenderBuffers(
        color=color.reshape(height, width, 3),
        velocity=None if velocity is None else velocity.reshape(height, width, 2),
        depth=depth.reshape(height, width),
        alpha=alpha_img.reshape(height, width),
        meta=meta,
    )


def project_scene(scene: CanonicalScene, positions: torch.Tensor, cam: CameraModel,
                  velocity: Optional[torch.Tensor] = None, blur_floor: float = BLUR_FLOOR,
                  tensors: Optional[dict] = None) -> ProjectedGaussians:
    """Cull against the near plane and project the surviving Gaussians."""
    t = scene.tensors() if tensors is None else tensors
    p, z = project_points(cam, positions)
    keep = torch.nonzero(z.detach() > Z_NEAR).reshape(-1)
    cov3 = covariance_from_factors(t["scale"][keep], t["rotation"][keep])
    cov2 = project_covariances(cam, cov3, positions[keep], blur_floor)
    return ProjectedGaussians(
        index=keep,
        means2d=p[keep],
        cov2d=cov2,
        depth=z[keep],
        color=t["color"][keep],
        opacity=t["opacity"][keep],
        velocity=None if velocity is None else velocity[keep],
    )


def render_positions(scene: CanonicalScene, positions, cam: CameraModel, velocity=None,
                     with_velocity: bool = True, tensors: Optional[dict] = None) -> RenderBuffers:
    """Render the scene with explicit per-Gaussian world positions (and 2D velocities)."""
    positions = torch.as_tensor(positions, dtype=DTYPE).reshape(-1, 3)
    if velocity is not None:
        velocity = torch.as_tensor(velocity, dtype=DTYPE).reshape(-1, 2)
    meta = project_scene(scene, positions, cam, velocity, tensors=tensors)
    return rasterize(meta, cam.width, cam.height, scene.background, with_velocity=with_velocity)


def render(scene: CanonicalScene, field, t: TimeStamp, cam: CameraModel, with_velocity: bool = True,
           track: bool = False) -> RenderBuffers:
    """Render color/velocity/depth/alpha at stamp ``t``.

    With ``track=True`` the scene attributes are wrapped as fresh leaves so
    that ``render_backward``/``chain_to_scene`` can run on the result.
    """
    tensors = scene.tensors()
    leaves = {}
    if track:
        leaves = {k: v.detach().clone().requires_grad_(True) for k, v in tensors.items()}
        tensors = leaves
    mu0 = tensors["mu0"]
    positions = deform(field, mu0, t) if len(scene) else mu0
    velocity = None
    if with_velocity and len(scene):
        velocity, _ = gaussian_velocity_2d(field, mu0, t, cam)
    meta = project_scene(scene, positions, cam, velocity, tensors=tensors)
    buf = rasterize(meta, cam.width, cam.height, scene.background, with_velocity=with_velocity)
    buf.leaves = leaves
    return buf


def render_backward(buffers: RenderBuffers, upstream: dict) -> RenderGradients:
    """Pull per-pixel gradients on color/velocity/alpha back to the projected Gaussians."""
    meta = buffers.meta
    outputs, grads = [], []
    for name in ("color", "velocity", "alpha"):
        if name not in upstream or upstream[name] is None:
            continue
        out = getattr(buffers, name)
        g = torch.as_tensor(upstream[name], dtype=DTYPE)
        if out is None or g.shape != out.shape:
            raise ShapeMismatch(f"upstream {name} has shape {tuple(g.shape)}, expected "
                                f"{None if out is None else tuple(out.shape)}")
        if out.requires_grad:
            outputs.append(out)
            grads.append(g)
    named = meta.differentiable()
    zeros = {n: torch.zeros_like(v) for n, v in named}
    if outputs and any(v.requires_grad for _, v in named):
        wrt = [(n, v) for n, v in named if v.requires_grad]
        got = torch.autograd.grad(outputs, [v for _, v in wrt], grads, retain_graph=True, allow_unused=True)
        for (n, _), gv in zip(wrt, got):
            if gv is not None:
                zeros[n] = gv
    return RenderGradients(
        index=meta.index,
        means2d=zeros["means2d"],
        cov2d=zeros["cov2d"],
        color=zeros["color"],
        opacity=zeros["opacity"],
        velocity=zeros.get("velocity"),
    )


def chain_to_scene(grads: RenderGradients, buffers: RenderBuffers, field=None) -> dict:
    """Continue ``render_backward`` output through projection and deformation.

    Returns a dict with gradients for every scene attribute (full N rows, zero
    for culled Gaussians) and, when ``field`` is an ``nn.Module``, a list under
    ``"field"`` aligned with ``field.parameters()``.
    """
    meta = buffers.meta
    leaves = buffers.leaves
    if not leaves:
        raise ValueError("render with track=True to chain gradients to the scene")
    outs, gouts = [], []
    for name, tensor in meta.differentiable():
        if tensor.requires_grad:
            outs.append(tensor)
            gouts.append(getattr(grads, name))
    names = list(leaves)
    inputs = [leaves[n] for n in names]
    params = list(field.parameters()) if isinstance(field, torch.nn.Module) else []
    result = {n: torch.zeros_like(leaves[n]) for n in names}
    result["field"] = [torch.zeros_like(p) for p in params]
    if not outs:
        return result
    got = torch.autograd.grad(outs, inputs + params, gouts, retain_graph=True, allow_unused=True)
    for n, gv in zip(names, got[: len(names)]):
        if gv is not None:
            result[n] = gv
    result["field"] = [gv if gv is not None else torch.zeros_like(p) for p, gv in zip(params, got[len(names):])]
    return result


def pixel_contributions(meta: ProjectedGaussians, x: int, y: int, width: int, height: int):
    """Sorted (meta row, alpha) list for one pixel, mainly for inspection and tests."""
    pairs = footprint_pairs(meta.means2d, meta.cov2d, meta.opacity, meta.depth, width, height)
    sel = pairs.pix == y * width + x
    with torch.no_grad():
        alpha = pair_alpha(meta, pairs, width)
    return [(int(g), float(a)) for g, a in zip(pairs.g[sel], alpha[sel])]


def front_ids(meta: ProjectedGaussians, width: int, height: int, rule: str = "front") -> np.ndarray:
    """Scene index of the Gaussian that owns each pixel, -1 where none.

    ``rule="front"`` picks the nearest covering Gaussian; ``rule="dominant"``
    picks the one with the largest compositing weight (nearest on ties). Under
    ``"dominant"`` the background competes with its leftover transmittance and
    owns the pixel (-1) when that exceeds every Gaussian weight.
    """
    pairs = footprint_pairs(meta.means2d, meta.cov2d, meta.opacity, meta.depth, width, height)
    out = np.full(width * height, -1, dtype=np.int64)
    if pairs.g.numel():
        if rule == "front":
            pick = pairs.pos == 0
        elif rule == "dominant":
            with torch.no_grad():
                w, T_final = composite_weights(meta, pairs, width)
            best = torch.full((width * height,), -1.0, dtype=DTYPE).scatter_reduce(0, pairs.pix, w, reduce="amax")
            bg = torch.zeros(width * height, dtype=DTYPE).index_put((pairs.upix,), T_final)
            pick = w == best[pairs.pix]
            # keep the nearest of tied maxima: pairs are depth sorted within a pixel
            first = torch.ones_like(pick)
            first[1:] = pairs.pix[1:] != pairs.pix[:-1]
            seen = torch.cumsum(pick.long(), 0)
            start = torch.zeros(width * height, dtype=torch.long)
            start[pairs.pix[first]] = (seen - pick.long())[first]
            pick = pick & (seen - start[pairs.pix] == 1) & (w > 0) & (w >= bg[pairs.pix])
        else:
            raise ValueError(f"unknown rule {rule!r}")
        out[pairs.pix[pick].numpy()] = meta.index[pairs.g[pick]].numpy()
    return out.reshape(height, width)
