"""
Densification: flow-assisted insertion of new Gaussians and the usual
clone/split/prune pass.

Flow-assisted densification (FAD) picks pixels whose windowed velocity error
and its spatial gradient are both high, lifts them to 3D through the rendered
depth, thins them with farthest point sampling, borrows attributes from
nearby deformed Gaussians and maps the result back to canonical space.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
from scipy.spatial import cKDTree

from .deformation import deform
from .errors import NonContractive, ShapeMismatch
from .losses import DynamicMask
from .scene import DTYPE, CameraModel, CanonicalScene, as_tensor, project_points, quat_to_rotmat, unproject_pixels

PROVENANCE_TOL_PX = 3.0
FAD_OPACITY_FLOOR = 0.1


@dataclass
class FADConfig:
    percentile: float = 95.0
    fps_ratio: float = 0.05
    k: int = 4
    radius_scale: float = 3.0
    max_new_per_event: int = 64
    use_warp_map: bool = False
    fixed_point_iters: int = 5

    def __post_init__(self):
        if not 0 < self.fps_ratio <= 1:
            raise ValueError("fps_ratio must lie in (0, 1]")
        if self.k < 1:
            raise ValueError("k must be at least 1")
        if self.max_new_per_event < 1 or self.radius_scale <= 0:
            raise ValueError("caps and radius_scale must be positive")
        if not 0 <= self.percentile <= 100:
            raise ValueError("percentile must lie in [0, 100]")


@dataclass
class DensifyEvent:
    """Audit record of one FAD pass. Index arrays refer to the previous stage."""

    t: float
    selected_pixels: list = field(default_factory=list)  # (view, x, y)
    lifted_points: list = field(default_factory=list)  # xyz at t
    lifted_source: list = field(default_factory=list)  # index into selected_pixels
    sampled: list = field(default_factory=list)  # index into lifted_points
    accepted: Optional[CanonicalScene] = None
    accepted_source: list = field(default_factory=list)  # index into selected_pixels
    rejected: dict = field(default_factory=dict)

    def reject(self, reason: str, n: int = 1) -> None:
        if n:
            self.rejected[reason] = self.rejected.get(reason, 0) + int(n)

    @property
    def n_accepted(self) -> int:
        return 0 if self.accepted is None else len(self.accepted)

    def to_dict(self) -> dict:
        return {
            "t": self.t,
            "selected_pixels": [list(map(int, p)) for p in self.selected_pixels],
            "lifted_points": [list(map(float, p)) for p in self.lifted_points],
            "lifted_source": [int(i) for i in self.lifted_source],
            "sampled": [int(i) for i in self.sampled],
            "accepted": None if self.accepted is None else self.accepted.to_dict()["gaussians"],
            "accepted_source": [int(i) for i in self.accepted_source],
            "rejected": dict(sorted(self.rejected.items())),
        }


def append_event_log(path, event: DensifyEvent) -> None:
    """Append one JSON line per event."""
    with open(path, "a") as fh:
        fh.write(json.dumps(event.to_dict(), sort_keys=True) + "\n")


def read_event_log(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# pixel selection and lifting


def gradient_magnitude(loss_map) -> np.ndarray:
    """Central-difference image gradient magnitude (one-sided at the border)."""
    m = np.asarray(loss_map, dtype=np.float64)
    if min(m.shape) < 2:
        return np.zeros_like(m)
    gy, gx = np.gradient(m)
    return np.hypot(gx, gy)


def select_pixels(loss_map, grad_map, mask, cfg: FADConfig = FADConfig()) -> np.ndarray:
    """Pixels whose loss and gradient both reach their in-mask percentile.

    Returns an (M, 2) int array of (x, y) in row-major order. Zero-valued
    pixels are never selected so that a flat map yields nothing.
    """
    loss = np.asarray(loss_map.detach() if isinstance(loss_map, torch.Tensor) else loss_map, dtype=np.float64)
    grad = np.asarray(grad_map.detach() if isinstance(grad_map, torch.Tensor) else grad_map, dtype=np.float64)
    m = mask.mask if isinstance(mask, DynamicMask) else mask
    m = np.asarray(m.numpy() if isinstance(m, torch.Tensor) else m, dtype=bool)
    if loss.shape != grad.shape or loss.shape != m.shape:
        raise ShapeMismatch(f"maps {loss.shape}, {grad.shape} and mask {m.shape} differ")
    if not m.any():
        return np.zeros((0, 2), dtype=np.int64)
    eps_l = np.percentile(loss[m], cfg.percentile)
    eps_g = np.percentile(grad[m], cfg.percentile)
    sel = m & (loss >= eps_l) & (grad >= eps_g) & (loss > 0) & (grad > 0)
    ys, xs = np.nonzero(sel)
    return np.stack([xs, ys], axis=1).astype(np.int64)


def fill_missing_depth(depth) -> torch.Tensor:
    """Replace non-finite depth (pixels nothing covers) with the median finite depth."""
    d = torch.as_tensor(depth, dtype=DTYPE).clone()
    ok = torch.isfinite(d) & (d > 0)
    if ok.any() and not ok.all():
        d[~ok] = d[ok].median()
    return d


def lift_pixels(pixels, depth_map, cam: CameraModel):
    """Unproject pixels through the depth map.

    Returns ``(points, kept, skipped)``: (M', 3) world points, the indices of
    the input pixels that were lifted, and the number skipped because the
    depth was missing or not positive.
    """
    px = np.asarray(pixels, dtype=np.int64).reshape(-1, 2)
    depth = torch.as_tensor(depth_map, dtype=DTYPE)
    if len(px) == 0:
        return torch.zeros((0, 3), dtype=DTYPE), np.zeros(0, dtype=np.int64), 0
    z = depth[torch.as_tensor(px[:, 1]), torch.as_tensor(px[:, 0])]
    ok = torch.isfinite(z) & (z > 0)
    kept = np.nonzero(ok.numpy())[0]
    pts = unproject_pixels(cam, torch.as_tensor(px[kept], dtype=DTYPE), z[ok])
    return pts, kept, int(len(px) - len(kept))


# ---------------------------------------------------------------------------
# farthest point sampling


def farthest_point_sample(points, ratio: float, seed: int = 0) -> np.ndarray:
    """Greedy max-min subset of size ceil(ratio * N).

    Starts from index 0 and breaks ties toward the lowest index, so the
    result is fully deterministic; ``seed`` is accepted for interface
    symmetry and has no effect.
    """
    if not 0 < ratio <= 1:
        raise ValueError("ratio must lie in (0, 1]")
    pts = np.asarray(points.detach() if isinstance(points, torch.Tensor) else points, dtype=np.float64)
    n = len(pts)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    m = min(n, math.ceil(ratio * n - 1e-12))
    chosen = [0]
    dist = ((pts - pts[0]) ** 2).sum(axis=1)
    dist[0] = -1.0
    for _ in range(1, m):
        nxt = int(np.argmax(dist))  # first maximum -> lowest index
        chosen.append(nxt)
        dist = np.minimum(dist, ((pts - pts[nxt]) ** 2).sum(axis=1))
        dist[chosen] = -1.0
    return np.array(chosen, dtype=np.int64)


# ---------------------------------------------------------------------------
# attribute interpolation and canonical mapping


def interpolate_attributes(candidates, positions, scene: CanonicalScene, k: int = 4, radius_scale: float = 3.0):
    """Blend attributes of gated nearest neighbors onto each candidate point.

    ``positions`` are the deformed centers of ``scene`` at the candidate time.
    Returns ``(new_scene, accepted_index, n_rejected)``; ``new_scene`` is
    centered on the accepted candidates (still at time t).
    """
    if len(scene) == 0:
        raise ValueError("cannot interpolate from an empty scene")
    cand = as_tensor(candidates).reshape(-1, 3).numpy()
    pos = as_tensor(positions).reshape(-1, 3).detach().numpy()
    if len(cand) == 0:
        return CanonicalScene.empty(scene.background), np.zeros(0, dtype=np.int64), 0
    kk = min(k, len(pos))
    dist, idx = cKDTree(pos).query(cand, k=kk)
    dist = dist.reshape(len(cand), kk)
    idx = idx.reshape(len(cand), kk)
    scale = scene.scale.detach().numpy()
    rot = scene.rotation.detach().numpy()
    col = scene.color.detach().numpy()
    op = scene.opacity.detach().numpy()
    r_c = radius_scale * 3.0 * scale.mean(axis=1)
    out = {"mu0": [], "scale": [], "rotation": [], "color": [], "opacity": []}
    accepted = []
    for c in range(len(cand)):
        keep = dist[c] < r_c[idx[c]]
        if not keep.any():
            continue
        nb, d = idx[c][keep], dist[c][keep]
        zero = d < 1e-12
        w = zero.astype(np.float64) if zero.any() else 1.0 / d
        w = w / w.sum()
        q = rot[nb].copy()
        q[(q @ q[0]) < 0] *= -1.0
        qs = (w[:, None] * q).sum(axis=0)
        out["mu0"].append(cand[c])
        out["scale"].append(w @ scale[nb])
        out["rotation"].append(qs / np.linalg.norm(qs))
        out["color"].append(w @ col[nb])
        out["opacity"].append(float(w @ op[nb]))
        accepted.append(c)
    if not accepted:
        return CanonicalScene.empty(scene.background), np.zeros(0, dtype=np.int64), len(cand)
    new = CanonicalScene(*(np.array(out[key]) for key in ("mu0", "scale", "rotation", "color", "opacity")),
                         background=scene.background)
    return new, np.array(accepted, dtype=np.int64), len(cand) - len(accepted)


def to_canonical(points_t, field, t, iterations: int = 5):
    """Invert x -> x + D(x, t) by fixed-point iteration x <- g - D(x, t).

    Returns ``(canonical, residuals)`` where ``residuals[n]`` is the largest
    round-trip error after n iterations. Emits :class:`NonContractive` when
    the residual grows; the best iterate is returned in that case.
    """
    g = as_tensor(points_t).reshape(-1, 3)
    with torch.no_grad():
        x = g.clone()
        best, best_res = x, float("inf")
        residuals = []
        grew = False
        for _ in range(iterations):
            x = g - field.displacement(x, t)
            res = (deform(field, x, t) - g).norm(dim=-1)
            r = float(res.max()) if len(res) else 0.0
            if residuals and r > residuals[-1] + 1e-15:
                grew = True
            residuals.append(r)
            if r < best_res:
                best, best_res = x, r
    if grew:
        warnings.warn("deformation inversion residual increased; keeping best iterate", NonContractive)
    return best, residuals


# ---------------------------------------------------------------------------
# orchestration


@dataclass
class FADView:
    """Per-view inputs to one FAD pass, all at the same stamp."""

    cam: CameraModel
    loss_map: torch.Tensor
    mask: DynamicMask
    depth: torch.Tensor
    warp_map: Optional[torch.Tensor] = None


def run_fad(scene: CanonicalScene, field, t, views: Sequence[FADView], cfg: FADConfig = FADConfig(), seed: int = 0):
    """One FAD event. Returns ``(grown_scene, event)``."""
    tv = t.t if hasattr(t, "t") else float(t)
    event = DensifyEvent(tv)
    pts_all = []
    for v, view in enumerate(views):
        loss = view.loss_map.detach().numpy() if isinstance(view.loss_map, torch.Tensor) else np.asarray(view.loss_map)
        sel = select_pixels(loss, gradient_magnitude(loss), view.mask, cfg)
        if cfg.use_warp_map and view.warp_map is not None:
            wm = np.asarray(view.warp_map.detach() if isinstance(view.warp_map, torch.Tensor) else view.warp_map)
            extra = select_pixels(wm, gradient_magnitude(wm), view.mask, cfg)
            sel = np.unique(np.concatenate([sel, extra]), axis=0)
            sel = sel[np.lexsort((sel[:, 0], sel[:, 1]))]
        base = len(event.selected_pixels)
        event.selected_pixels.extend((v, int(x), int(y)) for x, y in sel)
        pts, kept, skipped = lift_pixels(sel, fill_missing_depth(view.depth), view.cam)
        event.reject("missing_depth", skipped)
        pts_all.append(pts)
        event.lifted_source.extend(int(base + i) for i in kept)
    lifted = torch.cat(pts_all) if pts_all else torch.zeros((0, 3), dtype=DTYPE)
    event.lifted_points = lifted.tolist()
    if len(lifted) == 0 or len(scene) == 0:
        event.accepted = CanonicalScene.empty(scene.background)
        return scene, event

    sampled = farthest_point_sample(lifted, cfg.fps_ratio, seed)
    event.sampled = sampled.tolist()
    with torch.no_grad():
        positions = deform(field, scene.mu0.detach(), t)
    new_t, acc, n_rej = interpolate_attributes(lifted[sampled], positions, scene, cfg.k, cfg.radius_scale)
    event.reject("no_neighbor", n_rej)
    if len(acc) > cfg.max_new_per_event:
        event.reject("cap", len(acc) - cfg.max_new_per_event)
        acc = acc[: cfg.max_new_per_event]
        new_t = new_t.subset(torch.arange(cfg.max_new_per_event))
    if len(acc) == 0:
        event.accepted = CanonicalScene.empty(scene.background)
        return scene, event

    canon, _ = to_canonical(new_t.mu0, field, t, cfg.fixed_point_iters)
    new_t.mu0 = canon
    new_t.opacity = new_t.opacity.clamp(min=FAD_OPACITY_FLOOR)
    source = [event.lifted_source[int(sampled[i])] for i in acc]

    # provenance: re-deform and reproject onto the source pixel
    keep = []
    with torch.no_grad():
        moved = deform(field, canon, t)
    for j, s in enumerate(source):
        v, x, y = event.selected_pixels[s]
        p, z = project_points(views[v].cam, moved[j:j + 1])
        err = float((p[0] - torch.tensor([x, y], dtype=DTYPE)).norm())
        if float(z[0]) > 0 and err <= PROVENANCE_TOL_PX:
            keep.append(j)
    event.reject("provenance", len(source) - len(keep))
    new = new_t.subset(torch.as_tensor(keep, dtype=torch.long))
    event.accepted = new
    event.accepted_source = [source[j] for j in keep]
    return scene.concat(new), event


def provenance_errors(event: DensifyEvent, field, cameras: Sequence[CameraModel]) -> np.ndarray:
    """Reprojection distance (px) of every accepted Gaussian to its source pixel."""
    if event.accepted is None or len(event.accepted) == 0:
        return np.zeros(0)
    with torch.no_grad():
        moved = deform(field, event.accepted.mu0, event.t)
    errs = []
    for j, s in enumerate(event.accepted_source):
        v, x, y = event.selected_pixels[s]
        p, _ = project_points(cameras[v], moved[j:j + 1])
        errs.append(float((p[0] - torch.tensor([x, y], dtype=DTYPE)).norm()))
    return np.array(errs)


# ---------------------------------------------------------------------------
# conventional clone / split / prune


@dataclass
class ConventionalConfig:
    grad_threshold: float = 2e-4  # mean pixel-space positional gradient norm
    split_fraction: float = 0.01  # of scene extent
    opacity_floor: float = 0.005
    max_gaussians: int = 4096
    max_new: int = 256
    split_factor: float = 1.6


def scene_extent(scene: CanonicalScene) -> float:
    if len(scene) == 0:
        return 1.0
    mu = scene.mu0.detach()
    return max(float((mu - mu.mean(0)).norm(dim=1).max()), 1e-6)


def conventional_densify_and_prune(scene: CanonicalScene, grad_accum, cfg: ConventionalConfig = ConventionalConfig(),
                                   extent: Optional[float] = None, seed: int = 0):
    """Clone small high-gradient Gaussians, split large ones, drop faint ones.

    ``grad_accum`` is the per-Gaussian average screen-space gradient norm.
    Returns ``(scene, origin)``: ``origin[i]`` is the source row of output row
    ``i`` for surviving Gaussians and -1 for newly created ones.
    """
    n = len(scene)
    g = as_tensor(grad_accum).reshape(-1)
    if g.shape[0] != n:
        raise ShapeMismatch(f"{g.shape[0]} gradient accumulators for {n} Gaussians")
    extent = scene_extent(scene) if extent is None else extent
    split_size = cfg.split_fraction * extent
    t = {k: v.detach() for k, v in scene.tensors().items()}
    big = t["scale"].max(dim=1).values > split_size
    hot = torch.nonzero(g >= cfg.grad_threshold).reshape(-1)
    budget = max(0, min(cfg.max_new, cfg.max_gaussians - n))
    if len(hot) > budget:
        order = torch.argsort(-g[hot], stable=True)[:budget]
        hot = torch.sort(hot[order]).values
    clone = hot[~big[hot]]
    split = hot[big[hot]]
    gen = torch.Generator().manual_seed(seed)

    new_rows = {k: [] for k in t}
    if len(clone):
        for k in t:
            new_rows[k].append(t[k][clone])
    if len(split):
        R = quat_to_rotmat(t["rotation"][split])
        eps = torch.randn((len(split), 3), generator=gen, dtype=DTYPE) * t["scale"][split]
        offset = torch.einsum("nij,nj->ni", R, eps)
        new_rows["mu0"].append(t["mu0"][split] + offset)
        new_rows["scale"].append(t["scale"][split] / cfg.split_factor)
        for k in ("rotation", "color", "opacity"):
            new_rows[k].append(t[k][split])
    # split parents are shrunk and displaced the other way
    upd = {k: v.clone() for k, v in t.items()}
    if len(split):
        upd["mu0"][split] = t["mu0"][split] - offset
        upd["scale"][split] = t["scale"][split] / cfg.split_factor

    keep = torch.nonzero(upd["opacity"] >= cfg.opacity_floor).reshape(-1)
    out = {k: v[keep] for k, v in upd.items()}
    n_new = 0
    if new_rows["mu0"]:
        extra = {k: torch.cat(new_rows[k]) for k in t}
        alive = extra["opacity"] >= cfg.opacity_floor
        for k in t:
            out[k] = torch.cat([out[k], extra[k][alive]])
        n_new = int(alive.sum())
    origin = torch.cat([keep, torch.full((n_new,), -1, dtype=torch.long)])
    return CanonicalScene(background=scene.background.clone(), **out), origin
