"""
Analytic dynamic scenes with exact ground truth.

Images come from the same rasterizer driven by closed-form positions, so any
mismatch during training is due to the model, not the renderer. Flow is the
projected displacement of the Gaussian that owns each pixel (the one with the
largest compositing weight); a pixel is invalid when that Gaussian no longer
owns the pixel where it lands.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import torch
from scipy.spatial import cKDTree

from .errors import DataError, EmptyRecipe
from .io import read_flo, read_mask, read_ppm, write_flo, write_pgm, write_ppm
from .losses import DynamicMask, FlowField
from .rasterizer import front_ids, project_scene, render_positions
from .scene import DTYPE, CameraModel, CanonicalScene, as_tensor, load_cameras, project_points, save_cameras

# pixel ownership for flow and masks; "dominant" = largest compositing weight
OWNER_RULE = "dominant"

# ---------------------------------------------------------------------------
# motions (time measured in frames)


@dataclass(frozen=True)
class Static:
    kind: str = "static"

    def apply(self, x: torch.Tensor, frame: float) -> torch.Tensor:
        return x.clone()


@dataclass(frozen=True)
class Linear:
    velocity: tuple
    kind: str = "linear"

    def apply(self, x, frame):
        return x + as_tensor(self.velocity) * frame


@dataclass(frozen=True)
class Circular:
    center: tuple
    axis: tuple
    omega: float
    kind: str = "circular"

    def apply(self, x, frame):
        c = as_tensor(self.center)
        k = as_tensor(self.axis)
        k = k / k.norm()
        theta = self.omega * frame
        r = x - c
        cos, sin = math.cos(theta), math.sin(theta)
        rot = r * cos + torch.cross(k.expand_as(r), r, dim=-1) * sin + k * (r @ k)[:, None] * (1 - cos)
        return c + rot


@dataclass(frozen=True)
class Scaling:
    center: tuple
    rate: float
    kind: str = "scaling"

    def apply(self, x, frame):
        c = as_tensor(self.center)
        return c + (1.0 + self.rate * frame) * (x - c)


Motion = Union[Static, Linear, Circular, Scaling]
_MOTIONS = {"static": Static, "linear": Linear, "circular": Circular, "scaling": Scaling}


def motion_from_dict(d: dict) -> Motion:
    d = dict(d)
    cls = _MOTIONS[d.pop("kind")]
    return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass
class MotionGroup:
    indices: list
    motion: Motion


@dataclass
class MotionSpec:
    groups: list
    n_frames: int

    def group_index(self, n: int) -> np.ndarray:
        out = np.full(n, -1, dtype=np.int64)
        for gi, grp in enumerate(self.groups):
            out[np.asarray(grp.indices, dtype=np.int64)] = gi
        if np.any(out < 0):
            raise ValueError("motion groups do not cover every Gaussian")
        return out

    def dynamic_indices(self) -> np.ndarray:
        idx = [i for g in self.groups if g.motion.kind != "static" for i in g.indices]
        return np.array(sorted(idx), dtype=np.int64)

    def positions(self, mu0, frame: float) -> torch.Tensor:
        """Positions of every Gaussian at ``frame`` (rows aligned with ``mu0``)."""
        x = as_tensor(mu0).reshape(-1, 3)
        out = x.clone()
        for grp in self.groups:
            if len(grp.indices):
                idx = torch.as_tensor(grp.indices, dtype=torch.long)
                out[idx] = grp.motion.apply(x[idx], frame)
        return out

    def to_dict(self) -> dict:
        return {
            "n_frames": self.n_frames,
            "groups": [{"indices": [int(i) for i in g.indices], "motion": asdict(g.motion)} for g in self.groups],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MotionSpec":
        return cls([MotionGroup(g["indices"], motion_from_dict(g["motion"])) for g in d["groups"]], d["n_frames"])


def oracle_position(spec: MotionSpec, mu0, frame: float, index: int) -> np.ndarray:
    """Analytic position of Gaussian ``index`` (canonical center ``mu0``) at ``frame``."""
    grp = spec.groups[spec.group_index(_count(spec))[index]]
    return grp.motion.apply(as_tensor(mu0).reshape(1, 3), frame)[0].numpy()


def _count(spec: MotionSpec) -> int:
    return sum(len(g.indices) for g in spec.groups)


class OracleField:
    """The analytic motion exposed through the ``displacement(x, t)`` field protocol.

    A query point takes the motion of the group of its nearest canonical
    anchor, so finite-difference probes around a center behave like the
    analytic map of that center's group.
    """

    def __init__(self, spec: MotionSpec, mu0):
        self.spec = spec
        anchors = as_tensor(mu0).reshape(-1, 3).numpy()
        self.tree = cKDTree(anchors)
        self.group = spec.group_index(anchors.shape[0])

    def displacement(self, x: torch.Tensor, t) -> torch.Tensor:
        tv = t.t if hasattr(t, "t") else float(t)
        frame = tv * (self.spec.n_frames - 1)
        _, nearest = self.tree.query(x.detach().numpy())
        groups = self.group[np.atleast_1d(nearest)]
        out = torch.zeros_like(x)
        for gi in np.unique(groups):
            rows = torch.as_tensor(np.nonzero(groups == gi)[0])
            out[rows] = self.spec.groups[gi].motion.apply(x[rows], frame) - x[rows]
        return out


# ---------------------------------------------------------------------------
# recipes


@dataclass
class GroupRecipe:
    count: int
    motion: Motion = field(default_factory=Static)
    layout: str = "random"  # grid | ring | random
    center: tuple = (0.0, 0.0, 0.0)
    size: float = 0.5  # half-extent for grid/random
    radius_band: tuple = (0.5, 1.0)  # ring radii
    scale_range: tuple = (0.05, 0.1)
    opacity_range: tuple = (0.8, 1.0)
    color: Optional[tuple] = None  # None -> random per Gaussian
    color_jitter: float = 0.1


@dataclass
class RigRecipe:
    n_views: int = 5
    radius: float = 4.0
    height: float = 1.0
    look_at: tuple = (0.0, 0.0, 0.0)
    focal: float = 130.0
    arc: float = math.pi / 2  # angular span of the rig


@dataclass
class SceneRecipe:
    groups: list
    rig: RigRecipe = field(default_factory=RigRecipe)
    n_frames: int = 40
    width: int = 128
    height: int = 128
    seed: int = 0
    background: tuple = (0.0, 0.0, 0.0)


def _layout(g: GroupRecipe, rng: np.random.Generator) -> np.ndarray:
    c = np.asarray(g.center, dtype=np.float64)
    n = g.count
    if g.layout == "grid":
        side = int(math.ceil(n ** (1.0 / 3.0) - 1e-9))
        ticks = np.linspace(-g.size, g.size, side) if side > 1 else np.zeros(1)
        pts = np.stack(np.meshgrid(ticks, ticks, ticks, indexing="ij"), -1).reshape(-1, 3)[:n]
        return pts + c
    if g.layout == "ring":
        theta = 2 * math.pi * np.arange(n) / n
        r = rng.uniform(g.radius_band[0], g.radius_band[1], n)
        return c + np.stack([r * np.cos(theta), r * np.sin(theta), np.zeros(n)], -1)
    if g.layout == "random":
        return c + rng.uniform(-g.size, g.size, (n, 3))
    raise ValueError(f"unknown layout {g.layout!r}")


def make_cameras(rig: RigRecipe, width: int, height: int) -> list[CameraModel]:
    cams = []
    target = np.asarray(rig.look_at, dtype=np.float64)
    for i in range(rig.n_views):
        a = -math.pi / 2 + (i - (rig.n_views - 1) / 2) * (rig.arc / max(rig.n_views - 1, 1))
        eye = target + np.array([rig.radius * math.cos(a), rig.radius * math.sin(a), rig.height])
        cams.append(CameraModel.look_at(eye, target, rig.focal, width, height))
    return cams


def make_scene(recipe: SceneRecipe) -> tuple[CanonicalScene, MotionSpec, list[CameraModel]]:
    if not recipe.groups or sum(g.count for g in recipe.groups) == 0:
        raise EmptyRecipe("recipe has no Gaussians")
    if recipe.rig.n_views < 1:
        raise EmptyRecipe("recipe has no cameras")
    rng = np.random.default_rng(recipe.seed)
    mu, sc, rot, col, op, groups = [], [], [], [], [], []
    start = 0
    for g in recipe.groups:
        n = g.count
        mu.append(_layout(g, rng))
        sc.append(rng.uniform(g.scale_range[0], g.scale_range[1], (n, 3)))
        q = rng.normal(size=(n, 4))
        rot.append(q / np.linalg.norm(q, axis=1, keepdims=True))
        if g.color is None:
            col.append(rng.uniform(0.1, 0.9, (n, 3)))
        else:
            col.append(np.clip(np.asarray(g.color) + rng.uniform(-g.color_jitter, g.color_jitter, (n, 3)), 0, 1))
        op.append(rng.uniform(g.opacity_range[0], g.opacity_range[1], n))
        groups.append(MotionGroup(list(range(start, start + n)), g.motion))
        start += n
    scene = CanonicalScene(np.concatenate(mu), np.concatenate(sc), np.concatenate(rot),
                           np.concatenate(col), np.concatenate(op), recipe.background)
    return scene, MotionSpec(groups, recipe.n_frames), make_cameras(recipe.rig, recipe.width, recipe.height)


def two_group_recipe(seed: int = 0, width: int = 128, height: int = 128, n_frames: int = 40,
                     speed: float = 0.05, n_static: int = 48, n_dynamic: int = 16, n_views: int = 5,
                     dynamic_size: float = 0.18, dynamic_scales=(0.05, 0.08),
                     dynamic_opacity=(0.8, 1.0), dynamic_lift: float = 0.0) -> SceneRecipe:
    """A static ring plus one compact group sweeping across it in +x.

    ``dynamic_lift`` raises the moving group above the ring plane.
    """
    travel = speed * (n_frames - 1)
    return SceneRecipe(
        groups=[
            GroupRecipe(n_static, Static(), layout="ring", radius_band=(0.7, 1.1), scale_range=(0.07, 0.11)),
            GroupRecipe(n_dynamic, Linear((speed, 0.0, 0.0)), layout="random", center=(-travel / 2, 0.0, dynamic_lift),
                        size=dynamic_size, scale_range=tuple(dynamic_scales), opacity_range=tuple(dynamic_opacity), color=(0.9, 0.3, 0.2), color_jitter=0.08),
        ],
        rig=RigRecipe(n_views=n_views),
        n_frames=n_frames,
        width=width,
        height=height,
        seed=seed,
    )


# ---------------------------------------------------------------------------
# oracles


def oracle_flow(scene: CanonicalScene, spec: MotionSpec, cam: CameraModel, frame: int) -> FlowField:
    """Flow from ``frame`` to ``frame + 1`` plus occlusion-aware validity."""
    pos0 = spec.positions(scene.mu0, frame)
    pos1 = spec.positions(scene.mu0, frame + 1)
    h, w = cam.height, cam.width
    ids0 = front_ids(project_scene(scene, pos0, cam), w, h, OWNER_RULE)
    ids1 = front_ids(project_scene(scene, pos1, cam), w, h, OWNER_RULE)
    p0, _ = project_points(cam, pos0)
    p1, _ = project_points(cam, pos1)
    disp = (p1 - p0).numpy()
    flow = np.zeros((h, w, 2))
    has = ids0 >= 0
    flow[has] = disp[ids0[has]]
    ys, xs = np.mgrid[0:h, 0:w]
    tx = np.rint(xs + flow[..., 0]).astype(np.int64)
    ty = np.rint(ys + flow[..., 1]).astype(np.int64)
    inside = (tx >= 0) & (tx < w) & (ty >= 0) & (ty < h)
    landed = np.full((h, w), -2, dtype=np.int64)
    landed[inside] = ids1[ty[inside], tx[inside]]
    valid = inside & (landed == ids0)
    return FlowField(torch.as_tensor(flow), torch.as_tensor(valid))


def oracle_mask(scene: CanonicalScene, spec: MotionSpec, cam: CameraModel, frame: int, groups=None) -> DynamicMask:
    """True where the frontmost Gaussian moves (or belongs to ``groups`` when given)."""
    if groups is None:
        members = spec.dynamic_indices()
    else:
        members = np.array(sorted(i for gi in groups for i in spec.groups[gi].indices), dtype=np.int64)
    ids = front_ids(project_scene(scene, spec.positions(scene.mu0, frame), cam), cam.width, cam.height, OWNER_RULE)
    return DynamicMask(torch.as_tensor(np.isin(ids, members) & (ids >= 0)))


def oracle_image(scene: CanonicalScene, spec: MotionSpec, cam: CameraModel, frame: float) -> torch.Tensor:
    return render_positions(scene, spec.positions(scene.mu0, frame), cam, with_velocity=False).color


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    """Multi-view video with flows and masks. Arrays are indexed [view][frame]."""

    cameras: list
    images: list  # [V][F] (H, W, 3) float64
    flows: list  # [V][F-1] FlowField
    masks: list  # [V][F] DynamicMask
    scene: CanonicalScene  # initialization cloud
    n_frames: int
    motion: Optional[MotionSpec] = None

    @property
    def n_views(self) -> int:
        return len(self.cameras)


def synthesize(scene: CanonicalScene, spec: MotionSpec, cameras: Sequence[CameraModel], workers: int = 1) -> Dataset:
    """Render every view/frame of the oracle scene. Output does not depend on ``workers``."""
    n = spec.n_frames

    def one_view(v: int):
        cam = cameras[v]
        with torch.no_grad():
            imgs = [oracle_image(scene, spec, cam, k) for k in range(n)]
            flows = [oracle_flow(scene, spec, cam, k) for k in range(n - 1)]
            masks = [oracle_mask(scene, spec, cam, k) for k in range(n)]
        return imgs, flows, masks

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            per_view = list(pool.map(one_view, range(len(cameras))))
    else:
        per_view = [one_view(v) for v in range(len(cameras))]
    return Dataset(
        cameras=list(cameras),
        images=[p[0] for p in per_view],
        flows=[p[1] for p in per_view],
        masks=[p[2] for p in per_view],
        scene=scene,
        n_frames=n,
        motion=spec,
    )


def write_dataset(ds: Dataset, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_cameras(ds.cameras, out / "cameras.json")
    ds.scene.save(out / "scene.json")
    if ds.motion is not None:
        (out / "motion.json").write_text(json.dumps(ds.motion.to_dict(), indent=1) + "\n")
    for v in range(ds.n_views):
        d = out / f"cam_{v:02d}"
        d.mkdir(exist_ok=True)
        for k in range(ds.n_frames):
            write_ppm(d / f"frame_{k:04d}.ppm", ds.images[v][k].numpy())
            write_pgm(d / f"mask_{k:04d}.pgm", ds.masks[v][k].mask.numpy())
        for k in range(ds.n_frames - 1):
            fl = ds.flows[v][k]
            write_flo(d / f"flow_{k:04d}.flo", fl.data.numpy(), fl.valid.numpy())


def load_dataset(in_dir) -> Dataset:
    root = Path(in_dir)
    if not (root / "cameras.json").exists():
        raise DataError(f"{root} is not a dataset directory (no cameras.json)")
    cameras = load_cameras(root / "cameras.json")
    scene = CanonicalScene.load(root / "scene.json")
    motion = None
    if (root / "motion.json").exists():
        motion = MotionSpec.from_dict(json.loads((root / "motion.json").read_text()))
    images, flows, masks = [], [], []
    n_frames = None
    for v in range(len(cameras)):
        d = root / f"cam_{v:02d}"
        frames = sorted(d.glob("frame_*.ppm"))
        if n_frames is None:
            n_frames = len(frames)
        if len(frames) != n_frames or n_frames < 2:
            raise DataError(f"{d}: expected {n_frames} frames, found {len(frames)}")
        images.append([torch.as_tensor(read_ppm(f)) for f in frames])
        vf = []
        for k in range(n_frames - 1):
            data, valid = read_flo(d / f"flow_{k:04d}.flo")
            vf.append(FlowField(torch.as_tensor(data.astype(np.float64)), torch.as_tensor(valid)))
        flows.append(vf)
        mk = []
        for k in range(n_frames):
            p = d / f"mask_{k:04d}.pgm"
            mk.append(DynamicMask(torch.as_tensor(read_mask(p)) if p.exists() else torch.zeros(images[-1][0].shape[:2], dtype=torch.bool)))
        masks.append(mk)
    return Dataset(cameras, images, flows, masks, scene, n_frames, motion)


def recipe_to_dict(recipe: SceneRecipe) -> dict:
    d = asdict(recipe)
    return d


def recipe_from_dict(d: dict) -> SceneRecipe:
    groups = []
    for g in d["groups"]:
        g = dict(g)
        g["motion"] = motion_from_dict(g.get("motion", {"kind": "static"}))
        for key in ("center", "radius_band", "scale_range", "opacity_range", "color"):
            if g.get(key) is not None:
                g[key] = tuple(g[key])
        groups.append(GroupRecipe(**g))
    rig = RigRecipe(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.get("rig", {}).items()})
    rest = {k: v for k, v in d.items() if k not in ("groups", "rig")}
    if "background" in rest:
        rest["background"] = tuple(rest["background"])
    return SceneRecipe(groups=groups, rig=rig, **rest)
