"""
Optimization loop: sliding-window sampling, loss assembly, Adam updates,
densification scheduling and checkpoints.

Gradients are computed per rendered frame and summed in frame order, so the
result does not depend on how many worker threads evaluate the frames.
"""
from __future__ import annotations

import csv
import json
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import torch

from .deformation import DeformationField, TimeStamp, deform
from .densify import (
    ConventionalConfig,
    DensifyEvent,
    FADConfig,
    FADView,
    append_event_log,
    conventional_densify_and_prune,
    run_fad,
    scene_extent,
)
from .errors import DataError, NonFiniteLoss
from .losses import LossReport, LossWeights, combine, loss_dyn, loss_photometric, loss_warp, loss_win
from .rasterizer import render
from .scene import DTYPE, CanonicalScene
from .synthetic import Dataset, load_dataset

GAUSSIAN_KEYS = ("mu0", "scale", "rotation", "color", "opacity")
MIN_SCALE = 1e-5
OPT_MAGIC = b"FSOS"
OPT_VERSION = 1


@dataclass
class LearningRates:
    centers: float = 1.6e-4  # multiplied by the scene extent
    scales: float = 5e-3
    rotations: float = 1e-3
    colors: float = 2.5e-3
    opacities: float = 5e-2
    field: float = 1e-3


@dataclass
class TrainConfig:
    iterations: int = 3000
    lr: LearningRates = field(default_factory=LearningRates)
    weights: LossWeights = field(default_factory=LossWeights)
    tau: int = 8
    warmup_static_iters: int = 500
    flow_losses: bool = True  # False trains on the photometric term only
    densify: bool = True
    densify_every: int = 100
    densify_from: int = 500
    densify_until: Optional[int] = None  # defaults to iterations
    conventional: ConventionalConfig = field(default_factory=ConventionalConfig)
    fad: bool = True
    fad_every: int = 500
    fad_config: FADConfig = field(default_factory=FADConfig)
    holdout: list = field(default_factory=lambda: [0])
    seed: int = 0
    field_width: int = 64
    spatial_bands: int = 6
    time_bands: int = 4
    log_every: int = 1

    def __post_init__(self):
        if self.tau < 1:
            raise ValueError("tau must be at least 1")
        for f in fields(self.lr):
            if not getattr(self.lr, f.name) > 0:
                raise ValueError(f"learning rate {f.name} must be positive")

    @property
    def stop_densify(self) -> int:
        return self.iterations if self.densify_until is None else self.densify_until

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "lr" in d:
            d["lr"] = LearningRates(**d["lr"])
        if "weights" in d:
            d["weights"] = LossWeights(**d["weights"])
        if "conventional" in d:
            d["conventional"] = ConventionalConfig(**d["conventional"])
        if "fad_config" in d:
            d["fad_config"] = FADConfig(**d["fad_config"])
        return cls(**d)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError, TypeError) as exc:
            raise DataError(f"cannot read config {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# parameters and optimizer


class GaussianParams:
    """Trainable Gaussian attributes as leaf tensors."""

    def __init__(self, scene: CanonicalScene):
        self.background = scene.background.detach().clone()
        self.tensors = {k: v.detach().clone().requires_grad_(True) for k, v in scene.tensors().items()}

    def scene(self) -> CanonicalScene:
        """A scene view sharing the leaf tensors (renders stay differentiable)."""
        s = CanonicalScene.empty(self.background)
        for k, v in self.tensors.items():
            setattr(s, k, v)
        return s

    def snapshot(self) -> CanonicalScene:
        return self.scene().detached()

    def __len__(self) -> int:
        return self.tensors["mu0"].shape[0]

    def project(self) -> None:
        """Restore the attribute invariants after an update."""
        with torch.no_grad():
            t = self.tensors
            t["color"].clamp_(0.0, 1.0)
            t["opacity"].clamp_(0.0, 1.0)
            t["scale"].clamp_(min=MIN_SCALE)
            q = t["rotation"]
            norm = q.norm(dim=1, keepdim=True)
            bad = (norm[:, 0] < 1e-12) | ~torch.isfinite(norm[:, 0])
            # rows already unit are left alone so the projection is idempotent
            off = (norm[:, 0] - 1.0).abs() > 1e-12
            q[off] = q[off] / norm[off].clamp(min=1e-12)
            if bad.any():
                q[bad] = torch.tensor([1.0, 0.0, 0.0, 0.0], dtype=DTYPE)


class Adam:
    """Adam with named groups, row surgery for densification and a byte-exact state format."""

    def __init__(self, groups: dict, betas=(0.9, 0.999), eps: float = 1e-15):
        self.params = {k: list(v["params"]) for k, v in groups.items()}
        self.lr = {k: float(v["lr"]) for k, v in groups.items()}
        self.betas = betas
        self.eps = eps
        self.steps = 0
        self.m = {k: [torch.zeros_like(p) for p in ps] for k, ps in self.params.items()}
        self.v = {k: [torch.zeros_like(p) for p in ps] for k, ps in self.params.items()}

    def step(self, grads: dict) -> None:
        self.steps += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.steps
        c2 = 1.0 - b2 ** self.steps
        with torch.no_grad():
            for name, ps in self.params.items():
                gs = grads.get(name)
                if gs is None:
                    continue
                for p, g, m, v in zip(ps, gs, self.m[name], self.v[name]):
                    if g is None:
                        continue
                    m.mul_(b1).add_(g, alpha=1 - b1)
                    v.mul_(b2).addcmul_(g, g, value=1 - b2)
                    p.sub_(self.lr[name] * (m / c1) / ((v / c2).sqrt() + self.eps))

    def replace_rows(self, name: str, new_param: torch.Tensor, origin: torch.Tensor) -> None:
        """Swap the single tensor of ``name`` for ``new_param``; state follows ``origin`` (-1 = fresh)."""
        keep = origin >= 0
        for store in (self.m, self.v):
            old = store[name][0]
            fresh = torch.zeros_like(new_param)
            fresh[keep] = old[origin[keep]]
            store[name][0] = fresh
        self.params[name][0] = new_param

    # serialization: magic, version, steps, betas, eps, n_groups, then per group
    # name, lr, n_tensors and per tensor ndim, shape, m, v (little-endian f64)
    def to_bytes(self) -> bytes:
        out = [OPT_MAGIC, struct.pack("<IQddd", OPT_VERSION, self.steps, self.betas[0], self.betas[1], self.eps)]
        out.append(struct.pack("<I", len(self.params)))
        for name in sorted(self.params):
            nb = name.encode()
            out.append(struct.pack("<I", len(nb)) + nb)
            out.append(struct.pack("<dI", self.lr[name], len(self.params[name])))
            for m, v in zip(self.m[name], self.v[name]):
                out.append(struct.pack("<I", m.dim()) + struct.pack(f"<{m.dim()}Q", *m.shape))
                out.append(m.detach().numpy().astype("<f8").tobytes())
                out.append(v.detach().numpy().astype("<f8").tobytes())
        return b"".join(out)

    def load_bytes(self, data: bytes) -> None:
        """Restore state into an optimizer built over parameters of matching shapes."""
        if data[:4] != OPT_MAGIC:
            raise DataError("not an optimizer state file")
        try:
            version, steps, b1, b2, eps = struct.unpack_from("<IQddd", data, 4)
            if version != OPT_VERSION:
                raise DataError(f"unsupported optimizer state version {version}")
            off = 4 + struct.calcsize("<IQddd")
            (n_groups,) = struct.unpack_from("<I", data, off)
            off += 4
            for _ in range(n_groups):
                (ln,) = struct.unpack_from("<I", data, off)
                off += 4
                name = data[off:off + ln].decode()
                off += ln
                lr, n_t = struct.unpack_from("<dI", data, off)
                off += struct.calcsize("<dI")
                if name not in self.params or n_t != len(self.params[name]):
                    raise DataError(f"optimizer group {name!r} does not match the model")
                for i in range(n_t):
                    (nd,) = struct.unpack_from("<I", data, off)
                    off += 4
                    shape = struct.unpack_from(f"<{nd}Q", data, off)
                    off += 8 * nd
                    if tuple(shape) != tuple(self.params[name][i].shape):
                        raise DataError(f"optimizer tensor {name}[{i}] has shape {shape}")
                    cnt = int(np.prod(shape)) if nd else 1
                    m = np.frombuffer(data, "<f8", cnt, off).reshape(shape)
                    off += 8 * cnt
                    v = np.frombuffer(data, "<f8", cnt, off).reshape(shape)
                    off += 8 * cnt
                    self.m[name][i] = torch.from_numpy(m.copy())
                    self.v[name][i] = torch.from_numpy(v.copy())
                self.lr[name] = lr
        except (struct.error, ValueError) as exc:
            raise DataError(f"truncated optimizer state: {exc}") from exc
        if off != len(data):
            raise DataError("trailing bytes in optimizer state")
        self.steps, self.betas, self.eps = steps, (b1, b2), eps


def build_optimizer(params: GaussianParams, fld: DeformationField, lr: LearningRates, extent: float) -> Adam:
    t = params.tensors
    return Adam({
        "mu0": {"params": [t["mu0"]], "lr": lr.centers * extent},
        "scale": {"params": [t["scale"]], "lr": lr.scales},
        "rotation": {"params": [t["rotation"]], "lr": lr.rotations},
        "color": {"params": [t["color"]], "lr": lr.colors},
        "opacity": {"params": [t["opacity"]], "lr": lr.opacities},
        "field": {"params": list(fld.parameters()), "lr": lr.field},
    })


# ---------------------------------------------------------------------------
# windows and the step


@dataclass(frozen=True)
class Window:
    start: int
    camera: int
    stamps: tuple

    @property
    def tau(self) -> int:
        return len(self.stamps) - 1


def sample_window(n_frames: int, tau: int, iteration: int, cameras: Sequence[int], seed: int) -> Window:
    """Uniform start with start + tau <= n_frames - 1 and a uniform training camera."""
    if tau < 1 or tau > n_frames - 1:
        raise ValueError(f"tau={tau} does not fit {n_frames} frames")
    if not len(cameras):
        raise ValueError("no training cameras")
    rng = np.random.default_rng([seed, iteration])
    start = int(rng.integers(0, n_frames - tau))
    cam = int(cameras[int(rng.integers(0, len(cameras)))])
    return Window(start, cam, tuple(TimeStamp.frame(start + j, n_frames) for j in range(tau + 1)))


@dataclass
class StepResult:
    report: LossReport
    grads: dict
    means2d_grad: torch.Tensor  # (N,) summed screen-space gradient norm
    visible_count: torch.Tensor  # (N,) frames in which the Gaussian was drawn
    grad_norm_gaussians: float
    grad_norm_field: float


def _map_frames(fn, items, workers: int):
    if workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(min(workers, len(items))) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def _first_nonfinite(params: GaussianParams):
    for i in range(len(params)):
        for k in GAUSSIAN_KEYS:
            if not torch.isfinite(params.tensors[k][i]).all():
                return i
    return None


def compute_step(params: GaussianParams, fld, window: Window, data: Dataset, weights: LossWeights,
                 flow_losses: bool = True, workers: int = 1) -> StepResult:
    """Forward and backward for one window without touching parameters."""
    scene = params.scene()
    cam = data.cameras[window.camera]
    n_vel = window.tau if flow_losses else 0
    leaves = [params.tensors[k] for k in GAUSSIAN_KEYS]
    fparams = list(fld.parameters())

    def forward(j: int):
        buf = render(scene, fld, window.stamps[j], cam, with_velocity=j < n_vel)
        return buf

    bufs = _map_frames(forward, list(range(window.tau + 1)), workers)

    # losses on detached copies; their gradients are the per-frame upstreams
    colors = [b.color.detach().requires_grad_(True) for b in bufs]
    vels = [b.velocity.detach().requires_grad_(True) for b in bufs[:n_vel]]
    frames = [window.start + j for j in range(window.tau + 1)]
    truth = [data.images[window.camera][k] for k in frames]
    photo = torch.stack([loss_photometric(c, gt) for c, gt in zip(colors, truth)]).mean()
    zero = photo * 0.0
    win = warp = dyn = zero
    win_map = warp_map = None
    if flow_losses:
        win, win_map = loss_win(vels, [data.flows[window.camera][k] for k in frames[:-1]], window.tau)
        warps = [loss_warp(colors[j + 1], vels[j], truth[j]) for j in range(window.tau)]
        warp = torch.stack([w[0] for w in warps]).mean()
        warp_map = warps[0][1]
        dyn = torch.stack([loss_dyn(c, gt, data.masks[window.camera][k]) for c, gt, k in zip(colors, truth, frames)]).mean()
    report = combine(photo, win, warp, dyn, weights, win_map, warp_map)
    if not torch.isfinite(report.total):
        bad = _first_nonfinite(params)
        pixel = None
        for b in bufs:
            nf = ~torch.isfinite(b.color).all(dim=-1)
            if nf.any():
                y, x = (int(v) for v in torch.nonzero(nf)[0])
                pixel = (x, y)
                break
        raise NonFiniteLoss(f"non-finite loss at window start {window.start} (gaussian {bad}, pixel {pixel})", bad, pixel)
    ups = torch.autograd.grad(report.total, colors + vels, allow_unused=True)
    up_c, up_v = ups[: len(colors)], ups[len(colors):]

    def backward(j: int):
        b = bufs[j]
        outs, gouts = [b.color], [up_c[j] if up_c[j] is not None else torch.zeros_like(b.color)]
        if j < n_vel:
            outs.append(b.velocity)
            gouts.append(up_v[j] if up_v[j] is not None else torch.zeros_like(b.velocity))
        inputs = leaves + fparams
        has_meta = b.meta.means2d.requires_grad and len(b.meta.index) > 0
        if has_meta:
            inputs = inputs + [b.meta.means2d]
        live = [(o, go) for o, go in zip(outs, gouts) if o.requires_grad]
        if live:
            got = torch.autograd.grad([o for o, _ in live], inputs, [go for _, go in live], allow_unused=True)
        else:  # nothing drawn: the frame is constant in every parameter
            got = [None] * len(inputs)
        g = [torch.zeros_like(p) if x is None else x for p, x in zip(leaves + fparams, got)]
        n = len(params)
        m2d = torch.zeros(n, dtype=DTYPE)
        seen = torch.zeros(n, dtype=DTYPE)
        if has_meta and got[-1] is not None:
            m2d[b.meta.index] = got[-1].norm(dim=-1)
            seen[b.meta.index] = 1.0
        return g, m2d, seen

    per_frame = _map_frames(backward, list(range(window.tau + 1)), workers)
    total = [torch.zeros_like(p) for p in leaves + fparams]
    m2d = torch.zeros(len(params), dtype=DTYPE)
    seen = torch.zeros(len(params), dtype=DTYPE)
    for g, m, s in per_frame:  # fixed frame order
        total = [a + b for a, b in zip(total, g)]
        m2d = m2d + m
        seen = seen + s
    grads = {k: [total[i]] for i, k in enumerate(GAUSSIAN_KEYS)}
    grads["field"] = total[len(GAUSSIAN_KEYS):]
    gn = math.sqrt(sum(float((x * x).sum()) for x in total[: len(GAUSSIAN_KEYS)]))
    fn = math.sqrt(sum(float((x * x).sum()) for x in total[len(GAUSSIAN_KEYS):]))
    return StepResult(report, grads, m2d, seen, gn, fn)


def train_step(params: GaussianParams, fld, opt: Adam, window: Window, data: Dataset, cfg: TrainConfig,
               flow_losses: bool = True, workers: int = 1) -> StepResult:
    """One Adam update on the window; Gaussian invariants are restored afterwards."""
    res = compute_step(params, fld, window, data, cfg.weights, flow_losses, workers)
    opt.step(res.grads)
    params.project()
    return res


# ---------------------------------------------------------------------------
# logs and checkpoints


LOG_COLUMNS = ("iteration", "camera", "start", "photometric", "win", "warp", "dyn", "total", "n_gaussians",
               "grad_norm_gaussians", "grad_norm_field")


class TrainLog:
    """Append-only per-iteration scalars plus evaluation rows."""

    def __init__(self):
        self.rows: list[dict] = []
        self.evals: list[dict] = []
        self.events: list[dict] = []
        self.fad_events: list[DensifyEvent] = []

    def append(self, row: dict) -> None:
        self.rows.append({k: row[k] for k in LOG_COLUMNS})

    def column(self, name: str) -> list:
        return [r[name] for r in self.rows]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(LOG_COLUMNS)
            for r in self.rows:
                w.writerow([repr(r[k]) if isinstance(r[k], float) else r[k] for k in LOG_COLUMNS])

    @classmethod
    def read_csv(cls, path) -> "TrainLog":
        log = cls()
        with open(path, newline="") as fh:
            rd = csv.DictReader(fh)
            for r in rd:
                log.rows.append({k: (int(r[k]) if k in ("iteration", "camera", "start", "n_gaussians") else float(r[k]))
                                 for k in LOG_COLUMNS})
        return log


@dataclass
class Checkpoint:
    scene: CanonicalScene
    field: DeformationField
    optimizer_state: bytes = b""
    iteration: int = 0

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        self.scene.save(out / "scene.json")
        self.field.save(out / "field.bin")
        (out / "optimizer.bin").write_bytes(self.optimizer_state)

    @classmethod
    def load(cls, in_dir) -> "Checkpoint":
        root = Path(in_dir)
        for name in ("scene.json", "field.bin"):
            if not (root / name).exists():
                raise DataError(f"{root} is missing {name}")
        opt = (root / "optimizer.bin").read_bytes() if (root / "optimizer.bin").exists() else b""
        it = struct.unpack_from("<Q", opt, 8)[0] if len(opt) >= 16 else 0
        return cls(CanonicalScene.load(root / "scene.json"), DeformationField.load(root / "field.bin"), opt, it)


# ---------------------------------------------------------------------------
# the loop


def _fad_views(params: GaussianParams, fld, data: Dataset, frame: int, cameras: Sequence[int]) -> list[FADView]:
    scene = params.snapshot()
    stamp = TimeStamp.frame(frame, data.n_frames)
    views = []
    with torch.no_grad():
        for c in cameras:
            buf = render(scene, fld, stamp, data.cameras[c])
            gt = data.flows[c][frame]
            err = (buf.velocity - gt.data).abs().sum(-1) * gt.valid
            views.append(FADView(data.cameras[c], err, data.masks[c][frame], buf.depth))
    return views


def run(cfg: TrainConfig, dataset: Union[str, Path, Dataset], out_dir=None, workers: int = 1,
        init_scene: Optional[CanonicalScene] = None, progress=None):
    """Train from the dataset's initialization cloud. Returns ``(Checkpoint, TrainLog)``.

    The intra-op thread count is pinned to one so results are bitwise
    reproducible for any ``workers`` value. ``progress(it, result, field)``
    runs after each optimizer step and before any densification that
    iteration triggers.
    """
    torch.set_num_threads(1)
    data = dataset if isinstance(dataset, Dataset) else load_dataset(dataset)
    scene0 = init_scene if init_scene is not None else data.scene
    extent = scene_extent(data.scene)
    fld = DeformationField(cfg.spatial_bands, cfg.time_bands, cfg.field_width, extent=extent, seed=cfg.seed)
    params = GaussianParams(scene0)
    opt = build_optimizer(params, fld, cfg.lr, extent)
    log = TrainLog()
    train_cams = [c for c in range(data.n_views) if c not in set(cfg.holdout)] or list(range(data.n_views))
    m2d_acc = torch.zeros(len(params), dtype=DTYPE)
    seen_acc = torch.zeros(len(params), dtype=DTYPE)
    events_path = Path(out_dir) / "densify.jsonl" if out_dir is not None else None
    if events_path is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        events_path.write_text("")

    for it in range(cfg.iterations):
        window = sample_window(data.n_frames, cfg.tau, it, train_cams, cfg.seed)
        full = cfg.flow_losses and it >= cfg.warmup_static_iters
        res = train_step(params, fld, opt, window, data, cfg, flow_losses=full, workers=workers)
        m2d_acc += res.means2d_grad
        seen_acc += res.visible_count
        if it % cfg.log_every == 0 or it == cfg.iterations - 1:
            row = dict(res.report.scalars(), iteration=it, camera=window.camera, start=window.start,
                       n_gaussians=len(params), grad_norm_gaussians=res.grad_norm_gaussians,
                       grad_norm_field=res.grad_norm_field)
            log.append(row)
        if progress is not None:
            progress(it, res, fld)

        step_no = it + 1
        in_range = cfg.densify_from <= step_no <= cfg.stop_densify
        grew = False
        if cfg.densify and in_range and step_no % cfg.densify_every == 0:
            avg = m2d_acc / seen_acc.clamp(min=1.0)
            scene, origin = conventional_densify_and_prune(params.snapshot(), avg, cfg.conventional, extent,
                                                           seed=cfg.seed * 1000003 + step_no)
            _swap_scene(params, opt, scene, origin)
            grew = True
        if cfg.fad and full and in_range and step_no % cfg.fad_every == 0:
            rng = np.random.default_rng([cfg.seed, step_no, 7])
            frame = int(rng.integers(0, data.n_frames - 1))
            views = _fad_views(params, fld, data, frame, train_cams)
            scene, event = run_fad(params.snapshot(), fld, TimeStamp.frame(frame, data.n_frames), views,
                                   cfg.fad_config, seed=cfg.seed)
            n_old = len(params)
            origin = torch.cat([torch.arange(n_old), torch.full((len(scene) - n_old,), -1, dtype=torch.long)])
            _swap_scene(params, opt, scene, origin)
            log.events.append({"iteration": step_no, "frame": frame, "accepted": event.n_accepted,
                               "selected": len(event.selected_pixels), "rejected": dict(event.rejected)})
            if events_path is not None:
                append_event_log(events_path, event)
            log.fad_events.append(event)
            grew = True
        if grew:
            m2d_acc = torch.zeros(len(params), dtype=DTYPE)
            seen_acc = torch.zeros(len(params), dtype=DTYPE)

    ckpt = Checkpoint(params.snapshot(), fld, opt.to_bytes(), cfg.iterations)
    if out_dir is not None:
        ckpt.save(out_dir)
        log.write_csv(Path(out_dir) / "train_log.csv")
    return ckpt, log


def _swap_scene(params: GaussianParams, opt: Adam, scene: CanonicalScene, origin: torch.Tensor) -> None:
    fresh = GaussianParams(scene)
    params.tensors = fresh.tensors
    for k in GAUSSIAN_KEYS:
        opt.replace_rows(k, params.tensors[k], origin)
