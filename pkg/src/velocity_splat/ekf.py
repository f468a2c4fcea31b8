"""
Trajectory refinement: a per-Gaussian extended Kalman filter over the
deformed centers, corrected by optical flow accumulated from frame 0.

The motion model is the learned deformation linearized around each track's
canonical anchor. Observations come from one or more static cameras: for
view ``v`` the flow maps are chained from the Gaussian's frame-0 pixel, and
the filter compares the projected state against the chained location.
Only tracks that sit on the rendered surface are corrected.
"""
from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np
import torch

from .deformation import TimeStamp, deform, deformation_jacobian
from .errors import BehindCamera, SingularInnovation, SingularJacobian
from .losses import FlowField, bilinear_sample
from .scene import DTYPE, Z_NEAR, CameraModel, CanonicalScene, as_tensor, project_points

log = logging.getLogger(__name__)

COND_LIMIT = 1e8
PSD_TOL = -1e-10


@dataclass
class NoiseModel:
    Q: np.ndarray = field(default_factory=lambda: 1e-4 * np.eye(3))
    Rn: np.ndarray = field(default_factory=lambda: 0.5 * np.eye(2))
    P0: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    gate: Optional[float] = 13.8  # chi-square (2 dof, 99.9%) innovation gate; None disables

    def __post_init__(self):
        self.Q = np.asarray(self.Q, dtype=np.float64)
        self.Rn = np.asarray(self.Rn, dtype=np.float64)
        self.P0 = np.asarray(self.P0, dtype=np.float64)
        for name, m in (("Q", self.Q), ("Rn", self.Rn)):
            if not np.allclose(m, m.T):
                raise ValueError(f"{name} must be symmetric")
        if np.linalg.eigvalsh(self.Rn).min() <= 0:
            raise ValueError("Rn must be positive definite")
        if np.linalg.eigvalsh(self.Q).min() < 0:
            raise ValueError("Q must be positive semidefinite")


@dataclass
class EKFTrack:
    """Filter state of one Gaussian. Per-view arrays are indexed by camera."""

    x: np.ndarray
    P: np.ndarray
    p0: np.ndarray  # (V, 2)
    z_accum: np.ndarray  # (V, 2)
    visible: np.ndarray  # (V,)
    mu0: np.ndarray
    index: int = 0
    min_eig: float = 0.0
    log: list = field(default_factory=list)

    def copy(self) -> "EKFTrack":
        return EKFTrack(self.x.copy(), self.P.copy(), self.p0.copy(), self.z_accum.copy(), self.visible.copy(),
                        self.mu0.copy(), self.index, self.min_eig, list(self.log))


# ---------------------------------------------------------------------------
# linear-algebra core


def symmetrize_psd(P: np.ndarray) -> tuple[np.ndarray, float]:
    """Symmetrize and floor eigenvalues at zero. Returns ``(P, min_eig_before_floor)``."""
    S = 0.5 * (P + P.T)
    w, V = np.linalg.eigh(S)
    lo = float(w.min())
    if lo < PSD_TOL:
        log.warning("covariance lost positive semidefiniteness (min eig %.3e)", lo)
    if lo < 0:
        S = (V * np.clip(w, 0.0, None)) @ V.T
        S = 0.5 * (S + S.T)
    return S, lo


def forecast(x, P, F, Q, shift) -> tuple[np.ndarray, np.ndarray]:
    """x_f = x + shift, P_f = F P F^T + Q (``shift`` already includes the linear term)."""
    return np.asarray(x) + shift, F @ P @ F.T + Q


def innovation_distance(P_f, z, h_xf, H, Rn) -> float:
    """Squared Mahalanobis length of the innovation under H P H^T + Rn."""
    H = np.atleast_2d(H)
    S = H @ np.atleast_2d(P_f) @ H.T + np.atleast_2d(Rn)
    y = np.atleast_1d(z) - np.atleast_1d(h_xf)
    return float(y @ np.linalg.solve(S, y))


def assimilate(x_f, P_f, z, h_xf, H, Rn):
    """Standard EKF correction. Returns ``(x, P, K)``.

    Raises :class:`SingularInnovation` when H P H^T + Rn cannot be inverted.
    """
    x_f, P_f, H = np.atleast_1d(x_f), np.atleast_2d(P_f), np.atleast_2d(H)
    S = H @ P_f @ H.T + np.atleast_2d(Rn)
    if not np.all(np.isfinite(S)) or np.linalg.cond(S) > 1.0 / np.finfo(np.float64).eps:
        raise SingularInnovation("innovation covariance is singular")
    K = np.linalg.solve(S.T, (P_f @ H.T).T).T
    x = x_f + K @ (np.atleast_1d(z) - np.atleast_1d(h_xf))
    P = (np.eye(len(x_f)) - K @ H) @ P_f
    return x, P, K


# ---------------------------------------------------------------------------
# model Jacobians and observations


def _stamp(t):
    return t if isinstance(t, TimeStamp) else TimeStamp(float(t), 1.0)


def transition_from_jacobians(J_prev: np.ndarray, J_cur: np.ndarray) -> np.ndarray:
    """J_cur @ inv(J_prev); raises :class:`SingularJacobian` when J_prev is ill-conditioned."""
    if not np.all(np.isfinite(J_prev)) or np.linalg.cond(J_prev) >= COND_LIMIT:
        raise SingularJacobian("deformation Jacobian at the previous stamp is not invertible")
    return np.linalg.solve(J_prev.T, J_cur.T).T


def jacobian_f(field, mu0, t_prev, t, delta: float = 1e-3) -> np.ndarray:
    """Transition Jacobian for t_prev -> t from finite-difference deformation Jacobians."""
    Jp = deformation_jacobian(field, mu0, t_prev, delta).numpy()
    Jc = deformation_jacobian(field, mu0, t, delta).numpy()
    return transition_from_jacobians(Jp, Jc)


def _project(cam: CameraModel, x) -> np.ndarray:
    p, z = project_points(cam, as_tensor(x).reshape(1, 3))
    if float(z[0]) <= Z_NEAR:
        raise BehindCamera(f"point at camera depth {float(z[0]):.4g}")
    return p[0].numpy()


def observe_h(x, field, mu0, t: TimeStamp, cam: CameraModel, displacement=None) -> np.ndarray:
    """Projected per-frame motion of a Gaussian placed at ``x``.

    The 3D step is the nominal one, Phi_{t+dt}(mu0) - Phi_t(mu0), unless
    ``displacement`` is given. Raises :class:`BehindCamera`.
    """
    x = np.asarray(x, dtype=np.float64)
    if displacement is None:
        with torch.no_grad():
            m = as_tensor(mu0).reshape(1, 3)
            step = (deform(field, m, t.shifted(1)) - deform(field, m, t))[0].numpy()
    else:
        step = np.asarray(displacement, dtype=np.float64)
    return _project(cam, x + step) - _project(cam, x)


def jacobian_h(x, field, mu0, t: TimeStamp, cam: CameraModel, delta: float = 1e-3) -> np.ndarray:
    """Central differences of :func:`observe_h` in ``x`` (2, 3)."""
    x = np.asarray(x, dtype=np.float64)
    with torch.no_grad():
        m = as_tensor(mu0).reshape(1, 3)
        step = (deform(field, m, t.shifted(1)) - deform(field, m, t))[0].numpy()
    H = np.zeros((2, 3))
    for j in range(3):
        e = np.zeros(3)
        e[j] = delta
        H[:, j] = (observe_h(x + e, field, mu0, t, cam, step) - observe_h(x - e, field, mu0, t, cam, step)) / (2 * delta)
    return H


def position_jacobian(cam: CameraModel, x, delta: float = 1e-3) -> np.ndarray:
    """Central differences of the pixel projection at ``x`` (2, 3)."""
    x = np.asarray(x, dtype=np.float64)
    pts = np.concatenate([x + np.eye(3) * delta, x - np.eye(3) * delta])
    p, z = project_points(cam, as_tensor(pts))
    if float(z.min()) <= Z_NEAR:
        raise BehindCamera("finite-difference stencil crosses the near plane")
    p = p.numpy()
    return ((p[:3] - p[3:]) / (2 * delta)).T


# ---------------------------------------------------------------------------
# flow lookup and surface test


class FlowSample(NamedTuple):
    z: np.ndarray
    in_bounds: bool
    valid: bool


def sample_flow(flow: FlowField, point) -> FlowSample:
    """Bilinear, border-clamped flow at a sub-pixel location."""
    x = torch.tensor([float(point[0])], dtype=DTYPE)
    y = torch.tensor([float(point[1])], dtype=DTYPE)
    z, inside = bilinear_sample(flow.data, x, y)
    h, w = flow.valid.shape
    xc, yc = min(max(float(point[0]), 0.0), w - 1), min(max(float(point[1]), 0.0), h - 1)
    x0, y0 = int(np.floor(xc)), int(np.floor(yc))
    corners = flow.valid[y0:min(y0 + 2, h), x0:min(x0 + 2, w)]
    return FlowSample(z[0].numpy(), bool(inside[0]), bool(corners.all()))


def locate_flow(flow_sequence: Sequence[FlowField], p0, z_accum, k: int) -> FlowSample:
    """Observation z_k: flow map ``k`` sampled at p0 + sum of earlier observations."""
    return sample_flow(flow_sequence[k], np.asarray(p0) + np.asarray(z_accum))


def surface_filter(positions, cam: CameraModel, depth_map, rel_tol: float = 0.01) -> np.ndarray:
    """Visibility flags: camera depth within ``rel_tol`` of the rendered depth at the pixel.

    Points behind the camera or outside the image are not visible. Pixels
    that nothing covers carry +inf depth and therefore pass.
    """
    X = as_tensor(positions).reshape(-1, 3)
    depth = torch.as_tensor(depth_map, dtype=DTYPE)
    h, w = depth.shape
    p, z = project_points(cam, X)
    px = torch.round(p[:, 0]).long()
    py = torch.round(p[:, 1]).long()
    ok = (z > Z_NEAR) & (px >= 0) & (px < w) & (py >= 0) & (py < h)
    out = torch.zeros(len(X), dtype=torch.bool)
    if ok.any():
        d = depth[py[ok], px[ok]]
        out[ok] = z[ok] <= d * (1.0 + rel_tol)
    return out.numpy()


# ---------------------------------------------------------------------------
# one filter step


@dataclass
class StepInputs:
    """Everything a step needs besides the track, with the field already evaluated."""

    nominal_prev: np.ndarray  # Phi_{t-1}(mu0)
    nominal_cur: np.ndarray  # Phi_t(mu0)
    F: Optional[np.ndarray]  # None when the Jacobian was singular
    cams: Sequence[CameraModel]
    flows: Sequence[FlowField]  # flow k-1 -> k per view
    surface: np.ndarray  # (V,) surface test at t-1


def _step(track: EKFTrack, noise: NoiseModel, s: StepInputs, delta: float, frame: int) -> EKFTrack:
    tr = track.copy()
    F = s.F
    if F is None:
        F = np.eye(3)
        tr.log.append({"frame": frame, "event": "singular_jacobian"})
    shift = (s.nominal_cur - s.nominal_prev) + (F - np.eye(3)) @ (tr.x - s.nominal_prev)
    x, P = forecast(tr.x, tr.P, F, noise.Q, shift)
    P, lo = symmetrize_psd(P)
    tr.min_eig = min(tr.min_eig, lo)
    pending = []
    for v, cam in enumerate(s.cams):
        anchor = tr.p0[v] + tr.z_accum[v]
        obs = sample_flow(s.flows[v], anchor)
        usable = bool(s.surface[v]) and obs.in_bounds and obs.valid
        tr.visible[v] = usable
        if usable:
            try:
                hx = _project(cam, x) - anchor
                H = position_jacobian(cam, x, delta)
                if noise.gate is not None and innovation_distance(P, obs.z, hx, H, noise.Rn) > noise.gate:
                    tr.visible[v] = False
                    tr.log.append({"frame": frame, "view": v, "event": "gated"})
                else:
                    x, P, _ = assimilate(x, P, obs.z, hx, H, noise.Rn)
                    P, lo = symmetrize_psd(P)
                    tr.min_eig = min(tr.min_eig, lo)
            except BehindCamera:
                tr.visible[v] = False
                tr.log.append({"frame": frame, "view": v, "event": "behind_camera"})
            except SingularInnovation:
                tr.visible[v] = False
                tr.log.append({"frame": frame, "view": v, "event": "singular_innovation"})
        if tr.visible[v]:
            tr.z_accum[v] = tr.z_accum[v] + obs.z
        else:
            pending.append(v)
    # views whose flow could not be trusted re-anchor on the corrected estimate
    for v in pending:
        try:
            tr.z_accum[v] = _project(s.cams[v], x) - tr.p0[v]
        except BehindCamera:
            pass
    tr.x, tr.P = x, P
    return tr


def ekf_step(track: EKFTrack, noise: NoiseModel, field, t_prev: TimeStamp, t: TimeStamp, cams, flows, depth_maps,
             rel_tol: float = 0.01, delta: float = 1e-3) -> EKFTrack:
    """Forecast the track from ``t_prev`` to ``t`` and correct it with every usable view.

    ``cams``, ``flows`` (flow from ``t_prev`` to ``t``) and ``depth_maps``
    (rendered at ``t_prev``) are per-view sequences; a single camera may be
    passed bare.
    """
    if isinstance(cams, CameraModel):
        cams, flows, depth_maps = [cams], [flows], [depth_maps]
    m = as_tensor(track.mu0).reshape(1, 3)
    with torch.no_grad():
        nom_prev = deform(field, m, t_prev)[0].numpy()
        nom_cur = deform(field, m, t)[0].numpy()
    try:
        F = jacobian_f(field, track.mu0, t_prev, t, delta)
    except SingularJacobian:
        log.info("track %d: singular deformation Jacobian, using identity transition", track.index)
        F = None
    surface = np.array([surface_filter(nom_prev[None], c, d, rel_tol)[0] for c, d in zip(cams, depth_maps)])
    return _step(track, noise, StepInputs(nom_prev, nom_cur, F, cams, flows, surface), delta, t.index)


# ---------------------------------------------------------------------------
# batch refinement


@dataclass
class TrajectoryResult:
    positions: np.ndarray  # (N, F, 3)
    visible: np.ndarray  # (N, F) any view assimilated
    min_eig: np.ndarray  # (N,) smallest covariance eigenvalue seen
    logs: list  # per track


def init_track(index: int, mu0, x0, cams, noise: NoiseModel) -> EKFTrack:
    p0 = []
    for cam in cams:
        p, _ = project_points(cam, as_tensor(x0).reshape(1, 3))
        p0.append(p[0].numpy())
    V = len(cams)
    return EKFTrack(np.asarray(x0, dtype=np.float64).copy(), noise.P0.copy(), np.array(p0).reshape(V, 2),
                    np.zeros((V, 2)), np.ones(V, dtype=bool), np.asarray(mu0, dtype=np.float64).copy(), index)


def refine_trajectories(scene: CanonicalScene, field, cameras: Sequence[CameraModel], flow_sequence, depth_sequence,
                        noise: NoiseModel = None, n_frames: Optional[int] = None, rel_tol: float = 0.01,
                        delta: float = 1e-3, workers: int = 1) -> TrajectoryResult:
    """Filter every Gaussian's center through all frames.

    ``flow_sequence[v][k]`` is the flow of view ``v`` from frame k to k+1 and
    ``depth_sequence[v][k]`` the rendered depth at frame k. Frame 0 of each
    output trajectory is the deformed position at t = 0.
    """
    noise = noise or NoiseModel()
    if isinstance(cameras, CameraModel):
        cameras, flow_sequence, depth_sequence = [cameras], [flow_sequence], [depth_sequence]
    n = len(scene)
    if n_frames is None:
        n_frames = len(flow_sequence[0]) + 1
    if n == 0:
        return TrajectoryResult(np.zeros((0, n_frames, 3)), np.zeros((0, n_frames), dtype=bool), np.zeros(0), [])
    mu0 = scene.mu0.detach()
    stamps = [TimeStamp.frame(k, n_frames) for k in range(n_frames)]
    with torch.no_grad():
        nominal = np.stack([deform(field, mu0, s).numpy() for s in stamps], axis=1)  # (N, F, 3)
    jac = np.stack([deformation_jacobian(field, mu0, s, delta).reshape(n, 3, 3).numpy() for s in stamps], axis=1)
    surface = np.stack([
        np.stack([surface_filter(nominal[:, k], cam, depth_sequence[v][k], rel_tol) for k in range(n_frames - 1)], axis=1)
        for v, cam in enumerate(cameras)
    ], axis=1)  # (N, V, F-1)

    def run(i: int):
        tr = init_track(i, mu0[i].numpy(), nominal[i, 0], cameras, noise)
        out = [tr.x.copy()]
        vis = [True]
        for k in range(1, n_frames):
            try:
                F = transition_from_jacobians(jac[i, k - 1], jac[i, k])
            except SingularJacobian:
                F = None
            s = StepInputs(nominal[i, k - 1], nominal[i, k], F, cameras,
                           [flow_sequence[v][k - 1] for v in range(len(cameras))], surface[i, :, k - 1])
            tr = _step(tr, noise, s, delta, k)
            out.append(tr.x.copy())
            vis.append(bool(tr.visible.any()))
        return np.array(out), np.array(vis), tr.min_eig, tr.log

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(run, range(n)))
    else:
        results = [run(i) for i in range(n)]
    return TrajectoryResult(
        np.stack([r[0] for r in results]),
        np.stack([r[1] for r in results]),
        np.array([r[2] for r in results]),
        [r[3] for r in results],
    )


def write_trajectories(path, result: TrajectoryResult) -> None:
    """JSON lines: {index, frames: [[x, y, z], ...], visible: [bool, ...]}."""
    with open(path, "w") as fh:
        for i in range(result.positions.shape[0]):
            rec = {"index": i, "frames": result.positions[i].tolist(), "visible": [bool(b) for b in result.visible[i]]}
            fh.write(json.dumps(rec) + "\n")


def read_trajectories(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
