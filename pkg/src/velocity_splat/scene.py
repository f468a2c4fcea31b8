"""
Scene representation, camera model, and the projection chain.

Everything differentiable is a float64 torch tensor. Batched helpers take
``(N, 3)`` arrays; the single-point functions (``project_point``,
``unproject_pixel``, ``covariance_of``) are thin wrappers that raise on
invalid input instead of culling silently.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .errors import BehindCamera, DataError, NonPositiveDepth

DTYPE = torch.float64
Z_NEAR = 0.01
BLUR_FLOOR = 0.3


def as_tensor(x, dtype=DTYPE) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(dtype)
    return torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=dtype)


@dataclass(frozen=True)
class Gaussian3D:
    """One primitive. Rotation is a (w, x, y, z) unit quaternion."""

    mu0: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray
    color: np.ndarray
    opacity: float

    def __post_init__(self):
        for name in ("mu0", "scale", "rotation", "color"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        object.__setattr__(self, "opacity", float(self.opacity))
        if np.any(self.scale <= 0):
            raise ValueError("scale components must be strictly positive")
        norm = np.linalg.norm(self.rotation)
        if abs(norm - 1.0) > 1e-9:
            raise ValueError(f"rotation must be a unit quaternion, got norm {norm}")


@dataclass
class CameraModel:
    """Pinhole camera. ``R``/``T`` map world to camera: Xc = R @ Xw + T."""

    K: np.ndarray
    R: np.ndarray
    T: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        self.K = np.asarray(self.K, dtype=np.float64).reshape(3, 3)
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.T = np.asarray(self.T, dtype=np.float64).reshape(3)
        self.width = int(self.width)
        self.height = int(self.height)
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        if self.K[0, 0] <= 0 or self.K[1, 1] <= 0 or self.K[0, 1] != 0 or np.any(self.K[1:, 0] != 0) or self.K[2, 1] != 0:
            raise ValueError("K must be upper-triangular with zero skew and positive focal lengths")
        if not np.allclose(self.R.T @ self.R, np.eye(3), atol=1e-9, rtol=0):
            raise ValueError("R must be orthonormal")

    @property
    def fx(self) -> float:
        return float(self.K[0, 0])

    @property
    def fy(self) -> float:
        return float(self.K[1, 1])

    @property
    def cx(self) -> float:
        return float(self.K[0, 2])

    @property
    def cy(self) -> float:
        return float(self.K[1, 2])

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.R.T @ self.T

    def to_dict(self) -> dict:
        return {
            "K": self.K.reshape(-1).tolist(),
            "R": self.R.reshape(-1).tolist(),
            "T": self.T.tolist(),
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        try:
            return cls(K=d["K"], R=d["R"], T=d["T"], width=d["width"], height=d["height"])
        except (KeyError, TypeError) as exc:
            raise DataError(f"bad camera record: {exc}") from exc

    @classmethod
    def look_at(cls, eye, target, focal: float, width: int, height: int, up=(0.0, 0.0, 1.0)) -> "CameraModel":
        """OpenCV-style camera (x right, y down, z forward) at ``eye`` looking at ``target``."""
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        R = np.stack([right, down, forward])
        K = np.array([[focal, 0.0, (width - 1) / 2.0], [0.0, focal, (height - 1) / 2.0], [0.0, 0.0, 1.0]])
        return cls(K=K, R=R, T=-R @ eye, width=width, height=height)


class CanonicalScene:
    """Ordered set of Gaussians stored as parallel (N, ...) float64 tensors.

    Position in the arrays is the Gaussian's identity.
    """

    def __init__(self, mu0, scale, rotation, color, opacity, background=(0.0, 0.0, 0.0)):
        self.mu0 = as_tensor(mu0).reshape(-1, 3)
        self.scale = as_tensor(scale).reshape(-1, 3)
        self.rotation = as_tensor(rotation).reshape(-1, 4)
        self.color = as_tensor(color).reshape(-1, 3)
        self.opacity = as_tensor(opacity).reshape(-1)
        self.background = as_tensor(background).reshape(3)
        n = self.mu0.shape[0]
        if not all(t.shape[0] == n for t in (self.scale, self.rotation, self.color, self.opacity)):
            raise ValueError("attribute arrays disagree on Gaussian count")

    def __len__(self) -> int:
        return self.mu0.shape[0]

    @classmethod
    def empty(cls, background=(0.0, 0.0, 0.0)) -> "CanonicalScene":
        z = np.zeros((0, 3))
        return cls(z, z, np.zeros((0, 4)), z, np.zeros(0), background)

    @classmethod
    def from_gaussians(cls, gaussians: Iterable[Gaussian3D], background=(0.0, 0.0, 0.0)) -> "CanonicalScene":
        gs = list(gaussians)
        if not gs:
            return cls.empty(background)
        return cls(
            np.stack([g.mu0 for g in gs]),
            np.stack([g.scale for g in gs]),
            np.stack([g.rotation for g in gs]),
            np.stack([g.color for g in gs]),
            np.array([g.opacity for g in gs]),
            background,
        )

    @property
    def gaussians(self) -> list[Gaussian3D]:
        return [
            Gaussian3D(
                self.mu0[i].detach().numpy(),
                self.scale[i].detach().numpy(),
                self.rotation[i].detach().numpy(),
                self.color[i].detach().numpy(),
                float(self.opacity[i]),
            )
            for i in range(len(self))
        ]

    def tensors(self) -> dict[str, torch.Tensor]:
        return {
            "mu0": self.mu0,
            "scale": self.scale,
            "rotation": self.rotation,
            "color": self.color,
            "opacity": self.opacity,
        }

    def detached(self) -> "CanonicalScene":
        t = {k: v.detach().clone() for k, v in self.tensors().items()}
        return CanonicalScene(background=self.background.clone(), **t)

    def subset(self, index) -> "CanonicalScene":
        index = torch.as_tensor(index)
        t = {k: v.detach()[index].clone() for k, v in self.tensors().items()}
        return CanonicalScene(background=self.background.clone(), **t)

    def concat(self, other: "CanonicalScene") -> "CanonicalScene":
        t = {k: torch.cat([v.detach(), getattr(other, k).detach()]) for k, v in self.tensors().items()}
        return CanonicalScene(background=self.background.clone(), **t)

    def to_dict(self) -> dict:
        return {
            "background": self.background.tolist(),
            "gaussians": [
                {
                    "mu0": self.mu0[i].tolist(),
                    "scale": self.scale[i].tolist(),
                    "rotation": self.rotation[i].tolist(),
                    "color": self.color[i].tolist(),
                    "opacity": float(self.opacity[i]),
                }
                for i in range(len(self))
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CanonicalScene":
        try:
            bg = d.get("background", [0.0, 0.0, 0.0])
            gs = d["gaussians"]
            if not gs:
                return cls.empty(bg)
            return cls(
                [g["mu0"] for g in gs],
                [g["scale"] for g in gs],
                [g["rotation"] for g in gs],
                [g["color"] for g in gs],
                [g["opacity"] for g in gs],
                bg,
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"bad scene document: {exc}") from exc

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "CanonicalScene":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read scene {path}: {exc}") from exc


def save_cameras(cameras: Sequence[CameraModel], path) -> None:
    Path(path).write_text(json.dumps([c.to_dict() for c in cameras], indent=1) + "\n")


def load_cameras(path) -> list[CameraModel]:
    try:
        return [CameraModel.from_dict(d) for d in json.loads(Path(path).read_text())]
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read cameras {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# geometry


def quat_to_rotmat(q: torch.Tensor) -> torch.Tensor:
    """(N, 4) quaternions (w, x, y, z) -> (N, 3, 3). Normalizes on the fly."""
    q = q / q.norm(dim=-1, keepdim=True)
    w, x, y, z = q.unbind(-1)
    return torch.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        dim=-1,
    ).reshape(q.shape[:-1] + (3, 3))


def covariance_from_factors(scale: torch.Tensor, rotation: torch.Tensor) -> torch.Tensor:
    """Sigma = R S S^T R^T for (N, 3) scales and (N, 4) quaternions."""
    M = quat_to_rotmat(rotation) * scale.unsqueeze(-2)
    return M @ M.transpose(-1, -2)


def covariance_of(g: Gaussian3D) -> np.ndarray:
    cov = covariance_from_factors(as_tensor(g.scale)[None], as_tensor(g.rotation)[None])[0]
    return cov.numpy()


def camera_tensors(cam: CameraModel) -> tuple[torch.Tensor, torch.Tensor]:
    return as_tensor(cam.R), as_tensor(cam.T)


def world_to_camera(cam: CameraModel, X: torch.Tensor) -> torch.Tensor:
    R, T = camera_tensors(cam)
    return X @ R.T + T


def project_points(cam: CameraModel, X: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Batched projection without culling: returns (N, 2) pixels and (N,) depths.

    Callers are responsible for masking depths <= Z_NEAR.
    """
    Xc = world_to_camera(cam, X)
    z = Xc[..., 2]
    p = torch.stack([cam.fx * Xc[..., 0] / z + cam.cx, cam.fy * Xc[..., 1] / z + cam.cy], dim=-1)
    return p, z


def project_point(cam: CameraModel, x) -> tuple[np.ndarray, float]:
    p, z = project_points(cam, as_tensor(x).reshape(1, 3))
    if not z[0] > Z_NEAR:
        raise BehindCamera(f"camera depth {float(z[0])} <= z_near {Z_NEAR}")
    return p[0].numpy(), float(z[0])


def projection_jacobian(cam: CameraModel, Xc: torch.Tensor) -> torch.Tensor:
    """d(pixel)/d(camera-space point), (N, 2, 3)."""
    x, y, z = Xc.unbind(-1)
    zero = torch.zeros_like(z)
    rows = [
        torch.stack([cam.fx / z, zero, -cam.fx * x / (z * z)], dim=-1),
        torch.stack([zero, cam.fy / z, -cam.fy * y / (z * z)], dim=-1),
    ]
    return torch.stack(rows, dim=-2)


def project_covariances(cam: CameraModel, cov3d: torch.Tensor, mu_t: torch.Tensor, blur_floor: float = BLUR_FLOOR) -> torch.Tensor:
    """Affine (EWA) screen-space covariance J W Sigma W^T J^T + blur_floor * I."""
    R, _ = camera_tensors(cam)
    J = projection_jacobian(cam, world_to_camera(cam, mu_t))
    M = J @ R
    cov2 = M @ cov3d @ M.transpose(-1, -2)
    return cov2 + blur_floor * torch.eye(2, dtype=cov2.dtype)


def project_covariance(cam: CameraModel, g: Gaussian3D, mu_t=None, blur_floor: float = BLUR_FLOOR) -> np.ndarray:
    mu = g.mu0 if mu_t is None else mu_t
    project_point(cam, mu)  # raises BehindCamera
    cov3 = covariance_from_factors(as_tensor(g.scale)[None], as_tensor(g.rotation)[None])
    return project_covariances(cam, cov3, as_tensor(mu).reshape(1, 3), blur_floor)[0].numpy()


def unproject_pixels(cam: CameraModel, p: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    """Inverse of ``project_points`` for (N, 2) pixels at (N,) camera depths."""
    R, T = camera_tensors(cam)
    xc = (p[..., 0] - cam.cx) / cam.fx * z
    yc = (p[..., 1] - cam.cy) / cam.fy * z
    Xc = torch.stack([xc, yc, z], dim=-1)
    return (Xc - T) @ R


def unproject_pixel(cam: CameraModel, p, z: float) -> np.ndarray:
    if not z > 0:
        raise NonPositiveDepth(f"depth must be positive, got {z}")
    return unproject_pixels(cam, as_tensor(p).reshape(1, 2), as_tensor([z]))[0].numpy()
