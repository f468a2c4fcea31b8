"""
Deformation fields mapping canonical centers to time t.

A *field* is anything with ``displacement(x, t) -> (N, 3)`` for ``(N, 3)``
canonical points and a normalized time ``t`` in [0, 1]. The learned
:class:`DeformationField` is a small MLP; the analytic fields below are used
as oracles in tests and by the synthetic scene generator.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch import nn

from .errors import DataError
from .scene import DTYPE, CameraModel, Z_NEAR, as_tensor, project_points

FIELD_MAGIC = b"FSDF"
FIELD_VERSION = 1


@dataclass(frozen=True)
class TimeStamp:
    t: float
    frame_dt: float

    def __post_init__(self):
        if not (0.0 <= self.t <= 1.0 + 1e-12):
            raise ValueError(f"t must lie in [0, 1], got {self.t}")
        if not self.frame_dt > 0:
            raise ValueError("frame_dt must be positive")

    @classmethod
    def frame(cls, k: int, n_frames: int) -> "TimeStamp":
        if n_frames < 2:
            raise ValueError("need at least two frames")
        dt = 1.0 / (n_frames - 1)
        return cls(k * dt, dt)

    @property
    def index(self) -> int:
        return int(round(self.t / self.frame_dt))

    def shifted(self, steps: int = 1) -> "TimeStamp":
        return TimeStamp(min(max(self.t + steps * self.frame_dt, 0.0), 1.0), self.frame_dt)


def _time_value(t) -> float:
    return t.t if isinstance(t, TimeStamp) else float(t)


class DeformationField(nn.Module):
    """MLP displacement D(x, t) with sin/cos positional encoding.

    ``extent`` normalizes world coordinates before encoding so the same band
    count works for scenes of different size.
    """

    def __init__(self, spatial_bands: int = 6, time_bands: int = 4, width: int = 64,
                 extent: float = 1.0, seed: int = 0, init_scale: float = 1e-4):
        super().__init__()
        self.spatial_bands = spatial_bands
        self.time_bands = time_bands
        self.extent = float(extent)
        in_dim = 3 * (1 + 2 * spatial_bands) + (1 + 2 * time_bands)
        gen = torch.Generator().manual_seed(seed)
        self.layers = nn.ModuleList([
            nn.Linear(in_dim, width, dtype=DTYPE),
            nn.Linear(width, width, dtype=DTYPE),
            nn.Linear(width, 3, dtype=DTYPE),
        ])
        with torch.no_grad():
            for layer in self.layers:
                bound = 1.0 / math.sqrt(layer.in_features)
                layer.weight.copy_((torch.rand(layer.weight.shape, generator=gen, dtype=DTYPE) * 2 - 1) * bound)
                layer.bias.copy_((torch.rand(layer.bias.shape, generator=gen, dtype=DTYPE) * 2 - 1) * bound)
            # tanh hidden units are bounded by 1, so |D| <= width * bound * init_scale at init
            self.layers[-1].weight.mul_(init_scale)
            self.layers[-1].bias.zero_()

    def encode(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        xs = x / self.extent
        feats = [xs]
        for k in range(self.spatial_bands):
            feats += [torch.sin(2.0 ** k * xs), torch.cos(2.0 ** k * xs)]
        tt = t.reshape(-1, 1).expand(x.shape[0], 1)
        feats.append(tt)
        for k in range(self.time_bands):
            feats += [torch.sin(2.0 ** k * math.pi * tt), torch.cos(2.0 ** k * math.pi * tt)]
        return torch.cat(feats, dim=-1)

    def displacement(self, x: torch.Tensor, t) -> torch.Tensor:
        tt = torch.as_tensor(_time_value(t), dtype=DTYPE)
        h = self.encode(x, tt)
        for layer in self.layers[:-1]:
            h = torch.tanh(layer(h))
        return self.layers[-1](h)

    forward = displacement

    # -- checkpoint ----------------------------------------------------------

    def to_bytes(self) -> bytes:
        parts = [FIELD_MAGIC, struct.pack("<I", FIELD_VERSION)]
        parts.append(struct.pack("<IId", self.spatial_bands, self.time_bands, self.extent))
        parts.append(struct.pack("<I", len(self.layers)))
        for layer in self.layers:
            parts.append(struct.pack("<II", layer.out_features, layer.in_features))
        for layer in self.layers:
            parts.append(layer.weight.detach().numpy().astype("<f8").tobytes(order="C"))
            parts.append(layer.bias.detach().numpy().astype("<f8").tobytes(order="C"))
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "DeformationField":
        if data[:4] != FIELD_MAGIC:
            raise DataError("not a deformation-field checkpoint (bad magic)")
        (version,) = struct.unpack_from("<I", data, 4)
        if version != FIELD_VERSION:
            raise DataError(f"unsupported field checkpoint version {version}")
        sb, tb, extent = struct.unpack_from("<IId", data, 8)
        (n_layers,) = struct.unpack_from("<I", data, 24)
        off = 28
        dims = []
        for _ in range(n_layers):
            dims.append(struct.unpack_from("<II", data, off))
            off += 8
        if n_layers != 3 or dims[0][1] != 3 * (1 + 2 * sb) + (1 + 2 * tb):
            raise DataError("field checkpoint layer layout not understood")
        field = cls(spatial_bands=sb, time_bands=tb, width=dims[0][0], extent=extent)
        expected = off + 8 * sum(o * i + o for o, i in dims)
        if len(data) < expected:
            raise DataError("field checkpoint is truncated")
        with torch.no_grad():
            for layer, (out_f, in_f) in zip(field.layers, dims):
                n = out_f * in_f
                w = np.frombuffer(data, dtype="<f8", count=n, offset=off).reshape(out_f, in_f)
                off += 8 * n
                b = np.frombuffer(data, dtype="<f8", count=out_f, offset=off)
                off += 8 * out_f
                layer.weight.copy_(torch.from_numpy(w.copy()))
                layer.bias.copy_(torch.from_numpy(b.copy()))
        if off != len(data):
            raise DataError("trailing bytes in field checkpoint")
        return field

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "DeformationField":
        try:
            return cls.from_bytes(Path(path).read_bytes())
        except (OSError, struct.error) as exc:
            raise DataError(f"cannot read field checkpoint {path}: {exc}") from exc


class ZeroField:
    """D == 0."""

    def displacement(self, x: torch.Tensor, t) -> torch.Tensor:
        return torch.zeros_like(x)


class ConstantField:
    def __init__(self, d):
        self.d = as_tensor(d).reshape(3)

    def displacement(self, x, t):
        return self.d.expand_as(x).clone()


class FunctionField:
    """Wraps ``fn(x, t) -> displacement`` with ``t`` a float."""

    def __init__(self, fn: Callable[[torch.Tensor, float], torch.Tensor]):
        self.fn = fn

    def displacement(self, x, t):
        return self.fn(x, _time_value(t))


def deform(field, mu0, t) -> torch.Tensor:
    """mu_t = mu0 + D(mu0, t); accepts a single point or an (N, 3) batch."""
    x = as_tensor(mu0) if not isinstance(mu0, torch.Tensor) else mu0
    single = x.dim() == 1
    xb = x.reshape(-1, 3)
    out = xb + field.displacement(xb, t)
    return out[0] if single else out


def gaussian_velocity_2d(field, mu0: torch.Tensor, t: TimeStamp, cam: CameraModel, step: int = 1):
    """Projected per-frame motion of each center from ``t`` to ``t + step*dt``.

    Returns ``(v, ok)``: (N, 2) px/frame and a mask that is False where either
    stamp falls behind the near plane; those rows are zeroed.
    """
    x = mu0.reshape(-1, 3)
    p0, z0 = project_points(cam, deform(field, x, t))
    p1, z1 = project_points(cam, deform(field, x, t.shifted(step)))
    ok = (z0 > Z_NEAR) & (z1 > Z_NEAR)
    v = torch.where(ok.unsqueeze(-1), p1 - p0, torch.zeros_like(p0))
    return v, ok


def deformation_jacobian(field, mu0, t, delta: float = 1e-3) -> torch.Tensor:
    """Central-difference Jacobian of x -> x + D(x, t) at each point.

    (3,) input gives (3, 3); (N, 3) gives (N, 3, 3) with J[n, i, j] = d out_i / d x_j.
    """
    if not delta > 0:
        raise ValueError("delta must be positive")
    x = as_tensor(mu0)
    single = x.dim() == 1
    xb = x.reshape(-1, 3)
    n = xb.shape[0]
    eye = torch.eye(3, dtype=DTYPE) * delta
    plus = (xb[:, None, :] + eye[None]).reshape(-1, 3)
    minus = (xb[:, None, :] - eye[None]).reshape(-1, 3)
    with torch.no_grad():
        fp = deform(field, plus, t).reshape(n, 3, 3)
        fm = deform(field, minus, t).reshape(n, 3, 3)
    # fp[n, j, i] is output i for a step along axis j
    J = ((fp - fm) / (2 * delta)).transpose(1, 2)
    return J[0] if single else J
