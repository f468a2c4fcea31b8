"""File formats: Middlebury .flo, binary PPM/PGM, and flow false-color images."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import DataError

FLO_MAGIC = b"PIEH"
UNKNOWN_FLOW = 1e10
UNKNOWN_FLOW_THRESH = 1e9


def write_flo(path, flow, valid=None) -> None:
    """Write (H, W, 2) flow; invalid pixels are stored as 1e10 per Middlebury convention."""
    flow = np.asarray(flow, dtype=np.float64)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ValueError(f"flow must be (H, W, 2), got {flow.shape}")
    data = flow.astype("<f4")
    if valid is not None:
        data = data.copy()
        data[~np.asarray(valid, dtype=bool)] = UNKNOWN_FLOW
    h, w = flow.shape[:2]
    with open(path, "wb") as fh:
        fh.write(FLO_MAGIC)
        fh.write(np.array([w, h], dtype="<i4").tobytes())
        fh.write(data.tobytes(order="C"))


def read_flo(path) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(flow, valid)``; flow as float32 (H, W, 2)."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if len(raw) < 12 or raw[:4] != FLO_MAGIC:
        raise DataError(f"{path}: not a .flo file")
    w, h = np.frombuffer(raw, dtype="<i4", count=2, offset=4)
    if w <= 0 or h <= 0 or len(raw) != 12 + 8 * int(w) * int(h):
        raise DataError(f"{path}: bad .flo dimensions {w}x{h} for {len(raw)} bytes")
    flow = np.frombuffer(raw, dtype="<f4", offset=12).reshape(int(h), int(w), 2).copy()
    valid = np.all(np.abs(flow) < UNKNOWN_FLOW_THRESH, axis=-1)
    return flow, valid


def to_uint8(img) -> np.ndarray:
    return np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path, img) -> None:
    """Binary P6 from an (H, W, 3) float image in [0, 1] or uint8."""
    img = np.asarray(img)
    if img.dtype != np.uint8:
        img = to_uint8(img)
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img).tobytes())


def write_pgm(path, img) -> None:
    img = np.asarray(img)
    if img.dtype == bool:
        img = img.astype(np.uint8) * 255
    elif img.dtype != np.uint8:
        img = to_uint8(img)
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img).tobytes())


def _read_pnm(path, magic: bytes, channels: int) -> np.ndarray:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    pos += 1
    if tokens[0] != magic:
        raise DataError(f"{path}: expected {magic.decode()} image")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise DataError(f"{path}: only 8-bit images are supported")
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h * channels, offset=pos)
    return data.reshape((h, w, channels) if channels > 1 else (h, w)).copy()


def read_ppm(path) -> np.ndarray:
    """(H, W, 3) float64 in [0, 1]."""
    return _read_pnm(path, b"P6", 3).astype(np.float64) / 255.0


def read_pgm(path) -> np.ndarray:
    return _read_pnm(path, b"P5", 1)


def read_mask(path) -> np.ndarray:
    """PGM mask, > 127 means dynamic."""
    return read_pgm(path) > 127


# -- flow color wheel --------------------------------------------------------


def make_color_wheel() -> np.ndarray:
    """The 55-entry Middlebury wheel (RY, YG, GC, CB, BM, MR segments), values 0..255."""
    RY, YG, GC, CB, BM, MR = 15, 6, 4, 11, 13, 6
    wheel = np.zeros((RY + YG + GC + CB + BM + MR, 3))
    col = 0
    for n, const, ramp, rising in ((RY, 0, 1, True), (YG, 1, 0, False), (GC, 1, 2, True),
                                   (CB, 2, 1, False), (BM, 2, 0, True), (MR, 0, 2, False)):
        up = np.floor(255 * np.arange(n) / n)
        wheel[col:col + n, const] = 255
        wheel[col:col + n, ramp] = up if rising else 255 - up
        col += n
    return wheel


def flow_to_color(flow, max_flow=None) -> np.ndarray:
    """Middlebury false-color rendering, (H, W, 3) uint8. Zero flow is white."""
    flow = np.asarray(flow, dtype=np.float64)
    u, v = flow[..., 0].copy(), flow[..., 1].copy()
    unknown = (np.abs(u) > UNKNOWN_FLOW_THRESH) | (np.abs(v) > UNKNOWN_FLOW_THRESH) | ~np.isfinite(u) | ~np.isfinite(v)
    u[unknown] = 0
    v[unknown] = 0
    rad = np.sqrt(u * u + v * v)
    if max_flow is None:
        max_flow = rad.max() if rad.size else 0.0
    if max_flow > 0:
        u, v, rad = u / max_flow, v / max_flow, rad / max_flow
    wheel = make_color_wheel()
    ncols = wheel.shape[0]
    angle = np.arctan2(-v, -u) / np.pi
    fk = (angle + 1) / 2 * (ncols - 1)
    k0 = np.floor(fk).astype(int)
    k1 = (k0 + 1) % ncols
    f = fk - k0
    out = np.zeros(u.shape + (3,))
    for c in range(3):
        col = (1 - f) * wheel[k0, c] / 255.0 + f * wheel[k1, c] / 255.0
        small = rad <= 1
        col = np.where(small, 1 - rad * (1 - col), col * 0.75)
        out[..., c] = np.floor(255 * col)
    out[unknown] = 0
    return out.astype(np.uint8)
