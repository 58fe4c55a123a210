"""Volumes, slices, intensity pre-processing and the SPV1 file format.

World coordinates are in mm with the origin at the centre of the grid; voxel
``(i, j, k)`` sits at ``((i - (nx-1)/2) * s, (j - (ny-1)/2) * s, (k - (nz-1)/2) * s)``.
Arrays are indexed ``data[x, y, z]``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .se3core import RigidTransform

__all__ = [
    "Volume",
    "SliceImage",
    "SPVFormatError",
    "trilinear_sample",
    "extract_slice",
    "extract_slices",
    "slice_plane_points",
    "minmax_rescale",
    "zscore_normalize",
    "percentile_clip",
    "recenter_slice",
    "load_volume",
    "save_volume",
    "load_slice",
    "save_slice",
]


def _readonly(a, dtype=None) -> np.ndarray:
    a = np.array(a, dtype=dtype, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class Volume:
    data: np.ndarray
    spacing: float = 1.0

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"volume data must be 3D, got shape {data.shape}")
        if not self.spacing > 0:
            raise ValueError("spacing must be positive")
        if data.dtype.kind not in "uif":
            raise ValueError(f"unsupported scalar type {data.dtype}")
        if data.dtype.kind == "f" and not np.all(np.isfinite(data)):
            raise ValueError("volume contains non-finite intensities")
        object.__setattr__(self, "data", _readonly(data))
        object.__setattr__(self, "spacing", float(self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    @property
    def extent_mm(self) -> np.ndarray:
        """Side lengths in mm."""
        return np.array(self.dims) * self.spacing

    def world_coordinates(self) -> np.ndarray:
        """Voxel centres, shape ``(nx, ny, nz, 3)``."""
        axes = [(np.arange(n) - (n - 1) / 2.0) * self.spacing for n in self.dims]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def with_data(self, data) -> "Volume":
        return Volume(data, self.spacing)


@dataclass(frozen=True, eq=False)
class SliceImage:
    """Square ``l x l`` image; ``pixels[i, j]`` lies at in-plane (u_i, w_j)."""

    pixels: np.ndarray
    spacing: float = 1.0

    def __post_init__(self):
        p = np.asarray(self.pixels)
        if p.ndim != 2 or p.shape[0] != p.shape[1] or p.shape[0] < 1:
            raise ValueError(f"slice must be a non-empty square image, got shape {p.shape}")
        if not self.spacing > 0:
            raise ValueError("spacing must be positive")
        object.__setattr__(self, "pixels", _readonly(p))
        object.__setattr__(self, "spacing", float(self.spacing))

    @property
    def l(self) -> int:
        return int(self.pixels.shape[0])

    def content_fraction(self) -> float:
        return float(np.count_nonzero(self.pixels)) / self.pixels.size


_EDGE_TOL = 1e-9  # voxels


def trilinear_sample(v: Volume, points) -> np.ndarray:
    """Trilinear interpolation at world points ``(..., 3)``; outside the grid is 0."""
    p = np.asarray(points, dtype=float)
    shape = p.shape[:-1]
    p = p.reshape(-1, 3)
    dims = np.array(v.dims)
    c = p / v.spacing + (dims - 1) / 2.0
    # boundary points perturbed by rounding (e.g. decoded labels) still count as inside
    inside = np.all((c >= -_EDGE_TOL) & (c <= dims - 1 + _EDGE_TOL), axis=1)
    c = np.clip(c[inside], 0, dims - 1)
    i0 = np.clip(np.floor(c).astype(np.int64), 0, np.maximum(dims - 2, 0))
    f = c - i0
    i1 = np.minimum(i0 + 1, dims - 1)
    data = v.data
    if data.dtype != np.float64:
        data = data.astype(np.float64)
    flat = data.reshape(-1)
    ny, nz = dims[1], dims[2]
    out = np.zeros(p.shape[0])
    acc = np.zeros(c.shape[0])
    for dx in (0, 1):
        ix = i1[:, 0] if dx else i0[:, 0]
        wx = f[:, 0] if dx else 1.0 - f[:, 0]
        for dy in (0, 1):
            iy = i1[:, 1] if dy else i0[:, 1]
            wy = f[:, 1] if dy else 1.0 - f[:, 1]
            for dz in (0, 1):
                iz = i1[:, 2] if dz else i0[:, 2]
                wz = f[:, 2] if dz else 1.0 - f[:, 2]
                acc += wx * wy * wz * flat[(ix * ny + iy) * nz + iz]
    out[inside] = acc
    return out.reshape(shape)


def slice_plane_points(t: RigidTransform, l: int, spacing: float, offset: float = 0.0) -> np.ndarray:
    """World positions ``(l, l, 3)`` of slice pixel centres, shifted ``offset`` mm along the normal."""
    g = (np.arange(l) - (l - 1) / 2.0) * spacing
    u, w = np.meshgrid(g, g, indexing="ij")
    local = np.stack([u, w, np.full_like(u, offset)], axis=-1)
    return t.apply(local)


def extract_slice(v: Volume, t: RigidTransform, l: int, spacing: float | None = None) -> SliceImage:
    """Resample the plane posed by ``t`` into an ``l x l`` image."""
    spacing = v.spacing if spacing is None else spacing
    return SliceImage(trilinear_sample(v, slice_plane_points(t, l, spacing)), spacing)


def extract_slices(v: Volume, ts, l: int, spacing: float | None = None, chunk: int = 64) -> np.ndarray:
    """Stacked pixels ``(n, l, l)`` for many poses; batches the interpolation."""
    spacing = v.spacing if spacing is None else spacing
    ts = list(ts)
    out = np.empty((len(ts), l, l))
    for s in range(0, len(ts), chunk):
        part = ts[s : s + chunk]
        pts = np.stack([slice_plane_points(t, l, spacing) for t in part])
        out[s : s + len(part)] = trilinear_sample(v, pts)
    return out


def minmax_rescale(v: Volume, lo: float = 0.0, hi: float = 255.0) -> Volume:
    d = v.data.astype(float)
    dmin, dmax = d.min(), d.max()
    if not dmax > dmin:
        raise ValueError("cannot rescale a constant volume")
    return v.with_data(lo + (d - dmin) * ((hi - lo) / (dmax - dmin)))


def zscore_normalize(v: Volume, mask=None) -> Volume:
    """Zero mean, unit (population) deviation inside ``mask``; 0 outside."""
    d = v.data.astype(float)
    m = np.ones(d.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if m.shape != d.shape:
        raise ValueError("mask shape does not match volume")
    if not m.any():
        raise ValueError("z-score mask is empty")
    vals = d[m]
    sd = vals.std()
    if sd == 0:
        raise ValueError("z-score region has zero variance")
    out = np.zeros_like(d)
    out[m] = (vals - vals.mean()) / sd
    return v.with_data(out)


def percentile_clip(v: Volume, low: float = 0.01, high: float = 0.99) -> Volume:
    """Clamp nonzero voxels to the [low, high] quantiles of the nonzero intensities."""
    if not 0.0 <= low < high <= 1.0:
        raise ValueError("need 0 <= low < high <= 1")
    d = v.data.astype(float)
    nz = d != 0
    if not nz.any():
        return v.with_data(d)
    qlo, qhi = np.quantile(d[nz], [low, high])
    out = d.copy()
    out[nz] = np.clip(d[nz], qlo, qhi)
    return v.with_data(out)


def recenter_slice(img: SliceImage) -> SliceImage:
    """Shift the bounding box of the nonzero pixels to the image centre.

    Integer-pixel shift with zero fill.  Approximates the per-slice
    crop/centre step applied to masked scans before prediction.
    """
    p = img.pixels
    idx = np.argwhere(p != 0)
    if idx.size == 0:
        return img
    centre = (idx.min(axis=0) + idx.max(axis=0)) / 2.0
    shift = np.rint((np.array(p.shape) - 1) / 2.0 - centre).astype(int)
    out = np.zeros_like(p)
    src = [slice(max(0, -s), n - max(0, s)) for s, n in zip(shift, p.shape)]
    dst = [slice(max(0, s), n - max(0, -s)) for s, n in zip(shift, p.shape)]
    out[tuple(dst)] = p[tuple(src)]
    return SliceImage(out, img.spacing)


# --- SPV1 ------------------------------------------------------------------

_DTYPES = {"u8": np.dtype("<u1"), "f32": np.dtype("<f4")}


class SPVFormatError(ValueError):
    pass


def _encode(data: np.ndarray, spacing: float, dtype: str | None) -> bytes:
    if dtype is None:
        dtype = "u8" if data.dtype == np.uint8 else "f32"
    if dtype not in _DTYPES:
        raise SPVFormatError(f"unsupported scalar type {dtype!r}")
    if dtype == "u8" and data.dtype != np.uint8:
        r = np.rint(data)
        if r.min() < 0 or r.max() > 255:
            raise SPVFormatError("values outside 0..255 cannot be stored as u8")
        data = r
    payload = np.asarray(data, dtype=_DTYPES[dtype]).ravel(order="F").tobytes()
    nx, ny, nz = data.shape
    header = (
        f"magic=SPV1\ndims={nx},{ny},{nz}\nspacing={float(spacing)!r}\n"
        f"dtype={dtype}\nbyteorder=little\n\n"
    )
    return header.encode("ascii") + payload


def _decode(raw: bytes) -> tuple[np.ndarray, float, str]:
    end = raw.find(b"\n\n")
    if end < 0:
        raise SPVFormatError("missing header terminator")
    try:
        lines = raw[:end].decode("ascii").split("\n")
    except UnicodeDecodeError as e:
        raise SPVFormatError("header is not ASCII") from e
    fields = {}
    for line in lines:
        key, sep, value = line.partition("=")
        if not sep:
            raise SPVFormatError(f"malformed header line {line!r}")
        fields[key] = value
    if fields.get("magic") != "SPV1":
        raise SPVFormatError("not an SPV1 file")
    for key in ("dims", "spacing", "dtype", "byteorder"):
        if key not in fields:
            raise SPVFormatError(f"header lacks {key!r}")
    if fields["byteorder"] != "little":
        raise SPVFormatError(f"unsupported byte order {fields['byteorder']!r}")
    if fields["dtype"] not in _DTYPES:
        raise SPVFormatError(f"unsupported scalar type {fields['dtype']!r}")
    try:
        dims = tuple(int(x) for x in fields["dims"].split(","))
        spacing = float(fields["spacing"])
    except ValueError as e:
        raise SPVFormatError("malformed dims or spacing") from e
    if len(dims) != 3 or min(dims) < 1:
        raise SPVFormatError(f"bad dims {fields['dims']!r}")
    dt = _DTYPES[fields["dtype"]]
    payload = raw[end + 2 :]
    expected = dims[0] * dims[1] * dims[2] * dt.itemsize
    if len(payload) != expected:
        raise SPVFormatError(f"payload is {len(payload)} bytes, expected {expected}")
    data = np.frombuffer(payload, dtype=dt).reshape(dims, order="F")
    return data.astype(dt.newbyteorder("=")), spacing, fields["dtype"]


def save_volume(v: Volume, path, dtype: str | None = None) -> None:
    """Write ``v`` as SPV1; ``dtype`` is ``"u8"`` or ``"f32"`` (default from data)."""
    with open(path, "wb") as fh:
        fh.write(_encode(v.data, v.spacing, dtype))


def load_volume(path) -> Volume:
    with open(path, "rb") as fh:
        data, spacing, _ = _decode(fh.read())
    return Volume(data, spacing)


def save_slice(img: SliceImage, path, dtype: str | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(_encode(img.pixels[:, :, None], img.spacing, dtype))


def load_slice(path) -> SliceImage:
    with open(path, "rb") as fh:
        data, spacing, _ = _decode(fh.read())
    if data.shape[2] != 1 or data.shape[0] != data.shape[1]:
        raise SPVFormatError(f"{os.fspath(path)} is not a square slice (dims {data.shape})")
    return SliceImage(data[:, :, 0], spacing)
