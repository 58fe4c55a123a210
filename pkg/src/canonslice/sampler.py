"""Pose sets for training/validation slices and dataset materialization.

Every scheme starts from the identity plane (normal +z), rotates it, then
shifts it by ``tz`` along the rotated normal, so a pose is
``RigidTransform(R, tz * R[:, 2])``.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .se3core import (
    AnchorPoints,
    EulerCartesian,
    QuaternionCartesian,
    RigidTransform,
    anchor_points_from_transform,
    rotation_between_vectors,
    rotation_from_euler,
    rotation_z,
)
from .volume import SliceImage, Volume, extract_slices, save_slice

__all__ = [
    "SamplingConfig",
    "SliceSample",
    "EmptyDatasetError",
    "GOLDEN_RATIO",
    "tz_grid",
    "euler_angle_grid",
    "euler_grid_transforms",
    "fibonacci_normals",
    "fibonacci_transforms",
    "uniform_polar_normals",
    "uniform_polar_transforms",
    "random_validation_transforms",
    "random_euler_transforms",
    "transforms_from_config",
    "nearest_neighbor_angles",
    "make_labels",
    "generate_dataset",
    "read_manifest",
    "row_transform",
]

GOLDEN_RATIO = (1.0 + math.sqrt(5.0)) / 2.0
TZ_FRACTION = 0.35

_SCHEME_ALIASES = {
    "euler": "euler",
    "euler-grid": "euler",
    "fibonacci": "fibonacci",
    "polar": "polar",
    "uniform-polar": "polar",
    "random": "random",
    "identity": "identity",
}


class EmptyDatasetError(ValueError):
    pass


@dataclass(frozen=True)
class SamplingConfig:
    """Pose-set recipe.  Angles in radians, offsets in mm.

    ``scheme`` is one of ``euler``, ``fibonacci``, ``polar``, ``random`` or
    ``identity`` (a single identity pose, handy for smoke tests).
    """

    scheme: str = "euler"
    angle_step: float = math.radians(18.0)
    n_normals: int = 300
    n_inplane: int = 10
    n_phi: int = 20
    n_theta: int = 15
    n_random: int = 100
    tz_min: float = -40.0
    tz_max: float = 40.0
    tz_step: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.scheme not in _SCHEME_ALIASES:
            raise ValueError(f"unknown sampling scheme {self.scheme!r}")
        object.__setattr__(self, "scheme", _SCHEME_ALIASES[self.scheme])
        if min(self.n_normals, self.n_inplane, self.n_phi, self.n_theta) < 1:
            raise ValueError("sampling counts must be >= 1")
        if self.n_random < 0:
            raise ValueError("n_random must be >= 0")
        if self.tz_max < self.tz_min or self.tz_step <= 0:
            raise ValueError("need tz_min <= tz_max and tz_step > 0")

    @property
    def tz_values(self) -> np.ndarray:
        return tz_grid(self.tz_min, self.tz_max, self.tz_step)

    def check_tz_bounds(self, side_mm: float) -> None:
        limit = TZ_FRACTION * side_mm
        if self.tz_min < -limit - 1e-9 or self.tz_max > limit + 1e-9:
            raise ValueError(
                f"tz range [{self.tz_min}, {self.tz_max}] exceeds ±{limit:.3f} mm "
                f"(±{TZ_FRACTION} of the {side_mm:.3f} mm volume side)"
            )

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True, eq=False)
class SliceSample:
    id: str
    image: SliceImage
    transform: RigidTransform
    euler: EulerCartesian
    quaternion: QuaternionCartesian
    anchors: AnchorPoints


def tz_grid(tz_min: float, tz_max: float, tz_step: float) -> np.ndarray:
    """Offsets ``tz_min + k * tz_step`` in the half-open range ``[tz_min, tz_max)``.

    ``tz_min == tz_max`` gives the single offset ``tz_min``.
    """
    if tz_max == tz_min:
        return np.array([float(tz_min)])
    n = math.ceil((tz_max - tz_min) / tz_step - 1e-9)
    return tz_min + tz_step * np.arange(n)


def euler_angle_grid(step: float, lo: float = -math.pi / 2, hi: float = math.pi / 2) -> np.ndarray:
    """Angles ``lo + k * step`` for k = 1..n covering ``(lo, hi]``."""
    n = round((hi - lo) / step)
    if n < 1 or abs(n * step - (hi - lo)) > 1e-9:
        raise ValueError(f"angle step {step} does not divide the range ({lo}, {hi}]")
    return lo + step * np.arange(1, n + 1)


def _slice_pose(r: np.ndarray, tz: float) -> RigidTransform:
    return RigidTransform(r, tz * r[:, 2])


def euler_grid_transforms(
    angle_step: float,
    tz_values,
    angle_range: tuple[float, float] = (-math.pi / 2, math.pi / 2),
) -> list[RigidTransform]:
    """Cartesian product of rx, ry, rz grids and the tz offsets (tz fastest)."""
    angles = euler_angle_grid(angle_step, *angle_range)
    tz_values = np.atleast_1d(np.asarray(tz_values, dtype=float))
    out = []
    for rx in angles:
        for ry in angles:
            for rz in angles:
                r = rotation_from_euler(rx, ry, rz)
                out.extend(_slice_pose(r, tz) for tz in tz_values)
    return out


def fibonacci_normals(n: int) -> np.ndarray:
    """Golden-angle sphere points, ``z_i = 1 - (2i+1)/n``, ``phi_i = 2 pi i / golden``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    i = np.arange(n)
    z = 1.0 - (2.0 * i + 1.0) / n
    phi = 2.0 * math.pi * i / GOLDEN_RATIO
    rho = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    return np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=1)


def _normal_transforms(normals, n_inplane: int, tz_values) -> list[RigidTransform]:
    """In-plane turn about z in ``[0, pi)``, then align +z with each normal."""
    tz_values = np.atleast_1d(np.asarray(tz_values, dtype=float))
    inplane = [rotation_z(math.pi * k / n_inplane) for k in range(n_inplane)]
    out = []
    for nrm in normals:
        align = rotation_between_vectors([0.0, 0.0, 1.0], nrm)
        for rz in inplane:
            r = align @ rz
            out.extend(_slice_pose(r, tz) for tz in tz_values)
    return out


def fibonacci_transforms(n_normals: int, n_inplane: int, tz_values) -> list[RigidTransform]:
    return _normal_transforms(fibonacci_normals(n_normals), n_inplane, tz_values)


def uniform_polar_normals(n_phi: int, n_theta: int) -> np.ndarray:
    """Equal steps in azimuth and polar angle; polar angles at cell centres."""
    phi = 2.0 * math.pi * np.arange(n_phi) / n_phi
    theta = math.pi * (np.arange(n_theta) + 0.5) / n_theta
    t, p = np.meshgrid(theta, phi, indexing="ij")
    t, p = t.ravel(), p.ravel()
    return np.stack([np.sin(t) * np.cos(p), np.sin(t) * np.sin(p), np.cos(t)], axis=1)


def uniform_polar_transforms(n_phi: int, n_theta: int, n_inplane: int, tz_values) -> list[RigidTransform]:
    return _normal_transforms(uniform_polar_normals(n_phi, n_theta), n_inplane, tz_values)


def random_validation_transforms(
    n: int,
    tz_bounds: tuple[float, float],
    seed: int = 0,
    inplane_max: float = math.pi,
) -> list[RigidTransform]:
    """Uniform random normals, in-plane angle in ``[0, inplane_max)``, tz uniform in bounds."""
    rng = np.random.default_rng(seed)
    z = rng.uniform(-1.0, 1.0, n)
    phi = rng.uniform(0.0, 2.0 * math.pi, n)
    gamma = rng.uniform(0.0, inplane_max, n)
    tz = rng.uniform(tz_bounds[0], tz_bounds[1], n)
    rho = np.sqrt(1.0 - z * z)
    normals = np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=1)
    out = []
    for k in range(n):
        r = rotation_between_vectors([0.0, 0.0, 1.0], normals[k]) @ rotation_z(gamma[k])
        out.append(_slice_pose(r, tz[k]))
    return out


def random_euler_transforms(
    n: int,
    tz_bounds: tuple[float, float],
    seed: int = 0,
    angle_range: tuple[float, float] = (-math.pi / 2, math.pi / 2),
) -> list[RigidTransform]:
    """Uniform random Euler angles and tz inside the bounds of an Euler grid."""
    rng = np.random.default_rng(seed)
    ang = rng.uniform(angle_range[0], angle_range[1], (n, 3))
    tz = rng.uniform(tz_bounds[0], tz_bounds[1], n)
    return [_slice_pose(rotation_from_euler(*ang[k]), tz[k]) for k in range(n)]


def transforms_from_config(cfg: SamplingConfig) -> list[RigidTransform]:
    tz = cfg.tz_values
    if cfg.scheme == "euler":
        return euler_grid_transforms(cfg.angle_step, tz)
    if cfg.scheme == "fibonacci":
        return fibonacci_transforms(cfg.n_normals, cfg.n_inplane, tz)
    if cfg.scheme == "polar":
        return uniform_polar_transforms(cfg.n_phi, cfg.n_theta, cfg.n_inplane, tz)
    if cfg.scheme == "random":
        return random_validation_transforms(cfg.n_random, (cfg.tz_min, cfg.tz_max), cfg.seed)
    return [RigidTransform.identity()]


def nearest_neighbor_angles(normals) -> np.ndarray:
    """Angle (radians) from each unit vector to its nearest neighbour, by brute force."""
    n = np.asarray(normals, dtype=float)
    cos = np.clip(n @ n.T, -1.0, 1.0)
    np.fill_diagonal(cos, -np.inf)
    return np.arccos(cos.max(axis=1))


def make_labels(t: RigidTransform, anchor_l: float) -> tuple[EulerCartesian, QuaternionCartesian, AnchorPoints]:
    return t.to_euler(), t.to_quaternion(), anchor_points_from_transform(t, anchor_l)


def manifest_row(
    sid: str, path: str, t: RigidTransform, anchor_l: float, content: float
) -> dict:
    e, q, a = make_labels(t, anchor_l)
    return {
        "id": sid,
        "slice": path,
        "euler": e.as_dict(),
        "quaternion": q.as_dict(),
        "anchors": a.as_dict(),
        "anchor_l": float(anchor_l),
        "content_fraction": content,
    }


def generate_dataset(
    v: Volume,
    cfg: SamplingConfig,
    out_dir,
    slice_size: int | None = None,
    slice_spacing: float | None = None,
    min_content: float = 0.05,
    anchor_l: float | None = None,
    threads: int = 1,
    chunk: int = 256,
) -> list[dict]:
    """Write one SPV1 slice per pose plus ``manifest.jsonl`` in ``out_dir``.

    Slices whose nonzero-pixel fraction is below ``min_content`` are left
    out.  ``anchor_l`` defaults to the slice side length in mm.  Output is
    byte-identical for a fixed config regardless of ``threads``.
    """
    slice_size = slice_size or v.dims[0]
    slice_spacing = slice_spacing or v.spacing
    anchor_l = anchor_l or slice_size * slice_spacing
    if cfg.scheme != "identity":
        cfg.check_tz_bounds(float(min(v.extent_mm)))
    transforms = transforms_from_config(cfg)
    os.makedirs(os.path.join(out_dir, "slices"), exist_ok=True)

    def work(start):
        part = transforms[start : start + chunk]
        pix = extract_slices(v, part, slice_size, slice_spacing)
        rows = []
        for k, (t, p) in enumerate(zip(part, pix)):
            p = p.astype(np.float32)
            content = float(np.count_nonzero(p)) / p.size
            if content < min_content:
                continue
            sid = f"{start + k:07d}"
            rel = f"slices/{sid}.spv"
            save_slice(SliceImage(p, slice_spacing), os.path.join(out_dir, rel), "f32")
            rows.append(manifest_row(sid, rel, t, anchor_l, content))
        return rows

    starts = range(0, len(transforms), chunk)
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(work, starts))
    else:
        parts = [work(s) for s in starts]
    rows = [r for part in parts for r in part]
    if not rows:
        raise EmptyDatasetError(f"no slice reached min_content={min_content}")
    write_jsonl(os.path.join(out_dir, "manifest.jsonl"), rows)
    return rows


def write_jsonl(path, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def read_manifest(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def row_transform(row: dict, source: str = "quaternion") -> RigidTransform:
    """Pose encoded in a manifest or prediction row."""
    if source == "quaternion":
        q = row["quaternion"]
        return QuaternionCartesian(**{k: q[k] for k in ("qw", "qx", "qy", "qz", "tx", "ty", "tz")}).to_transform()
    if source == "euler":
        return EulerCartesian(**row["euler"]).to_transform()
    if source == "anchors":
        a = row["anchors"]
        return AnchorPoints(a["p1"], a["p2"], a["p3"]).to_transform()
    raise ValueError(f"unknown label source {source!r}")
