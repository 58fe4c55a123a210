"""Slice-to-volume reconstruction.

The acquisition model is ``y = D B S M x + n``: the pose ``M`` places the
slice plane, ``S`` selects it, ``B`` blurs with the point-spread function and
``D`` resamples at the slice pixel spacing.  :func:`forward_project` applies
the model to a volume; :func:`splat_gaussian` inverts it approximately with a
PSF-weighted average of scattered slice pixels; :func:`svr_refine` alternates
that average with rigid per-slice registration.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .liegroup import mad_outlier_mask
from .metrics import cross_correlation
from .se3core import RigidTransform, compose, rotation_from_euler, rotation_x, rotation_y
from .volume import SliceImage, Volume, extract_slice, trilinear_sample

__all__ = [
    "FWHM_PER_SIGMA",
    "PSF",
    "ReconConfig",
    "Reconstruction",
    "RegistrationResult",
    "StackSpec",
    "MotionSpec",
    "forward_project",
    "splat_gaussian",
    "register_slice_to_volume",
    "svr_refine",
    "stack_poses",
    "corrupt_stacks",
    "masked_psnr",
]

FWHM_PER_SIGMA = 2.0 * math.sqrt(2.0 * math.log(2.0))

# 3-point Gauss-Hermite rule for a unit Gaussian: nodes 0, ±sqrt(3)
_GH_NODES = np.array([-math.sqrt(3.0), 0.0, math.sqrt(3.0)])
_GH_WEIGHTS = np.array([1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0])

_SPLAT_CHUNK = 16  # slices per partial grid; fixed so sums do not depend on thread count


@dataclass(frozen=True)
class PSF:
    """Gaussian point-spread function, sigmas in mm.

    A sigma of 0 is allowed and means no blur along that direction.
    """

    sigma_inplane: float
    sigma_through: float

    def __post_init__(self):
        if self.sigma_inplane < 0 or self.sigma_through < 0:
            raise ValueError("PSF sigmas must be non-negative")

    @classmethod
    def from_thickness(cls, thickness: float, pixel_spacing: float) -> "PSF":
        """FWHM equal to slice thickness through-plane and to pixel spacing in-plane."""
        return cls(pixel_spacing / FWHM_PER_SIGMA, thickness / FWHM_PER_SIGMA)


@dataclass(frozen=True)
class ReconConfig:
    """Grid, PSF and SVR settings.  Radii: radians for rotation, mm for translation."""

    dims: tuple = (64, 64, 64)
    spacing: float = 1.0
    psf: PSF = field(default_factory=lambda: PSF.from_thickness(1.0, 1.0))
    svr_iterations: int = 0
    rot_radius: float = math.radians(10.0)
    trans_radius: float = 8.0
    passes: int = 3
    max_sweeps: int = 6
    w_min: float = 0.01
    reject_outliers: bool = True
    registration_level: int = 1
    min_content: float = 0.25
    min_improvement: float = 1e-4

    def __post_init__(self):
        dims = self.dims
        if np.isscalar(dims):
            dims = (int(dims),) * 3
        dims = tuple(int(d) for d in dims)
        if len(dims) != 3 or min(dims) < 1:
            raise ValueError(f"grid dims must be three positive integers, got {self.dims!r}")
        object.__setattr__(self, "dims", dims)
        if not self.spacing > 0:
            raise ValueError("grid spacing must be positive")
        if self.svr_iterations < 0:
            raise ValueError("svr_iterations must be >= 0")
        if self.passes < 1 or self.max_sweeps < 1:
            raise ValueError("need at least one pass and one sweep")
        if self.rot_radius < 0 or self.trans_radius < 0:
            raise ValueError("search radii must be non-negative")
        if self.registration_level < 0:
            raise ValueError("registration_level must be >= 0")


@dataclass(frozen=True, eq=False)
class Reconstruction:
    """Volume estimate with its coverage mask and the poses that produced it.

    ``history`` holds one record per SVR round with the mean CC of the used
    slices before and after registration and the number rejected.
    """

    volume: Volume
    coverage: np.ndarray
    weights: np.ndarray
    poses: tuple
    used: np.ndarray
    history: tuple = ()


@dataclass(frozen=True)
class RegistrationResult:
    pose: RigidTransform
    cc: float
    cc_init: float
    no_overlap: bool = False
    evaluations: int = 0


# --- forward model -----------------------------------------------------------


def _slice_points(t: RigidTransform, l: int, spacing: float, offsets: np.ndarray) -> np.ndarray:
    g = (np.arange(l) - (l - 1) / 2.0) * spacing
    u, w = np.meshgrid(g, g, indexing="ij")
    local = np.empty((len(offsets), l, l, 3))
    local[..., 0] = u
    local[..., 1] = w
    local[..., 2] = offsets[:, None, None]
    return local @ t.rotation.T + t.translation


def forward_project(v: Volume, t: RigidTransform, l: int, spacing: float | None = None, psf: PSF | None = None) -> SliceImage:
    """Simulate acquiring the plane posed by ``t``.

    Each pixel integrates the volume against the PSF centred on it: a 3-point
    Gauss-Hermite rule through-plane and a Gaussian blur in-plane.
    """
    spacing = v.spacing if spacing is None else spacing
    psf = psf or PSF(0.0, 0.0)
    if psf.sigma_through > 0:
        offsets, weights = _GH_NODES * psf.sigma_through, _GH_WEIGHTS
    else:
        offsets, weights = np.zeros(1), np.ones(1)
    samples = trilinear_sample(v, _slice_points(t, l, spacing, offsets))
    img = np.tensordot(weights, samples, axes=1)
    if psf.sigma_inplane > 0:
        img = gaussian_filter(img, psf.sigma_inplane / spacing, mode="nearest")
    return SliceImage(img, spacing)


# --- Gaussian-average reconstruction -----------------------------------------


def _grid_axes(cfg: ReconConfig):
    return [(np.arange(n) - (n - 1) / 2.0) * cfg.spacing for n in cfg.dims]


def _splat_one(img: SliceImage, pose: RigidTransform, cfg: ReconConfig, centres: np.ndarray, w_acc, s_acc) -> None:
    psf = cfg.psf
    s = img.spacing
    l = img.l
    si = max(psf.sigma_inplane, 1e-6 * s)
    st = max(psf.sigma_through, 1e-6 * cfg.spacing)
    reach_t = 3.0 * st
    half = (l - 1) / 2.0 * s + 3.0 * si
    # cheap world-space prefilter: voxels near the plane
    n = pose.rotation[:, 2]
    dist = (centres - pose.translation) @ n
    near = np.flatnonzero(np.abs(dist) <= reach_t)
    if near.size == 0:
        return
    local = (centres[near] - pose.translation) @ pose.rotation
    keep = (np.abs(local[:, 0]) <= half) & (np.abs(local[:, 1]) <= half)
    near, local = near[keep], local[keep]
    if near.size == 0:
        return
    a = local[:, 0] / s + (l - 1) / 2.0
    b = local[:, 1] / s + (l - 1) / 2.0
    wz = np.exp(-0.5 * (local[:, 2] / st) ** 2)
    r = int(math.ceil(3.0 * si / s))
    a0 = np.floor(a).astype(np.int64)
    b0 = np.floor(b).astype(np.int64)
    pix = img.pixels.astype(np.float64, copy=False)
    w_tot = np.zeros(near.size)
    s_tot = np.zeros(near.size)
    for di in range(-r, r + 2):
        i = a0 + di
        oki = (i >= 0) & (i < l)
        wi = np.exp(-0.5 * ((a - i) * s / si) ** 2)
        for dj in range(-r, r + 2):
            j = b0 + dj
            ok = oki & (j >= 0) & (j < l)
            w = np.where(ok, wi * np.exp(-0.5 * ((b - j) * s / si) ** 2) * wz, 0.0)
            w_tot += w
            s_tot += w * pix[np.clip(i, 0, l - 1), np.clip(j, 0, l - 1)]
    w_acc[near] += w_tot
    s_acc[near] += s_tot


def _splat_chunk(args):
    items, cfg, centres = args
    w = np.zeros(len(centres))
    s = np.zeros(len(centres))
    for img, pose in items:
        _splat_one(img, pose, cfg, centres, w, s)
    return w, s


def _accumulate(slices: Sequence, cfg: ReconConfig, threads: int = 1):
    axes = _grid_axes(cfg)
    centres = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    chunks = [(slices[i : i + _SPLAT_CHUNK], cfg, centres) for i in range(0, len(slices), _SPLAT_CHUNK)]
    w_sum = np.zeros(len(centres))
    s_sum = np.zeros(len(centres))
    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(threads) as ex:
            parts = ex.map(_splat_chunk, chunks)
            for w, s in parts:  # merged in chunk order
                w_sum += w
                s_sum += s
    else:
        for c in chunks:
            w, s = _splat_chunk(c)
            w_sum += w
            s_sum += s
    return w_sum.reshape(cfg.dims), s_sum.reshape(cfg.dims)


def _reconstruction(slices, poses, used, cfg, threads, history=()) -> Reconstruction:
    items = [(img, p) for img, p, u in zip(slices, poses, used) if u]
    w, s = _accumulate(items, cfg, threads)
    cov = w >= cfg.w_min
    data = np.zeros(cfg.dims)
    data[cov] = s[cov] / w[cov]
    cov.flags.writeable = False
    w.flags.writeable = False
    return Reconstruction(Volume(data, cfg.spacing), cov, w, tuple(poses), np.asarray(used, dtype=bool), tuple(history))


def _split(slices):
    imgs, poses = [], []
    for img, pose in slices:
        imgs.append(img)
        poses.append(pose)
    return imgs, poses


def splat_gaussian(slices: Sequence, cfg: ReconConfig, threads: int = 1) -> Reconstruction:
    """PSF-weighted average of all slice pixels on the configured grid.

    ``slices`` is a sequence of ``(SliceImage, RigidTransform)``.  Voxels whose
    total weight is below ``cfg.w_min`` (relative to a single pixel's peak
    weight of 1) are left at 0 and marked uncovered.
    """
    if len(slices) == 0:
        raise ValueError("need at least one slice")
    imgs, poses = _split(slices)
    return _reconstruction(imgs, poses, [True] * len(imgs), cfg, threads)


# --- registration ------------------------------------------------------------


def _block_mean(p: np.ndarray, level: int) -> np.ndarray:
    for _ in range(level):
        l = p.shape[0] - p.shape[0] % 2
        p = p[:l, :l].reshape(l // 2, 2, l // 2, 2).mean(axis=(1, 3))
    return p


def _offset_pose(init: RigidTransform, p: np.ndarray) -> RigidTransform:
    return compose(init, RigidTransform(rotation_from_euler(*p[:3]), p[3:]))


def register_slice_to_volume(img: SliceImage, init: RigidTransform, v: Volume, cfg: ReconConfig) -> RegistrationResult:
    """Local CC maximization around ``init`` by shrinking coordinate descent.

    The offset is parameterized in the slice frame as three Euler angles and
    a translation, each bounded by the search radius.  Step sizes start at
    half the radius and halve on every pass.  A candidate replaces the
    incumbent only if it raises CC, so the result never scores below
    ``init``.  Constant inputs return ``init`` with ``no_overlap=True``.
    """
    level = min(cfg.registration_level, int(math.log2(max(img.l, 1))))
    target = _block_mean(img.pixels.astype(np.float64), level)
    l = target.shape[0]
    spacing = img.spacing * 2**level
    # the block mean acts as an extra in-plane box blur
    si = math.sqrt(cfg.psf.sigma_inplane**2 + (spacing**2 - img.spacing**2) / 12.0)
    psf = PSF(si, cfg.psf.sigma_through)
    if np.ptp(target) == 0:
        return RegistrationResult(init, float("nan"), float("nan"), True)
    skip = img.content_fraction() < cfg.min_content
    evals = 0

    def score(p):
        nonlocal evals
        evals += 1
        proj = forward_project(v, _offset_pose(init, p), l, spacing, psf).pixels
        if np.ptp(proj) == 0:
            return -math.inf
        return cross_correlation(target, proj)

    p = np.zeros(6)
    best = c0 = score(p)
    radius = np.array([cfg.rot_radius] * 3 + [cfg.trans_radius] * 3)
    step = radius / 2.0
    for _ in range(0 if skip else cfg.passes):
        for _ in range(cfg.max_sweeps):
            moved = False
            for d in range(6):
                if step[d] == 0:
                    continue
                cands = []
                for sign in (1.0, -1.0):
                    q = p.copy()
                    q[d] += sign * step[d]
                    if abs(q[d]) <= radius[d] * (1 + 1e-12):
                        cands.append((score(q), sign, q))
                for c, _, q in sorted(cands, key=lambda x: (-x[0], -x[1])):
                    if c > best + cfg.min_improvement:
                        best, p, moved = c, q, True
                    break
            if not moved:
                break
        step = step / 2.0
    if c0 == -math.inf and best == -math.inf:
        return RegistrationResult(init, float("nan"), float("nan"), True, evals)
    return RegistrationResult(_offset_pose(init, p), best, c0, False, evals)


def _slice_ccs(imgs, poses, v: Volume, cfg: ReconConfig) -> np.ndarray:
    out = np.full(len(imgs), np.nan)
    for k, (img, pose) in enumerate(zip(imgs, poses)):
        proj = forward_project(v, pose, img.l, img.spacing, cfg.psf).pixels
        if np.ptp(proj) > 0 and np.ptp(img.pixels) > 0:
            out[k] = cross_correlation(img.pixels, proj)
    return out


def svr_refine(slices: Sequence, init_poses: Sequence[RigidTransform] | None, cfg: ReconConfig, threads: int = 1) -> Reconstruction:
    """Alternate Gaussian-average reconstruction and per-slice registration.

    Each round registers every slice against a frozen snapshot of the
    current volume, drops slices whose CC falls below median − 3·MAD (when
    ``cfg.reject_outliers``), then rebuilds the volume from the remaining
    slices at their new poses.  With ``svr_iterations == 0`` this is
    :func:`splat_gaussian`.
    """
    if len(slices) == 0:
        raise ValueError("need at least one slice")
    imgs, given = _split(slices)
    poses = list(init_poses) if init_poses is not None else given
    if len(poses) != len(imgs):
        raise ValueError("one initial pose per slice is required")
    used = np.ones(len(imgs), dtype=bool)
    rec = _reconstruction(imgs, poses, used, cfg, threads)
    history = []
    for _ in range(cfg.svr_iterations):
        vol = rec.volume

        def reg(k, vol=vol):
            return register_slice_to_volume(imgs[k], poses[k], vol, cfg)

        idx = list(range(len(imgs)))
        if threads > 1:
            with ThreadPoolExecutor(threads) as ex:
                results = list(ex.map(reg, idx))
        else:
            results = [reg(k) for k in idx]
        poses = [r.pose for r in results]
        cc_before = np.array([r.cc_init for r in results])
        cc_after = np.array([r.cc for r in results])
        # constant slices cannot be registered but still carry intensity
        scored = np.isfinite(cc_after)
        used = np.ones(len(imgs), dtype=bool)
        if cfg.reject_outliers and scored.sum() > 2:
            vals = cc_after[scored]
            low = mad_outlier_mask(vals) & (vals < np.median(vals))
            used[np.flatnonzero(scored)[low]] = False
        kept = scored & used
        history.append(
            {
                "cc_before": float(np.mean(cc_before[kept])) if kept.any() else float("nan"),
                "cc_after": float(np.mean(cc_after[kept])) if kept.any() else float("nan"),
                "rejected": int((~used).sum()),
            }
        )
        rec = _reconstruction(imgs, poses, used, cfg, threads, history)
    return rec


# --- simulated acquisitions --------------------------------------------------

_ORIENTATIONS = {
    "axial": np.eye(3),
    "coronal": rotation_x(math.pi / 2),
    "sagittal": rotation_y(math.pi / 2),
}


@dataclass(frozen=True)
class StackSpec:
    """A stack of parallel slices centred on the origin, ``gap`` mm apart."""

    orientation: str = "axial"
    n_slices: int = 64
    gap: float = 1.0
    slice_size: int = 64
    slice_spacing: float = 1.0

    def __post_init__(self):
        if self.orientation not in _ORIENTATIONS:
            raise ValueError(f"unknown orientation {self.orientation!r}; choose from {', '.join(_ORIENTATIONS)}")
        if self.n_slices < 1 or self.slice_size < 1 or not self.gap > 0 or not self.slice_spacing > 0:
            raise ValueError("invalid stack geometry")


@dataclass(frozen=True)
class MotionSpec:
    """Rigid motion bounds (mm, radians).

    ``mode="random"`` draws each slice independently; ``mode="smooth"``
    follows a slow sinusoidal rotation and drift across the stack, like a
    head turning during acquisition.
    """

    max_translation: float = 0.0
    max_rotation: float = 0.0
    mode: str = "random"

    def __post_init__(self):
        if self.max_translation < 0 or self.max_rotation < 0:
            raise ValueError("motion bounds must be non-negative")
        if self.mode not in ("random", "smooth"):
            raise ValueError(f"unknown motion mode {self.mode!r}")


def stack_poses(spec: StackSpec) -> list[RigidTransform]:
    r = _ORIENTATIONS[spec.orientation]
    return [
        RigidTransform(r, (k - (spec.n_slices - 1) / 2.0) * spec.gap * r[:, 2]) for k in range(spec.n_slices)
    ]


def _axis_angle(axis: np.ndarray, angle: float) -> np.ndarray:
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + math.sin(angle) * k + (1 - math.cos(angle)) * (k @ k)


def _unit(rng) -> np.ndarray:
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def _motions(n: int, m: MotionSpec, rng) -> list[RigidTransform]:
    if m.max_rotation == 0 and m.max_translation == 0:
        return [RigidTransform.identity()] * n
    if m.mode == "random":
        out = []
        for _ in range(n):
            r = _axis_angle(_unit(rng), rng.uniform(0, m.max_rotation))
            t = _unit(rng) * rng.uniform(0, m.max_translation)
            out.append(RigidTransform(r, t))
        return out
    axis, drift = _unit(rng), _unit(rng)
    freq, phase = rng.uniform(0.5, 1.5), rng.uniform(0, 2 * math.pi)
    out = []
    for k in range(n):
        s = math.sin(2 * math.pi * freq * k / max(n, 1) + phase)
        out.append(RigidTransform(_axis_angle(axis, m.max_rotation * s), drift * m.max_translation * s))
    return out


def corrupt_stacks(
    v: Volume,
    stacks: StackSpec | Sequence[StackSpec],
    motion: MotionSpec | None = None,
    noise_sigma: float = 0.0,
    seed: int = 0,
    psf: PSF | None = None,
) -> list[tuple[SliceImage, RigidTransform]]:
    """Motion-corrupted slices with their true poses.

    Motion is a world-frame rigid transform about the volume centre applied
    to each nominal stack pose, so the true pose is ``motion ∘ nominal``.
    With ``psf`` the slices go through :func:`forward_project`, otherwise
    through :func:`extract_slice`.  Noise is additive Gaussian.
    """
    if isinstance(stacks, StackSpec):
        stacks = [stacks]
    motion = motion or MotionSpec()
    rng = np.random.default_rng(seed)
    out = []
    for spec in stacks:
        nominal = stack_poses(spec)
        for pose, m in zip(nominal, _motions(len(nominal), motion, rng)):
            truth = compose(m, pose)
            if psf is None:
                img = extract_slice(v, truth, spec.slice_size, spec.slice_spacing)
            else:
                img = forward_project(v, truth, spec.slice_size, spec.slice_spacing, psf)
            if noise_sigma > 0:
                img = SliceImage(img.pixels + rng.normal(0.0, noise_sigma, img.pixels.shape), img.spacing)
            out.append((img, truth))
    return out


def masked_psnr(recon: Volume, reference: Volume, mask=None, max_i: float = 255.0) -> float:
    """PSNR in dB over ``mask`` (all voxels by default)."""
    a = np.asarray(recon.data, dtype=float)
    b = np.asarray(reference.data, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"volume shapes differ: {a.shape} vs {b.shape}")
    m = np.ones(a.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if not m.any():
        raise ValueError("PSNR mask is empty")
    e = float(np.mean((a[m] - b[m]) ** 2))
    return math.inf if e == 0 else 10.0 * math.log10(max_i * max_i / e)
