"""Deterministic synthetic volumes for tests, demos and the CLI."""

from __future__ import annotations

import numpy as np

from .volume import Volume

KINDS = ("gradient", "shells", "sinusoid", "blobs")


def _grid(dims: int, spacing: float):
    g = (np.arange(dims) - (dims - 1) / 2.0) * spacing
    return np.meshgrid(g, g, g, indexing="ij")


def _taper(r: np.ndarray, radius: float, width: float) -> np.ndarray:
    """1 inside ``radius - width``, raised-cosine falloff to 0 at ``radius``."""
    s = np.clip((radius - r) / width, 0.0, 1.0)
    return 0.5 - 0.5 * np.cos(np.pi * s)


def gradient(dims: int = 64, spacing: float = 1.0) -> Volume:
    """Intensity affine in z, spanning 0..255 over the grid."""
    _, _, z = _grid(dims, spacing)
    return Volume(255.0 * (z - z.min()) / (z.max() - z.min()), spacing)


def shells(dims: int = 64, spacing: float = 1.0, period_mm: float | None = None) -> Volume:
    """Concentric spherical shells inside a soft-edged ball."""
    x, y, z = _grid(dims, spacing)
    half = dims * spacing / 2.0
    period = period_mm or half / 3.0
    r = np.sqrt(x * x + y * y + z * z)
    d = 127.5 * (1.0 + np.cos(2 * np.pi * r / period)) * _taper(r, 0.9 * half, 0.15 * half)
    return Volume(d, spacing)


def sinusoid(dims: int = 64, spacing: float = 1.0, period_mm: float | None = None) -> Volume:
    """Product of sinusoids along x, y and z inside a soft-edged ball."""
    x, y, z = _grid(dims, spacing)
    half = dims * spacing / 2.0
    period = period_mm or half
    k = 2 * np.pi / period
    r = np.sqrt(x * x + y * y + z * z)
    field = (1.0 + np.sin(k * x + 0.3) * np.sin(0.8 * k * y + 0.7) * np.sin(1.2 * k * z + 1.1)) / 2.0
    return Volume(255.0 * field * _taper(r, 0.9 * half, 0.15 * half), spacing)


def blobs(dims: int = 64, spacing: float = 1.0, seed: int = 0, n_blobs: int = 12) -> Volume:
    """Asymmetric, smooth head-like phantom: Gaussian blobs in a soft ellipsoid.

    No rotation or reflection symmetry, so distinct poses give distinct slices.
    """
    rng = np.random.default_rng(seed)
    x, y, z = _grid(dims, spacing)
    half = dims * spacing / 2.0
    axes = np.array([0.85, 0.72, 0.62]) * half
    r = np.sqrt((x / axes[0]) ** 2 + (y / axes[1]) ** 2 + (z / axes[2]) ** 2)
    field = 0.35 + 0.25 * (x / half) + 0.1 * (y / half)
    for _ in range(n_blobs):
        c = rng.uniform(-0.55, 0.55, size=3) * axes
        sig = rng.uniform(0.12, 0.3) * half
        amp = rng.uniform(-0.45, 0.8)
        field = field + amp * np.exp(-((x - c[0]) ** 2 + (y - c[1]) ** 2 + (z - c[2]) ** 2) / (2 * sig * sig))
    field = np.clip(field, 0.05, None)
    field = field / field.max()
    return Volume(255.0 * field * _taper(r, 1.0, 0.25), spacing)


def make_phantom(kind: str, dims: int = 64, spacing: float = 1.0, seed: int = 0) -> Volume:
    if kind == "gradient":
        return gradient(dims, spacing)
    if kind == "shells":
        return shells(dims, spacing)
    if kind == "sinusoid":
        return sinusoid(dims, spacing)
    if kind == "blobs":
        return blobs(dims, spacing, seed)
    raise ValueError(f"unknown phantom kind {kind!r}; choose from {', '.join(KINDS)}")
