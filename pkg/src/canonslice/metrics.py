"""Image-similarity metrics and pose-label errors/losses."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .liegroup import geodesic_distance
from .se3core import AnchorPoints, QuaternionCartesian, RigidTransform, anchor_points_from_transform

__all__ = [
    "MetricReport",
    "cross_correlation",
    "mse",
    "psnr",
    "ssim",
    "euclidean_distance_error",
    "posenet_loss",
    "anchor_loss",
    "metric_report",
]


def _pair(f, g) -> tuple[np.ndarray, np.ndarray]:
    f = np.asarray(getattr(f, "pixels", f), dtype=float)
    g = np.asarray(getattr(g, "pixels", g), dtype=float)
    if f.shape != g.shape:
        raise ValueError(f"image shapes differ: {f.shape} vs {g.shape}")
    return f, g


def _normalized(f: np.ndarray) -> np.ndarray:
    d = f - f.mean()
    n = math.sqrt(float(np.sum(d * d)))
    if n == 0:
        raise ValueError("cross correlation is undefined for a constant image")
    return d / n


def cross_correlation(f, g) -> float:
    """Sum of products of the mean-removed, unit-norm images (in [-1, 1])."""
    f, g = _pair(f, g)
    return float(np.sum(_normalized(f) * _normalized(g)))


def mse(f, g) -> float:
    f, g = _pair(f, g)
    return float(np.mean((f - g) ** 2))


def psnr(f, g, max_i: float = 255.0) -> float:
    """Peak signal-to-noise ratio in dB; ``math.inf`` for identical images."""
    e = mse(f, g)
    if e == 0:
        return math.inf
    return 10.0 * math.log10(max_i * max_i / e)


def ssim(f, g, k1: float = 0.01, k2: float = 0.03, max_i: float = 255.0) -> float:
    """Single-window (global) structural similarity."""
    f, g = _pair(f, g)
    c1 = (k1 * max_i) ** 2
    c2 = (k2 * max_i) ** 2
    mf, mg = f.mean(), g.mean()
    vf, vg = f.var(), g.var()
    cov = float(np.mean((f - mf) * (g - mg)))
    return float(((2 * mf * mg + c1) * (2 * cov + c2)) / ((mf * mf + mg * mg + c1) * (vf + vg + c2)))


def euclidean_distance_error(pred: AnchorPoints, gt: AnchorPoints) -> float:
    """Mean distance (mm) between corresponding anchor points."""
    d = np.linalg.norm(pred.as_array() - gt.as_array(), axis=1)
    return float(d.mean())


def posenet_loss(pred: QuaternionCartesian, gt: QuaternionCartesian, beta: float = 1.0) -> float:
    """``|x_pred - x| + beta * |q_pred - q / |q||``; the prediction is not renormalized."""
    q = gt.quaternion
    nq = np.linalg.norm(q)
    if nq == 0:
        raise ValueError("ground-truth quaternion is zero")
    return float(np.linalg.norm(pred.translation - gt.translation) + beta * np.linalg.norm(pred.quaternion - q / nq))


def anchor_loss(pred: AnchorPoints, gt: AnchorPoints, alpha: float = 1.0, beta: float = 1.0, gamma: float = 1.0) -> float:
    d = np.linalg.norm(pred.as_array() - gt.as_array(), axis=1)
    return float(alpha * d[0] + beta * d[1] + gamma * d[2])


@dataclass(frozen=True)
class MetricReport:
    """Per-slice evaluation; image metrics are ``None`` when no images were compared."""

    ed_error: float
    gd_error: float
    cc: float | None = None
    mse: float | None = None
    psnr: float | None = None
    ssim: float | None = None

    def as_dict(self) -> dict:
        return asdict(self)


def metric_report(
    pred: RigidTransform,
    gt: RigidTransform,
    anchor_l: float,
    pred_image=None,
    gt_image=None,
    max_i: float = 255.0,
    w_rot: float = 1.0,
    w_trans: float = 1.0,
) -> MetricReport:
    ed = euclidean_distance_error(anchor_points_from_transform(pred, anchor_l), anchor_points_from_transform(gt, anchor_l))
    gd = geodesic_distance(gt, pred, w_rot, w_trans)
    if pred_image is None or gt_image is None:
        return MetricReport(ed, gd)
    try:
        cc = cross_correlation(pred_image, gt_image)
    except ValueError:
        cc = None
    return MetricReport(
        ed,
        gd,
        cc,
        mse(pred_image, gt_image),
        psnr(pred_image, gt_image, max_i),
        ssim(pred_image, gt_image, max_i=max_i),
    )
