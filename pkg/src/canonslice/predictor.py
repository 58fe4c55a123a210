"""Pose predictors, Monte-Carlo aggregation on SE(3) and confidence filtering.

Any object with ``predict(image, stochastic=False, rng_seed=None)``
returning a :class:`RigidTransform` can drive :func:`mc_aggregate`.  The
dictionary model shipped here is a template-matching stand-in for a learned
regressor: it returns the pose of the most similar atlas slice, and in
stochastic mode draws among the best ``top_k`` matches.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Protocol, Sequence, runtime_checkable

import numpy as np

from .liegroup import frechet_mean
from .sampler import SamplingConfig, transforms_from_config
from .se3core import RigidTransform
from .volume import SliceImage, Volume, extract_slices

__all__ = [
    "PosePredictor",
    "DegeneratePredictionError",
    "DictionaryModel",
    "PredictionSet",
    "descriptor",
    "build_dictionary",
    "dictionary_predict",
    "mc_aggregate",
    "confidence_filter",
    "save_dictionary",
    "load_dictionary",
    "DEFAULT_MC_SAMPLES",
    "DEFAULT_VARIANCE_THRESHOLD",
]

DEFAULT_MC_SAMPLES = 100
DEFAULT_VARIANCE_THRESHOLD = 10.0


class DegeneratePredictionError(ValueError):
    """The input slice carries no usable signal (e.g. constant intensity)."""


@runtime_checkable
class PosePredictor(Protocol):
    def predict(self, image: SliceImage, stochastic: bool = False, rng_seed=None) -> RigidTransform: ...


def _downsample(p: np.ndarray, size: int) -> np.ndarray:
    l = p.shape[-1]
    if size == l:
        return p
    if l % size == 0:
        f = l // size
        return p.reshape(p.shape[:-2] + (size, f, size, f)).mean(axis=(-3, -1))
    # area-weighted resampling for non-integer factors
    edges = np.linspace(0, l, size + 1)
    w = np.zeros((size, l))
    for i in range(size):
        lo, hi = edges[i], edges[i + 1]
        for j in range(int(math.floor(lo)), int(math.ceil(hi))):
            w[i, j] = min(hi, j + 1) - max(lo, j)
    w /= w.sum(axis=1, keepdims=True)
    return np.einsum("ia,...ab,jb->...ij", w, p, w)


def descriptor(pixels, size: int, similarity: str = "cc") -> np.ndarray | None:
    """Flattened reduced-resolution descriptor, or ``None`` for a constant image.

    For ``cc`` the descriptor is mean-removed and unit-norm so similarity is
    a dot product.  A descriptor that becomes constant only after reduction
    (e.g. ``size=1``) is all zeros and matches everything equally.
    """
    pixels = np.asarray(pixels, dtype=float)
    if np.ptp(pixels) == 0:
        return None
    p = _downsample(pixels, size).reshape(-1)
    if similarity == "ssim":
        return p
    d = p - p.mean()
    n = np.linalg.norm(d)
    return d / n if n > 0 else np.zeros_like(d)


@dataclass(frozen=True, eq=False)
class DictionaryModel:
    descriptors: np.ndarray  # (n, size*size)
    rotations: np.ndarray  # (n, 3, 3)
    translations: np.ndarray  # (n, 3)
    descriptor_size: int
    similarity: str = "cc"
    slice_size: int = 64
    slice_spacing: float = 1.0
    top_k: int = 10
    temperature: float = 0.05

    def __post_init__(self):
        if len(self.descriptors) == 0:
            raise ValueError("dictionary has no entries")
        if self.similarity not in ("cc", "ssim"):
            raise ValueError(f"unknown similarity {self.similarity!r}")
        for name in ("descriptors", "rotations", "translations"):
            a = np.array(getattr(self, name), dtype=float)
            a.flags.writeable = False
            object.__setattr__(self, name, a)

    def __len__(self) -> int:
        return len(self.descriptors)

    def pose(self, i: int) -> RigidTransform:
        return RigidTransform(self.rotations[i], self.translations[i])

    def similarities(self, image) -> np.ndarray:
        pixels = getattr(image, "pixels", image)
        q = descriptor(pixels, self.descriptor_size, self.similarity)
        if q is None:
            raise DegeneratePredictionError("constant input slice: similarity undefined")
        if self.similarity == "cc":
            return self.descriptors @ q
        return _ssim_rows(self.descriptors, q)

    def predict(self, image, stochastic: bool = False, rng_seed=None) -> RigidTransform:
        return dictionary_predict(self, image, stochastic, rng_seed)

    def predict_batch(self, images, chunk: int = 512) -> list[RigidTransform | None]:
        """Deterministic predictions for many images, scored a block at a time.

        Equivalent to ``predict`` per image (first index wins ties); constant
        images give ``None``.
        """
        out: list[RigidTransform | None] = []
        images = list(images)
        for s in range(0, len(images), chunk):
            qs = [descriptor(getattr(im, "pixels", im), self.descriptor_size, self.similarity) for im in images[s : s + chunk]]
            ok = [k for k, q in enumerate(qs) if q is not None]
            best = {}
            if ok:
                q = np.stack([qs[k] for k in ok])
                if self.similarity == "cc":
                    sims = q @ self.descriptors.T
                else:
                    sims = np.stack([_ssim_rows(self.descriptors, x) for x in q])
                best = dict(zip(ok, np.argmax(sims, axis=1)))
            out.extend(self.pose(int(best[k])) if k in best else None for k in range(len(qs)))
        return out

    def predict_samples(self, image, seeds: Sequence) -> list[RigidTransform]:
        """Same draws as ``predict(image, True, s)`` for each seed, scoring once."""
        sims = self.similarities(image)
        return [self.pose(_draw(self, sims, s)) for s in seeds]


def _ssim_rows(d: np.ndarray, q: np.ndarray, max_i: float = 255.0) -> np.ndarray:
    c1 = (0.01 * max_i) ** 2
    c2 = (0.03 * max_i) ** 2
    md = d.mean(axis=1)
    mq = q.mean()
    vd = d.var(axis=1)
    vq = q.var()
    cov = (d - md[:, None]) @ (q - mq) / q.size
    return ((2 * md * mq + c1) * (2 * cov + c2)) / ((md * md + mq * mq + c1) * (vd + vq + c2))


def _ranked(sims: np.ndarray) -> np.ndarray:
    return np.argsort(-sims, kind="stable")


def _draw(m: DictionaryModel, sims: np.ndarray, rng_seed) -> int:
    top = _ranked(sims)[: m.top_k]
    s = sims[top]
    p = np.exp((s - s.max()) / m.temperature)
    p /= p.sum()
    rng = np.random.default_rng(rng_seed)
    return int(top[rng.choice(len(top), p=p)])


def dictionary_predict(m: DictionaryModel, img, stochastic: bool = False, rng_seed=None) -> RigidTransform:
    """Pose of the best-matching entry, or a softmax draw among the top ``k``.

    Ties go to the lowest entry index.  Raises
    :class:`DegeneratePredictionError` for a constant image.
    """
    sims = m.similarities(img)
    if not stochastic:
        return m.pose(int(_ranked(sims)[0]))
    return m.pose(_draw(m, sims, rng_seed))


def _pose_key(r: np.ndarray, t: np.ndarray) -> bytes:
    return (np.round(np.concatenate([r.ravel(), t / 1e3]), 9) + 0.0).tobytes()  # + 0.0 folds -0.0


def build_dictionary(
    atlas: Volume,
    cfg: SamplingConfig,
    descriptor_size: int = 32,
    slice_size: int | None = None,
    slice_spacing: float | None = None,
    min_content: float = 0.05,
    similarity: str = "cc",
    top_k: int = 10,
    temperature: float = 0.05,
    dedupe: bool = True,
    transforms: Sequence[RigidTransform] | None = None,
) -> DictionaryModel:
    """Sample atlas slices at the configured poses and store their descriptors.

    Slices are taken at float32 precision, as :func:`generate_dataset` stores
    them.  Content filtering matches the dataset generator.  With ``dedupe``
    repeated poses (e.g. Euler grids at gimbal lock) keep only their first
    occurrence so self-retrieval is unambiguous.
    """
    slice_size = slice_size or atlas.dims[0]
    slice_spacing = slice_spacing or atlas.spacing
    ts = list(transforms) if transforms is not None else transforms_from_config(cfg)
    descs, rots, trans = [], [], []
    seen = set()
    for start in range(0, len(ts), 256):
        part = ts[start : start + 256]
        pix = extract_slices(atlas, part, slice_size, slice_spacing).astype(np.float32)
        for t, p in zip(part, pix):
            if np.count_nonzero(p) / p.size < min_content:
                continue
            if dedupe:
                key = _pose_key(t.rotation, t.translation)
                if key in seen:
                    continue
                seen.add(key)
            d = descriptor(p, descriptor_size, similarity)
            if d is None:
                continue
            descs.append(d)
            rots.append(t.rotation)
            trans.append(t.translation)
    if not descs:
        raise ValueError("dictionary is empty after content filtering")
    return DictionaryModel(
        np.stack(descs),
        np.stack(rots),
        np.stack(trans),
        descriptor_size,
        similarity,
        slice_size,
        slice_spacing,
        top_k,
        temperature,
    )


@dataclass(frozen=True, eq=False)
class PredictionSet:
    """Monte-Carlo predictions for one slice.

    ``status`` is ``accepted``, ``rejected`` (variance above threshold),
    ``not-converged`` (mean undefined or iteration cap hit) or ``failed``
    (the predictor refused the input).
    """

    samples: tuple = field(default_factory=tuple)
    mean: RigidTransform | None = None
    variance: float = math.inf
    accepted: bool = False
    status: str = "failed"
    iterations: int = 0


def mc_aggregate(
    p,
    img,
    n: int = DEFAULT_MC_SAMPLES,
    threshold: float = DEFAULT_VARIANCE_THRESHOLD,
    seed: int = 0,
    w_rot: float = 1.0,
    w_trans: float = 1.0,
) -> PredictionSet:
    """Draw ``n`` stochastic predictions and summarize them on SE(3).

    Sample ``i`` uses seed ``[seed, i]``.  The set is accepted iff the Fréchet
    mean converged and its variance is at most ``threshold``.
    """
    if n < 1:
        raise ValueError("need at least one Monte-Carlo sample")
    seeds = [[seed, i] for i in range(n)]
    try:
        if hasattr(p, "predict_samples"):
            samples = p.predict_samples(img, seeds)
        else:
            samples = [p.predict(img, stochastic=True, rng_seed=s) for s in seeds]
    except DegeneratePredictionError:
        return PredictionSet(status="failed")
    stats = frechet_mean(samples, w_rot=w_rot, w_trans=w_trans)
    if not stats.converged:
        return PredictionSet(tuple(samples), stats.mean, stats.variance, False, "not-converged", stats.iterations)
    ok = stats.variance <= threshold
    return PredictionSet(
        tuple(samples), stats.mean, stats.variance, ok, "accepted" if ok else "rejected", stats.iterations
    )


def confidence_filter(sets: Sequence[PredictionSet], threshold: float = DEFAULT_VARIANCE_THRESHOLD):
    """Split into (kept, discarded) by variance, preserving order.

    Failed or non-converged sets are always discarded.
    """
    kept, discarded = [], []
    for s in sets:
        good = s.status in ("accepted", "rejected") and s.variance <= threshold
        (kept if good else discarded).append(s)
    return kept, discarded


# --- model file ------------------------------------------------------------

_MODEL_MAGIC = "SPDICT1"


def save_dictionary(m: DictionaryModel, path) -> None:
    """Text header (``key=value`` lines, blank-line terminated) + little-endian f64 arrays."""
    header = (
        f"magic={_MODEL_MAGIC}\nentries={len(m)}\ndescriptor_size={m.descriptor_size}\n"
        f"descriptor_length={m.descriptors.shape[1]}\nsimilarity={m.similarity}\n"
        f"slice_size={m.slice_size}\nslice_spacing={m.slice_spacing!r}\n"
        f"top_k={m.top_k}\ntemperature={m.temperature!r}\n\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        for a in (m.descriptors, m.rotations, m.translations):
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_dictionary(path) -> DictionaryModel:
    with open(path, "rb") as fh:
        raw = fh.read()
    end = raw.find(b"\n\n")
    if end < 0:
        raise ValueError("not a dictionary model file")
    fields = dict(line.split("=", 1) for line in raw[:end].decode("ascii").split("\n"))
    if fields.get("magic") != _MODEL_MAGIC:
        raise ValueError("not a dictionary model file")
    n = int(fields["entries"])
    dl = int(fields["descriptor_length"])
    arr = np.frombuffer(raw[end + 2 :], dtype="<f8")
    if arr.size != n * (dl + 12):
        raise ValueError("dictionary payload size mismatch")
    d = arr[: n * dl].reshape(n, dl)
    r = arr[n * dl : n * (dl + 9)].reshape(n, 3, 3)
    t = arr[n * (dl + 9) :].reshape(n, 3)
    return DictionaryModel(
        d,
        r,
        t,
        int(fields["descriptor_size"]),
        fields["similarity"],
        int(fields["slice_size"]),
        float(fields["slice_spacing"]),
        int(fields["top_k"]),
        float(fields["temperature"]),
    )
