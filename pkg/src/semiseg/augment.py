"""Geometric and intensity augmentation, including CDF histogram matching."""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .data import PHASES, SliceSample

BINOMIAL_5 = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


# ---------------------------------------------------------------------------
# geometry


def rotate(image: np.ndarray, mask: np.ndarray | None = None, angle_degrees: float = 0.0):
    """Rotate counter-clockwise (as displayed) about the image centre.

    The image is resampled bilinearly with zero fill outside the frame; the
    mask uses nearest-neighbour lookup so labels are never blended.
    """
    if not np.isfinite(angle_degrees):
        raise ValueError("rotation angle must be finite")
    if angle_degrees == 0:
        return image.copy(), (None if mask is None else mask.copy())
    H, W = image.shape
    cy, cx = (H - 1) / 2.0, (W - 1) / 2.0
    t = np.deg2rad(angle_degrees)
    c, s = np.cos(t), np.sin(t)
    rr, cc = np.mgrid[0:H, 0:W].astype(np.float64)
    dy, dx = rr - cy, cc - cx
    src_r = cy + s * dx + c * dy
    src_c = cx + c * dx - s * dy
    # snap rounding noise so right-angle rotations land exactly on the grid
    src_r = np.where(np.abs(src_r - np.rint(src_r)) < 1e-9, np.rint(src_r), src_r)
    src_c = np.where(np.abs(src_c - np.rint(src_c)) < 1e-9, np.rint(src_c), src_c)

    r0 = np.floor(src_r).astype(np.int64)
    c0 = np.floor(src_c).astype(np.int64)
    fr, fc = src_r - r0, src_c - c0
    padded = np.pad(image.astype(np.float64), 1)

    def tap(r, col):
        inside = (r >= -1) & (r <= H) & (col >= -1) & (col <= W)
        return np.where(inside, padded[np.clip(r + 1, 0, H + 1), np.clip(col + 1, 0, W + 1)], 0.0)

    out = ((1 - fr) * (1 - fc) * tap(r0, c0) + (1 - fr) * fc * tap(r0, c0 + 1)
           + fr * (1 - fc) * tap(r0 + 1, c0) + fr * fc * tap(r0 + 1, c0 + 1))
    out = out.astype(image.dtype)

    rot_mask = None
    if mask is not None:
        nr, nc = np.rint(src_r).astype(np.int64), np.rint(src_c).astype(np.int64)
        inside = (nr >= 0) & (nr < H) & (nc >= 0) & (nc < W)
        rot_mask = np.where(inside, mask[np.clip(nr, 0, H - 1), np.clip(nc, 0, W - 1)], 0).astype(mask.dtype)
    return out, rot_mask


def hflip(image: np.ndarray, mask: np.ndarray | None = None):
    return image[:, ::-1].copy(), (None if mask is None else mask[:, ::-1].copy())


# ---------------------------------------------------------------------------
# intensity


def binomial_blur(image: np.ndarray) -> np.ndarray:
    """Separable 5-tap binomial blur (sigma = 1) with edge replication."""
    p = np.pad(image.astype(np.float64), 2, mode="edge")
    H, W = image.shape
    rows = sum(BINOMIAL_5[k] * p[k:k + H, :] for k in range(5))
    return sum(BINOMIAL_5[k] * rows[:, k:k + W] for k in range(5))


def unsharp(image: np.ndarray, alpha: float = 1.0) -> np.ndarray:
    img = image.astype(np.float64)
    return img + alpha * (img - binomial_blur(img))


def sharpen(image: np.ndarray, alpha: float = 1.0) -> np.ndarray:
    return np.clip(unsharp(image, alpha), 0.0, 1.0).astype(image.dtype)


@dataclass(frozen=True)
class IntensityHistogram:
    counts: np.ndarray
    bin_count: int = 256

    @property
    def edges(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.bin_count + 1)

    @property
    def centers(self) -> np.ndarray:
        return (np.arange(self.bin_count) + 0.5) / self.bin_count

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def cdf(self) -> np.ndarray:
        c = np.cumsum(self.counts).astype(np.float64)
        return c / c[-1]

    def cdf_at(self, x) -> np.ndarray:
        """Piecewise-linear CDF (mass spread uniformly within each bin)."""
        return np.interp(x, self.edges, np.concatenate([[0.0], self.cdf]))

    def quantile(self, q) -> np.ndarray:
        """Inverse of :meth:`cdf_at`: the smallest x with cdf_at(x) >= q."""
        nz = np.flatnonzero(self.counts)
        if len(nz) == 1:
            return np.full(np.shape(q), self.centers[nz[0]])
        q = np.clip(np.asarray(q, dtype=np.float64), 0.0, 1.0)
        cdf = self.cdf
        # first bin whose upper CDF reaches q; it is never empty for q > 0
        j = np.minimum(np.searchsorted(cdf, q, side="left"), self.bin_count - 1)
        lower = np.where(j > 0, cdf[j - 1], 0.0)
        mass = self.counts[j] / self.total
        frac = np.divide(q - lower, mass, out=np.zeros_like(q), where=mass > 0)
        return (j + np.clip(frac, 0.0, 1.0)) / self.bin_count

    def __add__(self, other: "IntensityHistogram") -> "IntensityHistogram":
        if other.bin_count != self.bin_count:
            raise ValueError("cannot pool histograms with different bin counts")
        return IntensityHistogram(self.counts + other.counts, self.bin_count)


def _bin_index(values: np.ndarray, bin_count: int) -> np.ndarray:
    return np.clip((values * bin_count).astype(np.int64), 0, bin_count - 1)


def compute_histogram(image: np.ndarray, bin_count: int = 256, exclude_zeros: bool = False) -> IntensityHistogram:
    """Uniform bins over [0, 1]; the value 1.0 falls in the last bin."""
    v = np.asarray(image, dtype=np.float64).ravel()
    if exclude_zeros:
        v = v[v > 0]
    if v.size == 0:
        raise ValueError("cannot histogram an empty image")
    counts = np.bincount(_bin_index(v, bin_count), minlength=bin_count)
    return IntensityHistogram(counts, bin_count)


def pooled_histogram(images: Sequence[np.ndarray], bin_count: int = 256,
                     exclude_zeros: bool = False) -> IntensityHistogram:
    hists = [compute_histogram(im, bin_count, exclude_zeros) for im in images]
    out = hists[0]
    for h in hists[1:]:
        out = out + h
    return out


def histogram_match(source: np.ndarray, reference: IntensityHistogram,
                    exclude_zeros: bool = False) -> np.ndarray:
    """Map each source intensity s to ``reference.quantile(F_src(s))``.

    ``F_src`` is the exact empirical CDF of the source (fraction of pixels
    <= s), so the mapping is monotone non-decreasing in s.  With
    ``exclude_zeros`` zero pixels are left at zero and ignored by ``F_src``.
    """
    source = np.asarray(source)
    dtype = source.dtype if source.dtype.kind == "f" else np.float64
    src = source.astype(np.float64)
    flat = src.ravel()
    sel = flat > 0 if exclude_zeros else np.ones(flat.shape, dtype=bool)
    out = flat.copy()
    vals = flat[sel]
    if vals.size:
        uniq, inverse, counts = np.unique(vals, return_inverse=True, return_counts=True)
        q = np.cumsum(counts) / vals.size
        out[sel] = reference.quantile(q)[inverse]
    return np.clip(out, 0.0, 1.0).reshape(src.shape).astype(dtype)


# ---------------------------------------------------------------------------
# policy


@dataclass
class AugmentationPolicy:
    rotation_ranges: list[tuple[float, float]] = field(default_factory=lambda: [(-45.0, 45.0), (-90.0, 90.0)])
    rotation_probability: float = 0.5
    hflip_probability: float = 0.5
    sharpen: bool = True
    sharpen_probability: float = 0.5
    histogram_match: str = "off"  # "off" | "reference_pool"
    match_probability: float = 0.5
    pooled_reference: bool = False
    exclude_zeros: bool = False
    bin_count: int = 256
    seed: int = 0
    reference_pool: list[np.ndarray] = field(default_factory=list, repr=False)

    def __post_init__(self):
        self.rotation_ranges = [tuple(float(v) for v in r) for r in self.rotation_ranges]
        self.validate()
        self._hists: list[IntensityHistogram] | None = None

    def validate(self) -> None:
        for name in ("hflip_probability", "rotation_probability", "sharpen_probability", "match_probability"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        for lo, hi in self.rotation_ranges:
            if not (np.isfinite(lo) and np.isfinite(hi)) or lo > hi:
                raise ValueError(f"bad rotation range ({lo}, {hi})")
        if self.histogram_match not in ("off", "reference_pool"):
            raise ValueError(f"histogram_match must be 'off' or 'reference_pool', got {self.histogram_match!r}")

    @classmethod
    def neutral(cls, seed: int = 0) -> "AugmentationPolicy":
        return cls(rotation_ranges=[], hflip_probability=0.0, sharpen=False, histogram_match="off", seed=seed)

    def with_reference_pool(self, images: Sequence[np.ndarray]) -> "AugmentationPolicy":
        return replace(self, histogram_match="reference_pool", reference_pool=list(images))

    def settings(self) -> dict:
        """JSON-friendly view (the reference pool is summarised by its size)."""
        return {
            "rotation_ranges": [list(r) for r in self.rotation_ranges],
            "rotation_probability": self.rotation_probability,
            "hflip_probability": self.hflip_probability,
            "sharpen": self.sharpen,
            "sharpen_probability": self.sharpen_probability,
            "histogram_match": self.histogram_match,
            "match_probability": self.match_probability,
            "pooled_reference": self.pooled_reference,
            "exclude_zeros": self.exclude_zeros,
            "bin_count": self.bin_count,
            "seed": self.seed,
            "reference_pool_size": len(self.reference_pool),
        }

    def reference_histograms(self) -> list[IntensityHistogram]:
        if self._hists is None:
            hs = [compute_histogram(im, self.bin_count, self.exclude_zeros) for im in self.reference_pool]
            if self.pooled_reference and hs:
                pooled = hs[0]
                for h in hs[1:]:
                    pooled = pooled + h
                hs = [pooled]
            self._hists = hs
        return self._hists


def sample_rng(seed: int, sample: SliceSample, draw_index: int) -> np.random.Generator:
    """Generator keyed on (seed, patient, phase, z, draw), stable across processes."""
    pid = zlib.crc32(sample.patient_id.encode())
    return np.random.default_rng([seed & 0xFFFFFFFF, pid, PHASES.index(sample.phase), sample.z_index, draw_index])


def apply_policy(sample: SliceSample, policy: AugmentationPolicy, draw_index: int) -> SliceSample:
    """Augment one slice.  Order: histogram match, sharpen, rotate, flip."""
    rng = sample_rng(policy.seed, sample, draw_index)
    # fixed number of draws per stage so toggling one stage never shifts another
    u_match, u_sharp, u_rot, u_flip = rng.random(4)
    ref_pick = rng.random()
    range_pick = rng.random()
    angle_u = rng.random()

    image, mask = sample.image, sample.mask
    if policy.histogram_match == "reference_pool" and u_match < policy.match_probability:
        hists = policy.reference_histograms()
        if hists:
            ref = hists[min(int(ref_pick * len(hists)), len(hists) - 1)]
            image = histogram_match(image, ref, policy.exclude_zeros)
    if policy.sharpen and u_sharp < policy.sharpen_probability:
        image = sharpen(image)
    if policy.rotation_ranges and u_rot < policy.rotation_probability:
        lo, hi = policy.rotation_ranges[min(int(range_pick * len(policy.rotation_ranges)),
                                            len(policy.rotation_ranges) - 1)]
        image, mask = rotate(image, mask, lo + (hi - lo) * angle_u)
    if u_flip < policy.hflip_probability:
        image, mask = hflip(image, mask)
    if image is sample.image and mask is sample.mask:
        return sample
    return replace(sample, image=image, mask=mask)
