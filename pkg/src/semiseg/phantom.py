"""Synthetic short-axis cardiac phantoms with per-vendor intensity shift.

Each slice holds an LV blood pool (disk), a myocardial ring around it and
an RV crescent (disk minus the dilated epicardial disk) on one side.
Vendors differ by class means, gamma warp and noise level, so a model
trained on vendors A/B meets a real domain gap on vendor C.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from itertools import combinations

import numpy as np

from .data import VENDORS, AuditVault, VolumeRecord

BG, LV, MYO, RV = 0, 1, 2, 3


@dataclass(frozen=True)
class VendorProfile:
    class_means: tuple[float, float, float, float]  # background, LV, MYO, RV
    noise_sigma: float
    gamma: float = 1.0

    def effective_means(self) -> np.ndarray:
        return np.asarray(self.class_means, dtype=np.float64) ** self.gamma


@dataclass(frozen=True)
class AnatomyJitter:
    center_offset: float = 4.0
    lv_radius: tuple[float, float] = (7.0, 10.0)
    myo_thickness: tuple[float, float] = (3.0, 4.5)
    rv_radius: tuple[float, float] = (10.0, 13.0)
    rv_angle: tuple[float, float] = (150.0, 210.0)  # degrees, 180 = image left


def default_profiles() -> dict[str, VendorProfile]:
    return {
        "A": VendorProfile((0.15, 0.85, 0.45, 0.65), noise_sigma=0.04, gamma=1.0),
        "B": VendorProfile((0.20, 0.88, 0.50, 0.68), noise_sigma=0.05, gamma=1.3),
        "C": VendorProfile((0.20, 0.92, 0.50, 0.72), noise_sigma=0.06, gamma=2.0),
    }


@dataclass
class PhantomConfig:
    image_size: int = 64
    patients_per_vendor: dict[str, int] = field(default_factory=lambda: {"A": 10, "B": 10, "C": 5})
    frames: int = 4
    slices: int = 3
    ed_frame: int = 0
    es_frame: int = 2
    vendor_profiles: dict[str, VendorProfile] = field(default_factory=default_profiles)
    anatomy_jitter: AnatomyJitter = field(default_factory=AnatomyJitter)
    unlabeled_vendors: tuple[str, ...] = ("C",)
    seed: int = 0

    @classmethod
    def full_size(cls, **kw) -> "PhantomConfig":
        return cls(patients_per_vendor={"A": 75, "B": 75, "C": 25}, **kw)

    def validate(self) -> None:
        if self.image_size < 16:
            raise ValueError(f"image_size must be >= 16, got {self.image_size}")
        if self.frames < 2 or self.slices < 1:
            raise ValueError("need frames >= 2 and slices >= 1")
        if not (0 <= self.ed_frame < self.frames and 0 <= self.es_frame < self.frames) \
                or self.ed_frame == self.es_frame:
            raise ValueError("ed_frame/es_frame must be distinct frames")
        for v, n in self.patients_per_vendor.items():
            if v not in VENDORS:
                raise ValueError(f"patients_per_vendor: unknown vendor {v!r}")
            if n < 0:
                raise ValueError(f"patients_per_vendor[{v}] must be >= 0")
        for v in self.patients_per_vendor:
            if v not in self.vendor_profiles:
                raise ValueError(f"vendor_profiles: missing profile for vendor {v}")
        for v, prof in self.vendor_profiles.items():
            if len(prof.class_means) != 4:
                raise ValueError(f"vendor_profiles[{v}].class_means needs 4 values")
            if not all(0.0 <= m <= 1.0 for m in prof.class_means):
                raise ValueError(f"vendor_profiles[{v}].class_means must lie in [0, 1]")
            if prof.noise_sigma < 0 or prof.gamma <= 0:
                raise ValueError(f"vendor_profiles[{v}]: noise_sigma >= 0 and gamma > 0 required")
            eff = prof.effective_means()
            for i, j in combinations(range(4), 2):
                if abs(eff[i] - eff[j]) < 3 * prof.noise_sigma:
                    raise ValueError(
                        f"vendor_profiles[{v}]: classes {i} and {j} are closer than 3*noise_sigma "
                        f"after gamma ({eff[i]:.3f} vs {eff[j]:.3f})")
        if "C" in self.vendor_profiles:
            c = self.vendor_profiles["C"]
            for v in ("A", "B"):
                p = self.vendor_profiles.get(v)
                if p is not None and p.class_means == c.class_means and p.gamma == c.gamma:
                    raise ValueError(f"vendor C profile must differ from vendor {v} (no domain shift)")
        j = self.anatomy_jitter
        for name in ("lv_radius", "myo_thickness", "rv_radius", "rv_angle"):
            lo, hi = getattr(j, name)
            if lo > hi:
                raise ValueError(f"anatomy_jitter.{name}: bounds out of order")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["unlabeled_vendors"] = list(self.unlabeled_vendors)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomConfig":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown phantom config keys: {sorted(unknown)}")
        if "vendor_profiles" in d:
            profs = {}
            for v, p in d["vendor_profiles"].items():
                if isinstance(p, VendorProfile):
                    profs[v] = p
                    continue
                extra = set(p) - {"class_means", "noise_sigma", "gamma"}
                if extra:
                    raise ValueError(f"unknown vendor profile keys for {v}: {sorted(extra)}")
                profs[v] = VendorProfile(tuple(p["class_means"]), float(p["noise_sigma"]), float(p.get("gamma", 1.0)))
            d["vendor_profiles"] = profs
        if "anatomy_jitter" in d and isinstance(d["anatomy_jitter"], dict):
            d["anatomy_jitter"] = AnatomyJitter(**{k: tuple(v) if isinstance(v, list) else v
                                                   for k, v in d["anatomy_jitter"].items()})
        if "unlabeled_vendors" in d:
            d["unlabeled_vendors"] = tuple(d["unlabeled_vendors"])
        return cls(**d)


def _frame_scale(t: int, frames: int, ed: int, es: int) -> float:
    """Cavity scale over the cycle: 1.0 at ED, 0.72 at ES, cosine in between."""
    p = ((t - ed) % frames) / frames
    p_es = ((es - ed) % frames) / frames
    f = p / p_es if p <= p_es else (1.0 - p) / (1.0 - p_es)
    return 1.0 - 0.28 * (0.5 - 0.5 * np.cos(np.pi * f))


def render_labels(size: int, center: tuple[float, float], lv_r: float, myo_t: float,
                  rv_r: float, rv_angle_deg: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy, cx = center
    d = np.hypot(yy - cy, xx - cx)
    epi = lv_r + myo_t
    a = np.deg2rad(rv_angle_deg)
    # RV disk centre sits just outside the epicardium so the crescent hugs it
    dist = epi + 0.35 * rv_r
    ry, rx = cy - dist * np.sin(a), cx + dist * np.cos(a)
    d_rv = np.hypot(yy - ry, xx - rx)
    mask = np.zeros((size, size), dtype=np.uint8)
    mask[(d_rv <= rv_r) & (d > epi + 1.0)] = RV
    mask[(d <= epi) & (d > lv_r)] = MYO
    mask[d <= lv_r] = LV
    return mask


def render_image(mask: np.ndarray, profile: VendorProfile, rng: np.random.Generator) -> np.ndarray:
    means = profile.effective_means()
    img = means[mask]
    if profile.noise_sigma > 0:
        img = img + rng.normal(0.0, profile.noise_sigma, size=mask.shape)
    return np.clip(img, 0.0, 1.0)


def generate_patient(config: PhantomConfig, vendor: str, patient_index: int) -> VolumeRecord:
    """One (T, Z, H, W) phantom volume; deterministic in (seed, vendor, index)."""
    config.validate()
    if vendor not in config.vendor_profiles:
        raise ValueError(f"no profile for vendor {vendor!r}")
    profile = config.vendor_profiles[vendor]
    rng = np.random.default_rng([config.seed & 0xFFFFFFFF, VENDORS.index(vendor), patient_index])
    j = config.anatomy_jitter
    S, T, Z = config.image_size, config.frames, config.slices
    scale_img = S / 64.0
    cy = (S - 1) / 2 + rng.uniform(-j.center_offset, j.center_offset) * scale_img
    cx = (S - 1) / 2 + rng.uniform(-j.center_offset, j.center_offset) * scale_img
    lv_r = rng.uniform(*j.lv_radius) * scale_img
    myo_t = rng.uniform(*j.myo_thickness) * scale_img
    rv_r = rng.uniform(*j.rv_radius) * scale_img
    rv_angle = rng.uniform(*j.rv_angle)

    labels = np.zeros((T, Z, S, S), dtype=np.uint8)
    voxels = np.zeros((T, Z, S, S), dtype=np.float32)
    for t in range(T):
        k = _frame_scale(t, T, config.ed_frame, config.es_frame)
        for z in range(Z):
            taper = 1.0 - 0.3 * z / max(Z - 1, 1)  # base to apex
            # myocardial volume is roughly conserved: wall thickens as the cavity shrinks
            m = render_labels(S, (cy + rng.normal(0, 0.3), cx + rng.normal(0, 0.3)),
                              lv_r * k * taper, myo_t * (2.0 - k) * (0.85 + 0.15 * taper),
                              rv_r * (0.5 + 0.5 * k) * taper, rv_angle + rng.normal(0, 3.0))
            labels[t, z] = m
            voxels[t, z] = render_image(m, profile, rng)

    hidden = vendor in config.unlabeled_vendors
    visible = None
    if not hidden:
        visible = np.zeros_like(labels)
        visible[config.ed_frame] = labels[config.ed_frame]
        visible[config.es_frame] = labels[config.es_frame]
    return VolumeRecord(
        patient_id=f"{vendor}{patient_index:03d}", vendor=vendor, voxels=voxels,
        ed_frame=config.ed_frame, es_frame=config.es_frame, spacing=(1.25, 1.25),
        labels=visible, audit_labels=labels if hidden else None)


@dataclass
class Cohort:
    labeled: list[VolumeRecord]
    unlabeled: list[VolumeRecord]
    vault: AuditVault = field(default_factory=AuditVault)

    @property
    def records(self) -> list[VolumeRecord]:
        return self.labeled + self.unlabeled

    def summary(self) -> dict:
        by_vendor: dict[str, int] = {}
        for r in self.records:
            by_vendor[r.vendor] = by_vendor.get(r.vendor, 0) + 1
        return {
            "patients": len(self.records),
            "labeled_patients": len(self.labeled),
            "unlabeled_patients": len(self.unlabeled),
            "slices": sum(2 * r.voxels.shape[1] for r in self.records),
            "vendors": dict(sorted(by_vendor.items())),
        }


def generate_cohort(config: PhantomConfig) -> Cohort:
    config.validate()
    labeled, unlabeled = [], []
    for vendor in VENDORS:
        for i in range(config.patients_per_vendor.get(vendor, 0)):
            rec = generate_patient(config, vendor, i)
            (unlabeled if vendor in config.unlabeled_vendors else labeled).append(rec)
    return Cohort(labeled, unlabeled)


def cohort_from_records(records: list[VolumeRecord]) -> Cohort:
    """Split loaded records into labeled and unlabeled (hidden-mask) pools."""
    labeled = [r for r in records if r.labels is not None]
    unlabeled = [r for r in records if r.labels is None]
    return Cohort(labeled, unlabeled)
