"""Volume ingestion, ED/ES slice extraction, preprocessing and splitting."""
from __future__ import annotations

import contextlib
import json
import logging
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)

VENDORS = ("A", "B", "C")
PHASES = ("ED", "ES")
MANIFEST_FORMAT = "semiseg-manifest"
MANIFEST_VERSION = 1


class ManifestError(ValueError):
    pass


class AuditViolation(RuntimeError):
    """A hidden audit mask was read while the vault was sealed."""


class AuditVault:
    """Ground-truth masks for unlabeled data, kept out of reach of training.

    Reads are counted; inside :meth:`sealed` any read raises.
    """

    def __init__(self):
        self._masks: dict[tuple, np.ndarray] = {}
        self.reads = 0
        self._sealed = 0

    def __contains__(self, key) -> bool:
        return key in self._masks

    def __len__(self) -> int:
        return len(self._masks)

    def put(self, key: tuple, mask: np.ndarray) -> None:
        self._masks[key] = mask

    def read(self, key: tuple) -> np.ndarray:
        if self._sealed:
            raise AuditViolation(f"hidden mask {key} read while the audit vault is sealed")
        self.reads += 1
        return self._masks[key]

    def apply(self, key: tuple, fn) -> None:
        """Transform a stored mask in place (preprocessing; not counted as a read)."""
        self._masks[key] = fn(self._masks[key])

    @property
    def is_sealed(self) -> bool:
        return self._sealed > 0

    @contextlib.contextmanager
    def sealed(self):
        self._sealed += 1
        try:
            yield self
        finally:
            self._sealed -= 1


@dataclass
class VolumeRecord:
    patient_id: str
    vendor: str
    voxels: np.ndarray  # (T, Z, H, W) float32
    ed_frame: int
    es_frame: int
    spacing: tuple[float, float] = (1.0, 1.0)
    labels: np.ndarray | None = None  # (T, Z, H, W) uint8, meaningful at ED/ES only
    audit_labels: np.ndarray | None = None

    def __post_init__(self):
        self.validate()

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return tuple(int(d) for d in self.voxels.shape)

    def validate(self) -> None:
        if self.vendor not in VENDORS:
            raise ManifestError(f"{self.patient_id}: unknown vendor {self.vendor!r}")
        if self.voxels.ndim != 4:
            raise ManifestError(f"{self.patient_id}: voxels must be (T, Z, H, W), got {self.voxels.shape}")
        T = self.voxels.shape[0]
        if not (0 <= self.ed_frame < T and 0 <= self.es_frame < T):
            raise ManifestError(f"{self.patient_id}: ed/es frames must lie in [0, {T})")
        if self.ed_frame == self.es_frame:
            raise ManifestError(f"{self.patient_id}: ed_frame and es_frame coincide")
        for name in ("labels", "audit_labels"):
            lab = getattr(self, name)
            if lab is None:
                continue
            if lab.shape != self.voxels.shape:
                raise ManifestError(f"{self.patient_id}: {name} shape {lab.shape} != {self.voxels.shape}")
            if lab.size and (lab.min() < 0 or lab.max() > 3):
                raise ManifestError(f"{self.patient_id}: {name} outside {{0,1,2,3}}")

    def frame(self, phase: str) -> int:
        return self.ed_frame if phase == "ED" else self.es_frame


@dataclass
class SliceSample:
    patient_id: str
    vendor: str
    phase: str
    z_index: int
    image: np.ndarray
    mask: np.ndarray | None = None
    pseudo: bool = False
    vault: AuditVault | None = field(default=None, repr=False, compare=False)

    @property
    def key(self) -> tuple[str, str, int]:
        return (self.patient_id, self.phase, self.z_index)

    @property
    def sample_id(self) -> str:
        return f"{self.patient_id}/{self.phase}/{self.z_index}"

    @property
    def labeled(self) -> bool:
        return self.mask is not None

    def hidden_mask(self) -> np.ndarray:
        """Audit-only ground truth for an unlabeled slice."""
        if self.vault is None or self.key not in self.vault:
            raise KeyError(f"{self.sample_id} has no hidden audit mask")
        return self.vault.read(self.key)


def sort_key(s: SliceSample):
    return (s.patient_id, PHASES.index(s.phase), s.z_index)


# ---------------------------------------------------------------------------
# manifest


def _entry_for(rec: VolumeRecord, image_path: str, label_path: str | None, audit_path: str | None) -> dict:
    entry = {
        "id": rec.patient_id,
        "vendor": rec.vendor,
        "dims": list(rec.dims),
        "spacing": [float(s) for s in rec.spacing],
        "ed_frame": int(rec.ed_frame),
        "es_frame": int(rec.es_frame),
        "image_blob_path": image_path,
    }
    if label_path:
        entry["label_blob_path"] = label_path
    if audit_path:
        entry["audit_blob_path"] = audit_path
    return entry


def write_manifest(records: Sequence[VolumeRecord], out_dir: str | os.PathLike,
                   name: str = "manifest.json") -> Path:
    """Write image/label blobs and a JSON manifest; blob paths are relative."""
    out_dir = Path(out_dir)
    (out_dir / "blobs").mkdir(parents=True, exist_ok=True)
    entries = []
    for rec in records:
        img = f"blobs/{rec.patient_id}_image.f32"
        rec.voxels.astype("<f4").tofile(out_dir / img)
        lab = aud = None
        if rec.labels is not None:
            lab = f"blobs/{rec.patient_id}_label.u8"
            rec.labels.astype(np.uint8).tofile(out_dir / lab)
        if rec.audit_labels is not None:
            aud = f"blobs/{rec.patient_id}_audit.u8"
            rec.audit_labels.astype(np.uint8).tofile(out_dir / aud)
        entries.append(_entry_for(rec, img, lab, aud))
    doc = {"format": MANIFEST_FORMAT, "version": MANIFEST_VERSION, "patients": entries}
    path = out_dir / name
    path.write_text(json.dumps(doc, indent=2) + "\n")
    return path


def _read_blob(base: Path, rel: str, dtype: str, dims: Sequence[int]) -> np.ndarray:
    p = base / rel
    if not p.exists():
        raise ManifestError(f"missing blob {rel}")
    expected = int(np.prod(dims)) * np.dtype(dtype).itemsize
    actual = p.stat().st_size
    if actual != expected:
        raise ManifestError(f"blob {rel} has {actual} bytes, expected {expected} for dims {list(dims)}")
    return np.fromfile(p, dtype=dtype).reshape(dims)


def load_manifest(path: str | os.PathLike, strict: bool = True,
                  diagnostics: list[str] | None = None) -> list[VolumeRecord]:
    """Load every manifest entry.

    In strict mode the first bad entry raises :class:`ManifestError`; in
    lenient mode bad entries are skipped and their messages appended to
    ``diagnostics`` (and logged).
    """
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: invalid JSON: {exc}") from None
    if doc.get("format") != MANIFEST_FORMAT or doc.get("version") != MANIFEST_VERSION:
        raise ManifestError(f"{path}: not a {MANIFEST_FORMAT} v{MANIFEST_VERSION} document")
    base = path.parent
    records = []
    for i, e in enumerate(doc.get("patients", [])):
        try:
            dims = [int(d) for d in e["dims"]]
            if len(dims) != 4 or min(dims) < 1:
                raise ManifestError(f"dims must be 4 positive ints, got {e['dims']}")
            if e["vendor"] not in VENDORS:
                raise ManifestError(f"unknown vendor {e['vendor']!r}")
            vox = _read_blob(base, e["image_blob_path"], "<f4", dims).astype(np.float32)
            lab = aud = None
            if e.get("label_blob_path"):
                lab = _read_blob(base, e["label_blob_path"], "u1", dims)
            if e.get("audit_blob_path"):
                aud = _read_blob(base, e["audit_blob_path"], "u1", dims)
            rec = VolumeRecord(
                patient_id=str(e["id"]), vendor=e["vendor"], voxels=vox,
                ed_frame=int(e["ed_frame"]), es_frame=int(e["es_frame"]),
                spacing=tuple(float(s) for s in e.get("spacing", (1.0, 1.0))),
                labels=lab, audit_labels=aud)
        except (KeyError, TypeError, ValueError) as exc:
            msg = f"manifest entry {i} ({e.get('id', '?') if isinstance(e, dict) else '?'}): {exc}"
            if strict:
                raise ManifestError(msg) from None
            log.warning(msg)
            if diagnostics is not None:
                diagnostics.append(msg)
            continue
        records.append(rec)
    return records


def manifest_metadata(records: Iterable[VolumeRecord]) -> list[dict]:
    return [{"id": r.patient_id, "vendor": r.vendor, "dims": list(r.dims),
             "spacing": list(r.spacing), "ed_frame": r.ed_frame, "es_frame": r.es_frame,
             "labeled": r.labels is not None} for r in records]


# ---------------------------------------------------------------------------
# slices and preprocessing


def extract_ed_es_slices(rec: VolumeRecord, vault: AuditVault | None = None) -> list[SliceSample]:
    """2*Z raw slices (ED then ES, each over z).  Hidden masks go to ``vault``."""
    out = []
    for phase in PHASES:
        t = rec.frame(phase)
        for z in range(rec.voxels.shape[1]):
            mask = rec.labels[t, z].astype(np.int64) if rec.labels is not None else None
            s = SliceSample(rec.patient_id, rec.vendor, phase, z, rec.voxels[t, z], mask)
            if rec.audit_labels is not None and vault is not None:
                vault.put(s.key, rec.audit_labels[t, z].astype(np.int64))
                s.vault = vault
            out.append(s)
    return out


def center_crop(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Crop centred at (H//2, W//2); zero-pad first when the image is smaller
    (the odd extra pixel goes to the bottom/right)."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"crop size must be positive, got {out_h}x{out_w}")
    image = np.asarray(image)
    H, W = image.shape[:2]
    ph, pw = max(out_h - H, 0), max(out_w - W, 0)
    if ph or pw:
        pad = [(ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2)] + [(0, 0)] * (image.ndim - 2)
        image = np.pad(image, pad)
        H, W = image.shape[:2]
    top = H // 2 - out_h // 2
    left = W // 2 - out_w // 2
    return image[top:top + out_h, left:left + out_w]


def normalize_intensity(image: np.ndarray, low_pct: float = 1.0, high_pct: float = 99.0) -> np.ndarray:
    """Clamp to the image's [p1, p99] percentiles, then min-max scale to [0, 1]."""
    image = np.asarray(image, dtype=np.float64)
    lo, hi = np.percentile(image, [low_pct, high_pct])
    if not hi > lo:
        return np.zeros_like(image)
    return (np.clip(image, lo, hi) - lo) / (hi - lo)


def preprocess(samples: Iterable[SliceSample], crop: int) -> list[SliceSample]:
    """Centre-crop and normalise each slice; output sorted by (patient, phase, z)."""
    out = []
    for s in samples:
        img = normalize_intensity(center_crop(s.image, crop, crop)).astype(np.float32)
        mask = center_crop(s.mask, crop, crop) if s.mask is not None else None
        if s.vault is not None and s.key in s.vault:
            s.vault.apply(s.key, lambda m: center_crop(m, crop, crop))
        out.append(replace(s, image=img, mask=mask))
    return sorted(out, key=sort_key)


def slices_from_records(records: Iterable[VolumeRecord], crop: int,
                        vault: AuditVault | None = None) -> list[SliceSample]:
    raw = [s for rec in records for s in extract_ed_es_slices(rec, vault)]
    return preprocess(raw, crop)


# ---------------------------------------------------------------------------
# splitting

DEFAULT_SPLIT_RATIOS = (1711 / 2439, 428 / 2439, 300 / 2439)


@dataclass(frozen=True)
class SplitAssignment:
    train: frozenset[str]
    validation: frozenset[str]
    test: frozenset[str]
    ratios: tuple[float, float, float]

    def splits(self) -> tuple[frozenset[str], frozenset[str], frozenset[str]]:
        return (self.train, self.validation, self.test)

    def realized_ratios(self, slice_counts: Mapping[str, int]) -> tuple[float, float, float]:
        totals = [sum(slice_counts[p] for p in s) for s in self.splits()]
        n = sum(totals)
        return tuple(t / n for t in totals)

    def split_of(self, patient_id: str) -> str:
        for name, s in zip(("train", "validation", "test"), self.splits()):
            if patient_id in s:
                return name
        raise KeyError(patient_id)


def _slice_counts(records) -> dict[str, int]:
    if isinstance(records, Mapping):
        return {str(k): int(v) for k, v in records.items()}
    return {r.patient_id: 2 * r.voxels.shape[1] for r in records}


def patient_aware_split(records, ratios: Sequence[float] = DEFAULT_SPLIT_RATIOS,
                        seed: int = 0) -> SplitAssignment:
    """Assign whole patients to train/validation/test.

    ``records`` is a list of :class:`VolumeRecord` or a mapping of patient id
    to 2D slice count.  Patients are shuffled, ordered by slice count
    (largest first) and each goes to the split furthest below its target
    slice count.
    """
    counts = _slice_counts(records)
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) < 0 or abs(sum(ratios) - 1.0) > 1e-6:
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    if len(counts) < 3:
        raise ValueError(f"need at least 3 patients for 3 splits, got {len(counts)}")
    rng = np.random.default_rng(seed)
    patients = sorted(counts)
    order = [patients[i] for i in rng.permutation(len(patients))]
    order.sort(key=lambda p: -counts[p])  # stable: shuffled order among equal counts
    total = sum(counts.values())
    targets = np.array(ratios) * total
    filled = np.zeros(3)
    groups: list[list[str]] = [[], [], []]
    for p in order:
        k = int(np.argmax(targets - filled))
        groups[k].append(p)
        filled[k] += counts[p]
    for k in range(3):
        if groups[k]:
            continue
        donor = int(np.argmax([len(g) if len(g) > 1 else -1 for g in groups]))
        smallest = min(groups[donor], key=lambda p: (counts[p], p))
        groups[donor].remove(smallest)
        groups[k].append(smallest)
    return SplitAssignment(frozenset(groups[0]), frozenset(groups[1]), frozenset(groups[2]), ratios)
