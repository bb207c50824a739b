"""Pseudo-label filtering, dataset merging and the eight training scenarios."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .augment import hflip
from .data import (DEFAULT_SPLIT_RATIOS, AuditVault, SliceSample, SplitAssignment,
                   patient_aware_split, slices_from_records)
from .losses import DiceReport, dice_coefficient, evaluate_set
from .networks import NetworkConfig, NetworkInstance, build_network
from .train import EpochMetrics, TrainConfig, evaluate, predict, train

log = logging.getLogger(__name__)

SCENARIO_KINDS = {
    # kind: (labeled_fraction, histogram_matching, semi_supervised)
    "FS": (1.0, False, False),
    "FS50": (0.5, False, False),
    "FSH": (1.0, True, False),
    "FS50H": (0.5, True, False),
    "SS": (1.0, False, True),
    "SS50": (0.5, False, True),
    "SSH": (1.0, True, True),
    "SS50H": (0.5, True, True),
}

# column order of the results table: train/validation pairs per structure
TABLE_COLUMNS = ("Tr-LV", "Val-LV", "Tr-RV", "Val-RV", "Tr-Myo", "Val-Myo")
TEST_COLUMNS = ("TstAB-Avg", "TstC-LV", "TstC-RV", "TstC-Myo", "TstC-Avg")


# ---------------------------------------------------------------------------
# pseudo-labels


@dataclass(frozen=True)
class PseudoLabelFilter:
    min_confidence: float = 0.9
    flip_consistency_min_dice: float = 0.8
    foreground_fraction_bounds: tuple[float, float] = (0.005, 0.5)
    require_all_classes: bool = False

    def __post_init__(self):
        lo, hi = self.foreground_fraction_bounds
        for name, v in (("min_confidence", self.min_confidence),
                        ("flip_consistency_min_dice", self.flip_consistency_min_dice),
                        ("foreground_fraction_bounds[0]", lo), ("foreground_fraction_bounds[1]", hi)):
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if lo > hi:
            raise ValueError("foreground_fraction_bounds must be ordered (low, high)")

    @classmethod
    def vacuous(cls) -> "PseudoLabelFilter":
        return cls(0.0, 0.0, (0.0, 1.0), False)


@dataclass
class PseudoLabelRecord:
    sample_id: str
    confidence: float
    flip_consistency: float
    foreground_fraction: float
    accepted: bool
    reasons: tuple[str, ...]
    audit_dice: float | None = None


@dataclass
class PseudoLabeledSet:
    accepted: list[SliceSample]
    rejected: list[tuple[str, tuple[str, ...]]]
    records: list[PseudoLabelRecord] = field(default_factory=list)

    @property
    def acceptance_rate(self) -> float:
        n = len(self.accepted) + len(self.rejected)
        return len(self.accepted) / n if n else 0.0


def _flip_consistency(pred: np.ndarray, pred_flipped_back: np.ndarray, num_classes: int) -> float:
    return float(np.mean([dice_coefficient(pred, pred_flipped_back, k) for k in range(1, num_classes)]))


def pseudo_label(net, unlabeled: Sequence[SliceSample], filt: PseudoLabelFilter) -> PseudoLabeledSet:
    """Predict masks for unlabeled slices and keep the ones passing every test.

    confidence: mean max-probability over predicted-foreground pixels (all
    pixels when nothing is predicted foreground); flip consistency: mean
    foreground dice between the prediction and the un-flipped prediction of
    the flipped image; foreground fraction: share of non-background pixels.
    """
    if not unlabeled:
        raise ValueError("pseudo_label: empty unlabeled pool")
    labeled = [s.sample_id for s in unlabeled if s.mask is not None]
    if labeled:
        raise ValueError(f"pseudo_label: samples already carry masks (e.g. {labeled[0]})")
    num_classes = net.config.num_classes
    masks, probs = predict(net, unlabeled)
    flipped = np.stack([hflip(s.image)[0] for s in unlabeled])
    masks_f, _ = predict(net, flipped)
    accepted, rejected, records = [], [], []
    for s, m, p, mf in zip(unlabeled, masks, probs, masks_f):
        fg = m > 0
        pmax = p.max(axis=0)
        conf = float(pmax[fg].mean()) if fg.any() else float(pmax.mean())
        flip_c = _flip_consistency(m, mf[:, ::-1], num_classes)
        frac = float(fg.mean())
        reasons = []
        if conf < filt.min_confidence:
            reasons.append("low_confidence")
        if flip_c < filt.flip_consistency_min_dice:
            reasons.append("flip_inconsistent")
        lo, hi = filt.foreground_fraction_bounds
        if not lo <= frac <= hi:
            reasons.append("foreground_fraction")
        if filt.require_all_classes and not all(np.any(m == k) for k in range(1, num_classes)):
            reasons.append("missing_class")
        ok = not reasons
        records.append(PseudoLabelRecord(s.sample_id, conf, flip_c, frac, ok, tuple(reasons)))
        if ok:
            accepted.append(replace(s, mask=m.astype(np.int64), pseudo=True))
        else:
            rejected.append((s.sample_id, tuple(reasons)))
    return PseudoLabeledSet(accepted, rejected, records)


def audit_pseudo_labels(pl: PseudoLabeledSet, pool: Sequence[SliceSample]) -> float | None:
    """Fill per-record hidden-truth dice; return mean over accepted slices."""
    by_id = {s.sample_id: s for s in pool}
    accepted_ids = {s.sample_id for s in pl.accepted}
    pseudo_masks = {s.sample_id: s.mask for s in pl.accepted}
    scores = []
    for rec in pl.records:
        src = by_id.get(rec.sample_id)
        if src is None or src.vault is None or src.key not in src.vault:
            continue
        truth = src.hidden_mask()
        if rec.sample_id in accepted_ids:
            r = evaluate_set([pseudo_masks[rec.sample_id]], [truth])
            rec.audit_dice = r.average
            scores.append(r.average)
    return float(np.mean(scores)) if scores else None


def merge_datasets(labeled: Sequence[SliceSample], pseudo: PseudoLabeledSet) -> list[SliceSample]:
    ids = {s.sample_id for s in labeled}
    clash = [s.sample_id for s in pseudo.accepted if s.sample_id in ids]
    if clash:
        raise ValueError(f"merge_datasets: sample id collision {clash[:3]}")
    return list(labeled) + list(pseudo.accepted)


# ---------------------------------------------------------------------------
# scenarios


class ScenarioError(RuntimeError):
    pass


@dataclass
class ScenarioSpec:
    kind: str
    seed: int = 0
    train_config: TrainConfig = field(default_factory=TrainConfig)
    network: NetworkConfig = field(default_factory=lambda: NetworkConfig(dtype="float32"))
    pseudo_filter: PseudoLabelFilter = field(default_factory=PseudoLabelFilter)
    fine_tune: bool = False

    def __post_init__(self):
        if self.kind not in SCENARIO_KINDS:
            raise ValueError(f"unknown scenario kind {self.kind!r}; expected one of {list(SCENARIO_KINDS)}")

    @property
    def labeled_fraction(self) -> float:
        return SCENARIO_KINDS[self.kind][0]

    @property
    def histogram_matching(self) -> bool:
        return SCENARIO_KINDS[self.kind][1]

    @property
    def semi_supervised(self) -> bool:
        return SCENARIO_KINDS[self.kind][2]


@dataclass
class ScenarioData:
    """Preprocessed slices of one cohort, split once and shared by all scenarios."""
    train: list[SliceSample]
    validation: list[SliceSample]
    test: list[SliceSample]
    unlabeled_pool: list[SliceSample]
    unlabeled_test: list[SliceSample]
    vault: AuditVault
    split: SplitAssignment

    @property
    def train_patients(self) -> list[str]:
        return sorted({s.patient_id for s in self.train})


def prepare_scenario_data(cohort, crop: int = 64, split_seed: int = 0,
                          ratios=DEFAULT_SPLIT_RATIOS, unlabeled_test_fraction: float = 0.4) -> ScenarioData:
    """Split labeled patients into train/val/test and unlabeled patients into
    a pseudo-label pool and a held-out test group (hidden masks, audit only)."""
    split = patient_aware_split(cohort.labeled, ratios, seed=split_seed)
    labeled = slices_from_records(cohort.labeled, crop)
    vault = cohort.vault
    unl = slices_from_records(cohort.unlabeled, crop, vault)
    pids = sorted({s.patient_id for s in unl})
    rng = np.random.default_rng([split_seed & 0xFFFFFFFF, 7])
    n_test = int(round(unlabeled_test_fraction * len(pids)))
    if len(pids) >= 2:
        n_test = min(max(n_test, 1), len(pids) - 1)
    else:
        n_test = 0
    test_ids = {pids[i] for i in rng.permutation(len(pids))[:n_test]}
    return ScenarioData(
        train=[s for s in labeled if s.patient_id in split.train],
        validation=[s for s in labeled if s.patient_id in split.validation],
        test=[s for s in labeled if s.patient_id in split.test],
        unlabeled_pool=[s for s in unl if s.patient_id not in test_ids],
        unlabeled_test=[s for s in unl if s.patient_id in test_ids],
        vault=vault, split=split)


def subsample_patients(patients: Sequence[str], fraction: float, seed: int) -> list[str]:
    """Seeded patient-level subset; nested across fractions for a fixed seed."""
    patients = sorted(patients)
    if fraction >= 1.0:
        return patients
    n = max(1, int(math.ceil(fraction * len(patients))))
    order = np.random.default_rng([seed & 0xFFFFFFFF, 50]).permutation(len(patients))
    return sorted(patients[i] for i in order[:n])


@dataclass
class ScenarioReport:
    kind: str
    seed: int
    train: DiceReport
    validation: DiceReport
    test: DiceReport
    test_unlabeled_vendor: DiceReport | None
    training_patients: list[str]
    pseudo: PseudoLabeledSet | None = None
    pseudo_audit_dice: float | None = None
    history: list[EpochMetrics] = field(default_factory=list)
    retrain_history: list[EpochMetrics] = field(default_factory=list)
    supervised_test_unlabeled_vendor: DiceReport | None = None

    def row(self) -> dict[str, float]:
        def g(rep: DiceReport | None, k: int) -> float:
            if rep is None:
                return float("nan")
            return rep.per_class.get(k, float("nan"))

        tc = self.test_unlabeled_vendor
        return {
            "Tr-LV": g(self.train, 1), "Val-LV": g(self.validation, 1),
            "Tr-RV": g(self.train, 3), "Val-RV": g(self.validation, 3),
            "Tr-Myo": g(self.train, 2), "Val-Myo": g(self.validation, 2),
            "TstAB-Avg": self.test.average,
            "TstC-LV": g(tc, 1), "TstC-RV": g(tc, 3), "TstC-Myo": g(tc, 2),
            "TstC-Avg": float("nan") if tc is None else tc.average,
        }

    @property
    def val_average(self) -> float:
        return self.validation.average

    @property
    def test_c_average(self) -> float:
        return float("nan") if self.test_unlabeled_vendor is None else self.test_unlabeled_vendor.average

    def summary(self) -> dict:
        return {
            "kind": self.kind,
            "seed": self.seed,
            "training_patients": self.training_patients,
            "train": self.train.to_dict(),
            "validation": self.validation.to_dict(),
            "test": self.test.to_dict(),
            "test_unlabeled_vendor": None if self.test_unlabeled_vendor is None else self.test_unlabeled_vendor.to_dict(),
            "pseudo_accepted": None if self.pseudo is None else len(self.pseudo.accepted),
            "pseudo_rejected": None if self.pseudo is None else len(self.pseudo.rejected),
            "pseudo_audit_dice": self.pseudo_audit_dice,
            "final_train_loss": self.history[-1].train_loss if self.history else None,
        }


def _supervised_key(spec: ScenarioSpec) -> tuple:
    tc = spec.train_config
    return (spec.labeled_fraction, spec.histogram_matching, spec.seed, tc.learning_rate, tc.epochs,
            tc.batch_size, tc.loss, tc.seed, repr(spec.network))


def run_scenario(spec: ScenarioSpec, data: ScenarioData, cache: dict | None = None) -> ScenarioReport:
    """Run one training regime end to end.

    1. subsample labeled training patients; 2. optionally match histograms to
    the unlabeled-vendor pool; 3. train; 4. if semi-supervised, pseudo-label
    the pool, merge and retrain from a fresh initialisation; 5. evaluate.
    Hidden masks stay sealed during steps 1-4.  ``cache`` lets scenarios that
    share steps 1-3 reuse the supervised model.
    """
    try:
        with data.vault.sealed():
            patients = subsample_patients(data.train_patients, spec.labeled_fraction, spec.seed)
            keep = set(patients)
            train_set = [s for s in data.train if s.patient_id in keep]
            tc = spec.train_config
            policy = tc.augmentation
            if spec.histogram_matching:
                policy = policy.with_reference_pool([s.image for s in data.unlabeled_pool])
            else:
                policy = replace(policy, histogram_match="off", reference_pool=[])
            tc = replace(tc, augmentation=policy)

            key = _supervised_key(spec)
            if cache is not None and key in cache:
                state, history = cache[key]
                net = build_network(spec.network, seed=spec.seed)
                net.load_state(state)
            else:
                net = build_network(spec.network, seed=spec.seed)
                net, history = train(net, train_set, data.validation, tc)
                if cache is not None:
                    cache[key] = (net.state(), history)

            pseudo = None
            retrain_history: list[EpochMetrics] = []
            supervised_net = net
            if spec.semi_supervised:
                pseudo = pseudo_label(net, data.unlabeled_pool, spec.pseudo_filter)
                merged = merge_datasets(train_set, pseudo)
                if spec.fine_tune:
                    new_net = build_network(spec.network, seed=spec.seed)
                    new_net.load_state(net.state())
                else:
                    new_net = build_network(spec.network, seed=spec.seed)
                net, retrain_history = train(new_net, merged, data.validation, tc)

        report = ScenarioReport(
            kind=spec.kind, seed=spec.seed,
            train=evaluate(net, train_set),
            validation=evaluate(net, data.validation),
            test=evaluate(net, data.test),
            test_unlabeled_vendor=_evaluate_hidden(net, data.unlabeled_test),
            training_patients=patients, pseudo=pseudo,
            history=history, retrain_history=retrain_history)
        if pseudo is not None:
            report.pseudo_audit_dice = audit_pseudo_labels(pseudo, data.unlabeled_pool)
            report.supervised_test_unlabeled_vendor = _evaluate_hidden(supervised_net, data.unlabeled_test)
        return report
    except Exception as exc:
        raise ScenarioError(f"[scenario {spec.kind}] {type(exc).__name__}: {exc}") from exc


def _evaluate_hidden(net: NetworkInstance, samples: Sequence[SliceSample]) -> DiceReport | None:
    if not samples:
        return None
    masks, _ = predict(net, samples)
    return evaluate_set(list(masks), [s.hidden_mask() for s in samples])


def compare_scenarios(specs: Sequence[ScenarioSpec], data: ScenarioData) -> list[ScenarioReport]:
    cache: dict = {}
    return [run_scenario(spec, data, cache) for spec in specs]


def _fmt(v: float) -> str:
    return "nan" if v != v else f"{v:.4f}"


def table_csv(reports: Sequence[ScenarioReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["scenario", "seed", *TABLE_COLUMNS, *TEST_COLUMNS])
    for r in reports:
        row = r.row()
        w.writerow([r.kind, r.seed, *(_fmt(row[c]) for c in TABLE_COLUMNS + TEST_COLUMNS)])
    return buf.getvalue()


def table_text(reports: Sequence[ScenarioReport]) -> str:
    cols = TABLE_COLUMNS + TEST_COLUMNS
    head = f"{'DSC':<8}{'seed':>5} " + " ".join(f"{c:>9}" for c in cols)
    lines = [head, "-" * len(head)]
    for r in reports:
        row = r.row()
        lines.append(f"{r.kind:<8}{r.seed:>5} " + " ".join(f"{_fmt(row[c]):>9}" for c in cols))
    return "\n".join(lines) + "\n"


def dice_csv(reports: Sequence[ScenarioReport]) -> str:
    """Long-form (scenario, split, class, dice) rows for every report."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["scenario", "seed", "split", "class", "dice"])
    for r in reports:
        splits = [("train", r.train), ("validation", r.validation), ("test", r.test),
                  ("test_unlabeled_vendor", r.test_unlabeled_vendor)]
        for name, rep in splits:
            if rep is None:
                continue
            for row in rep.csv_rows(r.kind, name):
                w.writerow([row[0], r.seed, row[1], row[2], row[3]])
    return buf.getvalue()


def audit_csv(reports: Sequence[ScenarioReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["scenario", "seed", "sample_id", "accepted", "reasons", "confidence",
                "flip_consistency", "foreground_fraction", "hidden_truth_dice"])
    for r in reports:
        if r.pseudo is None:
            continue
        for rec in r.pseudo.records:
            w.writerow([r.kind, r.seed, rec.sample_id, int(rec.accepted), ";".join(rec.reasons),
                        f"{rec.confidence:.6f}", f"{rec.flip_consistency:.6f}",
                        f"{rec.foreground_fraction:.6f}",
                        "" if rec.audit_dice is None else f"{rec.audit_dice:.6f}"])
    return buf.getvalue()
