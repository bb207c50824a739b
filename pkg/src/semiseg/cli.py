"""``semiseg`` command line interface.

Subcommands: generate, train, evaluate, pseudo-label, scenarios, histmatch,
report and defaults.  Every command accepts ``--config`` (JSON run config)
and ``--seed``; flags override the file.  Directory outputs are staged in a
temporary sibling directory and renamed into place only after they have been
written and re-read successfully.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import math
import os
import shutil
import sys
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .augment import compute_histogram, histogram_match
from .config import ConfigError, RunConfig, default_output_root
from .data import ManifestError, load_manifest, patient_aware_split, slices_from_records, write_manifest
from .losses import CLASS_NAMES
from .networks import CheckpointError, build_network, load_checkpoint, save_checkpoint
from .phantom import Cohort, cohort_from_records, generate_cohort
from .ssl import (SCENARIO_KINDS, TABLE_COLUMNS, TEST_COLUMNS, ScenarioError, ScenarioSpec,
                  audit_csv, audit_pseudo_labels, dice_csv, prepare_scenario_data, pseudo_label,
                  run_scenario, table_csv)
from .train import TrainingError, evaluate, train
from .viz import load_gray_png, save_gray_png, save_preview_grid, triptych

log = logging.getLogger("semiseg")

LOSS_FLAGS = {"dice": "dice", "ce": "cross_entropy", "both": "sum_of_both"}
ARCH_FLAGS = {"unet": False, "resunet": True}
# scenarios sharing a supervised model run in the same worker
SCENARIO_GROUPS = (("FS", "SS"), ("FS50", "SS50"), ("FSH", "SSH"), ("FS50H", "SS50H"))
# the smoke profile generates its cohort at the crop size, so the whole heart stays in view
SMOKE_PROFILE = {"depth": 2, "epochs": 5, "crop": 32}


class CliError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# helpers


@contextlib.contextmanager
def staged_dir(final: Path, overwrite: bool = False):
    """Yield a temp directory that replaces ``final`` only if the block succeeds."""
    final = Path(final)
    if final.exists() and (not final.is_dir() or any(final.iterdir())) and not overwrite:
        raise CliError(f"output directory {final} exists and is not empty (pass --overwrite)")
    final.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{final.name}.", dir=final.parent))
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    if final.exists():
        shutil.rmtree(final) if final.is_dir() else final.unlink()
    os.replace(tmp, final)


def _write_text(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8")


def _print_config(name: str, cfg: dict) -> None:
    print(f"effective configuration ({name}):")
    print(json.dumps(cfg, indent=2, sort_keys=True))
    sys.stdout.flush()


def _out_dir(args, cfg: RunConfig, default_name: str) -> Path:
    if args.out:
        return Path(args.out)
    if cfg.output_dir:
        return Path(cfg.output_dir) / default_name
    return default_output_root() / default_name


def _load_cohort(manifest: str | None, cfg: RunConfig) -> Cohort:
    if manifest is None:
        return generate_cohort(cfg.phantom)
    return cohort_from_records(load_manifest(manifest))


def _apply_common(args, cfg: RunConfig) -> RunConfig:
    """Fold network/training flags into the run config."""
    net = cfg.network
    if getattr(args, "arch", None):
        net = replace(net, residual=ARCH_FLAGS[args.arch])
    if getattr(args, "depth", None) is not None:
        net = replace(net, depth=args.depth)
    if getattr(args, "base_filters", None) is not None:
        net = replace(net, base_filters=args.base_filters)
    tc = cfg.train
    if getattr(args, "loss", None):
        tc = replace(tc, loss=LOSS_FLAGS[args.loss])
    if getattr(args, "epochs", None) is not None:
        tc = replace(tc, epochs=args.epochs)
    if getattr(args, "lr", None) is not None:
        tc = replace(tc, learning_rate=args.lr)
    if getattr(args, "batch_size", None) is not None:
        tc = replace(tc, batch_size=args.batch_size)
    if args.seed is not None:
        tc = replace(tc, seed=args.seed, augmentation=replace(tc.augmentation, seed=args.seed))
    net.validate()
    tc.validate()
    return replace(cfg, network=net, train=tc)


# ---------------------------------------------------------------------------
# generate


def cmd_generate(args) -> int:
    cfg = RunConfig.load(args.config)
    ph = cfg.phantom
    if args.seed is not None:
        ph = replace(ph, seed=args.seed)
    if args.image_size is not None:
        ph = replace(ph, image_size=args.image_size)
    if args.full_size:
        ph = replace(ph, patients_per_vendor={"A": 75, "B": 75, "C": 25})
    try:
        ph.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    out = _out_dir(args, cfg, "cohort")
    _print_config("generate", {"phantom": ph.to_dict(), "out": str(out)})
    cohort = generate_cohort(ph)
    with staged_dir(out, args.overwrite) as tmp:
        manifest = write_manifest(cohort.records, tmp)
        _write_text(tmp / "phantom_config.json", json.dumps(ph.to_dict(), indent=2, sort_keys=True) + "\n")
        images, masks = [], []
        for r in cohort.records:
            t, z = r.ed_frame, r.voxels.shape[1] // 2
            images.append(r.voxels[t, z])
            masks.append(None if r.labels is None else r.labels[t, z])
        save_preview_grid(images, masks, tmp / "preview.png")
        loaded = load_manifest(manifest)
        if len(loaded) != len(cohort.records):
            raise CliError("manifest validation failed: record count mismatch")
    summary = cohort.summary()
    print(f"patients: {summary['patients']} (labeled {summary['labeled_patients']}, "
          f"unlabeled {summary['unlabeled_patients']})")
    print(f"slices: {summary['slices']}")
    print("vendors: " + ", ".join(f"{v}={n}" for v, n in summary["vendors"].items()))
    print(f"manifest: {out / 'manifest.json'}")
    return 0


# ---------------------------------------------------------------------------
# train / evaluate / pseudo-label


def _split_slices(cohort: Cohort, crop: int, seed: int):
    split = patient_aware_split(cohort.labeled, seed=seed)
    slices = slices_from_records(cohort.labeled, crop)
    parts = {name: [s for s in slices if s.patient_id in ids]
             for name, ids in zip(("train", "validation", "test"), split.splits())}
    return split, parts


def cmd_train(args) -> int:
    cfg = RunConfig.load(args.config)
    crop = args.crop if args.crop is not None else cfg.scenarios.crop
    if args.profile == "smoke":
        cfg = replace(cfg, network=replace(cfg.network, depth=SMOKE_PROFILE["depth"]),
                      train=replace(cfg.train, epochs=SMOKE_PROFILE["epochs"]),
                      phantom=replace(cfg.phantom, image_size=SMOKE_PROFILE["crop"]))
        if args.crop is None:
            crop = SMOKE_PROFILE["crop"]
    cfg = _apply_common(args, cfg)
    seed = cfg.train.seed
    out = _out_dir(args, cfg, "train")
    eff = cfg.to_dict()
    eff.update({"crop": crop, "manifest": args.manifest, "out": str(out), "profile": args.profile})
    _print_config("train", eff)
    cohort = _load_cohort(args.manifest, cfg)
    split, parts = _split_slices(cohort, crop, seed)
    if not parts["train"]:
        raise CliError("no labeled training slices in the manifest")
    t0 = time.perf_counter()
    with staged_dir(out, args.overwrite) as tmp:
        net = build_network(cfg.network, seed=seed)
        net, history = train(net, parts["train"], parts["validation"], cfg.train,
                             metrics_csv=tmp / "metrics.csv")
        best = max((m for m in history if m.val_dice is not None),
                   key=lambda m: m.val_dice.average, default=history[-1])
        save_checkpoint(net, tmp / "best.ckpt",
                        extra={"crop": crop, "seed": seed, "epoch": best.epoch})
        load_checkpoint(tmp / "best.ckpt")
        summary = {
            "config": eff,
            "split": {k: sorted(v) for k, v in zip(("train", "validation", "test"), split.splits())},
            "best_epoch": best.epoch,
            "final_train_loss": history[-1].train_loss,
            "validation": None if best.val_dice is None else best.val_dice.to_dict(),
            "parameter_count": net.parameter_count,
            "wall_seconds": round(time.perf_counter() - t0, 3),
        }
        _write_text(tmp / "summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"final train loss {history[-1].train_loss:.6f}; best epoch {best.epoch}")
    if best.val_dice is not None:
        print("validation dice: " + ", ".join(
            f"{CLASS_NAMES[k]}={v:.4f}" for k, v in sorted(best.val_dice.per_class.items()))
              + f", AVG={best.val_dice.average:.4f}")
    print(f"checkpoint: {out / 'best.ckpt'}")
    return 0


def _checkpoint_crop(path: str, override: int | None) -> int:
    from .networks import read_checkpoint_header
    if override is not None:
        return override
    return int(read_checkpoint_header(path).get("extra", {}).get("crop", 64))


def cmd_evaluate(args) -> int:
    cfg = RunConfig.load(args.config)
    seed = args.seed if args.seed is not None else cfg.train.seed
    crop = _checkpoint_crop(args.checkpoint, args.crop)
    _print_config("evaluate", {"checkpoint": args.checkpoint, "manifest": args.manifest,
                               "split": args.split, "seed": seed, "crop": crop})
    net = load_checkpoint(args.checkpoint)
    cohort = _load_cohort(args.manifest, cfg)
    _, parts = _split_slices(cohort, crop, seed)
    samples = (parts["train"] + parts["validation"] + parts["test"]) if args.split == "all" else parts[args.split]
    if not samples:
        raise CliError(f"split {args.split!r} is empty")
    rep = evaluate(net, samples)
    print(rep.to_json())
    if args.out:
        out = Path(args.out)
        with staged_dir(out, args.overwrite) as tmp:
            _write_text(tmp / "dice.csv", rep.to_csv("evaluate", args.split))
            _write_text(tmp / "dice.json", rep.to_json() + "\n")
    return 0


def cmd_pseudo_label(args) -> int:
    cfg = RunConfig.load(args.config)
    filt = cfg.pseudo_filter
    if args.min_confidence is not None:
        filt = replace(filt, min_confidence=args.min_confidence)
    if args.flip_min_dice is not None:
        filt = replace(filt, flip_consistency_min_dice=args.flip_min_dice)
    if args.vacuous:
        filt = type(filt).vacuous()
    crop = _checkpoint_crop(args.checkpoint, args.crop)
    out = _out_dir(args, cfg, "pseudo")
    _print_config("pseudo-label", {"checkpoint": args.checkpoint, "manifest": args.manifest,
                                   "filter": {"min_confidence": filt.min_confidence,
                                              "flip_consistency_min_dice": filt.flip_consistency_min_dice,
                                              "foreground_fraction_bounds": list(filt.foreground_fraction_bounds),
                                              "require_all_classes": filt.require_all_classes},
                                   "crop": crop, "seed": args.seed, "out": str(out)})
    net = load_checkpoint(args.checkpoint)
    cohort = _load_cohort(args.manifest, cfg)
    pool = slices_from_records(cohort.unlabeled, crop, cohort.vault)
    if not pool:
        raise CliError("the manifest has no unlabeled patients")
    with cohort.vault.sealed():
        pl = pseudo_label(net, pool, filt)
    audit = audit_pseudo_labels(pl, pool)
    with staged_dir(out, args.overwrite) as tmp:
        rows = audit_csv([_AuditOnly("pseudo", args.seed or 0, pl)])
        _write_text(tmp / "pseudo_audit.csv", rows)
        np.savez_compressed(tmp / "pseudo_masks.npz",
                            **{s.sample_id.replace("/", "_"): s.mask.astype(np.uint8) for s in pl.accepted})
        _write_text(tmp / "summary.json", json.dumps({
            "accepted": len(pl.accepted), "rejected": len(pl.rejected),
            "acceptance_rate": pl.acceptance_rate, "hidden_truth_dice": audit}, indent=2) + "\n")
    print(f"accepted {len(pl.accepted)} / {len(pool)} slices (rate {pl.acceptance_rate:.3f})")
    if audit is not None:
        print(f"hidden-truth dice of accepted masks: {audit:.4f}")
    return 0


class _AuditOnly:
    """Minimal report shape accepted by :func:`audit_csv`."""

    def __init__(self, kind, seed, pseudo):
        self.kind, self.seed, self.pseudo = kind, seed, pseudo


# ---------------------------------------------------------------------------
# scenarios


def _scenario_unit(payload: dict) -> dict:
    """Run the scenarios of one (seed, group) work unit; picklable for worker processes."""
    start = time.perf_counter()
    cfg = RunConfig.from_dict(payload["config"])
    seed = payload["seed"]
    cohort = _load_cohort(payload["manifest"], cfg)
    sc = cfg.scenarios
    data = prepare_scenario_data(cohort, sc.crop, split_seed=seed,
                                 unlabeled_test_fraction=sc.unlabeled_test_fraction)
    tc = replace(cfg.train, seed=seed, augmentation=replace(cfg.train.augmentation, seed=seed))
    cache: dict = {}
    results = []
    for kind in payload["kinds"]:
        t0 = time.perf_counter()
        spec = ScenarioSpec(kind, seed=seed, train_config=tc, network=cfg.network,
                            pseudo_filter=cfg.pseudo_filter, fine_tune=sc.fine_tune)
        rep = run_scenario(spec, data, cache)
        results.append({
            "kind": kind, "seed": seed, "row": rep.row(),
            "table": table_csv([rep]).splitlines()[1:],
            "dice": dice_csv([rep]).splitlines()[1:],
            "audit": audit_csv([rep]).splitlines()[1:],
            "summary": rep.summary(),
            "wall_seconds": time.perf_counter() - t0,
        })
    return {"seed": seed, "kinds": payload["kinds"], "results": results,
            "wall_seconds": time.perf_counter() - start}


def _mean_rows(results: list[dict], kinds: list[str]) -> list[tuple[str, dict]]:
    out = []
    for k in kinds:
        rows = [r["row"] for r in results if r["kind"] == k]
        if rows:
            out.append((k, {c: float(np.mean([row[c] for row in rows])) for c in TABLE_COLUMNS + TEST_COLUMNS}))
    return out


def _text_table(rows: list[tuple[str, dict]], label: str) -> str:
    cols = TABLE_COLUMNS + TEST_COLUMNS
    head = f"{label:<8} " + " ".join(f"{c:>9}" for c in cols)
    lines = [head, "-" * len(head)]
    for kind, row in rows:
        lines.append(f"{kind:<8} " + " ".join(f"{'nan' if v != v else f'{v:.4f}':>9}" for v in (row[c] for c in cols)))
    return "\n".join(lines) + "\n"


def cmd_scenarios(args) -> int:
    cfg = RunConfig.load(args.config)
    cfg = _apply_common(args, cfg)
    sc = cfg.scenarios
    if args.only:
        kinds = [k.strip() for k in args.only.split(",") if k.strip()]
        sc = replace(sc, kinds=kinds)
    if args.seeds:
        sc = replace(sc, seeds=[int(s) for s in args.seeds.split(",")])
    elif args.seed is not None:
        sc = replace(sc, seeds=[args.seed])
    if args.crop is not None:
        sc = replace(sc, crop=args.crop)
    sc.validate()
    cfg = replace(cfg, scenarios=sc)
    out = _out_dir(args, cfg, "scenarios")
    eff = cfg.to_dict()
    eff.update({"manifest": args.manifest, "jobs": args.jobs, "out": str(out)})
    _print_config("scenarios", eff)

    order = [k for k in SCENARIO_KINDS if k in sc.kinds]
    units = []
    for seed in sc.seeds:
        for group in SCENARIO_GROUPS:
            ks = [k for k in group if k in order]
            if ks:
                units.append({"config": cfg.to_dict(), "manifest": args.manifest, "seed": seed, "kinds": ks})
    t0 = time.perf_counter()
    if args.jobs > 1 and len(units) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            chunks = list(pool.map(_scenario_unit, units))
    else:
        chunks = [_scenario_unit(u) for u in units]
    wall = time.perf_counter() - t0
    results = [r for chunk in chunks for r in chunk["results"]]
    rank = {(s, k): i for i, (s, k) in enumerate((s, k) for s in sc.seeds for k in order)}
    results.sort(key=lambda r: rank[(r["seed"], r["kind"])])

    def joined(key: str, header: str) -> str:
        return "\n".join([header] + [line for r in results for line in r[key]]) + "\n"

    with staged_dir(out, args.overwrite) as tmp:
        _write_text(tmp / "table.csv", joined("table", ",".join(["scenario", "seed", *TABLE_COLUMNS, *TEST_COLUMNS])))
        _write_text(tmp / "dice.csv", joined("dice", "scenario,seed,split,class,dice"))
        _write_text(tmp / "audit.csv", joined(
            "audit", "scenario,seed,sample_id,accepted,reasons,confidence,flip_consistency,"
                     "foreground_fraction,hidden_truth_dice"))
        per_seed = "".join(
            f"seed {seed}\n" + _text_table([(r["kind"], r["row"]) for r in results if r["seed"] == seed], "DSC") + "\n"
            for seed in sc.seeds)
        mean = _text_table(_mean_rows(results, order), "MEAN")
        _write_text(tmp / "table.txt", per_seed + f"mean over seeds {sc.seeds}\n" + mean)
        _write_text(tmp / "summary.json", json.dumps({
            "config": eff,
            "wall_seconds": round(wall, 3),
            "cpu_count": os.cpu_count(),
            "jobs": args.jobs,
            # whole work units including data preparation, for scheduling estimates
            "units": [{"seed": c["seed"], "kinds": c["kinds"], "wall_seconds": round(c["wall_seconds"], 3)}
                      for c in chunks],
            "scenarios": [dict(r["summary"], wall_seconds=round(r["wall_seconds"], 3)) for r in results],
        }, indent=2, sort_keys=True, default=_json_default) + "\n")
        with open(tmp / "table.csv", newline="") as fh:
            n_rows = sum(1 for _ in csv.reader(fh)) - 1
        if n_rows != len(results):
            raise CliError("table validation failed: row count mismatch")
    print(per_seed + f"mean over seeds {sc.seeds}\n" + mean, end="")
    print(f"wall time {wall:.1f} s; outputs in {out}")
    return 0


def _json_default(o):
    if isinstance(o, float) and math.isnan(o):
        return None
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


# ---------------------------------------------------------------------------
# histmatch / report / defaults


def cmd_histmatch(args) -> int:
    _print_config("histmatch", {"source": args.source, "reference": args.reference, "out": args.out,
                                "bins": args.bins, "exclude_zeros": args.exclude_zeros, "seed": args.seed})
    src = load_gray_png(args.source)
    ref = load_gray_png(args.reference)
    matched = histogram_match(src, compute_histogram(ref, args.bins, args.exclude_zeros), args.exclude_zeros)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    trip = out.with_name(out.stem + "_triptych.png")
    for path, image in ((out, matched), (trip, triptych([src, ref, matched]))):
        fd, tmp = tempfile.mkstemp(suffix=".png", dir=out.parent)
        os.close(fd)
        try:
            save_gray_png(image, tmp)
            load_gray_png(tmp)
            os.replace(tmp, path)
        except BaseException:
            Path(tmp).unlink(missing_ok=True)
            raise
    print(f"matched image: {out}")
    print(f"triptych (source | reference | matched): {trip}")
    return 0


def cmd_report(args) -> int:
    run = Path(args.run)
    path = run / "table.csv" if run.is_dir() else run
    if not path.exists():
        raise CliError(f"no table.csv found at {path}")
    _print_config("report", {"run": str(run), "seed": args.seed})
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if args.seed is not None:
        rows = [r for r in rows if int(r["seed"]) == args.seed]
    if not rows:
        raise CliError("table has no rows for the requested seed")
    kinds = list(dict.fromkeys(r["scenario"] for r in rows))
    cols = TABLE_COLUMNS + TEST_COLUMNS
    mean = [(k, {c: float(np.mean([float(r[c]) for r in rows if r["scenario"] == k])) for c in cols})
            for k in kinds]
    seeds = sorted({int(r["seed"]) for r in rows})
    print(f"mean over seeds {seeds}")
    print(_text_table(mean, "MEAN"), end="")
    return 0


def cmd_defaults(args) -> int:
    print(RunConfig().to_json())
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="semiseg", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out=True):
        sp.add_argument("--config", help="JSON run configuration file")
        sp.add_argument("--seed", type=int, help="seed applied end to end")
        if out:
            sp.add_argument("--out", help="output directory (default: $SEMISEG_OUTPUT_ROOT/<command>)")
            sp.add_argument("--overwrite", action="store_true", help="replace a non-empty output directory")

    def model_flags(sp):
        sp.add_argument("--arch", choices=sorted(ARCH_FLAGS), help="plain U-Net or residual U-Net")
        sp.add_argument("--loss", choices=sorted(LOSS_FLAGS), help="dice, ce (cross entropy) or both")
        sp.add_argument("--depth", type=int)
        sp.add_argument("--base-filters", type=int)
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--lr", type=float)
        sp.add_argument("--batch-size", type=int)
        sp.add_argument("--crop", type=int, help="centre-crop size in pixels")

    g = sub.add_parser("generate", help="write a synthetic phantom cohort")
    common(g)
    g.add_argument("--image-size", type=int)
    g.add_argument("--full-size", action="store_true", help="75/75/25 patients per vendor")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train one network on the labeled patients")
    common(t)
    t.add_argument("--manifest", help="cohort manifest (default: generate from the config)")
    t.add_argument("--profile", choices=("default", "smoke"), default="default")
    model_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="dice report of a checkpoint on one split")
    common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--manifest")
    e.add_argument("--split", choices=("train", "validation", "test", "all"), default="test")
    e.add_argument("--crop", type=int)
    e.set_defaults(func=cmd_evaluate)

    pl = sub.add_parser("pseudo-label", help="pseudo-label the unlabeled vendor and audit the result")
    common(pl)
    pl.add_argument("--checkpoint", required=True)
    pl.add_argument("--manifest")
    pl.add_argument("--crop", type=int)
    pl.add_argument("--min-confidence", type=float)
    pl.add_argument("--flip-min-dice", type=float)
    pl.add_argument("--vacuous", action="store_true", help="accept every slice (all thresholds 0)")
    pl.set_defaults(func=cmd_pseudo_label)

    s = sub.add_parser("scenarios", help="run the FS/SS scenario ladder")
    common(s)
    s.add_argument("--manifest")
    s.add_argument("--only", help="comma-separated subset, e.g. FS,SSH")
    s.add_argument("--seeds", help="comma-separated seeds (overrides --seed)")
    s.add_argument("--jobs", type=int, default=1, help="worker processes")
    model_flags(s)
    s.set_defaults(func=cmd_scenarios)

    h = sub.add_parser("histmatch", help="match a PNG's histogram to a reference PNG")
    h.add_argument("source")
    h.add_argument("reference")
    h.add_argument("out")
    h.add_argument("--bins", type=int, default=256)
    h.add_argument("--exclude-zeros", action="store_true")
    h.add_argument("--seed", type=int, help="accepted for uniformity; matching is deterministic")
    h.set_defaults(func=cmd_histmatch)

    r = sub.add_parser("report", help="re-render a scenarios table.csv as a mean table")
    r.add_argument("run", help="scenarios output directory or table.csv")
    r.add_argument("--seed", type=int, help="restrict to one seed")
    r.set_defaults(func=cmd_report)

    d = sub.add_parser("defaults", help="print the default run configuration")
    d.set_defaults(func=cmd_defaults)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CliError, ConfigError, ManifestError, CheckpointError, ScenarioError, TrainingError,
            FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
