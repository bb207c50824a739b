"""Run configuration files: one JSON document with a section per component.

Unknown keys are rejected at every level so typos fail loudly.  Command
line flags are applied on top of the file (flags win).
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .augment import AugmentationPolicy
from .networks import NetworkConfig
from .phantom import PhantomConfig
from .ssl import SCENARIO_KINDS, PseudoLabelFilter
from .train import TrainConfig

OUTPUT_ROOT_ENV = "SEMISEG_OUTPUT_ROOT"


class ConfigError(ValueError):
    pass


def _reject_unknown(section: str, d: dict, allowed) -> None:
    unknown = sorted(set(d) - set(allowed))
    if unknown:
        raise ConfigError(f"[{section}] unknown keys: {unknown}; allowed: {sorted(allowed)}")


@dataclass
class ScenarioSettings:
    kinds: list[str] = field(default_factory=lambda: list(SCENARIO_KINDS))
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    crop: int = 64
    unlabeled_test_fraction: float = 0.4
    fine_tune: bool = False

    def validate(self) -> None:
        bad = [k for k in self.kinds if k not in SCENARIO_KINDS]
        if bad:
            raise ConfigError(f"[scenarios] unknown kinds {bad}; expected from {list(SCENARIO_KINDS)}")
        if not self.seeds:
            raise ConfigError("[scenarios] at least one seed is required")
        if not 0.0 <= self.unlabeled_test_fraction < 1.0:
            raise ConfigError("[scenarios] unlabeled_test_fraction must lie in [0, 1)")


_TRAIN_KEYS = ("learning_rate", "epochs", "batch_size", "loss", "seed", "eval_every", "keep_best")
_AUG_KEYS = ("rotation_ranges", "rotation_probability", "hflip_probability", "sharpen",
             "sharpen_probability", "histogram_match", "match_probability", "pooled_reference",
             "exclude_zeros", "bin_count", "seed")


@dataclass
class RunConfig:
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    # float32 keeps CLI training affordable; gradient checks use float64 directly
    network: NetworkConfig = field(default_factory=lambda: NetworkConfig(dtype="float32"))
    train: TrainConfig = field(default_factory=TrainConfig)
    pseudo_filter: PseudoLabelFilter = field(default_factory=PseudoLabelFilter)
    scenarios: ScenarioSettings = field(default_factory=ScenarioSettings)
    output_dir: str | None = None

    @property
    def augmentation(self) -> AugmentationPolicy:
        return self.train.augmentation

    def to_dict(self) -> dict:
        aug = self.train.augmentation.settings()
        aug.pop("reference_pool_size")
        pf = asdict(self.pseudo_filter)
        pf["foreground_fraction_bounds"] = list(pf["foreground_fraction_bounds"])
        return {
            "phantom": self.phantom.to_dict(),
            "network": asdict(self.network),
            "train": {k: getattr(self.train, k) for k in _TRAIN_KEYS},
            "augmentation": aug,
            "pseudo_filter": pf,
            "scenarios": asdict(self.scenarios),
            "output_dir": self.output_dir,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("run config must be a JSON object")
        _reject_unknown("root", d, ("phantom", "network", "train", "augmentation", "pseudo_filter",
                                    "scenarios", "output_dir"))
        try:
            phantom = PhantomConfig.from_dict(d.get("phantom", {}))
            phantom.validate()
            net_d = d.get("network", {})
            _reject_unknown("network", net_d, [f.name for f in fields(NetworkConfig)])
            network = NetworkConfig(**net_d)
            network.validate()
            aug_d = d.get("augmentation", {})
            _reject_unknown("augmentation", aug_d, _AUG_KEYS)
            aug = AugmentationPolicy(**aug_d)
            tr_d = d.get("train", {})
            _reject_unknown("train", tr_d, _TRAIN_KEYS)
            train = TrainConfig(**tr_d, augmentation=aug)
            train.validate()
            pf_d = dict(d.get("pseudo_filter", {}))
            _reject_unknown("pseudo_filter", pf_d, [f.name for f in fields(PseudoLabelFilter)])
            if "foreground_fraction_bounds" in pf_d:
                pf_d["foreground_fraction_bounds"] = tuple(pf_d["foreground_fraction_bounds"])
            pseudo_filter = PseudoLabelFilter(**pf_d)
            sc_d = d.get("scenarios", {})
            _reject_unknown("scenarios", sc_d, [f.name for f in fields(ScenarioSettings)])
            scenarios = ScenarioSettings(**sc_d)
            scenarios.validate()
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        return cls(phantom, network, train, pseudo_filter, scenarios, d.get("output_dir"))

    @classmethod
    def load(cls, path: str | os.PathLike | None) -> "RunConfig":
        if path is None:
            return cls()
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            doc = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON: {exc}") from None
        return cls.from_dict(doc)


def default_output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
