"""Run configuration: schema, validation, canonical hashing.

A run config is a JSON document; CLI flags override individual fields.  The
resolved config is always written into the run directory so any run can be
reconstructed from its artifacts alone.  The config hash used by stage
fingerprints excludes the output location, so the same experiment in two
directories produces identical artifacts.
"""

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .dsp import DEFAULT_ALPHA, DEFAULT_MCEP_ORDER
from .errors import ConfigError
from .features import WindowSet
from .model import TrainHyper

DEFAULT_SIGMAS = (1.0, 0.1, 0.01, 0.001)
DEFAULT_AUG_SEEDS = (0, 1, 2)


def _require(condition, message):
    if not condition:
        raise ConfigError(message)


@dataclass
class RunConfig:
    corpus_root: str
    run_dir: str
    setup: str = "synthesis"
    speakers: list | None = None
    seed: int = 0
    trim_silence: bool = True
    strict_alignment: bool = False
    alpha: float = DEFAULT_ALPHA
    mcep_order: int = DEFAULT_MCEP_ORDER
    frame_period_ms: float = 5.0
    delta_window: tuple = (-0.5, 0.0, 0.5)
    delta_delta_window: tuple = (1.0, -2.0, 1.0)
    sigmas: tuple = DEFAULT_SIGMAS
    aug_seeds: tuple = DEFAULT_AUG_SEEDS
    lr: float = 0.001
    max_epochs: int = 50
    patience: int = 5
    val_fraction: float = 0.1
    hidden: int = 128
    layers: int = 4
    exclude_c0: bool = True
    speech_only: bool = False

    def validate(self, check_paths: bool = True) -> "RunConfig":
        _require(self.setup in ("synthesis", "manipulation"),
                 f"setup must be synthesis|manipulation, got {self.setup!r}")
        _require(all(s >= 0 for s in self.sigmas), "sigmas must be >= 0")
        _require(len(self.aug_seeds) > 0, "need at least one augmentation seed")
        _require(abs(self.alpha) < 1, "|alpha| must be < 1")
        _require(self.mcep_order >= 1, "mcep_order must be >= 1")
        _require(self.frame_period_ms == 5.0,
                 "the pipeline runs at a 5 ms frame period")
        self.windows()       # validates window shapes
        self.hyper(0)        # validates training fields
        _require(self.hidden >= 1 and self.layers >= 1,
                 "hidden and layers must be >= 1")
        if check_paths:
            manifest = Path(self.corpus_root) / "manifest.json"
            _require(manifest.exists(),
                     f"corpus manifest not found at {manifest}")
        return self

    def windows(self) -> WindowSet:
        return WindowSet(delta=tuple(self.delta_window),
                         delta_delta=tuple(self.delta_delta_window))

    def hyper(self, aug_seed: int) -> TrainHyper:
        return TrainHyper(lr=self.lr, max_epochs=self.max_epochs,
                          patience=self.patience,
                          val_fraction=self.val_fraction,
                          seed=aug_seed).validate()

    def to_dict(self) -> dict:
        return {
            "corpus_root": self.corpus_root,
            "run_dir": self.run_dir,
            "setup": self.setup,
            "speakers": list(self.speakers) if self.speakers else None,
            "seed": self.seed,
            "trim_silence": self.trim_silence,
            "strict_alignment": self.strict_alignment,
            "features": {
                "alpha": self.alpha,
                "mcep_order": self.mcep_order,
                "frame_period_ms": self.frame_period_ms,
            },
            "windows": {
                "delta": list(self.delta_window),
                "delta_delta": list(self.delta_delta_window),
            },
            "augmentation": {
                "sigmas": list(self.sigmas),
                "seeds": list(self.aug_seeds),
            },
            "train": {
                "lr": self.lr,
                "max_epochs": self.max_epochs,
                "patience": self.patience,
                "val_fraction": self.val_fraction,
                "hidden": self.hidden,
                "layers": self.layers,
            },
            "eval": {
                "exclude_c0": self.exclude_c0,
                "speech_only": self.speech_only,
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = copy.deepcopy(d)
        known_top = {"corpus_root", "run_dir", "setup", "speakers", "seed",
                     "trim_silence", "strict_alignment", "features", "windows",
                     "augmentation", "train", "eval"}
        unknown = set(d) - known_top
        _require(not unknown, f"unknown config fields: {sorted(unknown)}")
        _require("corpus_root" in d and "run_dir" in d,
                 "config requires corpus_root and run_dir")
        feats = d.get("features", {})
        windows = d.get("windows", {})
        aug = d.get("augmentation", {})
        train = d.get("train", {})
        ev = d.get("eval", {})
        return cls(
            corpus_root=d["corpus_root"],
            run_dir=d["run_dir"],
            setup=d.get("setup", "synthesis"),
            speakers=d.get("speakers"),
            seed=int(d.get("seed", 0)),
            trim_silence=bool(d.get("trim_silence", True)),
            strict_alignment=bool(d.get("strict_alignment", False)),
            alpha=float(feats.get("alpha", DEFAULT_ALPHA)),
            mcep_order=int(feats.get("mcep_order", DEFAULT_MCEP_ORDER)),
            frame_period_ms=float(feats.get("frame_period_ms", 5.0)),
            delta_window=tuple(windows.get("delta", (-0.5, 0.0, 0.5))),
            delta_delta_window=tuple(windows.get("delta_delta", (1.0, -2.0, 1.0))),
            sigmas=tuple(aug.get("sigmas", DEFAULT_SIGMAS)),
            aug_seeds=tuple(int(s) for s in aug.get("seeds", DEFAULT_AUG_SEEDS)),
            lr=float(train.get("lr", 0.001)),
            max_epochs=int(train.get("max_epochs", 50)),
            patience=int(train.get("patience", 5)),
            val_fraction=float(train.get("val_fraction", 0.1)),
            hidden=int(train.get("hidden", 128)),
            layers=int(train.get("layers", 4)),
            exclude_c0=bool(ev.get("exclude_c0", True)),
            speech_only=bool(ev.get("speech_only", False)),
        )

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}")
        return cls.from_dict(data)

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(
            json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )

    def content_hash(self) -> str:
        """Hash of everything that shapes artifacts.

        Input/output locations are excluded: the same experiment against the
        same corpus content yields identical artifacts wherever it runs.
        """
        d = self.to_dict()
        d.pop("run_dir")
        d.pop("corpus_root")
        blob = json.dumps(d, sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()
