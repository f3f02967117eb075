"""Run configuration: defaults, file and flag merging, validation and object builders.

A config is one nested JSON document. Precedence, lowest first: built-in
defaults, the ``--config`` file, dedicated command-line flags, then
``--set dotted.key=value`` overrides in the order given.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict
from pathlib import Path

from . import __version__
from .advtrain import AttackConfig
from .data import DataError, SyntheticSpec, load_cifar_binary, load_png_directory, make_synthetic, split
from .idbh import (STRENGTH_DIVERSITY_RANGES, TYPE_DIVERSITY_POOL, IdbhAugment, IdbhSchedule,
                   SearchSpace, FixedAugment, calibrated_spec)
from .imagecore import Dataset
from .nn import LayerSpec, OptimizerState, default_architecture
from .transforms import (HARDNESS_DEGREES, CalibrationTable, default_calibration, make_spec)


class ConfigError(ValueError):
    """The run configuration is invalid."""


DEFAULTS: dict = {
    "seed": 0,
    "threads": 1,
    "output": None,
    "checkpoint": None,
    "data": {
        # source: "synthetic" | "cifar" | "png"
        "source": "synthetic",
        "path": None,
        "test_path": None,
        # with no test_path, the first train_count examples train and the rest test
        "train_count": None,
        "test_limit": None,
        "synthetic": asdict(SyntheticSpec(count=200)),
    },
    "model": {"channels": [16, 32, 64], "hidden": 0},
    "attack": {
        "train": asdict(AttackConfig(steps=10)),
        "track": asdict(AttackConfig(steps=10)),
        "eval": asdict(AttackConfig(steps=50, restarts=5)),
    },
    "train": {
        "epochs": 10,
        "learning_rate": 0.1,
        "momentum": 0.9,
        "weight_decay": 5e-4,
        "lr_schedule": [[100, 0.1], [150, 0.1]],
        "batch_size": 128,
        "apply_probability": 1.0,
        "eps_warmup_epochs": None,
        "swa_start": None,
        "final_eval": False,
    },
    # at most one of schedule / transform
    "augmentation": {"schedule": None, "transform": None},
    "calibration": {
        "table": None,
        "kinds": None,
        "targets": None,
        "bounds": {},
        "tolerance": 0.005,
        "max_iterations": 20,
    },
    "grid": {"space": None, "pruning": "none", "margin": 0.05, "patience": 2,
             "evaluator": "train"},
    "sweep": {"protocol": "hardness", "kinds": None, "degrees": [1, 2, 3, 4, 5, 6, 7],
              "degree": 3, "pool_sizes": None, "strengths": None, "ranges": None},
}

# keys that do not change results and so stay out of the config hash
UNHASHED = ("output", "threads")

CALIBRATION_BOUNDS = {
    "ShearX": (0.0, 1.0), "ShearY": (0.0, 1.0),
    "TranslateX": (0, 16), "TranslateY": (0, 16),
    "Rotate": (0.0, 180.0),
    "Color": (0.0, 1.0), "Sharpness": (0.0, 1.0),
    "Brightness": (0.5, 1.0), "Contrast": (0.5, 1.0),
    "Solarize": (0.0, 1.0),
    "Cutout-i": (0, 31), "Cropshift": (0, 31), "Padcrop": (0, 16),
}
INTEGER_KINDS = {"TranslateX", "TranslateY", "Cutout", "Cutout-i", "Cropshift", "Padcrop"}


def deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k not in ("schedule", "transform", "bounds"):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def set_dotted(doc: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = doc
    for k in keys[:-1]:
        if not isinstance(node.get(k), dict):
            node[k] = {}
        node = node[k]
    node[keys[-1]] = value


def parse_assignment(text: str) -> tuple[str, object]:
    """``a.b=value``; the value is parsed as JSON, falling back to a plain string."""
    if "=" not in text:
        raise ConfigError(f"--set expects key=value, got {text!r}")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


class RunConfig:
    """A merged, validated configuration document with typed accessors."""

    def __init__(self, doc: dict):
        self.doc = doc
        unknown = set(doc) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")

    @classmethod
    def build(cls, file_path=None, overrides: dict | None = None,
              assignments: list[str] = ()) -> "RunConfig":
        doc = copy.deepcopy(DEFAULTS)
        if file_path is not None:
            p = Path(file_path)
            if not p.is_file():
                raise ConfigError(f"config file {p} does not exist")
            try:
                loaded = json.loads(p.read_text())
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config file {p} is not valid JSON: {exc}") from exc
            if not isinstance(loaded, dict):
                raise ConfigError(f"config file {p} must hold a JSON object")
            doc = deep_merge(doc, loaded)
        for k, v in (overrides or {}).items():
            if v is not None:
                set_dotted(doc, k, v)
        for a in assignments:
            set_dotted(doc, *parse_assignment(a))
        return cls(doc)

    def __getitem__(self, key):
        return self.doc[key]

    @property
    def seed(self) -> int:
        seed = self.doc["seed"]
        if not isinstance(seed, int) or seed < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {seed!r}")
        return seed

    @property
    def hash(self) -> str:
        hashed = {k: v for k, v in self.doc.items() if k not in UNHASHED}
        blob = json.dumps(hashed, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @property
    def meta(self) -> dict:
        """The identity embedded in every artifact."""
        return {"seed": self.seed, "config_hash": self.hash, "version": __version__}

    def output_dir(self) -> Path:
        out = self.doc["output"]
        if not out:
            raise ConfigError("an output directory is required (--output)")
        return Path(out)

    def require_path(self, key: str, value) -> Path:
        if value is None:
            raise ConfigError(f"{key} is required")
        p = Path(value)
        if not p.exists():
            raise ConfigError(f"{key} path {p} does not exist")
        return p

    # -- builders ----------------------------------------------------------

    def attack(self, name: str) -> AttackConfig:
        try:
            return AttackConfig(**self.doc["attack"][name])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"attack.{name}: {exc}") from exc

    def optimizer(self) -> OptimizerState:
        t = self.doc["train"]
        try:
            sched = [(int(e), float(f)) for e, f in t["lr_schedule"]]
            return OptimizerState(float(t["learning_rate"]), float(t["momentum"]),
                                  float(t["weight_decay"]), sched)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"train: {exc}") from exc

    def train_settings(self) -> dict:
        t = self.doc["train"]
        if not isinstance(t["epochs"], int) or t["epochs"] < 0:
            raise ConfigError(f"train.epochs must be a non-negative integer, got {t['epochs']!r}")
        if not isinstance(t["batch_size"], int) or t["batch_size"] < 1:
            raise ConfigError("train.batch_size must be a positive integer")
        if not 0 <= t["apply_probability"] <= 1:
            raise ConfigError("train.apply_probability must lie in [0, 1]")
        w = t["eps_warmup_epochs"]
        if w is not None and (not isinstance(w, int) or w < 1):
            raise ConfigError("train.eps_warmup_epochs must be a positive integer or null")
        s = t["swa_start"]
        if s is not None and (not isinstance(s, int) or s < 0):
            raise ConfigError("train.swa_start must be a non-negative integer or null")
        return t

    def layers(self) -> list[LayerSpec]:
        m = self.doc["model"]
        try:
            return default_architecture(tuple(int(c) for c in m["channels"]), int(m["hidden"]))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"model: {exc}") from exc

    def synthetic_spec(self) -> SyntheticSpec:
        try:
            return SyntheticSpec(**{**self.doc["data"]["synthetic"], "seed":
                                    self.doc["data"]["synthetic"].get("seed", self.seed)})
        except TypeError as exc:
            raise ConfigError(f"data.synthetic: {exc}") from exc

    def check_data(self) -> None:
        d = self.doc["data"]
        if d["source"] not in ("synthetic", "cifar", "png"):
            raise ConfigError(f"data.source must be synthetic, cifar or png, got {d['source']!r}")
        if d["source"] == "synthetic":
            self.synthetic_spec()
        else:
            self.require_path("data.path", d["path"])
            if d["test_path"] is not None:
                self.require_path("data.test_path", d["test_path"])

    def load_data(self) -> tuple[Dataset, Dataset]:
        """(train, test). Raises DataError for unreadable data."""
        d = self.doc["data"]
        if d["source"] == "synthetic":
            full = make_synthetic(self.synthetic_spec())
        elif d["source"] == "cifar":
            full = load_cifar_binary(d["path"])
        else:
            full = load_png_directory(d["path"])[0]
        if d["test_path"] is not None:
            test = load_cifar_binary(d["test_path"]) if d["source"] == "cifar" \
                else load_png_directory(d["test_path"])[0]
            train = full
        else:
            count = d["train_count"]
            if count is None:
                count = len(full) * 2 // 3
            if not 0 < count < len(full):
                raise DataError(f"train_count {count} leaves no train or test data out of {len(full)}")
            train, test = split(full, count)
        if d["test_limit"] is not None:
            test = test.subset(range(min(len(test), int(d["test_limit"]))))
        return train, test

    def calibration_table(self) -> CalibrationTable:
        path = self.doc["calibration"]["table"]
        if path is None:
            return default_calibration()
        try:
            return CalibrationTable.load(self.require_path("calibration.table", path))
        except ValueError as exc:
            raise ConfigError(f"calibration table {path}: {exc}") from exc

    def augmentation(self):
        """The per-image augmentation callable, or None for no augmentation."""
        a = self.doc["augmentation"]
        if a.get("schedule") is not None and a.get("transform") is not None:
            raise ConfigError("augmentation takes a schedule or a transform, not both")
        try:
            if a.get("schedule") is not None:
                sched = a["schedule"]
                if isinstance(sched, str):
                    sched = json.loads(self.require_path("augmentation.schedule", sched).read_text())
                return IdbhAugment(IdbhSchedule.from_dict(sched))
            if a.get("transform") is not None:
                t = dict(a["transform"])
                kind = t.pop("kind")
                if "degree" in t:
                    return FixedAugment(calibrated_spec(kind, t.pop("degree"),
                                                        self.calibration_table(), **t))
                return FixedAugment(make_spec(kind, t.pop("strength", 0.0), **t))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"augmentation: {exc}") from exc
        return None

    def search_space(self) -> SearchSpace:
        space = self.doc["grid"]["space"]
        try:
            if space is None:
                return SearchSpace()
            if isinstance(space, str):
                return SearchSpace.load(self.require_path("grid.space", space))
            return SearchSpace.from_dict(space)
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"grid.space: {exc}") from exc

    def calibration_plan(self) -> dict:
        c = self.doc["calibration"]
        kinds = c["kinds"] or list(CALIBRATION_BOUNDS)
        bounds = {}
        for k in kinds:
            b = c["bounds"].get(k, CALIBRATION_BOUNDS.get(k))
            if b is None:
                raise ConfigError(f"no strength bounds for {k}; set calibration.bounds.{k}")
            bounds[k] = (float(b[0]), float(b[1]))
        targets = c["targets"]
        if targets is not None:
            targets = [float(t) for t in targets]
            if any(b >= a for a, b in zip(targets, targets[1:])):
                raise ConfigError("calibration.targets must be strictly decreasing")
        if not c["tolerance"] > 0 or int(c["max_iterations"]) < 1:
            raise ConfigError("calibration tolerance and max_iterations must be positive")
        return {"kinds": kinds, "bounds": bounds, "targets": targets,
                "tolerance": float(c["tolerance"]), "max_iterations": int(c["max_iterations"])}

    def sweep_plan(self) -> dict:
        s = dict(self.doc["sweep"])
        protocol = s["protocol"]
        defaults = {
            "hardness": {"kinds": ["ShearX", "Color", "Cropshift"]},
            "type": {"kinds": list(TYPE_DIVERSITY_POOL),
                     "pool_sizes": list(range(1, len(TYPE_DIVERSITY_POOL) + 1))},
            "spatial": {"kinds": ["Cutout-i", "Cutout-i-1", "Cropshift", "Cropshift-1"],
                        "strengths": [4, 8, 12]},
            "strength": {"kinds": ["ShearX", "Color", "Cropshift"],
                         "ranges": [list(r) for r in STRENGTH_DIVERSITY_RANGES]},
        }
        if protocol not in defaults:
            raise ConfigError(f"sweep.protocol must be one of {sorted(defaults)}, got {protocol!r}")
        for k, v in defaults[protocol].items():
            if s.get(k) is None:
                s[k] = v
        return s


def default_degree_targets(base: float) -> list[float]:
    return [base / h for h in HARDNESS_DEGREES]


def dump_json(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"
