"""Run configuration: sectioned ``key = value`` files mapped onto module configs."""

import configparser
import logging
import os
from copy import deepcopy
from typing import Any, Dict, Mapping, Optional, Tuple

from . import rng as streams
from .combine import CombineConfig
from .core_types import IMAGES, INSTANCES, BinScheme, ConfigError
from .head import HeadSpec, LossConfig
from .sampling import SamplerConfig
from .synth import SynthConfig
from .trainer import CalibConfig, Schedule, calibration_schedule, standard_schedule

logger = logging.getLogger(__name__)

OUT_ENV = "SIMCAL_LAB_OUT"
CACHE_ENV = "SIMCAL_LAB_CACHE"
DEFAULT_OUT = "./simcal_runs"
DEFAULT_CACHE = os.path.join("~", ".simcal_lab", "cache")

# section -> key -> (type, default)
SCHEMA: Dict[str, Dict[str, Tuple[str, Any]]] = {
    "run": {
        "seed": ("int", 0),
        "repeats": ("int", 1),
        "workers": ("int", 1),
        "cache": ("bool", True),
    },
    "synth": {
        "num_classes": ("int", 60),
        "feature_dim": ("int", 32),
        "frequency_law": ("str", "powerlaw"),
        "law_param": ("opt_float", None),
        "head_tail_ratio": ("float", 1000.0),
        "explicit_counts": ("opt_ints", None),
        "max_instances_per_head_class": ("int", 8000),
        "instances_per_image": ("ints", (1, 3)),
        "proposals_per_instance": ("ints", (1, 4)),
        "background_proposals_per_image": ("ints", (2, 8)),
        "prototype_spread": ("float", 1.0),
        "within_class_noise": ("float", 0.5),
        "background_spread": ("float", 1.5),
        "iou_beta_a": ("float", 5.0),
        "iou_beta_b": ("float", 2.0),
        "background_iou_max": ("float", 0.3),
        "iou_threshold": ("float", 0.5),
    },
    "eval_split": {
        "instances_per_class": ("int", 20),
    },
    "sampler": {
        "classes_per_batch": ("int", 16),
        "images_per_class": ("int", 1),
        "fg_bg_ratio": ("ints", (1, 1)),
        "repeat_threshold": ("float", 0.001),
        "repeat_exponent": ("float", 0.5),
        "random_batch_images": ("int", 8),
        "with_replacement": ("bool", False),
        "max_retries": ("int", 10),
    },
    "loss": {
        "kind": ("str", "ce"),
        "reweight_numerator": ("float", 100.0),
        "weight_clamp": ("floats", (0.1, 10.0)),
        "background_weight": ("float", 1.0),
        "gamma": ("float", 3.0),
        "margin_c": ("float", 6.0),
        "focal_alpha": ("float", 1.0),
    },
    "head": {
        "hidden": ("ints", (1024, 1024)),
        "last_layer_std": ("float", 0.01),
    },
    "schedule": {
        "total_steps": ("int", 4000),
        "lr_init": ("float", 0.01),
        "decay_steps": ("opt_ints", None),
        "decay_factor": ("float", 0.1),
    },
    "calibration": {
        "head_init": ("str", "3fc_ft"),
        "layers_to_calibrate": ("str", "all"),
        "scale": ("float", 1.0),
        "lr_init": ("float", 0.01),
        "decay_factor": ("float", 0.1),
    },
    "combine": {
        "scheme": ("str", "sel"),
        "T": ("int", 300),
        "thr": ("float", 0.05),
        "sel_bg": ("str", "orig"),
        "det_top_k": ("opt_int", None),
    },
    "bins": {
        "instance_edges": ("ints", (10, 100, 1000)),
        "image_edges": ("ints", (11, 101)),
    },
}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def output_root() -> str:
    return os.environ.get(OUT_ENV, DEFAULT_OUT)


def cache_dir() -> str:
    return os.path.expanduser(os.environ.get(CACHE_ENV, DEFAULT_CACHE))


def _coerce(kind: str, raw: Any, where: str) -> Any:
    if not isinstance(raw, str):
        return tuple(raw) if kind.endswith("s") and raw is not None else raw
    text = raw.strip()
    try:
        if kind.startswith("opt_"):
            if text == "" or text.lower() == "none":
                return None
            kind = kind[4:]
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "bool":
            if text.lower() in _TRUE:
                return True
            if text.lower() in _FALSE:
                return False
            raise ValueError(text)
        if kind == "ints":
            return tuple(int(v) for v in text.split(",") if v.strip())
        if kind == "floats":
            return tuple(float(v) for v in text.split(",") if v.strip())
        return text
    except ValueError as e:
        raise ConfigError(f"{where}: cannot read {raw!r} as {kind}") from e


def _render(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ", ".join(_render(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


class RunConfig:
    """Flat ``section.key`` view over every module configuration.

    Unknown sections and keys are rejected. ``resolved_text`` renders every
    key, defaults included, and is written next to every result.
    """

    def __init__(self, values: Optional[Mapping[str, Mapping[str, Any]]] = None):
        self.values: Dict[str, Dict[str, Any]] = {
            section: {key: deepcopy(default) for key, (_, default) in keys.items()}
            for section, keys in SCHEMA.items()
        }
        for section, keys in (values or {}).items():
            for key, raw in keys.items():
                self.set(section, key, raw)
        self._validate()

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            parser.read_string(text, source=source)
        except configparser.Error as e:
            raise ConfigError(f"{source}: {e}") from e
        return cls({s: dict(parser.items(s)) for s in parser.sections()})

    @classmethod
    def load(cls, path: Optional[str] = None, overrides: Optional[Mapping[str, Any]] = None) -> "RunConfig":
        """Read ``path`` (if given) and apply ``section.key`` overrides."""
        if path:
            try:
                with open(path, "r", encoding="utf-8") as f:
                    config = cls.from_text(f.read(), source=path)
            except OSError as e:
                raise ConfigError(f"cannot read config {path}: {e}") from e
        else:
            config = cls()
        return config.with_overrides(overrides or {})

    def with_overrides(self, overrides: Mapping[str, Any]) -> "RunConfig":
        values = deepcopy(self.values)
        clone = RunConfig.__new__(RunConfig)
        clone.values = values
        for dotted, raw in overrides.items():
            section, _, key = dotted.partition(".")
            clone.set(section, key, raw)
        clone._validate()
        return clone

    def set(self, section: str, key: str, raw: Any) -> None:
        if section not in SCHEMA:
            raise ConfigError(f"unknown config section: [{section}]")
        if key not in SCHEMA[section]:
            raise ConfigError(f"unknown config key: {section}.{key}")
        kind = SCHEMA[section][key][0]
        self.values[section][key] = _coerce(kind, raw, f"{section}.{key}")

    def get(self, section: str, key: str) -> Any:
        try:
            return self.values[section][key]
        except KeyError as e:
            raise ConfigError(f"unknown config key: {section}.{key}") from e

    def section(self, name: str) -> Dict[str, Any]:
        return dict(self.values[name])

    def _validate(self) -> None:
        # every module config validates itself
        self.synth_config()
        self.sampler_config()
        self.loss_config()
        self.head_spec()
        self.standard_schedule()
        self.calib_config()
        self.combine_config()
        self.instance_bins()
        self.image_sets()

    def resolved_text(self) -> str:
        lines = []
        for section, keys in SCHEMA.items():
            lines.append(f"[{section}]")
            for key in keys:
                lines.append(f"{key} = {_render(self.values[section][key])}".rstrip())
            lines.append("")
        return "\n".join(lines)

    def write(self, path: str) -> None:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.resolved_text())

    @property
    def seed(self) -> int:
        return int(self.values["run"]["seed"])

    def synth_config(self) -> SynthConfig:
        return SynthConfig(**self.values["synth"], seed=streams.child_seed(self.seed, streams.DATASET))

    def eval_instances_per_class(self) -> int:
        return int(self.values["eval_split"]["instances_per_class"])

    def sampler_config(self) -> SamplerConfig:
        return SamplerConfig(**self.values["sampler"], seed=streams.child_seed(self.seed, streams.SAMPLER))

    def loss_config(self) -> LossConfig:
        return LossConfig(**self.values["loss"])

    def head_spec(self) -> HeadSpec:
        return HeadSpec(**self.values["head"])

    def standard_schedule(self) -> Schedule:
        s = self.values["schedule"]
        if s["decay_steps"] is None:
            base = standard_schedule(s["total_steps"], s["lr_init"])
            return Schedule(base.total_steps, base.lr_init, base.decay_steps, s["decay_factor"])
        return Schedule(s["total_steps"], s["lr_init"], s["decay_steps"], s["decay_factor"])

    def calibration_schedule(self) -> Schedule:
        c = self.values["calibration"]
        base = calibration_schedule(c["scale"], c["lr_init"])
        return Schedule(base.total_steps, base.lr_init, base.decay_steps, c["decay_factor"])

    def calib_config(self) -> CalibConfig:
        c = self.values["calibration"]
        return CalibConfig(
            head_init=c["head_init"],
            layers_to_calibrate=c["layers_to_calibrate"],
            loss=self.loss_config(),
            schedule=self.calibration_schedule(),
            sampler=self.sampler_config(),
        )

    def combine_config(self) -> CombineConfig:
        return CombineConfig(**self.values["combine"])

    def instance_bins(self) -> BinScheme:
        edges = self.values["bins"]["instance_edges"]
        names = ("ap1", "ap2", "ap3", "ap4") if len(edges) == 3 else None
        return BinScheme(edges, INSTANCES, names)

    def image_sets(self) -> BinScheme:
        edges = self.values["bins"]["image_edges"]
        names = ("ap_r", "ap_c", "ap_f") if len(edges) == 2 else tuple(f"set{b + 1}" for b in range(len(edges) + 1))
        return BinScheme(edges, IMAGES, names)
