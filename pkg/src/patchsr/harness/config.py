"""Experiment configuration: INI-style key/value files plus CLI overrides.

Example::

    [experiment]
    modality = face
    magnifications = 8, 10, 15, 20
    methods = bicubic, eigen, pp, spp, line, lmcss
    seed = 7

    [method.lmcss]
    k = 150
"""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from fractions import Fraction
from pathlib import Path

from ..errors import ConfigError
from ..methods import METHODS, MethodParams

FACE_IED = 40
FACE_LADDER = (8, 10, 15, 20)
IRIS_LADDER = (2, 4, 8, 16, 22)

# harness-level method defaults per modality (explicit overrides win)
HARNESS_DEFAULTS = {
    "face": {"lmcss": {"k": 100}},
    "iris": {"line": {"reproject": True}, "eigenpatch": {"reproject": True}},
}


@dataclass
class ExperimentConfig:
    modality: str = "face"
    magnifications: list = field(default_factory=list)
    methods: list = field(default_factory=lambda: ["bicubic"])
    seed: int = 0
    lr_patch_size: int | None = None
    lr_stride: int | None = None
    blur_sigma: float = 0.0
    noise_sigma: float = 0.0
    mirror_training: bool | None = None
    lbp_grid: int = 8
    crop_fraction: float = 0.8
    eigen_variance: float = 0.99
    save_images: bool = False
    method_overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    # -- derived values -------------------------------------------------

    @property
    def patch_size(self) -> int:
        return self.lr_patch_size or (6 if self.modality == "face" else 8)

    @property
    def stride(self) -> int:
        return self.lr_stride or (3 if self.modality == "face" else 4)

    @property
    def mirror(self) -> bool:
        return self.modality == "iris" if self.mirror_training is None else bool(self.mirror_training)

    @property
    def ladder(self) -> list:
        return list(self.magnifications) or list(FACE_LADDER if self.modality == "face" else IRIS_LADDER)

    def factor(self, step) -> Fraction:
        """Magnification factor for one ladder entry (faces: target inter-eye distance)."""
        if self.modality == "face":
            return Fraction(FACE_IED, int(step))
        return Fraction(int(step))

    def label(self, step) -> str:
        return f"IED{int(step)}" if self.modality == "face" else f"x{int(step)}"

    def params(self, method: str) -> MethodParams:
        over = dict(HARNESS_DEFAULTS[self.modality].get(method, {}))
        if method in ("eigen", "eigenpatch"):
            over["variance_keep"] = self.eigen_variance
        over.update(self.method_overrides.get(method, {}))
        return MethodParams.defaults(method, **over)

    def validate(self) -> None:
        if self.modality not in ("face", "iris"):
            raise ConfigError(f"modality must be face or iris, got {self.modality!r}")
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown:
            raise ConfigError(f"unknown methods {unknown}; available: {list(METHODS)}")
        for step in self.ladder:
            if int(step) != step or step < 1:
                raise ConfigError(f"magnification entries must be positive integers, got {step!r}")
            f = self.factor(step)
            if f < 2:
                raise ConfigError(f"magnification {step} gives factor {f} < 2")
        for m, over in self.method_overrides.items():
            if m not in METHODS:
                raise ConfigError(f"overrides for unknown method {m!r}")
            known = {f.name for f in fields(MethodParams)} - {"method"}
            bad = set(over) - known
            if bad:
                raise ConfigError(f"unknown parameters for {m}: {sorted(bad)}")
        for m in self.methods:
            try:
                self.params(m)
            except ValueError as exc:
                raise ConfigError(f"bad parameters for {m}: {exc}") from exc
        if not 0 < self.crop_fraction <= 1:
            raise ConfigError("crop_fraction must be in (0, 1]")

    def as_dict(self) -> dict:
        d = asdict(self)
        d["resolved"] = {
            "patch_size": self.patch_size, "stride": self.stride, "mirror": self.mirror,
            "ladder": self.ladder,
            "method_params": {m: self.params(m).as_dict() for m in self.methods},
        }
        return d

    def digest(self) -> str:
        blob = json.dumps(self.as_dict(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()


_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}
_PARAM_TYPES = {f.name: f.type for f in fields(MethodParams)}


def _convert(value: str, typ: str):
    value = value.strip()
    if "list" in typ:
        items = [v.strip() for v in value.split(",") if v.strip()]
        return [int(v) if v.lstrip("-").isdigit() else v for v in items]
    if "bool" in typ:
        low = value.lower()
        if low in ("", "none", "auto") and "None" in typ:
            return None
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if value.lower() == "none" and "None" in typ:
        return None
    if "int" in typ and "float" not in typ:
        return int(value)
    if "float" in typ:
        return float(value)
    return value


def set_key(cfg: dict, key: str, value: str) -> None:
    """Apply one ``key=value`` (``method.param`` for method parameters) to a raw config dict."""
    key = key.strip().replace("-", "_")
    try:
        if "." in key:
            method, param = key.split(".", 1)
            if param not in _PARAM_TYPES or param == "method":
                raise ConfigError(f"unknown method parameter {key!r}")
            cfg.setdefault("method_overrides", {}).setdefault(method, {})[param] = \
                _convert(value, str(_PARAM_TYPES[param]))
        else:
            if key not in _TYPES or key == "method_overrides":
                raise ConfigError(f"unknown configuration key {key!r}")
            cfg[key] = _convert(value, str(_TYPES[key]))
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"bad value for {key}: {exc}") from exc


def read_config_file(path) -> dict:
    """Parse a config file into a raw dict suitable for :func:`build_config`."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} not found")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(path.read_text())
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    cfg: dict = {}
    for section in parser.sections():
        for key, value in parser.items(section):
            if section == "experiment":
                set_key(cfg, key, value)
            elif section.startswith("method."):
                set_key(cfg, f"{section[len('method.'):]}.{key}", value)
            else:
                raise ConfigError(f"{path}: unknown section [{section}]")
    return cfg


def build_config(raw: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig(**raw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def write_config_file(path, cfg: ExperimentConfig) -> None:
    parser = configparser.ConfigParser(interpolation=None)
    exp = {}
    for f in fields(ExperimentConfig):
        if f.name == "method_overrides":
            continue
        v = getattr(cfg, f.name)
        exp[f.name] = ", ".join(str(x) for x in v) if isinstance(v, list) else str(v)
    parser["experiment"] = exp
    for m, over in cfg.method_overrides.items():
        parser[f"method.{m}"] = {k: str(v) for k, v in over.items()}
    with open(path, "w") as fh:
        parser.write(fh)
