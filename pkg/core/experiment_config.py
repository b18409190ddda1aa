"""
Experiment parameters. Values are layered: the `benchmark`/`experiment` sections of
config.yaml, then an optional key=value experiment file, then command-line overrides.

Experiment file format (UTF-8, one `key=value` per line, `#` starts a comment):

    omega_max_hz=10000
    n_off=200        # isochromats
    dt_s=5e-7
"""
import math
import os
from dataclasses import dataclass, fields, replace
from typing import Any, Dict, Optional, Tuple

import numpy as np

from core.errors import ConfigParseError, InvalidInputError
from core.spin_dynamics import EnsembleSpec
from utils.logger import logger

INIT_STRATEGIES = ("random", "uniform_forward", "from_lloyd")

# key -> (type, must be strictly positive)
FILE_KEYS: Dict[str, Tuple[type, bool]] = {
    "omega_max_hz": (float, True),
    "omega0_hz": (float, True),
    "tf_s": (float, True),
    "dt_s": (float, True),
    "n_off": (int, True),
    "m": (int, True),
    "n_realizations": (int, True),
    "seed": (int, False),
    "max_iters": (int, True),
    "tol_delta_phi": (float, True),
    "lloyd_epsilon": (float, True),
}


@dataclass(frozen=True)
class ExperimentConfig:
    """
    Benchmark defaults: omega_max/2pi = omega0/2pi = 10 kHz, tf = 0.18 ms, dt = 0.5 us
    (N = 360), 200 isochromats. max_iters, tol_delta_phi and lloyd_epsilon stay None
    unless set, leaving each engine its own default.
    """
    omega_max_hz: float = 1.0e4
    omega0_hz: float = 1.0e4
    tf_s: float = 1.8e-4
    dt_s: float = 5.0e-7
    n_off: int = 200
    m: int = 4
    n_realizations: int = 100
    seed: int = 0
    max_iters: Optional[int] = None
    tol_delta_phi: Optional[float] = None
    lloyd_epsilon: Optional[float] = None
    init: str = "random"
    output_dir: str = "results"
    workers: int = 1
    m_list: Tuple[int, ...] = (4, 6, 8, 10, 12, 16, 32)

    def __post_init__(self):
        for name in ("omega_max_hz", "omega0_hz", "tf_s", "dt_s"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise InvalidInputError(f"{name} must be a finite value > 0, got {value}")
        for name in ("n_off", "m", "n_realizations", "workers"):
            if getattr(self, name) < 1:
                raise InvalidInputError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.seed < 0:
            raise InvalidInputError(f"seed must be a non-negative integer, got {self.seed}")
        if self.init not in INIT_STRATEGIES:
            raise InvalidInputError(f"init must be one of {INIT_STRATEGIES}, got '{self.init}'")
        if not self.m_list or min(self.m_list) < 1:
            raise InvalidInputError("m_list must hold at least one M >= 1")
        object.__setattr__(self, "m_list", tuple(int(m) for m in self.m_list))
        ratio = self.tf_s / self.dt_s
        if abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio) or round(ratio) < 1:
            raise InvalidInputError(f"tf_s / dt_s = {ratio!r} is not a positive integer number of slices")

    @property
    def n_steps(self) -> int:
        return int(round(self.tf_s / self.dt_s))

    def ensemble_spec(self) -> EnsembleSpec:
        """Offsets in rad/s over [-2pi*omega_max_hz, +2pi*omega_max_hz]."""
        two_pi = 2.0 * np.pi
        return EnsembleSpec.symmetric(
            two_pi * self.omega_max_hz, self.n_off, two_pi * self.omega0_hz, self.tf_s, self.n_steps
        )

    def with_overrides(self, **overrides) -> "ExperimentConfig":
        """Copy with every non-None override applied."""
        changes = {k: v for k, v in overrides.items() if v is not None}
        return replace(self, **changes) if changes else self

    @classmethod
    def from_app_config(cls, config: Dict[str, Any]) -> "ExperimentConfig":
        """Defaults taken from the `benchmark` and `experiment` sections of config.yaml."""
        known = {f.name for f in fields(cls)}
        merged: Dict[str, Any] = {}
        for section in ("benchmark", "experiment"):
            merged.update({k: v for k, v in (config.get(section) or {}).items() if k in known})
        if "m_list" in merged:
            merged["m_list"] = tuple(merged["m_list"])
        return cls(**merged)


def _parse_value(key: str, raw: str, path: str, line_number: int):
    kind, positive = FILE_KEYS[key]
    try:
        if kind is int:
            value = int(raw)
        else:
            value = float(raw)
    except ValueError:
        logger.error(f"{path}:{line_number}: '{raw}' is not a valid {kind.__name__} for {key}")
        raise ConfigParseError(f"value '{raw}' for {key} is not a valid {kind.__name__}", path, line_number)
    if kind is float and not math.isfinite(value):
        raise ConfigParseError(f"value for {key} must be finite", path, line_number)
    if positive and value <= 0:
        raise ConfigParseError(f"{key} must be > 0, got {raw}", path, line_number)
    if value < 0:
        raise ConfigParseError(f"{key} must be >= 0, got {raw}", path, line_number)
    return value


def parse_config(path: str, base: Optional[ExperimentConfig] = None) -> ExperimentConfig:
    """
    Reads a key=value experiment file on top of `base` (benchmark defaults when omitted).
    Malformed lines, unknown or repeated keys and non-numeric values raise ConfigParseError
    naming the line.
    """
    base = base if base is not None else ExperimentConfig()
    try:
        with open(path, "r", encoding="utf-8") as f:
            lines = f.read().splitlines()
    except OSError as e:
        logger.error(f"Cannot read experiment file {path}: {e}")
        raise ConfigParseError(f"cannot read experiment file: {e.strerror or e}", path) from e

    values: Dict[str, Any] = {}
    for line_number, raw_line in enumerate(lines, start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            logger.error(f"{path}:{line_number}: expected key=value, got '{raw_line.strip()}'")
            raise ConfigParseError(f"expected key=value, got '{raw_line.strip()}'", path, line_number)
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in FILE_KEYS:
            logger.error(f"{path}:{line_number}: unknown key '{key}'")
            raise ConfigParseError(f"unknown key '{key}'", path, line_number)
        if key in values:
            raise ConfigParseError(f"key '{key}' given twice", path, line_number)
        values[key] = _parse_value(key, raw, path, line_number)

    try:
        config = replace(base, **values)
    except InvalidInputError as e:
        logger.error(f"{path}: {e}")
        raise ConfigParseError(str(e), path) from e
    logger.info(f"Loaded experiment file {path} ({len(values)} key(s) set), N={config.n_steps}")
    return config


def load_experiment(app_config: Dict[str, Any], experiment_path: Optional[str] = None,
                    **overrides) -> ExperimentConfig:
    """config.yaml defaults, then the experiment file, then non-None overrides."""
    config = ExperimentConfig.from_app_config(app_config)
    if experiment_path:
        if not os.path.exists(experiment_path):
            logger.error(f"Experiment file not found at {experiment_path}")
            raise ConfigParseError("experiment file not found", experiment_path)
        config = parse_config(experiment_path, base=config)
    try:
        return config.with_overrides(**overrides)
    except InvalidInputError:
        logger.error(f"Invalid command-line override(s): {overrides}")
        raise
