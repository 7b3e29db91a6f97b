"""Run configuration: JSON file plus command-line overrides, validated on load."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict, fields

from .inputs import DEFAULT_PARAMS, HenryParameters
from .qoi import QOI_NAMES
from .solver.flow import SolverConfig

PROFILES = {
    "desk": {"L_max": 2, "pilot": [32, 8, 4], "epsilons": [0.1, 0.05, 0.02]},
    "full": {"L_max": 3, "pilot": [32, 8, 4, 2], "epsilons": [0.1, 0.05, 0.01, 0.007]},
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    profile: str = "desk"
    L_max: int = 2
    pilot: list = field(default_factory=lambda: [32, 8, 4])
    epsilons: list = field(default_factory=lambda: [0.1, 0.05, 0.02])
    seed: int = 20240101
    workers: int = 1
    qoi: str = "Q_9"
    calibration_time: float = 640.0
    out: str = "out"
    sampling: str = "pseudo"
    params: dict = field(default_factory=dict)   # HenryParameters overrides
    solver: dict = field(default_factory=dict)   # SolverConfig overrides

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.profile not in PROFILES:
            raise ConfigError(f"unknown profile {self.profile!r}")
        if not isinstance(self.L_max, int) or self.L_max < 0:
            raise ConfigError("L_max must be a non-negative integer")
        if any((not isinstance(m, int)) or m < 0 for m in self.pilot):
            raise ConfigError("pilot sample counts must be non-negative integers")
        if len(self.pilot) > self.L_max + 1:
            raise ConfigError("pilot lists more levels than L_max allows")
        if not self.epsilons or any(not e > 0 for e in self.epsilons):
            raise ConfigError("epsilons must be positive")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.qoi not in QOI_NAMES:
            raise ConfigError(f"unknown QoI {self.qoi!r}")
        if self.sampling not in ("pseudo", "halton"):
            raise ConfigError("sampling must be 'pseudo' or 'halton'")
        if self.calibration_time <= 0 or self.calibration_time % 64.0 != 0:
            raise ConfigError("calibration_time must be a positive multiple of the level-0 step 64 s")
        self.physical()   # raises on bad overrides
        self.solver_config()

    def physical(self) -> HenryParameters:
        known = {f.name for f in fields(HenryParameters)}
        bad = set(self.params) - known
        if bad:
            raise ConfigError(f"unknown physical parameters: {sorted(bad)}")
        try:
            return DEFAULT_PARAMS.with_overrides(**self.params)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def solver_config(self) -> SolverConfig:
        known = {f.name for f in fields(SolverConfig)}
        bad = set(self.solver) - known
        if bad:
            raise ConfigError(f"unknown solver settings: {sorted(bad)}")
        try:
            return SolverConfig(**self.solver)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        bad = set(d) - known
        if bad:
            raise ConfigError(f"unknown configuration keys: {sorted(bad)}")
        base = dict(PROFILES.get(d.get("profile", "desk"), {}))
        base.update(d)
        return cls(**base)

    @classmethod
    def load(cls, path=None, profile: str | None = None, **overrides) -> "RunConfig":
        d = {}
        if path is not None:
            with open(path) as fh:
                d = json.load(fh)
            if not isinstance(d, dict):
                raise ConfigError("configuration file must hold a JSON object")
        # precedence: profile defaults < file < explicit overrides
        if profile is not None:
            d["profile"] = profile
        d.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(d)
