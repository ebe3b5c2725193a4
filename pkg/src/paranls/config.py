"""Run configuration: TOML parsing, validation and lossless round trip."""
from __future__ import annotations

import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np
import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .model import DENSITIES
from .symbols import DEFAULT_EPSILON
from .torus import Field, Grid, PairField

EXPERIMENTS = ("selftest", "linear", "picard", "continuity", "energy-monitor")


class ConfigError(ValueError):
    """Validation failure; ``field`` names the offending key."""

    def __init__(self, field_name: str, msg: str):
        super().__init__(f"{field_name}: {msg}")
        self.field = field_name


@dataclass(frozen=True)
class Mode:
    k: tuple[int, ...]
    re: float
    im: float = 0.0

    @property
    def amplitude(self) -> complex:
        return complex(self.re, self.im)


@dataclass(frozen=True)
class RunConfig:
    experiment: str = "picard"
    dim: int = 1
    N: int = 32
    M: int = 0
    s: float = 4.0
    epsilon: float = DEFAULT_EPSILON
    R0: float = 8.0
    max_R_doublings: int = 6
    max_T_halvings: int = 6
    density: str = "flagship"
    density_params: dict = field(default_factory=dict)
    # empty mode lists fall back to a single mode along the first axis
    modes: tuple[Mode, ...] = ()
    initial_file: str = ""
    T: float = 0.1
    dt: float = 1e-3
    max_iter: int = 30
    tol: float = 1e-10
    perturbation: tuple[Mode, ...] = ()
    halvings: int = 3
    energy_every: int = 10
    output: str = ""
    seed: int = 0

    def __post_init__(self):
        validate(self)

    # -- derived objects -------------------------------------------------

    @property
    def grid(self) -> Grid:
        return Grid(self.dim, self.N, self.M)

    def density_obj(self):
        return DENSITIES[self.density](self.dim, **self.density_params)

    def _axis_mode(self, k: int, amp: float) -> tuple[Mode, ...]:
        return (Mode((min(k, self.N),) + (0,) * (self.dim - 1), amp),)

    def _field(self, modes) -> Field:
        return Field.from_modes(self.grid, {m.k: m.amplitude for m in modes})

    def initial(self, base: Path | None = None) -> PairField:
        if self.initial_file:
            p = Path(self.initial_file)
            if not p.is_absolute() and base is not None:
                p = base / p
            c = np.load(p)
            if c.shape != self.grid.shape:
                raise ConfigError("initial.file", f"array shape {c.shape} != grid shape {self.grid.shape}")
            return PairField.from_field(Field(self.grid, c))
        return PairField.from_field(self._field(self.modes or self._axis_mode(1, 0.1)))

    def perturbation_field(self) -> PairField:
        return PairField.from_field(self._field(self.perturbation or self._axis_mode(2, 1e-3)))

    # -- serialization ---------------------------------------------------

    def to_dict(self) -> dict:
        def modes(ms):
            return [{"k": list(m.k), "re": m.re, "im": m.im} for m in ms]

        d = {
            "run": {"experiment": self.experiment, "seed": self.seed, "output": self.output},
            "grid": {"dim": self.dim, "N": self.N, "M": self.M},
            "model": {"density": self.density, "params": dict(self.density_params)},
            "initial": {"modes": modes(self.modes), "file": self.initial_file},
            "solver": {
                "s": self.s, "epsilon": self.epsilon, "R0": self.R0,
                "max_R_doublings": self.max_R_doublings, "max_T_halvings": self.max_T_halvings,
                "T": self.T, "dt": self.dt, "max_iter": self.max_iter, "tol": self.tol,
            },
            "continuity": {"perturbation": modes(self.perturbation), "halvings": self.halvings},
            "energy": {"every": self.energy_every},
        }
        return d

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())


_LAYOUT = {
    "run": {"experiment": "experiment", "seed": "seed", "output": "output"},
    "grid": {"dim": "dim", "N": "N", "M": "M"},
    "model": {"density": "density", "params": "density_params"},
    "initial": {"modes": "modes", "file": "initial_file"},
    "solver": {k: k for k in ("s", "epsilon", "R0", "max_R_doublings", "max_T_halvings",
                              "T", "dt", "max_iter", "tol")},
    "continuity": {"perturbation": "perturbation", "halvings": "halvings"},
    "energy": {"every": "energy_every"},
}


def _modes(raw, where: str, dim: int | None) -> tuple[Mode, ...]:
    if not isinstance(raw, list):
        raise ConfigError(where, "expected a list of {k, re, im} tables")
    out = []
    for i, m in enumerate(raw):
        if not isinstance(m, dict) or "k" not in m:
            raise ConfigError(f"{where}[{i}]", "expected a table with key k")
        extra = set(m) - {"k", "re", "im"}
        if extra:
            raise ConfigError(f"{where}[{i}]", f"unknown keys {sorted(extra)}")
        k = m["k"]
        k = (k,) if isinstance(k, int) else tuple(k)
        if not all(isinstance(v, int) and not isinstance(v, bool) for v in k):
            raise ConfigError(f"{where}[{i}].k", "must be integers")
        try:
            out.append(Mode(k, float(m.get("re", 0.0)), float(m.get("im", 0.0))))
        except (TypeError, ValueError):
            raise ConfigError(f"{where}[{i}]", "re/im must be numbers") from None
    return tuple(out)


def from_dict(d: dict) -> RunConfig:
    kw: dict[str, Any] = {}
    for section, body in d.items():
        if section not in _LAYOUT:
            raise ConfigError(section, f"unknown section (expected one of {sorted(_LAYOUT)})")
        if not isinstance(body, dict):
            raise ConfigError(section, "must be a table")
        for key, value in body.items():
            if key not in _LAYOUT[section]:
                raise ConfigError(f"{section}.{key}", "unknown key")
            kw[_LAYOUT[section][key]] = value
    for name in ("modes", "perturbation"):
        if name in kw:
            kw[name] = _modes(kw[name], name, None)
    for name in ("dim", "N", "M", "max_R_doublings", "max_T_halvings", "max_iter", "halvings",
                 "energy_every", "seed"):
        if name in kw and (not isinstance(kw[name], int) or isinstance(kw[name], bool)):
            raise ConfigError(name, f"must be an integer, got {kw[name]!r}")
    for name in ("s", "epsilon", "R0", "T", "dt", "tol"):
        if name in kw:
            if isinstance(kw[name], bool) or not isinstance(kw[name], (int, float)):
                raise ConfigError(name, f"must be a number, got {kw[name]!r}")
            kw[name] = float(kw[name])
    for name in ("experiment", "density", "initial_file", "output"):
        if name in kw and not isinstance(kw[name], str):
            raise ConfigError(name, "must be a string")
    if "density_params" in kw and not isinstance(kw["density_params"], dict):
        raise ConfigError("model.params", "must be a table")
    return RunConfig(**kw)


def loads(text: str) -> RunConfig:
    try:
        d = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError("<file>", f"not valid TOML: {exc}") from None
    return from_dict(d)


def load(path: str | Path) -> RunConfig:
    return loads(Path(path).read_text())


def _parse_scalar(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply ``section.key=value`` overrides (value in TOML syntax; bare words are strings)."""
    d = cfg.to_dict()
    for item in overrides:
        if "=" not in item:
            raise ConfigError(item, "override must look like section.key=value")
        path, value = item.split("=", 1)
        parts = path.strip().split(".")
        if len(parts) != 2:
            raise ConfigError(path, "override key must be section.key")
        sec, key = parts
        d.setdefault(sec, {})[key] = _parse_scalar(value.strip())
    return from_dict(d)


def validate(cfg: RunConfig) -> None:
    if cfg.experiment not in EXPERIMENTS:
        raise ConfigError("run.experiment", f"must be one of {list(EXPERIMENTS)}, got {cfg.experiment!r}")
    if not 1 <= cfg.dim <= 3:
        raise ConfigError("grid.dim", f"must be in [1, 3], got {cfg.dim}")
    if cfg.N < 1:
        raise ConfigError("grid.N", f"must be >= 1, got {cfg.N}")
    m_min = 2 * (2 * cfg.N + 1)
    if cfg.M and (cfg.M < m_min or cfg.M % 2):
        raise ConfigError("grid.M", f"must be 0 (automatic) or an even number >= {m_min}, got {cfg.M}")
    if not 0.0 < cfg.epsilon < 0.25:
        raise ConfigError("solver.epsilon", f"must lie in the open interval (0, 1/4), got {cfg.epsilon}")
    if not cfg.s >= 2.0:
        raise ConfigError("solver.s", f"must be >= 2, got {cfg.s}")
    if not cfg.R0 > 0:
        raise ConfigError("solver.R0", f"must be positive, got {cfg.R0}")
    for name in ("max_R_doublings", "max_T_halvings", "halvings"):
        if not 0 <= getattr(cfg, name) <= 20:
            raise ConfigError(name, f"must be in [0, 20], got {getattr(cfg, name)}")
    if not cfg.T > 0:
        raise ConfigError("solver.T", f"must be positive, got {cfg.T}")
    if not 0 < cfg.dt <= cfg.T:
        raise ConfigError("solver.dt", f"must lie in (0, T], got {cfg.dt}")
    steps = cfg.T / cfg.dt
    if abs(steps - round(steps)) > 1e-9 * steps:
        raise ConfigError("solver.dt", f"T = {cfg.T} is not a multiple of dt = {cfg.dt}")
    if cfg.max_iter < 1:
        raise ConfigError("solver.max_iter", f"must be >= 1, got {cfg.max_iter}")
    if not 0 < cfg.tol < 1:
        raise ConfigError("solver.tol", f"must lie in (0, 1), got {cfg.tol}")
    if cfg.energy_every < 1:
        raise ConfigError("energy.every", f"must be >= 1, got {cfg.energy_every}")
    if cfg.seed < 0:
        raise ConfigError("run.seed", f"must be >= 0, got {cfg.seed}")
    if cfg.density not in DENSITIES:
        raise ConfigError("model.density", f"unknown density {cfg.density!r}; known: {sorted(DENSITIES)}")
    for name, modes in (("initial.modes", cfg.modes), ("continuity.perturbation", cfg.perturbation)):
        for m in modes:
            if len(m.k) != cfg.dim:
                raise ConfigError(name, f"mode {list(m.k)} has {len(m.k)} components, dim is {cfg.dim}")
            if max(abs(v) for v in m.k) > cfg.N:
                raise ConfigError(name, f"mode {list(m.k)} lies outside the cube of cutoff {cfg.N}")
            if not (np.isfinite(m.re) and np.isfinite(m.im)):
                raise ConfigError(name, "amplitudes must be finite")


def with_changes(cfg: RunConfig, **kw) -> RunConfig:
    return replace(cfg, **kw)


__all__ = ["ConfigError", "EXPERIMENTS", "Mode", "RunConfig", "apply_overrides", "from_dict",
           "load", "loads", "validate", "with_changes"]
