"""Run configuration: one INI file, every key optional.

Example::

    [system]
    name = doublewell1d
    sigma = 1.0

    [sim]
    tau = 1.0
    dt = 0.01
    seed = 7

    [loop]
    n_outer = 50
    is_enabled_after = 5      ; or "never"

    [compare]
    grid = -0.5:0.5:11        ; lo:hi:n per axis, axes separated by ","

Unknown sections or keys are rejected so typos do not silently fall back to
defaults. ``dumps`` emits every key with its effective value.
"""

from __future__ import annotations

import configparser
import io
import math
from dataclasses import dataclass, field, fields

from .errors import ConfigError
from .sde import CATALOG, EXTRA_SYSTEMS


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _opt_float(s: str):
    return None if s.strip().lower() in ("", "none", "auto") else float(s)


def _never_int(s: str) -> int:
    return -1 if s.strip().lower() in ("never", "inf", "none") else int(s)


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(v) for v in s.replace(",", " ").split())


def parse_ranges(s: str) -> list[tuple[float, float, int]]:
    """``"lo:hi:n, lo:hi:n"`` -> per-axis (lo, hi, n); ``n`` may be omitted."""
    out = []
    for part in s.split(","):
        bits = part.strip().split(":")
        if len(bits) not in (2, 3):
            raise ValueError(f"range must be lo:hi or lo:hi:n, got {part.strip()!r}")
        lo, hi = float(bits[0]), float(bits[1])
        n = int(bits[2]) if len(bits) == 3 else 0
        if not hi > lo:
            raise ValueError(f"empty range {part.strip()!r}")
        out.append((lo, hi, n))
    return out


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return "auto"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ", ".join(str(x) for x in v)
    return str(v)


@dataclass
class SystemSection:
    name: str = "doublewell1d"
    sigma: float | None = None


@dataclass
class SimSection:
    tau: float = 1.0
    dt: float = 0.01
    seed: int = 0


@dataclass
class LoopSection:
    n_outer: int = 50
    min_outer: int = 10
    n_points: int = 64
    m_shots: int = 256
    epochs_per_iter: int = 200
    is_enabled_after: int = 5
    resample_mode: str = "uniform_box"
    conv_tol: float = 1e-2
    shift_mode: str = "minmax"
    shift_percentile: float = 1.0
    u_max: float | None = None
    time_dependent_control: bool = False
    reinit_each_iter: bool = False
    box: str = ""
    validation_points: int = 101


@dataclass
class ModelSection:
    hidden: tuple[int, ...] = (16, 16)
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    init_seed: int | None = None


@dataclass
class OracleSection:
    bounds: str = ""
    n_nodes: int = 0
    n_substeps: int = 100
    max_iters: int = 1000
    tol: float = 1e-10


@dataclass
class CompareSection:
    grid: str = "-0.5:0.5:11"
    m: int = 1000
    control: str = "optimal"
    constant: float = 0.3
    time_dependent: bool = False
    fit_shots: int = 256


@dataclass
class OutputSection:
    dir: str = "isokann_out"
    threads: int = 0


_PARSERS = {
    ("system", "sigma"): _opt_float,
    ("loop", "is_enabled_after"): _never_int,
    ("loop", "u_max"): _opt_float,
    ("model", "hidden"): _ints,
    ("model", "init_seed"): lambda s: None if s.strip().lower() in ("", "auto", "none") else int(s),
}


@dataclass
class RunConfig:
    system: SystemSection = field(default_factory=SystemSection)
    sim: SimSection = field(default_factory=SimSection)
    loop: LoopSection = field(default_factory=LoopSection)
    model: ModelSection = field(default_factory=ModelSection)
    oracle: OracleSection = field(default_factory=OracleSection)
    compare: CompareSection = field(default_factory=CompareSection)
    output: OutputSection = field(default_factory=OutputSection)

    def validate(self) -> "RunConfig":
        names = CATALOG + EXTRA_SYSTEMS
        if self.system.name not in names:
            raise ConfigError(f"system.name: unknown system {self.system.name!r}", "system.name")
        if self.system.sigma is not None and not self.system.sigma >= 0:
            raise ConfigError("system.sigma must be non-negative", "system.sigma")
        if not (self.sim.tau > 0 and self.sim.dt > 0 and self.sim.dt <= self.sim.tau):
            raise ConfigError("sim.tau and sim.dt must be positive with dt <= tau", "sim.dt")
        if self.loop.resample_mode not in ("uniform_box", "chi_stratified"):
            raise ConfigError(f"loop.resample_mode: {self.loop.resample_mode!r}", "loop.resample_mode")
        if self.loop.shift_mode not in ("minmax", "percentile"):
            raise ConfigError(f"loop.shift_mode: {self.loop.shift_mode!r}", "loop.shift_mode")
        if self.loop.is_enabled_after == 0:
            raise ConfigError("loop.is_enabled_after must be >= 1 or 'never'", "loop.is_enabled_after")
        if self.compare.control not in ("optimal", "zero", "constant"):
            raise ConfigError(f"compare.control: {self.compare.control!r}", "compare.control")
        for key in ("loop.n_outer", "loop.n_points", "loop.m_shots", "loop.epochs_per_iter",
                    "compare.m", "compare.fit_shots"):
            sec, name = key.split(".")
            if getattr(getattr(self, sec), name) < 1:
                raise ConfigError(f"{key} must be positive", key)
        for key, text in (("loop.box", self.loop.box), ("oracle.bounds", self.oracle.bounds),
                          ("compare.grid", self.compare.grid)):
            if text:
                try:
                    parse_ranges(text)
                except ValueError as exc:
                    raise ConfigError(f"{key}: {exc}", key) from None
        return self


def _section_types(cls):
    return {f.name: f for f in fields(cls)}


def _convert(section: str, key: str, raw: str, default):
    parser = _PARSERS.get((section, key))
    if parser is None:
        if isinstance(default, bool):
            parser = _bool
        elif isinstance(default, int):
            parser = int
        elif isinstance(default, float):
            parser = float
        else:
            parser = str
    return parser(raw)


def loads(text: str) -> RunConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"), interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config syntax error: {exc}") from None
    cfg = RunConfig()
    sections = _section_types(RunConfig)
    for sec in cp.sections():
        if sec not in sections:
            raise ConfigError(f"unknown config section [{sec}]", sec)
        obj = getattr(cfg, sec)
        known = _section_types(type(obj))
        for key, raw in cp.items(sec):
            if key not in known:
                raise ConfigError(f"unknown config key {sec}.{key}", f"{sec}.{key}")
            try:
                setattr(obj, key, _convert(sec, key, raw, getattr(obj, key)))
            except ValueError as exc:
                raise ConfigError(f"bad value for {sec}.{key}: {exc}", f"{sec}.{key}") from None
    return cfg.validate()


def load(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}", str(path)) from None
    return loads(text)


def dumps(cfg: RunConfig) -> str:
    cp = configparser.ConfigParser(interpolation=None)
    for sec in _section_types(RunConfig):
        obj = getattr(cfg, sec)
        cp[sec] = {f.name: _fmt(getattr(obj, f.name)) for f in fields(obj)}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def is_never(n: int) -> bool:
    return n < 0 or n >= 2**62 or math.isinf(n)
