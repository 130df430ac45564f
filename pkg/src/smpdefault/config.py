"""Experiment configuration: a TOML file with ``model``, ``numerics``, ``run`` and ``output`` tables.

Unknown keys and bad values raise :class:`~smpdefault.errors.ConfigError`
carrying the dotted field name and, when it can be located, the line number.
"""

from __future__ import annotations

import re
from dataclasses import asdict, dataclass, field, fields, replace

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .errors import ConfigError
from .paths import IntensitySpec
from .regression import FEATURES, RegressionBasis

__all__ = ["ModelConfig", "NumericsConfig", "RunConfig", "OutputConfig", "ExperimentConfig",
           "load_config", "parse_config"]

THETA_KINDS = ("constant", "lognormal", "default_linked")
BSDE_SOLVERS = ("explicit", "regression-explicit", "regression-implicit")


@dataclass(frozen=True)
class ModelConfig:
    alpha: float = 0.05
    beta: float = 0.2
    mu: float = -0.5
    intensity: float = 0.3
    intensity_times: tuple = ()
    intensity_values: tuple = ()
    T: float = 1.0
    S0: float = 1.0
    theta: str = "constant"
    theta_param: float = 1.0
    control: float = 0.5
    u_max: float = 10.0

    def intensity_spec(self) -> IntensitySpec:
        if self.intensity_times:
            return IntensitySpec.piecewise_linear(self.intensity_times, self.intensity_values)
        return IntensitySpec.constant(self.intensity)


@dataclass(frozen=True)
class NumericsConfig:
    n_steps: int = 50
    n_paths: int = 10_000
    seed: int = 20240601
    basis: tuple = ("1", "t", "W", "W2", "Hdt")
    split_on_default: bool = True
    fd_step: float = 1e-4
    picard_tol: float = 1e-20
    inner_tol: float = 1e-10
    contraction_rtol: float = 1e-20

    def regression_basis(self) -> RegressionBasis:
        return RegressionBasis(tuple(self.basis), split_on_default=self.split_on_default)


@dataclass(frozen=True)
class RunConfig:
    control: str = "pi_hat"
    form: str = "dH"
    scheme: str = "euler"
    bsde_solver: str = "explicit"
    perturbation: float = 1.0
    sweep_deltas: tuple = (-0.5, -0.2, -0.1, -0.05, 0.05, 0.1, 0.2, 0.5)
    v_bounds: tuple = (0.05, 3.0)
    criteria: tuple = ()


@dataclass(frozen=True)
class OutputConfig:
    dir: str = "out"
    csv_paths: int = 20


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    numerics: NumericsConfig = field(default_factory=NumericsConfig)
    run: RunConfig = field(default_factory=RunConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def with_overrides(self, seed=None, n_paths=None, n_steps=None, out=None) -> "ExperimentConfig":
        num = self.numerics
        if seed is not None:
            num = replace(num, seed=seed)
        if n_paths is not None:
            num = replace(num, n_paths=n_paths)
        if n_steps is not None:
            num = replace(num, n_steps=n_steps)
        outc = self.output if out is None else replace(self.output, dir=str(out))
        cfg = replace(self, numerics=num, output=outc)
        _validate(cfg, {})
        return cfg

    def to_dict(self) -> dict:
        """Echo for reports; the output directory is left out so reports do not depend on it."""
        d = asdict(self)
        d["output"].pop("dir")
        return d


_SECTIONS = {"model": ModelConfig, "numerics": NumericsConfig, "run": RunConfig,
             "output": OutputConfig}


def _line_index(text: str) -> dict:
    """Map ``section.key`` to its 1-based line number (and ``section`` to its header)."""
    where, section = {}, ""
    for no, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        m = re.match(r"^\[\s*([A-Za-z0-9_.-]+)\s*\]", s)
        if m:
            section = m.group(1)
            where.setdefault(section, no)
            continue
        m = re.match(r"^([A-Za-z0-9_-]+)\s*=", s)
        if m:
            where.setdefault(f"{section}.{m.group(1)}" if section else m.group(1), no)
    return where


def _coerce(value, default, name, lines):
    def bad(msg):
        raise ConfigError(f"{name}: {msg}", field=name, line=lines.get(name))

    if isinstance(default, bool):
        if not isinstance(value, bool):
            bad(f"expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            bad(f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            bad(f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            bad(f"expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, list):
            bad(f"expected an array, got {value!r}")
        return tuple(value)
    return value


def _validate(cfg: ExperimentConfig, lines: dict) -> None:
    def need(cond, name, msg):
        if not cond:
            raise ConfigError(f"{name}: {msg}", field=name, line=lines.get(name))

    m, n, r, o = cfg.model, cfg.numerics, cfg.run, cfg.output
    need(m.T > 0, "model.T", "must be > 0")
    need(m.S0 > 0, "model.S0", "must be > 0")
    need(m.mu > -1, "model.mu", "must be > -1")
    need(m.beta >= 0, "model.beta", "must be >= 0")
    need(m.intensity >= 0, "model.intensity", "must be >= 0")
    need(m.u_max > 0, "model.u_max", "must be > 0")
    need(m.theta in THETA_KINDS, "model.theta", f"must be one of {', '.join(THETA_KINDS)}")
    need(len(m.intensity_times) == len(m.intensity_values), "model.intensity_values",
         "must have the same length as model.intensity_times")
    if m.intensity_times:
        try:
            m.intensity_spec()
        except ValueError as exc:
            need(False, "model.intensity_times", str(exc))
    need(n.n_paths >= 100, "numerics.n_paths", "must be >= 100")
    need(n.n_steps >= 2, "numerics.n_steps", "must be >= 2")
    need(0 <= n.seed < 2 ** 64, "numerics.seed", "must be an unsigned 64-bit integer")
    for tol in ("fd_step", "picard_tol", "inner_tol", "contraction_rtol"):
        need(getattr(n, tol) > 0, f"numerics.{tol}", "must be > 0")
    for f in n.basis:
        need(f in FEATURES or str(f).startswith("expW:"), "numerics.basis",
             f"unknown feature {f!r}")
    need("1" in n.basis, "numerics.basis", "must contain the constant feature '1'")
    need(r.control in ("pi_hat", "constant"), "run.control", "must be 'pi_hat' or 'constant'")
    need(r.form in ("dH", "dM"), "run.form", "must be 'dH' or 'dM'")
    need(r.scheme in ("euler", "picard", "exact"), "run.scheme", "must be 'euler', 'picard' or 'exact'")
    need(r.bsde_solver in BSDE_SOLVERS, "run.bsde_solver", f"must be one of {', '.join(BSDE_SOLVERS)}")
    need(len(r.v_bounds) == 2 and 0 < r.v_bounds[0] < r.v_bounds[1], "run.v_bounds",
         "must be [low, high] with 0 < low < high")
    need(all(d > -1 for d in r.sweep_deltas), "run.sweep_deltas", "every delta must be > -1")
    need(o.csv_paths >= 0, "output.csv_paths", "must be >= 0")


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        line = getattr(exc, "lineno", None)
        if line is None:
            m = re.search(r"line (\d+)", str(exc))
            line = int(m.group(1)) if m else None
        raise ConfigError(f"{source}: TOML syntax error: {exc}", field=None, line=line) from None
    lines = _line_index(text)
    parts = {}
    for sec, value in raw.items():
        if sec not in _SECTIONS:
            raise ConfigError(f"unknown section [{sec}]", field=sec, line=lines.get(sec))
        if not isinstance(value, dict):
            raise ConfigError(f"{sec} must be a table", field=sec, line=lines.get(sec))
    for sec, cls in _SECTIONS.items():
        table = raw.get(sec, {})
        defaults = cls()
        known = {f.name for f in fields(cls)}
        kw = {}
        for key, value in table.items():
            name = f"{sec}.{key}"
            if key not in known:
                raise ConfigError(f"unknown field {name}", field=name, line=lines.get(name))
            kw[key] = _coerce(value, getattr(defaults, key), name, lines)
        parts[sec] = cls(**kw)
    cfg = ExperimentConfig(**parts)
    _validate(cfg, lines)
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}", field=None) from None
    return parse_config(text, str(path))
