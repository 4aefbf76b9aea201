"""Experiment and model configuration files.

Two equivalent formats are accepted: INI-style sections, or a JSON object
with the same sections as keys.  Example::

    [model]
    family = gamma
    link = log
    n_years = 15

    [truth]
    q = -2, -1, 0, 1, 2, 3
    sigma = 1.0
    rho = 0.8

    [grid]
    n_ta = 3, 5
    dispersion = 3, 5
    delta = 0.01, 0.4

    [monte_carlo]
    n_out = 100
    n_inner = 300
    seed = 2024

The grid is the cartesian product of its lists unless ``rows`` gives an
explicit ``n_ta:dispersion:delta`` list separated by ``;``.
"""

from __future__ import annotations

import configparser
import itertools
import json
import re
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError, SpecError
from .estimation import FitOptions
from .model import DEFAULT_LINK, Family, ModelSpec, ParameterVector
from .simulation import SimConfig

_DEFAULT_Q = (-2.0, -1.0, 0.0, 1.0, 2.0, 3.0)


@dataclass(frozen=True)
class GridRow:
    n_ta: int
    dispersion: float
    delta: float


@dataclass(frozen=True, eq=False)
class ExperimentGrid:
    base_spec: ModelSpec
    q: tuple
    sigma: float
    rho: float
    rows: tuple
    n_out: int
    n_inner: int
    seed: int
    methods: tuple
    method1_moments: str
    control_variate: bool
    threads: int | None
    power: float | None

    def sim_config(self, row: GridRow, seed: int | None = None) -> SimConfig:
        spec = ModelSpec(self.base_spec.family, self.base_spec.link, self.base_spec.n_years,
                         self.base_spec.n_ages, replicates=row.n_ta,
                         tweedie_power=self.base_spec.tweedie_power,
                         estimate_power=self.base_spec.estimate_power)
        theta = ParameterVector.from_natural(
            list(self.q), self.sigma, row.delta, self.rho, row.dispersion,
            power=self.power, estimate_power=spec.estimate_power)
        methods = tuple(m for m in self.methods if m == 2 or spec.continuous)
        return SimConfig(spec=spec, theta_true=theta, n_out=self.n_out, n_inner=self.n_inner,
                         seed=self.seed if seed is None else seed, methods=methods,
                         method1_moments=self.method1_moments,
                         control_variate=self.control_variate)


class _Source:
    """Uniform access to INI or JSON sections with located error messages."""

    def __init__(self, path: Path):
        self.path = path
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"{path}: cannot read ({exc.strerror})") from None
        self.lines = text.splitlines()
        self.is_json = path.suffix.lower() == ".json" or text.lstrip().startswith("{")
        if self.is_json:
            try:
                raw = json.loads(text)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(raw, dict):
                raise ConfigError(f"{path}: top level must be an object of sections")
            self.data = {}
            for sec, body in raw.items():
                if not isinstance(body, dict):
                    raise ConfigError(f"{path}: section '{sec}' must be an object")
                self.data[sec.lower()] = {k.lower(): v for k, v in body.items()}
        else:
            cp = configparser.ConfigParser(inline_comment_prefixes=("#",))
            try:
                cp.read_string(text, source=str(path))
            except configparser.Error as exc:
                line = getattr(exc, "lineno", None)
                loc = f"{path}:{line}" if line else str(path)
                raise ConfigError(f"{loc}: {exc.message if hasattr(exc, 'message') else exc}") \
                    from None
            self.data = {s.lower(): dict(cp.items(s)) for s in cp.sections()}

    def where(self, section, key) -> str:
        if not self.is_json:
            in_sec = False
            for i, line in enumerate(self.lines, start=1):
                s = line.strip()
                if s.startswith("["):
                    in_sec = s.strip("[] ").lower() == section
                elif in_sec and re.match(rf"{re.escape(key)}\s*[=:]", s, re.IGNORECASE):
                    return f"{self.path}:{i}"
        return f"{self.path} [{section}] {key}"

    def has(self, section, key) -> bool:
        return key in self.data.get(section, {})

    def raw(self, section, key, default=None, required=False):
        sec = self.data.get(section)
        if sec is None or key not in sec:
            if required:
                raise ConfigError(f"{self.path}: missing [{section}] {key}")
            return default
        return sec[key]

    def _convert(self, section, key, value, conv, what):
        try:
            return conv(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{self.where(section, key)}: field '{key}' expects {what}, "
                              f"got {value!r}") from None

    def get(self, section, key, conv, what, default=None, required=False):
        v = self.raw(section, key, default, required)
        if v is None:
            return None
        return self._convert(section, key, v, conv, what)

    def get_list(self, section, key, conv, what, default=None, required=False):
        v = self.raw(section, key, default, required)
        if v is None:
            return None
        if isinstance(v, str):
            items = [s for s in (p.strip() for p in v.split(",")) if s]
        elif isinstance(v, (list, tuple)):
            items = list(v)
        else:
            items = [v]
        return [self._convert(section, key, x, conv, what) for x in items]


def _bool(v):
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(v)


def _int(v):
    if isinstance(v, float) and not v.is_integer():
        raise ValueError(v)
    return int(v)


def read_model_spec(src: _Source, replicates: int = 1) -> ModelSpec:
    fam = src.get("model", "family", str, "a family name", required=True).strip().lower()
    try:
        family = Family(fam)
    except ValueError:
        raise ConfigError(f"{src.where('model', 'family')}: unknown family {fam!r}") from None
    link = src.get("model", "link", str, "a link name", default=DEFAULT_LINK[family].value)
    n_years = src.get("model", "n_years", _int, "an integer", default=15)
    n_ages = src.get("model", "n_ages", _int, "an integer", default=6)
    power = src.get("model", "tweedie_power", float, "a number", default=None)
    est = src.get("model", "estimate_power", _bool, "true/false", default=False)
    try:
        return ModelSpec(family, link.strip().lower(), n_years, n_ages, replicates=replicates,
                         tweedie_power=power, estimate_power=est)
    except (SpecError, ValueError) as exc:
        raise ConfigError(f"{src.path} [model]: {exc}") from None


def load_model_config(path) -> tuple[ModelSpec, FitOptions]:
    """Model section plus optional ``[fit]`` tolerances for single-dataset fits."""
    src = _Source(Path(path))
    spec = read_model_spec(src)
    kw = {}
    for key, conv, what in (("tol_inner", float, "a number"), ("tol_outer", float, "a number"),
                            ("max_inner", _int, "an integer"), ("max_outer", _int, "an integer")):
        v = src.get("fit", key, conv, what)
        if v is not None:
            kw[key] = v
    try:
        return spec, FitOptions(**kw)
    except SpecError as exc:
        raise ConfigError(f"{src.path} [fit]: {exc}") from None


def load_grid(path) -> ExperimentGrid:
    src = _Source(Path(path))
    spec = read_model_spec(src)
    q = src.get_list("truth", "q", float, "a list of numbers", default=list(_DEFAULT_Q))
    if len(q) != spec.n_ages:
        raise ConfigError(f"{src.where('truth', 'q')}: expected {spec.n_ages} values, got {len(q)}")
    sigma = src.get("truth", "sigma", float, "a number", default=1.0)
    rho = src.get("truth", "rho", float, "a number", default=0.8)
    power = src.get("truth", "power", float, "a number", default=None)
    if spec.estimate_power and power is None:
        power = spec.tweedie_power

    if src.has("grid", "rows"):
        raw = src.raw("grid", "rows")
        parts = raw if isinstance(raw, list) else [p for p in str(raw).split(";") if p.strip()]
        rows = []
        for p in parts:
            fields = p if isinstance(p, (list, tuple)) else str(p).split(":")
            if len(fields) != 3:
                raise ConfigError(f"{src.where('grid', 'rows')}: row {p!r} is not n_ta:dispersion:delta")
            rows.append(GridRow(src._convert("grid", "rows", fields[0], _int, "an integer n_ta"),
                                src._convert("grid", "rows", fields[1], float, "a dispersion"),
                                src._convert("grid", "rows", fields[2], float, "a delta")))
    else:
        n_ta = src.get_list("grid", "n_ta", _int, "a list of integers", default=[])
        disp = src.get_list("grid", "dispersion", float, "a list of numbers", default=[])
        delta = src.get_list("grid", "delta", float, "a list of numbers", default=[])
        rows = [GridRow(n, d, e) for n, d, e in itertools.product(n_ta, disp, delta)]
    if not rows:
        raise ConfigError(f"{src.path}: the experiment grid is empty")
    for r in rows:
        if r.n_ta < 1 or r.dispersion <= 0 or r.delta <= 0:
            raise ConfigError(f"{src.path} [grid]: invalid row {r}")

    n_out = src.get("monte_carlo", "n_out", _int, "an integer", default=100)
    n_inner = src.get("monte_carlo", "n_inner", _int, "an integer", default=300)
    seed = src.get("monte_carlo", "seed", _int, "an integer", default=0)
    methods = tuple(src.get_list("monte_carlo", "methods", _int, "a list of 1/2", default=[1, 2]))
    moments = src.get("monte_carlo", "method1_moments", str, "fitted/true", default="fitted")
    cv = src.get("monte_carlo", "control_variate", _bool, "true/false", default=True)
    threads = src.get("run", "threads", _int, "an integer", default=None)
    grid = ExperimentGrid(spec, tuple(q), sigma, rho, tuple(rows), n_out, n_inner, seed, methods,
                          moments.strip().lower(), cv, threads, power)
    try:
        grid.sim_config(rows[0])
    except SpecError as exc:
        raise ConfigError(f"{src.path}: {exc}") from None
    return grid


__all__ = ["GridRow", "ExperimentGrid", "load_grid", "load_model_config"]
