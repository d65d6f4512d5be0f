"""INI-style run configuration with line-anchored validation errors.

Sections: ``[flow]``, ``[integrator]``, ``[ensemble]``, ``[output]`` and the
optional ``[converge]``, ``[sweep]``, ``[expect]``. Numeric values accept
plain arithmetic such as ``2^-8``, ``1/256`` or ``sqrt(2*0.1)``.
"""

from __future__ import annotations

import ast
import configparser
import math
import operator
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .ensemble import InitialDistribution, SimulationConfig
from .errors import CatalogError, ConfigError, DomainError
from .flows import make_flow
from .integrators import DiffusionSpec

_BINOPS = {
    ast.Add: operator.add,
    ast.Sub: operator.sub,
    ast.Mult: operator.mul,
    ast.Div: operator.truediv,
    ast.Pow: operator.pow,
}
_FUNCS = {"sqrt": math.sqrt, "exp": math.exp, "log": math.log}
_NAMES = {"pi": math.pi, "e": math.e}


def parse_number(text: str) -> float:
    """Evaluate a small arithmetic expression; ``^`` means power."""
    src = text.strip().replace("^", "**")

    def ev(node):
        if isinstance(node, ast.Expression):
            return ev(node.body)
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)) and not isinstance(node.value, bool):
            return float(node.value)
        if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
            return _BINOPS[type(node.op)](ev(node.left), ev(node.right))
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
            v = ev(node.operand)
            return -v if isinstance(node.op, ast.USub) else v
        if isinstance(node, ast.Name) and node.id in _NAMES:
            return _NAMES[node.id]
        if isinstance(node, ast.Call) and isinstance(node.func, ast.Name) and node.func.id in _FUNCS and len(node.args) == 1:
            return _FUNCS[node.func.id](ev(node.args[0]))
        raise ValueError(f"unsupported expression {text!r}")

    try:
        val = ev(ast.parse(src, mode="eval"))
    except (SyntaxError, ZeroDivisionError, OverflowError) as exc:
        raise ValueError(f"bad number {text!r}: {exc}") from None
    if not math.isfinite(val):
        raise ValueError(f"non-finite number {text!r}")
    return val


def parse_list(text: str) -> list[float]:
    return [parse_number(p) for p in re.split(r"[,\s]+", text.strip()) if p]


def parse_matrix(text: str) -> np.ndarray:
    rows = [parse_list(r) for r in text.split(";") if r.strip()]
    if len({len(r) for r in rows}) != 1:
        raise ValueError("matrix rows must have equal length")
    return np.array(rows)


def _line_index(path: Path) -> dict[tuple[str, str], int]:
    index: dict[tuple[str, str], int] = {}
    section = None
    for no, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line[0] in "#;":
            continue
        m = re.match(r"\[([^\]]+)\]", line)
        if m:
            section = m.group(1).strip().lower()
            index[(section, "")] = no
            continue
        m = re.match(r"([^=:]+)[=:]", line)
        if m and section is not None:
            index[(section, m.group(1).strip().lower())] = no
    return index


# first words of SimulationConfig validation messages -> (section, key)
_FIELD_OF_MESSAGE = (
    ("unknown integrator", ("integrator", "name")),
    ("split2d", ("integrator", "name")),
    ("dt", ("integrator", "dt")),
    ("T", ("ensemble", "t")),
    ("n_particles", ("ensemble", "n_particles")),
    ("chunk_size", ("ensemble", "chunk_size")),
    ("initial", ("ensemble", "initial")),
    ("sample times", ("ensemble", "sample_times")),
    ("diffusion", ("integrator", "sigma_matrix")),
    ("compiled", ("flow", "name")),
)


@dataclass
class RunConfig:
    """A parsed config file; ``simulation(seed)`` builds the validated SimulationConfig."""

    path: Path
    sections: dict[str, dict[str, str]]
    lines: dict[tuple[str, str], int] = field(repr=False)

    # -- access helpers ----------------------------------------------------
    def error(self, msg: str, section: str, key: str = "") -> ConfigError:
        line = self.lines.get((section, key)) or self.lines.get((section, ""))
        where = f"[{section}] {key}: " if key else f"[{section}]: "
        return ConfigError(where + msg, line=line, path=str(self.path))

    def has(self, section: str, key: str) -> bool:
        return key in self.sections.get(section, {})

    def raw(self, section: str, key: str, default: Any = ...) -> str:
        try:
            return self.sections[section][key]
        except KeyError:
            if default is ...:
                raise self.error(f"missing required key {key!r}", section) from None
            return default

    def number(self, section: str, key: str, default: Any = ...) -> float:
        if not self.has(section, key):
            if default is ...:
                raise self.error(f"missing required key {key!r}", section)
            return default
        try:
            return parse_number(self.sections[section][key])
        except ValueError as exc:
            raise self.error(str(exc), section, key) from None

    def integer(self, section: str, key: str, default: Any = ...) -> int:
        v = self.number(section, key, default)
        if v is None:
            return v
        if v != int(v):
            raise self.error(f"expected an integer, got {self.sections[section][key]!r}", section, key)
        return int(v)

    def numbers(self, section: str, key: str, default: Any = ...) -> list[float]:
        if not self.has(section, key):
            if default is ...:
                raise self.error(f"missing required key {key!r}", section)
            return default
        try:
            return parse_list(self.sections[section][key])
        except ValueError as exc:
            raise self.error(str(exc), section, key) from None

    # -- domain objects ----------------------------------------------------
    @property
    def flow_name(self) -> str:
        return self.raw("flow", "name")

    def flow(self):
        params = {}
        for k in self.sections.get("flow", {}):
            if k != "name":
                params[k] = self.number("flow", k)
        # ABC amplitudes are conventionally upper case
        params = {(k.upper() if k in ("a", "b", "c") and self.flow_name.startswith("abc") else k): v for k, v in params.items()}
        try:
            return make_flow(self.flow_name, **params)
        except CatalogError as exc:
            raise self.error(str(exc), "flow", "name") from None
        except DomainError as exc:
            raise self.error(str(exc), "flow") from None

    def diffusion(self) -> DiffusionSpec:
        keys = [k for k in ("sigma", "d0", "sigma_matrix") if self.has("integrator", k)]
        if len(keys) != 1:
            raise self.error("give exactly one of sigma, d0, sigma_matrix", "integrator")
        k = keys[0]
        try:
            if k == "sigma":
                return DiffusionSpec(sigma=self.number("integrator", k))
            if k == "d0":
                return DiffusionSpec.from_d0(self.number("integrator", k))
            return DiffusionSpec(matrix=parse_matrix(self.raw("integrator", k)))
        except (ValueError, DomainError) as exc:
            raise self.error(str(exc), "integrator", k) from None

    def initial(self, dim: int) -> InitialDistribution:
        kind = self.raw("ensemble", "initial", "dirac")
        try:
            if kind == "dirac":
                point = self.numbers("ensemble", "point", [0.0] * dim)
                return InitialDistribution.dirac(point)
            if kind == "uniform_box":
                return InitialDistribution.uniform_box(self.numbers("ensemble", "lo"), self.numbers("ensemble", "hi"))
        except DomainError as exc:
            raise self.error(str(exc), "ensemble", "initial") from None
        raise self.error(f"unknown initial distribution {kind!r}", "ensemble", "initial")

    def sample_times(self) -> tuple[tuple[float, ...] | None, int]:
        spec = self.raw("ensemble", "sample_times", "log").strip()
        m = re.fullmatch(r"log(?::(\d+))?", spec)
        if m:
            return None, int(m.group(1) or 64)
        return tuple(self.numbers("ensemble", "sample_times")), 64

    def seed(self, override: int | None = None) -> int:
        if override is not None:
            return int(override)
        if self.has("ensemble", "seed"):
            return self.integer("ensemble", "seed")
        raise self.error("no seed: pass --seed or set [ensemble] seed", "ensemble")

    def simulation(self, seed: int | None = None) -> SimulationConfig:
        flow = self.flow()
        times, ns = self.sample_times()
        try:
            sim = SimulationConfig(
                flow=flow,
                integrator=self.raw("integrator", "name", "splitnd"),
                diffusion=self.diffusion(),
                dt=self.number("integrator", "dt"),
                T=self.number("ensemble", "t"),
                n_particles=self.integer("ensemble", "n_particles"),
                master_seed=self.seed(seed),
                initial=self.initial(flow.dim),
                sample_times=times,
                n_samples=ns,
                start_time=self.number("ensemble", "start_time", 0.0),
                chunk_size=self.integer("ensemble", "chunk_size", 1024),
            )
            sim.sample_steps()
            return sim
        except ConfigError as exc:
            if exc.path is not None:
                raise
            msg = str(exc)
            sec, key = next(((s, k) for prefix, (s, k) in _FIELD_OF_MESSAGE if msg.startswith(prefix)), ("ensemble", ""))
            raise self.error(msg, sec, key) from None
        except DomainError as exc:
            msg = str(exc)
            sec, key = next(((s, k) for prefix, (s, k) in _FIELD_OF_MESSAGE if msg.startswith(prefix)), ("ensemble", ""))
            raise self.error(msg, sec, key) from None

    @property
    def output_dir(self) -> Path:
        d = Path(self.raw("output", "dir", "out"))
        return d if d.is_absolute() else Path(os.path.normpath(self.path.parent / d))

    @property
    def prefix(self) -> str:
        return self.raw("output", "prefix", self.path.stem)


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    try:
        cp.read_string(path.read_text(), source=str(path))
    except configparser.Error as exc:
        line = getattr(exc, "lineno", None)
        raise ConfigError(str(exc).splitlines()[0], line=line, path=str(path)) from None
    sections = {s.lower(): {k.lower(): v for k, v in cp[s].items()} for s in cp.sections()}
    rc = RunConfig(path, sections, _line_index(path))
    for required in ("flow", "integrator", "ensemble"):
        if required not in sections:
            raise ConfigError(f"missing section [{required}]", path=str(path))
    known = {"flow", "integrator", "ensemble", "output", "converge", "sweep", "expect"}
    for s in sections:
        if s not in known:
            raise rc.error(f"unknown section; expected one of {sorted(known)}", s)
    return rc
