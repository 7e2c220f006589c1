"""Problem definition files: sectioned key = value text.

Example::

    [system]
    a0 = 0
    b0 = 1
    sigma = 1
    d = 0.5
    b1 = constant
    b1.value = 1

    [control]
    set = box
    set.lo = -1
    set.hi = 1
    ell1 = zero

    [cost]
    T = 1
    phi = tanh
    ell0 = zero

    [numerics]
    seed = 0

Matrices are row-major number lists (spaces or commas).  Family parameters
use dotted keys under the family key.  Every float is written with ``repr``
so that parse(emit(spec)) is bit-exact.
"""
from __future__ import annotations

import configparser
import re
from dataclasses import dataclass, field
from typing import Dict, Tuple

import numpy as np

from . import functions as F
from . import hamiltonian as Hm
from .errors import InvalidInput, ParseError
from .system_model import DelaySystem, constant_kernel, exponential_kernel, table_kernel

Params = Dict[str, Tuple[float, ...]]

NUMERIC_DEFAULTS = {
    "grid": 256, "time_steps": 32, "tol": 1e-7, "max_iter": 200, "seed": 0, "mode": "A",
    "paths": 2000, "oracle_order": 4, "oracle_y_points": 64, "oracle_controls": 3,
}
INT_KEYS = {"grid", "time_steps", "y_points", "gh_nodes", "max_iter", "seed", "paths",
            "oracle_order", "oracle_y_points", "oracle_controls"}
FLOAT_KEYS = {"half_width", "tol", "y_range"}
LIST_KEYS = {"y0", "u0"}


@dataclass
class ProblemSpec:
    """Raw, serializable problem description; ``build`` turns it into objects."""

    a0: Tuple[float, ...]
    b0: Tuple[float, ...]
    sigma: Tuple[float, ...]
    d: float
    b1: str = "zero"
    b1_params: Params = field(default_factory=dict)
    control_set: str = "box"
    set_params: Params = field(default_factory=dict)
    ell1: str = "zero"
    ell1_params: Params = field(default_factory=dict)
    T: float = 1.0
    phi: str = "tanh"
    phi_params: Params = field(default_factory=dict)
    ell0: str = "zero"
    ell0_params: Params = field(default_factory=dict)
    ell0_state: str = ""
    numerics: Dict[str, object] = field(default_factory=dict)

    # -- dimensions -----------------------------------------------------------

    @property
    def n(self) -> int:
        n = int(round(np.sqrt(len(self.a0))))
        if n * n != len(self.a0) or n == 0:
            raise InvalidInput(f"a0 has {len(self.a0)} entries, not a square matrix")
        return n

    @property
    def m(self) -> int:
        if len(self.b0) % self.n:
            raise InvalidInput(f"b0 has {len(self.b0)} entries, not a multiple of n = {self.n}")
        return len(self.b0) // self.n

    def num(self, key):
        return self.numerics.get(key, NUMERIC_DEFAULTS.get(key))

    # -- builders -------------------------------------------------------------

    def build_system(self) -> DelaySystem:
        n, m = self.n, self.m
        if len(self.sigma) % n:
            raise InvalidInput(f"sigma has {len(self.sigma)} entries, not a multiple of n = {n}")
        k = len(self.sigma) // n
        a0 = np.reshape(self.a0, (n, n))
        b0 = np.reshape(self.b0, (n, m))
        sigma = np.reshape(self.sigma, (n, k))
        if not self.d > 0:
            raise InvalidInput("delay must be positive")
        p = self.b1_params
        if self.b1 == "dirac":
            raise InvalidInput("b1 'dirac' requests a pointwise delay, which is not supported "
                               "(the kernel must be square-integrable)")
        if self.b1 == "zero":
            kern = None
        elif self.b1 == "constant":
            kern = constant_kernel(np.reshape(_need(p, "value", "b1"), (n, m)))
        elif self.b1 == "exponential":
            kern = exponential_kernel(np.reshape(_need(p, "value", "b1"), (n, m)),
                                      _scalar(_need(p, "rate", "b1")))
        elif self.b1 == "table":
            kern = table_kernel(_need(p, "values", "b1"), n, m, self.d)
        else:
            raise InvalidInput(f"unknown b1 family '{self.b1}' (known: zero, constant, exponential, table)")
        return DelaySystem.build(a0, b0, sigma, self.d, kern, grid=int(self.num("grid")))

    def build_problem(self) -> Hm.ControlProblem:
        n, m = self.n, self.m
        return Hm.ControlProblem(self._set(m), self._ell1(m), self._phi(n), float(self.T), self._ell0(n))

    def _set(self, m):
        p = self.set_params
        tag = self.control_set
        if tag == "box":
            lo, hi = np.array(_need(p, "lo", "set")), np.array(_need(p, "hi", "set"))
            if lo.size == 1 and m > 1:
                lo, hi = np.full(m, lo[0]), np.full(m, hi[0])
            U = Hm.box(lo, hi)
        elif tag == "ball":
            U = Hm.ball(_scalar(_need(p, "radius", "set")), m, p.get("center"))
        elif tag == "finite":
            U = Hm.finite(np.reshape(_need(p, "points", "set"), (-1, m)))
        elif tag == "whole":
            U = Hm.whole(m)
        else:
            raise InvalidInput(f"unknown control set '{tag}' (known: box, ball, finite, whole)")
        if U.m != m:
            raise InvalidInput(f"control set has dimension {U.m}, b0 has m = {m}")
        return U

    def _ell1(self, m):
        p, tag = self.ell1_params, self.ell1
        if tag == "zero":
            return Hm.zero_control_cost()
        if tag == "constant":
            return Hm.constant_control_cost(_scalar(_need(p, "value", "ell1")))
        if tag == "quadratic":
            R = np.array(_need(p, "R", "ell1"))
            R = np.diag(np.full(m, R[0])) if R.size == 1 else (np.diag(R) if R.size == m and m > 1 else R.reshape(m, m))
            return Hm.quadratic_cost(R)
        if tag == "abs":
            w = np.array(_need(p, "weights", "ell1"))
            return Hm.abs_cost(np.full(m, w[0]) if w.size == 1 else w)
        if tag == "table":
            pts = np.reshape(_need(self.set_params, "points", "set"), (-1, m))
            return Hm.table_cost(pts, _need(p, "values", "ell1"))
        raise InvalidInput(f"unknown control cost '{tag}' (known: zero, constant, quadratic, abs, table)")

    def _phi(self, n):
        return _function(self.phi, self.phi_params, n)

    def _ell0(self, n):
        p, tag = self.ell0_params, self.ell0
        if tag == "zero":
            return F.zero_cost()
        if tag == "constant":
            return F.constant_cost(_scalar(_need(p, "value", "ell0")))
        if tag == "time_linear":
            return F.time_linear_cost(_scalar(_need(p, "a", "ell0")), _scalar(_need(p, "b", "ell0")), self.T)
        if tag == "state":
            if not self.ell0_state:
                raise InvalidInput("ell0 = state needs ell0.family")
            return F.state_cost(_function(self.ell0_state, p, n))
        raise InvalidInput(f"unknown running cost '{tag}' (known: zero, constant, time_linear, state)")

    def build(self):
        return self.build_system(), self.build_problem()


def _need(p: Params, key: str, owner: str):
    if key not in p:
        raise InvalidInput(f"missing parameter {owner}.{key}")
    return p[key]


def _scalar(v) -> float:
    v = tuple(v) if not np.isscalar(v) else (v,)
    if len(v) != 1:
        raise InvalidInput("expected a single number")
    return float(v[0])


def _function(tag: str, params: Params, n: int) -> F.ScalarFunction:
    kw = {}
    for key, val in params.items():
        kw[key] = val if key in ("weights", "center", "grid", "values") else _scalar(val)
    return F.make_function(tag, n, **kw)


# --------------------------------------------------------------------------
# text format

_NUM_SPLIT = re.compile(r"[\s,;]+")


def _numbers(text: str) -> Tuple[float, ...]:
    parts = [p for p in _NUM_SPLIT.split(text.strip()) if p]
    if not parts:
        raise InvalidInput("expected numbers")
    try:
        return tuple(float(p) for p in parts)
    except ValueError:
        raise InvalidInput(f"not a number list: '{text.strip()}'") from None


def _fmt(values) -> str:
    if np.isscalar(values):
        values = (values,)
    return " ".join(repr(float(v)) for v in values)


def _line_index(text: str):
    """(section, key) -> 1-based line number."""
    out, section = {}, None
    for no, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if s.startswith("[") and s.endswith("]"):
            section = s[1:-1].strip()
            out[(section, None)] = no
        elif "=" in s and not s.startswith(("#", ";")):
            out[(section, s.split("=", 1)[0].strip())] = no
    return out


def parse_text(text: str) -> ProblemSpec:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ParseError(str(exc).splitlines()[0], getattr(exc, "lineno", None)) from None
    lines = _line_index(text)

    def where(section, key=None):
        return lines.get((section, key), lines.get((section, None)))

    def get(section, key, numeric=True):
        if not cp.has_section(section):
            raise ParseError(f"missing section [{section}]")
        if not cp.has_option(section, key):
            raise ParseError(f"missing key '{key}' in [{section}]", where(section))
        raw = cp.get(section, key)
        if not numeric:
            return raw.strip()
        try:
            return _numbers(raw)
        except InvalidInput as exc:
            raise ParseError(f"{section}.{key}: {exc}", where(section, key)) from None

    def family(section, key):
        params = {}
        prefix = key + "."
        for opt in cp.options(section) if cp.has_section(section) else []:
            if opt.startswith(prefix) and opt != key + ".family":
                params[opt[len(prefix):]] = get(section, opt)
        return params

    try:
        b1 = cp.get("system", "b1").strip() if cp.has_option("system", "b1") else "zero"
        numerics = {}
        if cp.has_section("numerics"):
            for key in cp.options("numerics"):
                raw = cp.get("numerics", key).strip()
                try:
                    if key in INT_KEYS:
                        numerics[key] = int(raw)
                    elif key in FLOAT_KEYS:
                        numerics[key] = float(raw)
                    elif key in LIST_KEYS:
                        numerics[key] = _numbers(raw)
                    elif key == "mode":
                        if raw not in ("A", "B"):
                            raise InvalidInput("mode must be A or B")
                        numerics[key] = raw
                    else:
                        raise InvalidInput(f"unknown numerics key '{key}'")
                except (ValueError, InvalidInput) as exc:
                    raise ParseError(f"numerics.{key}: {exc}", where("numerics", key)) from None
        spec = ProblemSpec(
            a0=get("system", "a0"), b0=get("system", "b0"), sigma=get("system", "sigma"),
            d=_scalar(get("system", "d")), b1=b1, b1_params=family("system", "b1"),
            control_set=get("control", "set", False), set_params=family("control", "set"),
            ell1=get("control", "ell1", False) if cp.has_option("control", "ell1") else "zero",
            ell1_params=family("control", "ell1"),
            T=_scalar(get("cost", "T")), phi=get("cost", "phi", False), phi_params=family("cost", "phi"),
            ell0=get("cost", "ell0", False) if cp.has_option("cost", "ell0") else "zero",
            ell0_params=family("cost", "ell0"),
            ell0_state=cp.get("cost", "ell0.family").strip() if cp.has_option("cost", "ell0.family") else "",
            numerics=numerics,
        )
    except ParseError:
        raise
    except InvalidInput as exc:
        raise ParseError(str(exc)) from None
    # validate by building; attach the most relevant line on failure
    try:
        spec.build()
    except InvalidInput as exc:
        msg = str(exc)
        key = _blame(msg)
        raise ParseError(msg, where(*key) if key else None) from None
    return spec


def _blame(msg: str):
    table = [("delay", ("system", "d")), ("b1", ("system", "b1")), ("a0", ("system", "a0")),
             ("b0", ("system", "b0")), ("sigma", ("system", "sigma")), ("control set", ("control", "set")),
             ("box", ("control", "set")), ("ball", ("control", "set")), ("ell1", ("control", "ell1")),
             ("R ", ("control", "ell1")), ("horizon", ("cost", "T")), ("terminal", ("cost", "phi")),
             ("running", ("cost", "ell0"))]
    for word, key in table:
        if word in msg:
            return key
    return None


def parse_problem(path: str):
    """Read a problem file; returns (DelaySystem, ControlProblem, numerics, spec)."""
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ParseError(f"cannot read problem file: {exc}") from None
    spec = parse_text(text)
    sys, prob = spec.build()
    return sys, prob, dict(spec.numerics), spec


def emit_problem(spec: ProblemSpec) -> str:
    out = ["[system]", f"a0 = {_fmt(spec.a0)}", f"b0 = {_fmt(spec.b0)}", f"sigma = {_fmt(spec.sigma)}",
           f"d = {_fmt(spec.d)}", f"b1 = {spec.b1}"]
    out += [f"b1.{k} = {_fmt(v)}" for k, v in spec.b1_params.items()]
    out += ["", "[control]", f"set = {spec.control_set}"]
    out += [f"set.{k} = {_fmt(v)}" for k, v in spec.set_params.items()]
    out += [f"ell1 = {spec.ell1}"] + [f"ell1.{k} = {_fmt(v)}" for k, v in spec.ell1_params.items()]
    out += ["", "[cost]", f"T = {_fmt(spec.T)}", f"phi = {spec.phi}"]
    out += [f"phi.{k} = {_fmt(v)}" for k, v in spec.phi_params.items()]
    out += [f"ell0 = {spec.ell0}"]
    if spec.ell0_state:
        out.append(f"ell0.family = {spec.ell0_state}")
    out += [f"ell0.{k} = {_fmt(v)}" for k, v in spec.ell0_params.items()]
    if spec.numerics:
        out += ["", "[numerics]"]
        for k, v in spec.numerics.items():
            if k in LIST_KEYS or k in FLOAT_KEYS:
                out.append(f"{k} = {_fmt(v)}")
            else:
                out.append(f"{k} = {v}")
    return "\n".join(out) + "\n"
