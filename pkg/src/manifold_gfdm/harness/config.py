"""Experiment configuration files.

Grammar (one statement per line)::

    line    := [key "=" value] ["#" comment]
    key     := [A-Za-z_][A-Za-z0-9_]*
    value   := scalar | "[" [scalar ("," scalar)*] "]"
    scalar  := int | float | "true" | "false" | quoted string | bare word

Blank lines and comment-only lines are ignored. A key may appear only once.
Bare words are strings (``method = gfdm_lp``); quote a string that contains
commas or brackets. Integers may use ``_`` separators and floats the usual
``1e-6`` forms. Keys are the field names of :class:`ExperimentConfig`.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import asdict, dataclass, fields

from ..geometry import ManifoldSpec

METHODS = ("gfdm_raw", "gfdm_lp", "rbf_fd", "vbdm")
PROBLEMS = ("closed", "dirichlet")
FRAME_SOURCES = ("analytic", "estimated")
BOUNDARY_MODES = ("detector", "eps_sweep", "given_boundary")

_KEY = re.compile(r"[A-Za-z_][A-Za-z0-9_]*$")


class ConfigError(ValueError):
    pass


def parse_scalar(text: str):
    s = text.strip()
    if not s:
        raise ConfigError("empty value")
    if len(s) >= 2 and s[0] == s[-1] and s[0] in "\"'":
        return s[1:-1]
    low = s.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return int(s, 10)
    except ValueError:
        pass
    try:
        return float(s)
    except ValueError:
        pass
    if any(ch in s for ch in "[],=\"'"):
        raise ConfigError(f"malformed value {s!r}")
    return s


def _split_list(body: str):
    items, cur, quote = [], [], None
    for ch in body:
        if quote:
            cur.append(ch)
            if ch == quote:
                quote = None
        elif ch in "\"'":
            quote = ch
            cur.append(ch)
        elif ch == ",":
            items.append("".join(cur))
            cur = []
        else:
            cur.append(ch)
    if quote:
        raise ConfigError("unterminated string in list")
    tail = "".join(cur)
    if tail.strip() or items:
        items.append(tail)
    return items


def parse_value(text: str):
    s = text.strip()
    if s.startswith("["):
        if not s.endswith("]"):
            raise ConfigError(f"unterminated list {s!r}")
        return [parse_scalar(x) for x in _split_list(s[1:-1])]
    return parse_scalar(s)


def _strip_comment(line: str) -> str:
    quote = None
    for i, ch in enumerate(line):
        if quote:
            if ch == quote:
                quote = None
        elif ch in "\"'":
            quote = ch
        elif ch == "#":
            return line[:i]
    return line


def parse_config_text(text: str) -> dict:
    out = {}
    for no, raw in enumerate(text.splitlines(), 1):
        line = _strip_comment(raw).strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {no}: expected 'key = value'")
        key, val = line.split("=", 1)
        key = key.strip()
        if not _KEY.match(key):
            raise ConfigError(f"line {no}: bad key {key!r}")
        if key in out:
            raise ConfigError(f"line {no}: duplicate key {key!r}")
        try:
            out[key] = parse_value(val)
        except ConfigError as exc:
            raise ConfigError(f"line {no}: {exc}") from None
    return out


@dataclass(frozen=True)
class ExperimentConfig:
    manifold: str = "ellipse"
    q: int = 4
    N: tuple = (800, 1600, 3200)
    trials: int = 1
    seed: int = 0
    l: tuple = (2,)
    K: int = 21
    K_P: int = 0                     # 0 selects 2 sqrt(N)
    method: str = "gfdm_lp"
    problem: str = "closed"
    a: float = 1.0
    frames: str = "analytic"
    tangent_order: int = 1
    projection_at: str = "neighbor"
    boundary: str = "detector"
    eps_factors: tuple = (0.5, 1.0, 2.0, 4.0)
    lp_all: bool = True
    rbf_s: float = 0.5
    inv_norm: bool = False
    name: str = "experiment"
    out: str = "results"
    threads: int = 1

    def __post_init__(self):
        for key in ("N", "l", "eps_factors"):
            v = getattr(self, key)
            object.__setattr__(self, key, tuple(v) if isinstance(v, (list, tuple)) else (v,))
        self.validate()

    def validate(self):
        ManifoldSpec(self.manifold, q=self.q)
        if not self.N or any(not isinstance(n, int) or n <= 0 for n in self.N):
            raise ConfigError(f"N entries must be positive integers: {self.N}")
        if not self.l or any(not isinstance(v, int) or v <= 0 for v in self.l):
            raise ConfigError(f"l entries must be positive integers: {self.l}")
        if self.method.startswith("gfdm") and min(self.l) < 2:
            raise ConfigError("GFDM needs l >= 2")
        if any(not v > 0 for v in self.eps_factors):
            raise ConfigError("eps_factors must be positive")
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if self.K < 2 or self.K_P < 0 or self.threads < 1 or self.seed < 0:
            raise ConfigError("K >= 2, K_P >= 0, threads >= 1 and seed >= 0 are required")
        for key, allowed in (("method", METHODS), ("problem", PROBLEMS), ("frames", FRAME_SOURCES),
                             ("boundary", BOUNDARY_MODES), ("projection_at", ("neighbor", "base"))):
            if getattr(self, key) not in allowed:
                raise ConfigError(f"{key} must be one of {allowed}, got {getattr(self, key)!r}")
        if self.tangent_order not in (1, 2, 3):
            raise ConfigError("tangent_order must be 1, 2 or 3")
        if not self.a > 0:
            raise ConfigError("the shift a must be positive")
        spec = self.spec
        if self.problem == "dirichlet" and not spec.has_boundary:
            raise ConfigError(f"a Dirichlet problem needs a manifold with boundary, not {spec.label()}")
        if self.problem == "closed" and spec.has_boundary:
            raise ConfigError(f"{spec.label()} has a boundary; use problem = dirichlet")
        if self.method == "rbf_fd" and spec.has_boundary:
            raise ConfigError("RBF-FD is only run on closed manifolds")
        if self.boundary == "given_boundary" and self.method not in ("gfdm_raw", "gfdm_lp"):
            raise ConfigError("given_boundary mode is implemented for the GFDM methods only")

    @property
    def spec(self) -> ManifoldSpec:
        return ManifoldSpec(self.manifold, q=self.q)

    @property
    def degrees(self) -> tuple:
        # the baselines have no polynomial degree; they run once per cell
        return self.l if self.method.startswith("gfdm") else (0,)

    def config_hash(self) -> str:
        """Hash of every field that affects results (not out, threads or name)."""
        d = asdict(self)
        for k in ("out", "threads", "name"):
            d.pop(k)
        blob = json.dumps(d, sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def with_overrides(self, **kw) -> "ExperimentConfig":
        return from_mapping({**asdict(self), **kw})


_FIELDS = {f.name: f for f in fields(ExperimentConfig)}


def from_mapping(m: dict) -> ExperimentConfig:
    unknown = set(m) - set(_FIELDS)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    kw = {}
    for k, v in m.items():
        default = _FIELDS[k].default
        if isinstance(default, float) and isinstance(v, int) and not isinstance(v, bool):
            v = float(v)
        if isinstance(default, tuple) and not isinstance(v, (list, tuple)):
            v = [v]
        if k == "eps_factors":
            v = [float(x) for x in v]
        if isinstance(default, bool) and not isinstance(v, bool):
            raise ConfigError(f"{k} must be true or false")
        if isinstance(default, int) and not isinstance(default, bool) and not isinstance(v, int):
            raise ConfigError(f"{k} must be an integer")
        if isinstance(default, str) and not isinstance(v, str):
            raise ConfigError(f"{k} must be a string")
        kw[k] = v
    return ExperimentConfig(**kw)


def load_config(path, **overrides) -> ExperimentConfig:
    with open(path) as fh:
        m = parse_config_text(fh.read())
    m.update({k: v for k, v in overrides.items() if v is not None})
    return from_mapping(m)


def dump_config(config: ExperimentConfig) -> str:
    lines = []
    for f in fields(config):
        v = getattr(config, f.name)
        if isinstance(v, tuple):
            s = "[" + ", ".join(_fmt(x) for x in v) + "]"
        else:
            s = _fmt(v)
        lines.append(f"{f.name} = {s}")
    return "\n".join(lines) + "\n"


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, str):
        return v if _KEY.match(v) or re.fullmatch(r"[\w./-]+", v) else json.dumps(v)
    return str(v)


__all__ = ["ConfigError", "ExperimentConfig", "load_config", "parse_config_text", "from_mapping",
           "dump_config", "parse_value"]
