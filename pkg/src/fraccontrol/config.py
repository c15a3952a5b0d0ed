"""Flat ``key = value`` run configuration.

Lines starting with ``#`` and blank lines are ignored.  Lists are comma
separated.  Every key has a default except ``mode`` and ``problem``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

MODES = ("solve-state", "solve-control", "convergence")
PROBLEMS = {"manufactured-1d": 1, "manufactured-2d-I": 2, "problem-2d-II": 2}


class ConfigError(ValueError):
    """Invalid configuration; the message names the line or field."""


def _floats(text):
    return [float(v) for v in text.split(",") if v.strip()]


def _ints(text):
    return [int(v) for v in text.split(",") if v.strip()]


def _bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


_PARSERS = {
    "mode": str, "problem": str, "dim": int, "s_values": _floats, "mu": float, "a": float,
    "b": float, "T": float, "levels": _floats, "k_steps": _ints, "kappa": float,
    "solver": str, "cg_tol": float, "opt_tol": float, "max_iter": int, "order_regular": int,
    "order_singular": int, "near_threshold": float, "gamma_eps": float, "ud_rule": str,
    "output_dir": str, "seed": int, "figures": _bool, "tau_rule": str,
}


@dataclass
class StudyConfig:
    """Resolved run configuration.

    ``levels`` holds mesh parameters ``h``; ``k_steps`` optionally fixes
    the number of time steps per level.  Otherwise ``τ = h^γ``
    (``tau_rule = h``) or ``τ = (h^κ)^γ``, the boundary cell size of a
    graded mesh (``tau_rule = h_kappa``).
    """

    mode: str
    problem: str
    dim: int = 0
    s_values: list = field(default_factory=lambda: [0.5])
    mu: float = 0.1
    a: float = -0.5
    b: float = 0.5
    T: float = 1.0
    levels: list = field(default_factory=lambda: [2 / 16, 2 / 32])
    k_steps: list = field(default_factory=list)
    kappa: float = 1.0
    solver: str = "cg"
    cg_tol: float = 1e-10
    opt_tol: float = 1e-8
    max_iter: int = 500
    order_regular: int = 3
    order_singular: int = 5
    near_threshold: float = 1.0
    gamma_eps: float = 0.01
    ud_rule: str = "endpoint"
    tau_rule: str = "h"
    output_dir: str = "out"
    seed: int = 42
    figures: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"field 'mode': expected one of {', '.join(MODES)}, got {self.mode!r}")
        if self.problem not in PROBLEMS:
            raise ConfigError(f"field 'problem': expected one of {', '.join(PROBLEMS)}, got {self.problem!r}")
        if self.dim == 0:
            self.dim = PROBLEMS[self.problem]
        if self.dim != PROBLEMS[self.problem]:
            raise ConfigError(f"field 'dim': problem {self.problem} lives in dimension {PROBLEMS[self.problem]}")
        if not self.s_values or any(not 0 < s < 1 for s in self.s_values):
            raise ConfigError("field 's_values': every s must lie in (0, 1)")
        if not self.mu > 0:
            raise ConfigError("field 'mu': must be positive")
        if not self.a <= self.b:
            raise ConfigError("field 'b': box requires a <= b")
        if not self.T > 0:
            raise ConfigError("field 'T': must be positive")
        if len(self.levels) < 1 or any(h <= 0 for h in self.levels):
            raise ConfigError("field 'levels': need at least one positive mesh size")
        if any(k < 1 for k in self.k_steps):
            raise ConfigError("field 'k_steps': step counts must be positive")
        if self.k_steps and len(self.levels) not in (1, len(self.k_steps)):
            raise ConfigError("field 'k_steps': length must match 'levels' (or levels has one entry)")
        if not 1.0 <= self.kappa <= 2.0:
            raise ConfigError("field 'kappa': must lie in [1, 2]")
        if self.solver not in ("cg", "cholesky"):
            raise ConfigError("field 'solver': expected cg or cholesky")
        if self.ud_rule not in ("endpoint", "average"):
            raise ConfigError("field 'ud_rule': expected endpoint or average")
        if self.tau_rule not in ("h", "h_kappa"):
            raise ConfigError("field 'tau_rule': expected h or h_kappa")
        for name in ("cg_tol", "opt_tol", "near_threshold", "gamma_eps"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"field '{name}': must be positive")
        for name in ("max_iter", "order_regular", "order_singular"):
            if getattr(self, name) < 1:
                raise ConfigError(f"field '{name}': must be at least 1")

    def to_text(self):
        lines = []
        for k, v in asdict(self).items():
            if isinstance(v, list):
                v = ", ".join(repr(x) for x in v)
            lines.append(f"{k} = {v}")
        return "\n".join(lines) + "\n"


def parse_config(text, source="<config>"):
    """Parse ``key = value`` lines into a :class:`StudyConfig`."""
    values = {}
    known = {f.name for f in fields(StudyConfig)}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, val = (p.strip() for p in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"{source}:{lineno}: unknown field {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: field {key!r} given twice")
        try:
            values[key] = _PARSERS[key](val)
        except ValueError as err:
            raise ConfigError(f"{source}:{lineno}: field {key!r}: {err}") from None
    for req in ("mode", "problem"):
        if req not in values:
            raise ConfigError(f"{source}: missing required field {req!r}")
    return StudyConfig(**values)


def load_config(path):
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as err:
        raise ConfigError(f"{path}: cannot read config ({err.strerror})") from None
    return parse_config(text, str(p))
