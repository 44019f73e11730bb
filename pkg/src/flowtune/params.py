"""Tunable flow parameters: domains, integer-grid encoding, sampling."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

from .errors import ConfigurationError, DomainError

INTEGER, CONTINUOUS, BINARY = "integer", "continuous", "binary"
KINDS = (INTEGER, CONTINUOUS, BINARY)
PRESETS = ("four_param", "twelve_param")


def round_half_away(x: float) -> int:
    # 9-digit pre-rounding absorbs binary artefacts such as 0.285*100 = 28.4999...
    x = round(x, 9)
    return int(math.copysign(math.floor(abs(x) + 0.5), x))


@dataclass(frozen=True)
class ParamSpec:
    name: str
    kind: str
    min: float
    max: float
    grid_scale: int = 1
    description: str = ""

    def __post_init__(self):
        if not self.name.isidentifier():
            raise ConfigurationError(f"parameter name {self.name!r} is not an identifier")
        if self.kind not in KINDS:
            raise ConfigurationError(f"{self.name}: kind must be one of {KINDS}, got {self.kind!r}")
        if self.min > self.max:
            raise ConfigurationError(f"{self.name}: min {self.min} > max {self.max}")
        if int(self.grid_scale) != self.grid_scale or self.grid_scale < 1:
            raise ConfigurationError(f"{self.name}: grid_scale must be a positive integer")
        if self.kind == BINARY and (self.min, self.max) != (0, 1):
            raise ConfigurationError(f"{self.name}: binary parameters span exactly [0, 1]")
        if self.kind == CONTINUOUS:
            lo, hi = self.grid_range
            if hi - lo < 2:
                raise ConfigurationError(
                    f"{self.name}: grid_scale {self.grid_scale} leaves fewer than 2 grid steps"
                )

    @property
    def grid_range(self) -> tuple[int, int]:
        if self.kind == CONTINUOUS:
            return round_half_away(self.min * self.grid_scale), round_half_away(self.max * self.grid_scale)
        return int(self.min), int(self.max)

    def contains(self, value) -> bool:
        tol = 1e-9 * max(1.0, abs(self.min), abs(self.max))
        if not (self.min - tol <= value <= self.max + tol):
            return False
        if self.kind != CONTINUOUS:
            return float(value) == int(value)
        return math.isfinite(value)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "kind": self.kind,
            "min": self.min,
            "max": self.max,
            "grid_scale": self.grid_scale,
            "description": self.description,
        }


class ParamVector:
    """Immutable assignment of a value to every parameter of a space."""

    __slots__ = ("_items",)

    def __init__(self, assignments: Mapping[str, float] | Iterable[tuple[str, float]]):
        items = assignments.items() if isinstance(assignments, Mapping) else assignments
        object.__setattr__(self, "_items", tuple((str(k), v) for k, v in items))

    def __setattr__(self, key, value):
        raise AttributeError("ParamVector is immutable")

    def __getitem__(self, name):
        for k, v in self._items:
            if k == name:
                return v
        raise KeyError(name)

    def __iter__(self):
        return (k for k, _ in self._items)

    def __len__(self):
        return len(self._items)

    def __eq__(self, other):
        if not isinstance(other, ParamVector):
            return NotImplemented
        return dict(self._items) == dict(other._items)

    def __hash__(self):
        return hash(frozenset(self._items))

    def __repr__(self):
        body = ", ".join(f"{k}={v!r}" for k, v in self._items)
        return f"ParamVector({body})"

    def keys(self):
        return [k for k, _ in self._items]

    def items(self):
        return list(self._items)

    def as_dict(self) -> dict:
        return dict(self._items)


@dataclass(frozen=True)
class ParamSpace:
    specs: tuple[ParamSpec, ...]
    preset_label: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "specs", tuple(self.specs))
        names = [s.name for s in self.specs]
        if len(set(names)) != len(names):
            raise ConfigurationError(f"duplicate parameter names in {names}")
        if not names:
            raise ConfigurationError("parameter space is empty")
        if self.preset_label not in PRESETS + ("custom",):
            raise ConfigurationError(f"unknown preset label {self.preset_label!r}")

    @property
    def names(self) -> list[str]:
        return [s.name for s in self.specs]

    @property
    def dim(self) -> int:
        return len(self.specs)

    def spec(self, name: str) -> ParamSpec:
        for s in self.specs:
            if s.name == name:
                return s
        raise KeyError(name)

    def validate(self, vector: ParamVector | Mapping) -> ParamVector:
        if not isinstance(vector, ParamVector):
            vector = ParamVector(vector)
        got = vector.keys()
        if sorted(got) != sorted(self.names) or len(got) != len(set(got)):
            raise DomainError(f"vector keys {got} do not match space {self.names}")
        for s in self.specs:
            v = vector[s.name]
            if not s.contains(v):
                raise DomainError(f"{s.name}={v!r} outside {s.kind} domain [{s.min}, {s.max}]")
        return vector

    def coerce(self, mapping: Mapping) -> ParamVector:
        """Order by spec, cast integer kinds to int, then validate."""
        out = []
        for s in self.specs:
            if s.name not in mapping:
                raise DomainError(f"missing parameter {s.name}")
            v = mapping[s.name]
            if isinstance(v, bool) or not isinstance(v, (int, float, np.integer, np.floating)):
                raise DomainError(f"{s.name}: non-numeric value {v!r}")
            if s.kind != CONTINUOUS:
                if float(v) != int(v):
                    raise DomainError(f"{s.name}: {v!r} is not an integer")
                v = int(v)
            else:
                v = float(v)
            out.append((s.name, v))
        extra = set(mapping) - set(self.names)
        if extra:
            raise DomainError(f"unknown parameters {sorted(extra)}")
        return self.validate(ParamVector(out))

    def to_unit(self, vector: ParamVector) -> np.ndarray:
        u = np.empty(self.dim)
        for i, s in enumerate(self.specs):
            lo, hi = s.grid_range
            g = grid_encode(s, vector[s.name])
            u[i] = 0.0 if hi == lo else (g - lo) / (hi - lo)
        return u

    def from_unit(self, u) -> ParamVector:
        u = np.clip(np.asarray(u, dtype=float), 0.0, 1.0)
        out = []
        for s, x in zip(self.specs, u):
            lo, hi = s.grid_range
            out.append((s.name, grid_decode(s, round_half_away(lo + x * (hi - lo)))))
        return ParamVector(out)

    def snap_unit(self, U) -> np.ndarray:
        """Project unit-cube rows onto the grid lattice (still in unit coordinates)."""
        U = np.clip(np.atleast_2d(np.asarray(U, dtype=float)), 0.0, 1.0)
        out = np.empty_like(U)
        for j, s in enumerate(self.specs):
            lo, hi = s.grid_range
            if hi == lo:
                out[:, j] = 0.0
                continue
            g = np.floor(np.round(lo + U[:, j] * (hi - lo), 9) + 0.5)
            out[:, j] = (g - lo) / (hi - lo)
        return out

    def to_json(self) -> str:
        return json.dumps([s.to_dict() for s in self.specs], indent=2)

    @classmethod
    def from_json(cls, text: str, preset_label: str = "custom") -> "ParamSpace":
        try:
            rows = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"parameter JSON line {exc.lineno}: {exc.msg}") from exc
        if not isinstance(rows, list):
            raise ConfigurationError("parameter JSON must be an array of parameter objects")
        return cls(tuple(spec_from_dict(r) for r in rows), preset_label)


def spec_from_dict(row: Mapping) -> ParamSpec:
    missing = {"name", "kind", "min", "max"} - set(row)
    if missing:
        raise ConfigurationError(f"parameter entry missing fields {sorted(missing)}")
    return ParamSpec(
        name=row["name"],
        kind=row["kind"],
        min=row["min"],
        max=row["max"],
        grid_scale=int(row.get("grid_scale", 1)),
        description=row.get("description", ""),
    )


def clock_grid_scale(lo: float, hi: float, steps: int = 100) -> int:
    """Smallest power of ten giving at least ``steps`` grid points over [lo, hi]."""
    scale = 1
    while (hi - lo) * scale < steps:
        scale *= 10
    return scale


def _table_rows(baseline_ecp: float) -> list[ParamSpec]:
    lo, hi = 0.5 * baseline_ecp, 2.0 * baseline_ecp
    scale = clock_grid_scale(lo, hi)
    # bounds sit on the grid so min and max are reachable after snapping
    lo, hi = round_half_away(lo * scale) / scale, round_half_away(hi * scale) / scale
    return [
        ParamSpec("clock_period", CONTINUOUS, lo, hi, scale, "Target clock period (ns/ps)"),
        ParamSpec("core_utilization", INTEGER, 20, 99, 1, "% core utilization"),
        ParamSpec("tns_end_percent", INTEGER, 0, 100, 1, "% violating endpoints to fix"),
        ParamSpec("density_margin_addon", CONTINUOUS, 0.0, 0.99, 100, "Global density margin increase"),
        ParamSpec("global_padding", INTEGER, 0, 3, 1, "Global placement padding level"),
        ParamSpec("detail_padding", INTEGER, 0, 3, 1, "Detailed placement padding level"),
        ParamSpec("enable_dpo", BINARY, 0, 1, 1, "Detailed placement optimization"),
        ParamSpec("pin_layer_adjust", CONTINUOUS, 0.2, 0.7, 10, "Routing adjust for metal2/3"),
        ParamSpec("above_layer_adjust", CONTINUOUS, 0.2, 0.7, 10, "Routing adjust for metal4 and above"),
        ParamSpec("flatten_hierarchy", BINARY, 0, 1, 1, "Flatten design hierarchy"),
        ParamSpec("cts_cluster_size", INTEGER, 10, 40, 1, "Number of sinks per CTS cluster"),
        ParamSpec("cts_cluster_diameter", INTEGER, 80, 120, 1, "Physical span of each CTS cluster"),
    ]


def build_preset_space(preset_label: str, baseline_ecp: float = 1.0) -> ParamSpace:
    """Return the four- or twelve-parameter space.

    The clock period has no natural upper bound, so it is boxed to
    [0.5, 2.0] x ``baseline_ecp`` (the circuit's default effective clock
    period, in platform units).
    """
    if preset_label not in PRESETS:
        raise ConfigurationError(
            f"unknown preset {preset_label!r}; expected one of {PRESETS} (custom spaces are built explicitly)"
        )
    if not baseline_ecp > 0:
        raise ConfigurationError("baseline_ecp must be positive")
    rows = _table_rows(float(baseline_ecp))
    if preset_label == "four_param":
        rows = rows[:4]
    return ParamSpace(tuple(rows), preset_label)


def grid_encode(spec: ParamSpec, value: float) -> int:
    if not spec.contains(value):
        raise DomainError(f"{spec.name}: {value!r} outside [{spec.min}, {spec.max}]")
    if spec.kind == CONTINUOUS:
        return round_half_away(value * spec.grid_scale)
    return int(value)


def grid_decode(spec: ParamSpec, grid_value: int):
    lo, hi = spec.grid_range
    if int(grid_value) != grid_value or not lo <= grid_value <= hi:
        raise DomainError(f"{spec.name}: grid value {grid_value!r} outside [{lo}, {hi}]")
    if spec.kind == CONTINUOUS:
        return float(min(max(grid_value / spec.grid_scale, spec.min), spec.max))
    return int(grid_value)


def sample_uniform(space: ParamSpace, n: int, seed: int) -> list[ParamVector]:
    if n < 1:
        raise DomainError("n must be >= 1")
    rng = np.random.default_rng(seed)
    cols = []
    for s in space.specs:
        if s.kind == CONTINUOUS:
            cols.append([float(v) for v in rng.uniform(s.min, s.max, size=n)])
        else:
            cols.append([int(v) for v in rng.integers(int(s.min), int(s.max) + 1, size=n)])
    return [ParamVector(zip(space.names, row)) for row in zip(*cols)]
