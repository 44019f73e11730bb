"""Run metrics, default-flow baselines and normalized objectives."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Iterable, Sequence

from .errors import ConfigurationError, DomainError

COMPLETE, TIMEOUT, FAILED = "complete", "timeout", "failed"
STATUSES = (COMPLETE, TIMEOUT, FAILED)

METRIC_IDS = ("wl", "ecp", "cts_wl", "cts_ecp", "area", "instance_count", "power", "pdp")
SURROGATES = {"wl": "cts_wl", "ecp": "cts_ecp"}
ALIASES = {"count": "instance_count", "instances": "instance_count"}

CONSTRAINT_PENALTY = 10.0
PDP_RTOL = 1e-6


def metric_id(name: str) -> str:
    key = name.strip().lower()
    key = ALIASES.get(key, key)
    if key not in METRIC_IDS:
        raise ConfigurationError(f"unknown metric {name!r}; expected one of {METRIC_IDS}")
    return key


@dataclass(frozen=True)
class MetricRecord:
    wl: float | None = None
    ecp: float | None = None
    cts_wl: float | None = None
    cts_ecp: float | None = None
    area: float | None = None
    instance_count: float | None = None
    power: float | None = None
    pdp: float | None = None
    status: str = COMPLETE

    def __post_init__(self):
        if self.status not in STATUSES:
            raise DomainError(f"unknown status {self.status!r}")
        for name in METRIC_IDS:
            v = getattr(self, name)
            if v is not None and not (math.isfinite(v) and v > 0):
                raise DomainError(f"metric {name}={v!r} must be positive and finite")
        if self.status == COMPLETE and (self.wl is None or self.ecp is None):
            raise DomainError("complete records carry both wl and ecp")

    def get(self, name: str):
        return getattr(self, metric_id(name))

    def present(self) -> dict:
        return {k: getattr(self, k) for k in METRIC_IDS if getattr(self, k) is not None}

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricRecord":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass(frozen=True)
class Baseline:
    circuit: str
    platform: str
    wl_alpha: float
    ecp_alpha: float
    cts_wl_alpha: float
    cts_ecp_alpha: float
    area_alpha: float
    count_alpha: float
    power_alpha: float
    pdp_alpha: float

    def __post_init__(self):
        for f in fields(self):
            if f.name.endswith("_alpha"):
                v = getattr(self, f.name)
                if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
                    raise ConfigurationError(f"baseline {f.name}={v!r} must be positive")

    def value(self, metric: str) -> float:
        m = metric_id(metric)
        attr = "count_alpha" if m == "instance_count" else f"{m}_alpha"
        return getattr(self, attr)

    def as_record(self) -> MetricRecord:
        return MetricRecord(
            wl=self.wl_alpha,
            ecp=self.ecp_alpha,
            cts_wl=self.cts_wl_alpha,
            cts_ecp=self.cts_ecp_alpha,
            area=self.area_alpha,
            instance_count=self.count_alpha,
            power=self.power_alpha,
            pdp=self.pdp_alpha,
        )

    def relabel(self, circuit: str | None = None, platform: str | None = None) -> "Baseline":
        return replace(self, circuit=circuit or self.circuit, platform=platform or self.platform)

    def to_dict(self) -> dict:
        return asdict(self)


def _b(platform, circuit, cts_wl, cts_ecp, wl, ecp, area, count, power, pdp):
    return Baseline(circuit, platform, wl, ecp, cts_wl, cts_ecp, area, count, power, pdp)


# Default-flow metrics per (platform, circuit). ECP in ns on SKY130HD, ps on ASAP7.
DEFAULT_BASELINES = {
    ("SKY130HD", "IBEX"): _b("SKY130HD", "IBEX", 550963, 10.84, 808423, 11.54, 192784, 20944, 0.097, 1.12),
    ("ASAP7", "IBEX"): _b("ASAP7", "IBEX", 93005, 1308, 115285, 1361, 2729, 21831, 0.057, 77.58),
    ("SKY130HD", "AES"): _b("SKY130HD", "AES", 428916, 5.34, 589825, 4.72, 122361, 18324, 0.411, 1.94),
    ("ASAP7", "AES"): _b("ASAP7", "AES", 61103, 432, 75438, 460, 2046, 17693, 0.149, 68.54),
    ("SKY130HD", "JPEG"): _b("SKY130HD", "JPEG", 1199090, 8.00, 1374966, 7.73, 541327, 65670, 0.811, 6.27),
    ("ASAP7", "JPEG"): _b("ASAP7", "JPEG", 266510, 1096, 300326, 1148, 7904, 68287, 0.138, 158.42),
}


def get_baseline(platform: str, circuit: str, table: dict | None = None) -> Baseline:
    table = DEFAULT_BASELINES if table is None else table
    key = (platform.upper(), circuit.upper())
    if key not in table:
        raise ConfigurationError(f"no baseline for {platform}-{circuit}; known: {sorted(table)}")
    return table[key]


def dump_baselines(table: dict) -> str:
    out: dict = {}
    for (platform, circuit), b in sorted(table.items()):
        row = b.to_dict()
        row.pop("platform")
        row.pop("circuit")
        out.setdefault(platform, {})[circuit] = row
    return json.dumps(out, indent=2, sort_keys=True)


def load_baselines(text: str) -> dict:
    """Parse a ``{platform: {circuit: {..._alpha: value}}}`` JSON table."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"baseline JSON line {exc.lineno}: {exc.msg}") from exc
    table = {}
    for platform, circuits in doc.items():
        for circuit, row in circuits.items():
            try:
                table[(platform.upper(), circuit.upper())] = Baseline(
                    circuit=circuit.upper(), platform=platform.upper(), **row
                )
            except TypeError as exc:
                raise ConfigurationError(f"baseline {platform}/{circuit}: {exc}") from exc
    return table


@dataclass(frozen=True)
class Objective:
    variant: str
    baseline: Baseline
    terms: tuple = ()
    target: "Objective | None" = None
    constraints: tuple = ()
    penalty: float = CONSTRAINT_PENALTY

    def __post_init__(self):
        if self.variant not in ("single", "weighted_sum", "co_optimize", "constrained"):
            raise ConfigurationError(f"unknown objective variant {self.variant!r}")
        for m, w in self.terms:
            metric_id(m)
            if w < 0:
                raise ConfigurationError(f"weight for {m} must be nonnegative")
        if self.variant == "constrained":
            if self.target is None or self.target.variant == "constrained":
                raise ConfigurationError("constrained objectives wrap a non-constrained target")
            for m, leeway in self.constraints:
                metric_id(m)
                if leeway < 0:
                    raise ConfigurationError(f"leeway for {m} must be nonnegative")

    @classmethod
    def single(cls, metric: str, baseline: Baseline) -> "Objective":
        return cls("single", baseline, ((metric_id(metric), 1.0),))

    @classmethod
    def weighted_sum(cls, terms: Iterable[tuple[str, float]], baseline: Baseline) -> "Objective":
        return cls("weighted_sum", baseline, tuple((metric_id(m), float(w)) for m, w in terms))

    @classmethod
    def co_optimize(cls, baseline: Baseline) -> "Objective":
        return cls("co_optimize", baseline, (("wl", 1.0), ("ecp", 1.0)))

    @classmethod
    def constrained(cls, target: "Objective", constraints: Iterable[tuple[str, float]]) -> "Objective":
        return cls(
            "constrained",
            target.baseline,
            target.terms,
            target,
            tuple((metric_id(m), float(p)) for m, p in constraints),
        )

    @property
    def target_metrics(self) -> list[str]:
        return [m for m, _ in self.terms]

    def with_baseline(self, baseline: Baseline) -> "Objective":
        target = self.target.with_baseline(baseline) if self.target else None
        return replace(self, baseline=baseline, target=target)

    def describe(self) -> str:
        parts = " + ".join(
            (f"{m.upper()}/{m.upper()}_alpha" if w == 1.0 else f"{w:g}*{m.upper()}/{m.upper()}_alpha")
            for m, w in self.terms
        )
        if self.variant == "constrained":
            cons = ", ".join(f"{m} <= +{p:g}%" for m, p in self.constraints)
            return f"{parts} subject to {cons}"
        return parts

    def to_dict(self) -> dict:
        d = {"variant": self.variant, "terms": [list(t) for t in self.terms]}
        if self.variant == "constrained":
            d["constraints"] = [list(c) for c in self.constraints]
            d["penalty"] = self.penalty
        d["baseline"] = self.baseline.to_dict()
        return d


@dataclass(frozen=True)
class ObjectiveValue:
    value: float
    surrogate_used: bool = False
    missing: bool = False
    violations: tuple = ()

    def rank_key(self):
        return (self.missing, self.value if not self.missing else math.inf)

    def to_dict(self) -> dict:
        return {
            "value": None if self.missing else self.value,
            "surrogate_used": self.surrogate_used,
            "missing": self.missing,
            "violations": list(self.violations),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ObjectiveValue":
        return cls(
            value=math.nan if d["value"] is None else d["value"],
            surrogate_used=d["surrogate_used"],
            missing=d["missing"],
            violations=tuple(d.get("violations", ())),
        )


MISSING = ObjectiveValue(math.nan, False, True)


def _term(record: MetricRecord, baseline: Baseline, metric: str, source: str):
    """Normalized value of one metric, or None. Returns (value, used_surrogate)."""
    sur = SURROGATES.get(metric)
    routed = getattr(record, metric)
    if source in ("auto", "routed") and routed is not None:
        return routed / baseline.value(metric), False
    if source in ("auto", "surrogate") and sur is not None:
        sv = getattr(record, sur)
        if sv is not None:
            return sv / baseline.value(sur), True
        return None, False
    if source == "surrogate" and routed is not None:
        return routed / baseline.value(metric), False
    return None, False


def normalized_loss(record: MetricRecord, objective: Objective, source: str = "auto") -> ObjectiveValue:
    """Baseline-normalized loss of one run.

    ``source`` selects which metric family feeds the terms: ``auto`` uses
    the routed value and falls back to the CTS surrogate per term,
    ``routed``/``surrogate`` force one family. A term with neither value
    makes the whole loss missing.
    """
    if objective.variant == "constrained":
        inner = normalized_loss(record, objective.target, source)
        if inner.missing:
            return inner
        report = check_constraints(record, objective.baseline, objective.constraints)
        if report.violations:
            return replace(inner, value=inner.value + objective.penalty, violations=tuple(report.violations))
        return inner
    total, used = 0.0, False
    for metric, weight in objective.terms:
        v, s = _term(record, objective.baseline, metric, source)
        if v is None:
            return MISSING
        total += weight * v
        used = used or s
    return ObjectiveValue(total, used, False)


def co_opt_average(record: MetricRecord, baseline: Baseline) -> ObjectiveValue:
    """Reporting form of the co-optimization loss: mean of the two normalized terms."""
    v = normalized_loss(record, Objective.co_optimize(baseline))
    return v if v.missing else replace(v, value=0.5 * v.value)


@dataclass(frozen=True)
class ConstraintCheck:
    metric: str
    leeway_percent: float
    value: float | None
    baseline: float
    percent_change: float | None
    status: str  # pass | violation | unverifiable


@dataclass(frozen=True)
class ConstraintReport:
    checks: tuple = field(default_factory=tuple)

    @property
    def violations(self) -> list[str]:
        return [c.metric for c in self.checks if c.status == "violation"]

    @property
    def unverifiable(self) -> list[str]:
        return [c.metric for c in self.checks if c.status == "unverifiable"]

    @property
    def ok(self) -> bool:
        return not self.violations

    @property
    def verified_ok(self) -> bool:
        return not self.violations and not self.unverifiable

    def to_dict(self) -> dict:
        return {"checks": [asdict(c) for c in self.checks], "violations": self.violations,
                "unverifiable": self.unverifiable}


def check_constraints(record: MetricRecord, baseline: Baseline, constraints: Sequence) -> ConstraintReport:
    checks = []
    for metric, leeway in constraints:
        m = metric_id(metric)
        base = baseline.value(m)
        v = getattr(record, m)
        if v is None:
            checks.append(ConstraintCheck(m, leeway, None, base, None, "unverifiable"))
            continue
        change = 100.0 * (v / base - 1.0)
        checks.append(ConstraintCheck(m, leeway, v, base, change, "violation" if change > leeway else "pass"))
    return ConstraintReport(tuple(checks))


def geometric_mean(values: Sequence[float]) -> float:
    vals = list(values)
    if not vals:
        raise DomainError("geometric mean of an empty list")
    if any(not (v > 0) for v in vals):
        raise DomainError("geometric mean requires positive values")
    return math.exp(math.fsum(math.log(v) for v in vals) / len(vals))


def derive_pdp(record: MetricRecord) -> MetricRecord:
    if record.power is None or record.ecp is None:
        return record
    return replace(record, pdp=record.power * record.ecp)


def check_pdp(record: MetricRecord) -> MetricRecord:
    """Fill a missing pdp; mark the record failed if a stored pdp disagrees."""
    if record.power is None or record.ecp is None:
        return record
    expected = record.power * record.ecp
    if record.pdp is None:
        return replace(record, pdp=expected)
    if abs(record.pdp - expected) > PDP_RTOL * abs(expected):
        return replace(record, status=FAILED)
    return record
