"""Trial table: merged evaluation history with the surrogate skip rule."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, DomainError
from .evaluator import JobResult
from .metrics import SURROGATES, MetricRecord, Objective, ObjectiveValue, normalized_loss
from .params import ParamSpace, ParamVector

TIE_TOL = 1e-9


@dataclass(frozen=True)
class TrialRow:
    iteration: int
    params: ParamVector
    metrics: MetricRecord
    objective: ObjectiveValue
    surrogate_only: bool
    index: int = 0

    def to_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "index": self.index,
            "params": self.params.as_dict(),
            "metrics": self.metrics.to_dict(),
            "objective": self.objective.to_dict(),
            "surrogate_only": self.surrogate_only,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrialRow":
        return cls(
            iteration=d["iteration"],
            params=ParamVector(d["params"]),
            metrics=MetricRecord.from_dict(d["metrics"]),
            objective=ObjectiveValue.from_dict(d["objective"]),
            surrogate_only=d["surrogate_only"],
            index=d.get("index", 0),
        )


@dataclass(frozen=True)
class TrialTable:
    rows: tuple
    space: ParamSpace
    objective: Objective

    def __post_init__(self):
        object.__setattr__(self, "rows", tuple(self.rows))

    def __len__(self):
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)

    @classmethod
    def empty(cls, space: ParamSpace, objective: Objective) -> "TrialTable":
        return cls((), space, objective)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r.to_dict(), sort_keys=True) + "\n" for r in self.rows)

    def write(self, path: Path) -> None:
        Path(path).write_text(self.to_jsonl(), encoding="utf-8")

    @classmethod
    def from_jsonl(cls, text: str, space: ParamSpace, objective: Objective) -> "TrialTable":
        rows = []
        for n, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            try:
                row = TrialRow.from_dict(json.loads(line))
            except (json.JSONDecodeError, KeyError) as exc:
                raise ConfigurationError(f"trial file line {n}: {exc}") from exc
            space.validate(row.params)
            rows.append(row)
        return cls(tuple(rows), space, objective)


def _row_signal(metrics: MetricRecord, objective: Objective) -> tuple[bool, bool]:
    """(keep, surrogate_only) for one record under the active objective."""
    routed_all, signal_all = True, True
    for metric in objective.target_metrics:
        routed = getattr(metrics, metric) is not None
        sur = SURROGATES.get(metric)
        surrogate = sur is not None and getattr(metrics, sur) is not None
        routed_all = routed_all and routed
        signal_all = signal_all and (routed or surrogate)
    return signal_all, signal_all and not routed_all


def collate(results: Sequence[JobResult], prior: TrialTable) -> TrialTable:
    """Append one row per result that carries a routed or surrogate value for every target."""
    new = []
    for r in results:
        if sorted(r.params.keys()) != sorted(prior.space.names):
            raise ConfigurationError(
                f"run {r.run_id} parameters {r.params.keys()} do not match space {prior.space.names}"
            )
        params = prior.space.validate(r.params)
        keep, sur_only = _row_signal(r.metrics, prior.objective)
        if not keep:
            continue
        value = normalized_loss(r.metrics, prior.objective)
        new.append(TrialRow(r.iteration, params, r.metrics, value, sur_only, r.index))
    new.sort(key=lambda row: (row.iteration, row.index))
    return TrialTable(prior.rows + tuple(new), prior.space, prior.objective)


def best_so_far(table: TrialTable, routed_only: bool = False) -> TrialRow | None:
    best = None
    for row in table.rows:
        if row.objective.missing or (routed_only and row.surrogate_only):
            continue
        if best is None:
            best = row
            continue
        d = row.objective.value - best.objective.value
        if d < -TIE_TOL or (abs(d) <= TIE_TOL and best.surrogate_only and not row.surrogate_only):
            best = row
    return best


def to_matrix(table: TrialTable) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if not table.rows:
        raise DomainError("trial table is empty")
    X = np.array([table.space.to_unit(r.params) for r in table.rows], dtype=float)
    y = np.array([r.objective.value if not r.objective.missing else np.nan for r in table.rows], dtype=float)
    mask = np.array([r.surrogate_only for r in table.rows], dtype=bool)
    return X, y, mask


def surrogate_column(table: TrialTable) -> np.ndarray:
    """Objective recomputed from CTS surrogates only; NaN where unavailable."""
    out = np.full(len(table.rows), np.nan)
    for i, r in enumerate(table.rows):
        v = normalized_loss(r.metrics, table.objective, source="surrogate")
        if not v.missing:
            out[i] = v.value
    return out


def routed_column(table: TrialTable) -> np.ndarray:
    out = np.full(len(table.rows), np.nan)
    for i, r in enumerate(table.rows):
        v = normalized_loss(r.metrics, table.objective, source="routed")
        if not v.missing:
            out[i] = v.value
    return out
