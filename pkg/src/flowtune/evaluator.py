"""Batch execution of flow runs: seeded synthetic stand-in or an external command."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import shutil
import signal
import subprocess
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ArchiveError, ConfigurationError, DomainError
from .metrics import COMPLETE, FAILED, TIMEOUT, Baseline, MetricRecord, check_pdp
from .params import ParamSpace, ParamVector, build_preset_space

log = logging.getLogger(__name__)

GRACE_S = 5.0
RUN_LOG = "run.json"
METRICS_FILE = "metrics.json"
SURROGATE_FILE = "cts_metrics.json"
OVERRIDES_FILE = "overrides.mk"
SDC_FILE = "constraint.sdc"

# canonical metrics-file key -> MetricRecord field
CANONICAL_KEYS = {
    "route__wirelength": "wl",
    "timing__ecp": "ecp",
    "cts__wirelength": "cts_wl",
    "cts__ecp": "cts_ecp",
    "design__area": "area",
    "design__instance_count": "instance_count",
    "power__total": "power",
}

DEFAULT_FLOW_VARIABLES = {
    "core_utilization": "CORE_UTILIZATION",
    "tns_end_percent": "TNS_END_PERCENT",
    "density_margin_addon": "PLACE_DENSITY_LB_ADDON",
    "global_padding": "CELL_PAD_IN_SITES_GLOBAL_PLACEMENT",
    "detail_padding": "CELL_PAD_IN_SITES_DETAIL_PLACEMENT",
    "enable_dpo": "ENABLE_DPO",
    "pin_layer_adjust": "PIN_LAYER_ADJUST",
    "above_layer_adjust": "ABOVE_LAYER_ADJUST",
    "flatten_hierarchy": "SYNTH_FLATTEN",
    "cts_cluster_size": "CTS_CLUSTER_SIZE",
    "cts_cluster_diameter": "CTS_CLUSTER_DIAMETER",
}

SDC_TEMPLATE = """set clk_name core_clock
set clk_port_name clk
set clk_period {period}
set clk_io_pct 0.2
set clk_port [get_ports $clk_port_name]
create_clock -name $clk_name -period $clk_period $clk_port
"""


@dataclass
class EvaluatorConfig:
    kind: str = "synthetic"
    timeout_s: float = 30.0
    workdir: Path = Path("work")
    parallel_k: int = 25
    command_template: str | None = None
    synthetic_seed: int = 0
    profile: Baseline | None = None
    profile_key: str | None = None
    timeout_boost: float = 0.0
    flow_variables: Mapping[str, str] = field(default_factory=lambda: dict(DEFAULT_FLOW_VARIABLES))
    metric_keys: Mapping[str, str] = field(default_factory=dict)
    grace_s: float = GRACE_S

    def __post_init__(self):
        self.workdir = Path(self.workdir)
        if self.kind not in ("synthetic", "external_command"):
            raise ConfigurationError(f"evaluator kind must be synthetic or external_command, not {self.kind!r}")
        if self.parallel_k < 1:
            raise ConfigurationError("parallel_k must be >= 1")
        if not self.timeout_s > 0:
            raise ConfigurationError("timeout_s must be positive")
        if self.kind == "external_command" and not self.command_template:
            raise ConfigurationError("external_command evaluator needs command_template")
        if self.kind == "synthetic" and self.profile is None:
            raise ConfigurationError("synthetic evaluator needs a circuit profile (baseline)")

    @property
    def landscape_key(self) -> str:
        if self.profile_key:
            return self.profile_key
        return f"{self.profile.platform}/{self.profile.circuit}"


@dataclass(frozen=True)
class JobResult:
    run_id: str
    iteration: int
    index: int
    params: ParamVector
    metrics: MetricRecord
    wall_time_s: float
    log_path: str
    diagnostic: str = ""

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "iteration": self.iteration,
            "index": self.index,
            "params": self.params.as_dict(),
            "metrics": self.metrics.to_dict(),
            "wall_time_s": self.wall_time_s,
            "diagnostic": self.diagnostic,
        }

    @classmethod
    def from_dict(cls, d: dict, log_path: str = "") -> "JobResult":
        return cls(
            run_id=d["run_id"],
            iteration=d["iteration"],
            index=d["index"],
            params=ParamVector(d["params"]),
            metrics=MetricRecord.from_dict(d["metrics"]),
            wall_time_s=d["wall_time_s"],
            log_path=log_path,
            diagnostic=d.get("diagnostic", ""),
        )


# ----------------------------------------------------------------------------
# synthetic evaluator


def _digest_ints(*parts) -> list[int]:
    h = hashlib.sha256(json.dumps(parts, sort_keys=True, default=repr).encode()).digest()
    return [int.from_bytes(h[i : i + 4], "little") for i in range(0, 32, 4)]


@dataclass(frozen=True)
class Landscape:
    """Per-circuit synthetic response surface in unit-cube coordinates."""

    weights: np.ndarray
    optimum: np.ndarray
    clock_index: int | None

    @classmethod
    def for_key(cls, key: str, names: Sequence[str]) -> "Landscape":
        rng = np.random.default_rng(_digest_ints("landscape", key))
        d = len(names)
        weights = rng.uniform(40.0, 80.0, d)
        optimum = rng.uniform(0.25, 0.75, d)
        # first two coordinates share a sign of sin(2 pi u) so the bowl centre
        # sits on a positive lobe of the interaction term
        optimum[: min(2, d)] = rng.uniform(0.12, 0.38, min(2, d))
        clock = list(names).index("clock_period") if "clock_period" in names else None
        return cls(weights, optimum, clock)

    def congestion(self, u: np.ndarray) -> np.ndarray:
        u = np.atleast_2d(u)
        c = np.sum(self.weights * (u - self.optimum) ** 2, axis=1)
        if u.shape[1] >= 2:
            c = c + 0.3 * np.sin(2 * np.pi * u[:, 0]) * np.sin(2 * np.pi * u[:, 1])
        return c

    def timing(self, u: np.ndarray) -> np.ndarray:
        u = np.atleast_2d(u)
        d = u.shape[1]
        others = [j for j in range(d) if j != self.clock_index]
        rest = np.sum((u[:, others] - self.optimum[others]) ** 2, axis=1) / max(len(others), 1)
        clk = u[:, self.clock_index] if self.clock_index is not None else 0.5
        return 0.1 + 1.5 * clk + 0.2 * rest

    def expected_co_opt(self, u: np.ndarray) -> np.ndarray:
        """Noise-free WL/WL_a + ECP/ECP_a for complete runs."""
        return (0.82 + 0.30 * self.congestion(u)) + (0.85 + 0.25 * self.timing(u))


def timeout_probability(clock_period: float | None, ecp_alpha: float, boost: float = 0.0) -> float:
    slack = 0.0 if clock_period is None else (ecp_alpha - clock_period) / ecp_alpha
    return float(min(max(0.05 + boost + 0.5 * slack, 0.0), 0.6))


def synthetic_evaluate(
    point: ParamVector,
    circuit_profile: Baseline,
    seed: int,
    space: ParamSpace | None = None,
    profile_key: str | None = None,
    timeout_boost: float = 0.0,
) -> MetricRecord:
    """Deterministic stand-in for one flow run."""
    if space is None:
        preset = "four_param" if len(point) == 4 else "twelve_param"
        space = build_preset_space(preset, circuit_profile.ecp_alpha)
    point = space.validate(point)
    key = profile_key or f"{circuit_profile.platform}/{circuit_profile.circuit}"
    land = Landscape.for_key(key, space.names)
    u = space.to_unit(point)
    rng = np.random.default_rng(_digest_ints("run", int(seed), point.items()))

    b = circuit_profile
    c = float(land.congestion(u)[0])
    h = float(land.timing(u)[0])
    wl = b.wl_alpha * (0.82 + 0.30 * c) + rng.normal(0.0, 0.002 * b.wl_alpha)
    ecp = b.ecp_alpha * (0.85 + 0.25 * h) * (1.0 + rng.normal(0.0, 0.002))
    power = b.power_alpha * (1.10 - 0.40 * h) * (1.0 + rng.normal(0.0, 0.002))
    area = b.area_alpha * (0.96 + 0.08 * math.tanh(c)) * (1.0 + rng.normal(0.0, 0.002))
    count = b.count_alpha * (0.97 + 0.05 * math.tanh(c) + 0.04 * (0.6 - h)) * (1.0 + rng.normal(0.0, 0.002))
    cts_wl = 0.92 * wl * (1.0 + rng.uniform(-0.03, 0.03))
    cts_ecp = 0.97 * ecp * (1.0 + rng.uniform(-0.02, 0.02))

    clk = point["clock_period"] if "clock_period" in space.names else None
    p_timeout = timeout_probability(clk, b.ecp_alpha, timeout_boost)
    if rng.random() < p_timeout:
        return MetricRecord(cts_wl=cts_wl, cts_ecp=cts_ecp, area=area, instance_count=count, status=TIMEOUT)
    return MetricRecord(
        wl=wl, ecp=ecp, cts_wl=cts_wl, cts_ecp=cts_ecp, area=area, instance_count=count,
        power=power, pdp=power * ecp, status=COMPLETE,
    )


# ----------------------------------------------------------------------------
# external command adapter


def write_overrides(point: ParamVector, path: Path, flow_variables: Mapping[str, str]) -> None:
    lines = []
    for name, value in point.items():
        if name == "clock_period":
            continue
        var = flow_variables.get(name, name.upper())
        lines.append(f"{var}={value}\n")
    path.write_text("".join(lines), encoding="utf-8", newline="\n")


def parse_metrics_file(path: Path, metric_keys: Mapping[str, str] | None = None) -> dict:
    """Map a canonical (or remapped) metrics JSON file onto MetricRecord fields."""
    raw = json.loads(path.read_text(encoding="utf-8"))
    if not isinstance(raw, dict):
        raise ValueError("metrics file is not a JSON object")
    out = {}
    for canon, fld in CANONICAL_KEYS.items():
        src = (metric_keys or {}).get(canon, canon)
        if src in raw and raw[src] is not None:
            v = raw[src]
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ValueError(f"{src}: non-numeric value {v!r}")
            out[fld] = float(v)
    return out


def _record_from_values(values: dict, diagnostics: list[str]) -> MetricRecord:
    if "wl" in values and "ecp" in values:
        status = COMPLETE
    elif "cts_wl" in values or "cts_ecp" in values:
        status = TIMEOUT
        values = {k: v for k, v in values.items() if k not in ("wl", "ecp")}
    else:
        diagnostics.append("no routed or surrogate metrics present")
        return MetricRecord(status=FAILED)
    try:
        return check_pdp(MetricRecord(status=status, **values))
    except DomainError as exc:
        diagnostics.append(str(exc))
        return MetricRecord(status=FAILED)


def collect_run_metrics(run_dir: Path, metric_keys: Mapping[str, str] | None = None) -> tuple[MetricRecord, str]:
    diagnostics: list[str] = []
    final, cts = run_dir / METRICS_FILE, run_dir / SURROGATE_FILE
    values: dict = {}
    try:
        if cts.exists():
            values.update(parse_metrics_file(cts, metric_keys))
        if final.exists():
            values.update(parse_metrics_file(final, metric_keys))
    except (ValueError, OSError) as exc:
        return MetricRecord(status=FAILED), f"unparseable metrics: {exc}"
    if not final.exists() and not cts.exists():
        return MetricRecord(status=FAILED), "metrics file absent"
    rec = _record_from_values(values, diagnostics)
    if not final.exists() and rec.status == COMPLETE:
        rec = MetricRecord(**{**rec.to_dict(), "wl": None, "ecp": None, "power": None, "pdp": None,
                              "status": TIMEOUT})
    return rec, "; ".join(diagnostics)


def _terminate(proc: subprocess.Popen, grace_s: float) -> None:
    try:
        os.killpg(proc.pid, signal.SIGTERM)
    except ProcessLookupError:
        return
    try:
        proc.wait(timeout=grace_s)
    except subprocess.TimeoutExpired:
        try:
            os.killpg(proc.pid, signal.SIGKILL)
        except ProcessLookupError:
            pass
        proc.wait()


def external_prepare_and_invoke(
    point: ParamVector,
    config: EvaluatorConfig,
    run_dir: Path | None = None,
    run_id: str = "run",
    iteration: int = 0,
    index: int = 0,
) -> JobResult:
    if not config.command_template:
        raise ConfigurationError("command_template is not set")
    run_dir = Path(run_dir or config.workdir / "active" / run_id)
    run_dir.mkdir(parents=True, exist_ok=True)
    write_overrides(point, run_dir / OVERRIDES_FILE, config.flow_variables)
    if "clock_period" in point.keys():
        (run_dir / SDC_FILE).write_text(SDC_TEMPLATE.format(period=point["clock_period"]), encoding="utf-8")
    env = dict(os.environ, RUN_DIR=str(run_dir), TIMEOUT_S=str(config.timeout_s))
    try:
        cmd = config.command_template.format(
            run_dir=run_dir, overrides=run_dir / OVERRIDES_FILE, sdc=run_dir / SDC_FILE
        )
    except (KeyError, IndexError, ValueError) as exc:
        raise ConfigurationError(
            f"command_template placeholder error ({exc!r}); allowed: {{run_dir}} {{overrides}} {{sdc}}, "
            "literal braces are written {{{{ }}}}"
        ) from exc
    t0 = time.monotonic()
    diag = ""
    try:
        proc = subprocess.Popen(
            cmd, shell=True, cwd=run_dir, env=env, start_new_session=True,
            stdout=open(run_dir / "stdout.log", "wb"), stderr=subprocess.STDOUT,
        )
    except OSError as exc:
        metrics, diag = MetricRecord(status=FAILED), f"spawn failed: {exc}"
    else:
        try:
            proc.wait(timeout=config.timeout_s)
        except subprocess.TimeoutExpired:
            _terminate(proc, config.grace_s)
            diag = "timeout"
        metrics, parse_diag = collect_run_metrics(run_dir, config.metric_keys)
        if diag == "timeout" and metrics.status == COMPLETE:
            # killed before the flow finished: routed values cannot be trusted
            metrics = MetricRecord(**{**metrics.to_dict(), "wl": None, "ecp": None, "power": None,
                                      "pdp": None, "status": TIMEOUT})
        diag = "; ".join(x for x in (diag, parse_diag) if x)
    wall = time.monotonic() - t0
    result = JobResult(run_id, iteration, index, point, metrics, wall, str(run_dir / RUN_LOG), diag)
    _write_json(run_dir / RUN_LOG, result.to_dict())
    return result


# ----------------------------------------------------------------------------
# batch scheduling


@dataclass
class SchedulerStats:
    invocations: int = 0
    in_flight: int = 0
    max_in_flight: int = 0
    collisions: int = 0
    _dirs: set = field(default_factory=set)
    _lock: threading.Lock = field(default_factory=threading.Lock)

    def enter(self, run_dir: Path) -> None:
        with self._lock:
            self.invocations += 1
            self.in_flight += 1
            self.max_in_flight = max(self.max_in_flight, self.in_flight)
            key = str(run_dir.resolve())
            if key in self._dirs:
                self.collisions += 1
            self._dirs.add(key)

    def leave(self, run_dir: Path) -> None:
        with self._lock:
            self.in_flight -= 1
            self._dirs.discard(str(run_dir.resolve()))


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True), encoding="utf-8")


def run_id_for(iteration: int, index: int) -> str:
    return f"run_{iteration:04d}_{index:03d}"


def job_seed(base_seed: int, iteration: int, index: int) -> int:
    return _digest_ints("job", int(base_seed), int(iteration), int(index))[0]


def _synthetic_job(point, config, space, run_dir, run_id, iteration, index) -> JobResult:
    t0 = time.monotonic()
    run_dir.mkdir(parents=True, exist_ok=False)
    try:
        metrics = synthetic_evaluate(
            point, config.profile, job_seed(config.synthetic_seed, iteration, index), space,
            config.landscape_key, config.timeout_boost,
        )
        diag = ""
    except Exception as exc:  # evaluator crash is a per-job failure
        metrics, diag = MetricRecord(status=FAILED), f"synthetic evaluator error: {exc}"
    result = JobResult(run_id, iteration, index, point, metrics, time.monotonic() - t0,
                       str(run_dir / RUN_LOG), diag)
    _write_json(run_dir / RUN_LOG, result.to_dict())
    return result


def run_batch(
    points: Sequence[ParamVector],
    config: EvaluatorConfig,
    iteration: int = 1,
    space: ParamSpace | None = None,
    stats: SchedulerStats | None = None,
) -> list[JobResult]:
    """Evaluate up to ``parallel_k`` points concurrently; results keep input order."""
    if not points:
        raise DomainError("run_batch needs at least one point")
    if len(points) > config.parallel_k:
        raise DomainError(f"{len(points)} points exceed parallel_k={config.parallel_k}")
    stats = stats if stats is not None else SchedulerStats()
    active = config.workdir / "active"
    active.mkdir(parents=True, exist_ok=True)

    def job(index: int) -> JobResult:
        point = points[index]
        run_id = run_id_for(iteration, index)
        run_dir = active / run_id
        stats.enter(run_dir)
        try:
            if config.kind == "synthetic":
                return _synthetic_job(point, config, space, run_dir, run_id, iteration, index)
            return external_prepare_and_invoke(point, config, run_dir, run_id, iteration, index)
        except Exception as exc:
            log.warning("job %s failed to start: %s", run_id, exc)
            return JobResult(run_id, iteration, index, point, MetricRecord(status=FAILED), 0.0,
                             str(run_dir / RUN_LOG), f"spawn failure: {exc}")
        finally:
            stats.leave(run_dir)

    with ThreadPoolExecutor(max_workers=config.parallel_k) as pool:
        return list(pool.map(job, range(len(points))))


# ----------------------------------------------------------------------------
# logs and archives


def archive_dir(workdir: Path, iteration: int) -> Path:
    return Path(workdir) / "archive" / f"iter_{iteration:04d}"


def archive_iteration(iteration: int, workdir: Path) -> Path:
    """Move one iteration's run directories out of the active area."""
    workdir = Path(workdir)
    dest = archive_dir(workdir, iteration)
    if dest.exists():
        raise ArchiveError(f"iteration {iteration} already archived at {dest}")
    active = workdir / "active"
    runs = sorted(active.glob(f"run_{iteration:04d}_*")) if active.exists() else []
    if not runs:
        raise ArchiveError(f"no run directories for iteration {iteration} under {active}")
    dest.mkdir(parents=True)
    moved, failed = [], []
    for run in runs:
        try:
            shutil.move(str(run), str(dest / run.name))
            moved.append(run.name)
        except OSError as exc:
            failed.append(f"{run.name}: {exc}")
    if failed:
        raise ArchiveError(f"archive of iteration {iteration} incomplete", moved, failed)
    for path in dest.rglob("*"):
        if path.is_file():
            path.chmod(0o444)
    return dest


def read_run_logs(directory: Path) -> list[JobResult]:
    out = []
    for p in sorted(Path(directory).glob(f"run_*/{RUN_LOG}")):
        out.append(JobResult.from_dict(json.loads(p.read_text(encoding="utf-8")), str(p)))
    out.sort(key=lambda r: (r.iteration, r.index))
    return out


def read_all_logs(workdir: Path, upto_iteration: int | None = None) -> list[JobResult]:
    """Every run log under the archive and active areas, ordered by (iteration, index)."""
    workdir = Path(workdir)
    results = []
    for d in sorted((workdir / "archive").glob("iter_*")):
        results.extend(read_run_logs(d))
    if (workdir / "active").exists():
        results.extend(read_run_logs(workdir / "active"))
    if upto_iteration is not None:
        results = [r for r in results if r.iteration <= upto_iteration]
    results.sort(key=lambda r: (r.iteration, r.index))
    return results
