"""Run configuration: one JSON document with space/objective/evaluator/loop/retrieval/backend sections."""

from __future__ import annotations

import copy
import json
import os
import re
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigurationError, FlowtuneError
from .evaluator import EvaluatorConfig
from .metrics import Baseline, Objective, get_baseline, load_baselines
from .params import ParamSpace, build_preset_space, spec_from_dict
from .tools.retrieval import RetrievalBudget

SECTIONS = ("space", "objective", "evaluator", "loop", "retrieval", "backend")

DEFAULTS = {
    "space": {"preset": "four_param"},
    "objective": {"platform": "ASAP7", "circuit": "IBEX", "sense": "minimize", "expression": "WL + ECP"},
    "evaluator": {"kind": "synthetic", "timeout_s": 30.0, "synthetic_seed": 0, "timeout_boost": 0.0},
    "loop": {"iterations": 15, "parallel_k": 25, "max_tool_calls": 8, "mode": "tools", "seed": 0,
             "temperature": 0.1, "max_tokens": 4096},
    "retrieval": {"enabled": False, "max_calls_per_iteration": 3, "max_payload_chars_per_iteration": 2000,
                  "max_snippet_chars": 500, "cutoff_iteration": None},
    "backend": {"kind": "scripted"},
}

ENV_LLM = ("LLM_API_KEY", "LLM_BASE_URL", "LLM_MODEL")
ENV_SEARCH = "WEB_SEARCH_API_KEY"
ENV_SCHOLARLY = "SCHOLARLY_CONTACT"


def _line_of(text: str, section: str, key: str | None = None) -> int:
    """Best-effort line number of ``section`` (or ``key`` inside it) in the raw JSON."""
    m = re.search(rf'"{re.escape(section)}"\s*:', text)
    if not m:
        return 1
    pos = m.start()
    if key:
        k = re.compile(rf'"{re.escape(key)}"\s*:').search(text, m.end())
        if k:
            pos = k.start()
    return text.count("\n", 0, pos) + 1


class ConfigError(ConfigurationError):
    def __init__(self, message, path="<config>", line=1):
        super().__init__(f"{path}:{line}: {message}")
        self.line = line


@dataclass
class RunConfig:
    raw: dict
    source: str = "<config>"
    text: str = ""

    def section(self, name: str) -> dict:
        return self.raw[name]

    def error(self, section: str, key: str | None, message: str) -> ConfigError:
        return ConfigError(message, self.source, _line_of(self.text, section, key))

    def snapshot(self) -> dict:
        return copy.deepcopy(self.raw)


def load_config(path: Path | None = None, text: str | None = None) -> RunConfig:
    source = str(path) if path else "<config>"
    if text is None:
        if path is None:
            text = "{}"
        else:
            try:
                text = Path(path).read_text(encoding="utf-8")
            except OSError as exc:
                raise ConfigError(f"cannot read config: {exc}", source, 1) from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc.msg} (column {exc.colno})", source, exc.lineno) from exc
    if not isinstance(doc, dict):
        raise ConfigError("top level must be a JSON object", source, 1)
    unknown = sorted(set(doc) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown section(s) {unknown}; expected {list(SECTIONS)}", source,
                          _line_of(text, unknown[0]))
    merged = copy.deepcopy(DEFAULTS)
    for name in SECTIONS:
        sec = doc.get(name, {})
        if not isinstance(sec, dict):
            raise ConfigError(f"section {name!r} must be an object", source, _line_of(text, name))
        merged[name].update(sec)
    cfg = RunConfig(merged, source, text)
    validate(cfg)
    return cfg


def _num(cfg: RunConfig, section: str, key: str, kind=float, minimum=None, allow_none=False):
    v = cfg.raw[section].get(key)
    if v is None and allow_none:
        return None
    if isinstance(v, bool) or not isinstance(v, (int, float)) or (kind is int and int(v) != v):
        raise cfg.error(section, key, f"{section}.{key} must be a{'n integer' if kind is int else ' number'}")
    if minimum is not None and v < minimum:
        raise cfg.error(section, key, f"{section}.{key} must be >= {minimum}")
    return kind(v)


def validate(cfg: RunConfig) -> None:
    build_space(cfg)
    build_objective(cfg)
    ev = cfg.raw["evaluator"]
    if ev["kind"] not in ("synthetic", "external_command"):
        raise cfg.error("evaluator", "kind", "evaluator.kind must be synthetic or external_command")
    if ev["kind"] == "external_command" and not ev.get("command_template"):
        raise cfg.error("evaluator", "kind", "external_command evaluator needs evaluator.command_template")
    _num(cfg, "evaluator", "timeout_s", float, 1e-9)
    _num(cfg, "loop", "iterations", int, 1)
    _num(cfg, "loop", "parallel_k", int, 1)
    _num(cfg, "loop", "max_tool_calls", int, 0)
    _num(cfg, "loop", "seed", int)
    if cfg.raw["loop"]["mode"] not in ("tools", "no_tools"):
        raise cfg.error("loop", "mode", "loop.mode must be tools or no_tools")
    r = cfg.raw["retrieval"]
    if not isinstance(r["enabled"], bool):
        raise cfg.error("retrieval", "enabled", "retrieval.enabled must be true or false")
    try:
        retrieval_budget(cfg)
    except FlowtuneError as exc:
        raise cfg.error("retrieval", None, str(exc)) from exc
    if cfg.raw["backend"]["kind"] not in ("scripted", "http"):
        raise cfg.error("backend", "kind", "backend.kind must be scripted or http")


def build_space(cfg: RunConfig) -> ParamSpace:
    sec = cfg.raw["space"]
    try:
        if "parameters" in sec:
            return ParamSpace(tuple(spec_from_dict(p) for p in sec["parameters"]), "custom")
        return build_preset_space(sec.get("preset", "four_param"), baseline(cfg).ecp_alpha)
    except FlowtuneError as exc:
        key = "parameters" if "parameters" in sec else "preset"
        raise cfg.error("space", key, str(exc)) from exc


def baseline(cfg: RunConfig) -> Baseline:
    sec = cfg.raw["objective"]
    try:
        table = None
        if sec.get("baselines_file"):
            table = load_baselines(Path(sec["baselines_file"]).read_text(encoding="utf-8"))
        return get_baseline(sec["platform"], sec["circuit"], table)
    except (FlowtuneError, OSError) as exc:
        raise cfg.error("objective", "circuit", str(exc)) from exc


def build_objective(cfg: RunConfig) -> Objective:
    from .agent import parse_objective

    sec = cfg.raw["objective"]
    try:
        return parse_objective({"sense": sec.get("sense", "minimize"), "expression": sec.get("expression"),
                                "constraints": sec.get("constraints")}, baseline(cfg))
    except FlowtuneError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise cfg.error("objective", "expression", str(exc)) from exc


def circuit_label(cfg: RunConfig) -> str:
    sec = cfg.raw["objective"]
    return sec.get("circuit_label") or sec["circuit"]


def build_evaluator(cfg: RunConfig, workdir: Path) -> EvaluatorConfig:
    ev = cfg.raw["evaluator"]
    b = baseline(cfg)
    return EvaluatorConfig(
        kind=ev["kind"],
        timeout_s=float(ev["timeout_s"]),
        workdir=Path(workdir),
        parallel_k=int(cfg.raw["loop"]["parallel_k"]),
        command_template=ev.get("command_template"),
        synthetic_seed=int(ev.get("synthetic_seed", 0)),
        profile=b,
        profile_key=ev.get("profile_key"),
        timeout_boost=float(ev.get("timeout_boost", 0.0)),
        **({"flow_variables": ev["flow_variables"]} if ev.get("flow_variables") else {}),
        metric_keys=ev.get("metric_keys") or {},
    )


def retrieval_budget(cfg: RunConfig) -> RetrievalBudget:
    r = cfg.raw["retrieval"]
    return RetrievalBudget(int(r["max_calls_per_iteration"]), int(r["max_payload_chars_per_iteration"]),
                           int(r["max_snippet_chars"]), r.get("cutoff_iteration"))


def build_loop(cfg: RunConfig):
    from .agent import LoopConfig

    lp = cfg.raw["loop"]
    return LoopConfig(
        total_serial_iterations=int(lp["iterations"]),
        parallel_k=int(lp["parallel_k"]),
        max_tool_calls_per_iteration=int(lp["max_tool_calls"]),
        retrieval_enabled=bool(cfg.raw["retrieval"]["enabled"]),
        retrieval_budget=retrieval_budget(cfg),
        seed=int(lp["seed"]),
        mode=lp["mode"],
        temperature=float(lp["temperature"]),
        max_tokens=int(lp["max_tokens"]),
    )


def require_env(names, environ=None) -> dict:
    environ = os.environ if environ is None else environ
    missing = [n for n in names if not environ.get(n)]
    if missing:
        raise ConfigurationError(f"missing environment value(s): {', '.join(missing)}")
    return {n: environ[n] for n in names}
