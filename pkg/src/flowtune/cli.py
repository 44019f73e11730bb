"""Command-line entry point: tune, report, replay, baseline."""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import os
import sys
from pathlib import Path

from . import config as cfgmod
from .agent import (
    LoggedBackend,
    _Replay,
    default_context_inputs,
    initialize_context,
    replay_run,
    run_to_completion,
)
from .errors import FlowtuneError, RunAborted
from .evaluator import external_prepare_and_invoke
from .metrics import Baseline, dump_baselines
from .params import ParamVector
from .report import write_report
from .tools.retrieval import RetrievalCache, RetrievalConfig, ScholarlyProvider, WebSearchProvider

log = logging.getLogger("flowtune")

MANIFEST = "manifest.json"
REPORT_KINDS = ("trajectory", "correlation", "pareto")


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def apply_flags(cfg: cfgmod.RunConfig, args) -> cfgmod.RunConfig:
    """Command-line flags override the config file; the result is revalidated."""
    raw = cfg.raw
    if getattr(args, "backend", None):
        raw["backend"]["kind"] = args.backend
    if getattr(args, "iters", None) is not None:
        raw["loop"]["iterations"] = args.iters
    if getattr(args, "parallel", None) is not None:
        raw["loop"]["parallel_k"] = args.parallel
    if getattr(args, "timeout", None) is not None:
        raw["evaluator"]["timeout_s"] = args.timeout
    if getattr(args, "retrieval", None):
        raw["retrieval"]["enabled"] = args.retrieval == "on"
    if getattr(args, "seed", None) is not None:
        raw["loop"]["seed"] = args.seed
    cfgmod.validate(cfg)
    return cfg


def build_context(cfg: cfgmod.RunConfig):
    space = cfgmod.build_space(cfg)
    objective = cfgmod.build_objective(cfg)
    label = cfgmod.circuit_label(cfg)
    shown = objective.with_baseline(objective.baseline.relabel(circuit=label))
    inputs = default_context_inputs(space, shown, cfg.raw["objective"].get("task"),
                                    cfg.raw["space"].get("suggested_ranges"))
    return initialize_context(inputs)


def build_backend(cfg: cfgmod.RunConfig, environ=None, transcript=None):
    kind = cfg.raw["backend"]["kind"]
    if kind == "scripted":
        from .llm.scripted import ScriptedBackend

        opts = {k: v for k, v in cfg.raw["backend"].items() if k in ("kernel", "n_candidates", "selector")}
        return ScriptedBackend(**opts)
    from .llm.adapter import HttpChatBackend

    env = cfgmod.require_env(cfgmod.ENV_LLM, environ)
    return HttpChatBackend(env["LLM_BASE_URL"], env["LLM_API_KEY"], env["LLM_MODEL"], transcript=transcript,
                           reasoning_field=cfg.raw["backend"].get("reasoning_field"))


def build_retrieval(cfg: cfgmod.RunConfig, cache_path: Path, environ=None) -> RetrievalConfig | None:
    """Retrieval providers; a cold cache with no search key is a startup error."""
    if not cfg.raw["retrieval"]["enabled"]:
        return None
    environ = os.environ if environ is None else environ
    key = environ.get(cfgmod.ENV_SEARCH)
    contact = environ.get(cfgmod.ENV_SCHOLARLY)
    warm = cache_path.exists() and cache_path.stat().st_size > 0
    if not key and not warm:
        raise FlowtuneError(
            f"retrieval is on but {cfgmod.ENV_SEARCH} is not set and the retrieval cache at {cache_path} is empty"
        )
    # without the search key both providers answer from the cache only
    return RetrievalConfig(
        web=WebSearchProvider(key or ""),
        scholarly=ScholarlyProvider(contact),
        budget=cfgmod.retrieval_budget(cfg),
        cache_only=not key,
    )


def write_manifest(run_dir: Path, cfg: cfgmod.RunConfig, backend, started: str, finished: str | None,
                   status: str, retrieval: RetrievalConfig | None = None) -> Path:
    manifest = {
        "config": cfg.snapshot(),
        "seed": cfg.raw["loop"]["seed"],
        "backend": {"kind": cfg.raw["backend"]["kind"], "model": getattr(backend, "model_id", "")},
        "started": started,
        "finished": finished,
        "status": status,
        "retrieval_providers": {"web": bool(retrieval and retrieval.web),
                                "scholarly": bool(retrieval and retrieval.scholarly)},
        "artifacts": {
            "final_report": "final_report.json",
            "iterations": "iterations.jsonl",
            "transcript": "transcript.jsonl",
            "trials": "trials.jsonl",
            "archive": "work/archive",
            "retrieval_cache": "retrieval_cache.jsonl",
            "trace_log": "trace_log.jsonl",
        },
    }
    path = Path(run_dir) / MANIFEST
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True), encoding="utf-8")
    return path


def _report_ok(report: dict) -> bool:
    if report.get("best") is None:
        return False
    status = report.get("constraint_status")
    return status is None or bool(status.get("violation_free"))


def cmd_tune(args, environ=None) -> int:
    cfg = apply_flags(cfgmod.load_config(args.config), args)
    run_dir = Path(args.out or "runs/latest")
    run_dir.mkdir(parents=True, exist_ok=True)
    retrieval = build_retrieval(cfg, run_dir / "retrieval_cache.jsonl", environ)
    context = build_context(cfg)
    loop = cfgmod.build_loop(cfg)
    evaluator = cfgmod.build_evaluator(cfg, run_dir / "work")
    backend = build_backend(cfg, environ)
    started = _now()
    write_manifest(run_dir, cfg, backend, started, None, "running", retrieval)
    try:
        report = run_to_completion(loop, context, evaluator, backend, run_dir, retrieval)
    except RunAborted as exc:
        write_manifest(run_dir, cfg, backend, started, _now(), "aborted", retrieval)
        print(f"run aborted: {exc}", file=sys.stderr)
        return 1
    write_manifest(run_dir, cfg, backend, started, _now(), "complete", retrieval)
    best = report.get("best") or {}
    print(f"run directory: {run_dir}")
    print(f"evaluations: {report['evaluations']}  best objective: {best.get('objective')}")
    return 0 if _report_ok(report) else 1


def cmd_report(args) -> int:
    kinds = REPORT_KINDS if args.kind == "all" else (args.kind,)
    for kind in kinds:
        out = Path(args.out) / f"{kind}.csv" if args.out else None
        if out is not None:
            out.parent.mkdir(parents=True, exist_ok=True)
        print(write_report(Path(args.run_dir), kind, out))
    return 0


def cmd_replay(args, environ=None) -> int:
    run_dir = Path(args.run_dir)
    manifest_path = run_dir / MANIFEST
    if not manifest_path.exists():
        raise FlowtuneError(f"{manifest_path} is missing")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    cfg = cfgmod.load_config(text=json.dumps(manifest["config"]))
    out = Path(args.out) if args.out else run_dir / "replay"
    context = build_context(cfg)
    loop = cfgmod.build_loop(cfg)
    evaluator = cfgmod.build_evaluator(cfg, out / "work")
    if cfg.raw["backend"]["kind"] == "scripted":
        backend = build_backend(cfg, environ)
    else:
        backend = LoggedBackend(_Replay(run_dir))
    retrieval = None
    if cfg.raw["retrieval"]["enabled"]:
        # same providers as the logged run so cache keys match; cache_only keeps them offline
        present = manifest.get("retrieval_providers", {})
        retrieval = RetrievalConfig(web=WebSearchProvider("") if present.get("web") else None,
                                    scholarly=ScholarlyProvider() if present.get("scholarly") else None,
                                    budget=cfgmod.retrieval_budget(cfg), cache_only=True,
                                    fetched_since=_dt.datetime.fromisoformat(manifest["started"]).timestamp())
    report = replay_run(run_dir, loop, context, evaluator, backend, retrieval, out)
    logged = json.loads((run_dir / "final_report.json").read_text(encoding="utf-8"))
    same = report["transcript_sha256"] == logged["transcript_sha256"]
    print(f"replay transcript sha256: {report['transcript_sha256']} ({'match' if same else 'MISMATCH'})")
    return 0 if same else 1


def baseline_from_metrics(metrics, platform: str, circuit: str) -> Baseline:
    m = metrics.to_dict()
    missing = [k for k in ("wl", "ecp", "cts_wl", "cts_ecp", "area", "instance_count", "power") if m.get(k) is None]
    if missing:
        raise FlowtuneError(f"baseline run did not report: {', '.join(missing)}")
    pdp = m.get("pdp") or m["power"] * m["ecp"]
    return Baseline(circuit, platform, m["wl"], m["ecp"], m["cts_wl"], m["cts_ecp"], m["area"],
                    m["instance_count"], m["power"], pdp)


def cmd_baseline(args) -> int:
    cfg = apply_flags(cfgmod.load_config(args.config), args)
    profile = cfgmod.baseline(cfg)
    if cfg.raw["evaluator"]["kind"] == "synthetic":
        # the simulator is anchored on the profile, so its default-flow values are the anchors
        baseline = profile
    else:
        out_dir = Path(args.out or "baseline_run")
        evaluator = cfgmod.build_evaluator(cfg, out_dir / "work")
        result = external_prepare_and_invoke(ParamVector({}), evaluator, out_dir / "work" / "baseline", "baseline")
        if result.metrics.status != "complete":
            raise FlowtuneError(f"baseline evaluation {result.metrics.status}: {result.diagnostic}")
        baseline = baseline_from_metrics(result.metrics, profile.platform, profile.circuit)
    text = dump_baselines({(baseline.platform, baseline.circuit): baseline})
    target = Path(args.out) / "baseline.json" if args.out else Path("baseline.json")
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text(text, encoding="utf-8")
    print(target)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flowtune", description="Agentic tuning of physical-design flow parameters.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def run_flags(sp):
        sp.add_argument("--config", type=Path, help="JSON config file")
        sp.add_argument("--backend", choices=("scripted", "http"))
        sp.add_argument("--iters", type=int)
        sp.add_argument("--parallel", type=int)
        sp.add_argument("--timeout", type=float)
        sp.add_argument("--retrieval", choices=("on", "off"))
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")

    run_flags(sub.add_parser("tune", help="run the tuning loop"))
    run_flags(sub.add_parser("baseline", help="write a baseline metrics file"))
    rp = sub.add_parser("report", help="CSV reports from a finished run")
    rp.add_argument("run_dir")
    rp.add_argument("--kind", choices=REPORT_KINDS + ("all",), default="all")
    rp.add_argument("--out")
    rr = sub.add_parser("replay", help="re-drive a logged run from its archives and caches")
    rr.add_argument("run_dir")
    rr.add_argument("--out")
    return p


def main(argv=None, environ=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "tune":
            return cmd_tune(args, environ)
        if args.command == "report":
            return cmd_report(args)
        if args.command == "replay":
            return cmd_replay(args, environ)
        return cmd_baseline(args)
    except (FlowtuneError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
