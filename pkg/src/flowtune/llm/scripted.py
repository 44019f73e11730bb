"""Network-free backend with a fixed, data-driven decision policy.

It reads only the conversation: the ``<task_spec>`` block of the system
message, the ``<stage>`` block of the latest user message and the tool
results that followed it. Circuit and platform names are never consulted.
"""

from __future__ import annotations

import hashlib
import json
import re

import numpy as np

from .adapter import CompletionRequest, CompletionResult, ToolCall

_BLOCK = {tag: re.compile(rf"<{tag}>(.*?)</{tag}>", re.DOTALL) for tag in ("task_spec", "stage", "data")}


def extract_block(text: str, tag: str):
    m = _BLOCK[tag].search(text or "")
    return json.loads(m.group(1)) if m else None


class ScriptedBackend:
    emits_reasoning = False
    model_id = "scripted-policy-v1"

    def __init__(self, kernel: str = "matern52", n_candidates: int = 200, selector: str = "entropy_select",
                 search_iterations: int = 2):
        self.kernel = kernel
        self.n_candidates = n_candidates
        self.selector = selector
        self.search_iterations = search_iterations
        self.calls = 0

    # -- conversation parsing ---------------------------------------------
    @staticmethod
    def _task(request: CompletionRequest) -> dict:
        for m in request.messages:
            if m["role"] == "system":
                spec = extract_block(m["content"], "task_spec")
                if spec is not None:
                    return spec
        raise ValueError("system prompt lacks a task_spec block")

    @staticmethod
    def _stage(request: CompletionRequest) -> tuple[dict, str, list]:
        """Latest stage block, its raw user text, and the (name, result) tool exchanges after it."""
        msgs = list(request.messages)
        last_user = max(i for i, m in enumerate(msgs) if m["role"] == "user"
                        and extract_block(m["content"], "stage") is not None)
        stage = extract_block(msgs[last_user]["content"], "stage")
        names = {}
        done = []
        for m in msgs[last_user + 1:]:
            if m["role"] == "assistant":
                for tc in m.get("tool_calls") or []:
                    names[tc["id"]] = tc["function"]["name"]
            elif m["role"] == "tool":
                done.append((names.get(m["tool_call_id"], ""), json.loads(m["content"])))
        return stage, msgs[last_user]["content"], done

    def _call(self, name: str, args: dict, turn: int) -> CompletionResult:
        return CompletionResult("", [ToolCall(f"call_{turn}_{name}", name, args)], model=self.model_id)

    def _say(self, obj) -> CompletionResult:
        text = obj if isinstance(obj, str) else json.dumps(obj, sort_keys=True)
        return CompletionResult(text, [], model=self.model_id)

    # -- policy -------------------------------------------------------------
    def complete(self, request: CompletionRequest) -> CompletionResult:
        self.calls += 1
        task = self._task(request)
        stage, user_text, done = self._stage(request)
        tools = {t.name for t in request.tools}
        name = stage["stage"]
        if name == "INSPECT":
            return self._inspect(task, stage, done, tools)
        if name == "OPTIMIZE":
            if task.get("mode") == "no_tools":
                return self._no_tool_proposals(task, stage, user_text)
            return self._optimize(task, stage, done, tools)
        if name == "AGGLOMERATE":
            return self._agglomerate(task, stage, done)
        raise ValueError(f"unknown stage {name!r}")

    def _inspect(self, task, stage, done, tools) -> CompletionResult:
        called = [n for n, _ in done]
        if stage["n_rows"] >= 3 and "inspect_distribution" in tools and "inspect_distribution" not in called:
            return self._call("inspect_distribution", {"data": "ARR"}, len(done))
        if ("web_search" in tools and "web_search" not in called and stage["iteration"] <= self.search_iterations):
            names = [p["name"].replace("_", " ") for p in task["parameters"]]
            query = "placement and routing tuning guidance for " + ", ".join(names)
            return self._call("web_search", {"query": query, "top_k": 3}, len(done))
        note = "no data yet"
        for n, res in done:
            if n == "inspect_distribution" and res.get("input_target_kendall"):
                k = np.abs(np.array(res["input_target_kendall"], dtype=float))
                j = int(np.argmax(k))
                note = f"strongest rank association: {task['parameters'][j]['name']} ({k[j]:.2f})"
        return self._say(note)

    def _optimize(self, task, stage, done, tools) -> CompletionResult:
        k = task["K"]
        last = dict(done)
        errors = [n for n, r in done if "error" in r]
        if stage["n_routed_rows"] < 3 or errors:
            if "latin_hypercube" in last and "error" not in last["latin_hypercube"]:
                return self._say({"candidate_pool": last["latin_hypercube"]["pool"]})
            return self._call("latin_hypercube", {"n_points": k}, len(done))
        data = "ARR"
        if stage["n_surrogate_rows"] > 0:
            if "handle_surrogate" not in last:
                return self._call("handle_surrogate", {"data": "ARR"}, len(done))
            data = last["handle_surrogate"]["data"]
        if "create_model" not in last:
            return self._call("create_model", {"data": data, "kernel": self.kernel, "noise_level": 0.001},
                              len(done))
        if "propose_candidates" not in last:
            return self._call("propose_candidates",
                              {"model": last["create_model"]["model"], "n_candidates": self.n_candidates},
                              len(done))
        return self._say({"candidate_pool": last["propose_candidates"]["pool"]})

    def _agglomerate(self, task, stage, done) -> CompletionResult:
        last = dict(done)
        if self.selector not in last:
            return self._call(self.selector, {"pool": stage["pool"], "n_points": task["K"]}, len(done))
        res = last[self.selector]
        if "error" in res:
            return self._say({"proposals": []})
        return self._say({"proposals": res["proposals"]})

    def _no_tool_proposals(self, task, stage, user_text) -> CompletionResult:
        """Perturb the best in-context rows; Latin-hypercube style spread on cold start."""
        data = extract_block(user_text, "data") or {"rows": []}
        params = task["parameters"]
        k = task["K"]
        seed = int.from_bytes(hashlib.sha256(user_text.encode()).digest()[:4], "little")
        rng = np.random.default_rng(seed)
        rows = sorted(data["rows"], key=lambda r: r["loss"])
        out = []
        for i in range(k):
            if rows:
                base = rows[i % min(len(rows), 5)]
                rec = {}
                for p in params:
                    lo, hi = p["min"], p["max"]
                    v = base[p["name"]] + rng.normal(0.0, 0.08) * (hi - lo)
                    rec[p["name"]] = _snap(p, min(max(v, lo), hi))
            else:
                rec = {p["name"]: _snap(p, p["min"] + (i + rng.random()) / k * (p["max"] - p["min"])) for p in params}
            out.append(rec)
        return self._say({"proposals": out})


def _snap(p: dict, v: float):
    if p["kind"] == "continuous":
        s = p.get("grid_scale", 1)
        return float(min(max(np.floor(v * s + 0.5) / s, p["min"]), p["max"]))
    return int(min(max(np.floor(v + 0.5), p["min"]), p["max"]))
