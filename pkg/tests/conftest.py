import json
from pathlib import Path

import numpy as np
import pytest

from flowtune.cli import main
from flowtune.metrics import Objective, get_baseline
from flowtune.params import build_preset_space


@pytest.fixture
def ibex():
    return get_baseline("ASAP7", "IBEX")


@pytest.fixture
def four(ibex):
    return build_preset_space("four_param", ibex.ecp_alpha)


@pytest.fixture
def co_opt(ibex):
    return Objective.co_optimize(ibex)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def write_config(path: Path, **sections) -> Path:
    path.write_text(json.dumps(sections, indent=1), encoding="utf-8")
    return path


def tune(tmp: Path, name: str, config: dict | None = None, extra=(), environ=None) -> tuple[int, Path]:
    """Run the CLI tune command into ``tmp/name``; returns (exit status, run dir)."""
    cfg = write_config(tmp / f"{name}.json", **(config or {}))
    out = tmp / name
    rc = main(["tune", "--config", str(cfg), "--out", str(out), *extra], environ=environ or {})
    return rc, out


def read_jsonl(path: Path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]


_ACCEPTANCE = []


@pytest.fixture
def criterion(request):
    """Records one pass/fail line per acceptance criterion; a test that errors first records a failure."""
    cid = request.node.name.split("_")[1].upper()
    seen = []

    def check(ok: bool, detail: str) -> bool:
        line = f"{cid:<4} {'PASS' if ok else 'FAIL'}  {detail}"
        seen.append(line)
        _ACCEPTANCE.append(line)
        print(line)
        return ok

    yield check
    if not seen:
        _ACCEPTANCE.append(f"{cid:<4} FAIL  raised before its check completed")


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s[1:4].strip())):
            terminalreporter.write_line(line)
