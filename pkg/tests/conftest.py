"""Shared fixtures and the acceptance summary printed at the end of a run."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parents[1]
N_CRITERIA = 11
_VERDICTS: dict[int, tuple[bool, str]] = {}
_ACCEPTANCE_RAN = []


def record_verdict(n: int, ok: bool, detail: str) -> None:
    _VERDICTS[n] = (bool(ok), detail)
    _ACCEPTANCE_RAN.append(n)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def verdict():
    return record_verdict


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _ACCEPTANCE_RAN:
        return
    scale = os.environ.get("MDNKIT_SCALE", "desk")
    tr = terminalreporter
    tr.section(f"acceptance criteria ({scale} scale)")
    lines = []
    for n in range(1, N_CRITERIA + 1):
        if n in _VERDICTS:
            ok, detail = _VERDICTS[n]
            lines.append(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        elif any(True for _ in _ACCEPTANCE_RAN):
            lines.append(f"criterion {n:2d}: NOT RUN")
    for line in lines:
        tr.write_line(line)
    out = ROOT / ".acceptance_cache" / scale
    out.mkdir(parents=True, exist_ok=True)
    (out / "summary.txt").write_text("\n".join(lines) + "\n")
