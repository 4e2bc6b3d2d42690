from __future__ import annotations

import pytest

from rdmasim.harness import calibrate_large
from rdmasim.presets import preset

ACCEPTANCE = "test_acceptance.py"


@pytest.fixture(scope="session")
def large_cluster() -> int:
    """Calibrated large-burst cluster size for the fig2 preset."""
    return calibrate_large(preset("fig2")).cluster_size


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            if ACCEPTANCE in rep.nodeid and rep.when == "call" or (outcome == "error" and ACCEPTANCE in rep.nodeid):
                name = rep.nodeid.split("::")[-1]
                detail = [ln for ln in rep.capstdout.splitlines() if ln.startswith("criterion ")]
                lines.append((name, "PASS" if outcome == "passed" else "FAIL", detail))
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for name, verdict, detail in sorted(lines):
        terminalreporter.write_line(f"{verdict}  {name}")
        for ln in detail:
            terminalreporter.write_line(f"      {ln}")
