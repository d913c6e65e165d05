import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    """One pass/fail line per acceptance criterion."""
    lines = []
    for status in ("passed", "failed"):
        for rep in terminalreporter.stats.get(status, []):
            props = dict(getattr(rep, "user_properties", []))
            if rep.when == "call" and "criterion" in props:
                lines.append((props["criterion"], status.upper(), props.get("detail", "")))
    if lines:
        terminalreporter.section("acceptance criteria")
        for name, status, detail in sorted(lines, key=lambda x: int(x[0].split()[0])):
            terminalreporter.write_line(f"criterion {name}: {'PASS' if status == 'PASSED' else 'FAIL'} {detail}".rstrip())
