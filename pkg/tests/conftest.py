import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def criterion(request):
    """Attach a one-line measurement summary to an acceptance test."""

    def note(name: str, detail: str) -> None:
        request.node.user_properties.append(("criterion", f"{name}: {detail}"))
        print(f"{name}: {detail}")

    return note


def pytest_terminal_summary(terminalreporter):
    lines = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            if "test_acceptance" not in getattr(rep, "nodeid", "") or rep.when not in ("call", "setup"):
                continue
            if rep.when == "setup" and outcome == "passed":
                continue
            notes = [v for k, v in rep.user_properties if k == "criterion"]
            name = rep.nodeid.split("::")[-1]
            lines.append((name, outcome, notes))
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome, notes in sorted(lines):
        tag = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"[{tag}] {name} | {'; '.join(notes) or 'no measurement recorded'}")
