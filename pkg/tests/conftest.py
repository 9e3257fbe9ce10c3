import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from slicemoe.config import SliceMoEConfig

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


def pytest_configure(config):
    config._acceptance_lines = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)


@pytest.fixture
def report(request):
    """Record a one-line pass/fail verdict for the acceptance summary."""

    def _report(number: int, title: str, passed: bool, detail: str = "") -> None:
        line = f"[criterion {number:2d}] {'PASS' if passed else 'FAIL'} {title}"
        if detail:
            line += f" :: {detail}"
        print(line)
        request.config._acceptance_lines.append(line)

    return _report


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    return SliceMoEConfig(d=8, n_slices=2, top_k=2, n_experts=3, router_hidden=6, expert_hidden=8)
