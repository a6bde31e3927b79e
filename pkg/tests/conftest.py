import pytest
import torch
from hypothesis import settings

settings.register_profile("pkg", deadline=None, max_examples=25, derandomize=True)
settings.load_profile("pkg")


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


@pytest.fixture
def tiny_config():
    from uhdpromer.model import ModelConfig

    return ModelConfig(channels=4, blocks=2, heads=2, shuffle=2)


def pytest_terminal_summary(terminalreporter):
    """Print one PASS/FAIL line per acceptance criterion, even without ``-s``."""
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
