import numpy as np
import pytest

from oxygan.networks import NetworkConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_net_cfg():
    # smallest config the discriminator arithmetic allows
    return NetworkConfig(image_size=32, base_filters=4)


ACCEPTANCE_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_KEY] = []


@pytest.fixture
def acceptance_log(request):
    """Append (criterion, passed, detail); lines are echoed live and summarized at the end."""
    lines = request.config.stash[ACCEPTANCE_KEY]
    capman = request.config.pluginmanager.getplugin("capturemanager")

    def record(criterion: int, passed: bool, detail: str) -> bool:
        line = f"criterion {criterion}: {'PASS' if passed else 'FAIL'} ({detail})"
        lines.append((criterion, line))
        with capman.global_and_fixture_disabled():
            print(f"\n[acceptance] {line}", flush=True)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
