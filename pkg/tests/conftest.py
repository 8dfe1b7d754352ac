import copy

import pytest

from diversefl.config import parse_config

TINY = {
    "dataset": {"kind": "synthetic", "num_classes": 4, "input_dim": 12, "train_per_class": 60,
                "test_per_class": 20, "spread": 0.25, "mean_scale": 0.6, "seed": 3},
    "num_clients": 6,
    "rounds": 5,
    "lr": {"initial": 0.1},
    "sample_rate": 0.2,
    "model": {"hidden": [8]},
    "seed": 11,
}


def tiny_raw(**overrides):
    raw = copy.deepcopy(TINY)
    for key, value in overrides.items():
        raw[key] = value
    return raw


def tiny_config(**overrides):
    return parse_config(tiny_raw(**overrides))


@pytest.fixture
def tiny():
    return tiny_config


_REPORT = []


@pytest.fixture
def report(capsys):
    """Print one acceptance line immediately and again in the final summary."""
    def emit(number, passed, detail):
        line = f"[criterion {number:>2}] {'PASS' if passed else 'FAIL'}  {detail}"
        _REPORT.append(line)
        with capsys.disabled():
            print("\n" + line, flush=True)
        return passed
    return emit


def pytest_terminal_summary(terminalreporter):
    if _REPORT:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_REPORT, key=lambda s: int(s.split("]")[0].split()[-1])):
            terminalreporter.write_line(line)
