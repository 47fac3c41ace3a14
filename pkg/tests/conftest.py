import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from stepseg.core import Dataset, TaskDefinition, VideoInstance  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_dataset():
    task = TaskDefinition("t", ("A", "B"))
    r = np.random.default_rng(0)
    videos = [
        VideoInstance("v0", "t", r.normal(size=(8, 3)), reference=((0, 2, 5), (1, 5, 7)), narration={0: ((1, 6),)}),
        VideoInstance("v1", "t", r.normal(size=(6, 3)), reference=((0, 0, 2), (1, 3, 6))),
    ]
    return Dataset((task,), tuple(videos))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.RESULTS, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
