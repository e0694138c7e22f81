import numpy as np
import pytest

from fsct.episodes import SplitDataset


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def gaussian_pool(rng, categories=5, per_category=6, dim=8, prefix="c"):
    return {f"{prefix}{i:02d}": rng.standard_normal((per_category, dim)) for i in range(categories)}


@pytest.fixture
def small_dataset(rng):
    return SplitDataset(
        train=gaussian_pool(rng, 8, 6, 8, "tr"),
        val=gaussian_pool(rng, 5, 6, 8, "va"),
        test=gaussian_pool(rng, 5, 6, 8, "te"),
    )


ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
