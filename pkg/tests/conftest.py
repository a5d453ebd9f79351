import os
from pathlib import Path

import numpy as np
import pytest

ML100K_CANDIDATES = [
    os.environ.get("SECEMB_ML100K", ""),
    "/root/data/ml-100k/u.data",
    str(Path(__file__).resolve().parents[1] / "data" / "ml-100k" / "u.data"),
]


def ml100k_path() -> Path | None:
    for c in ML100K_CANDIDATES:
        if c and Path(c).is_file():
            return Path(c)
    return None


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def ml100k():
    path = ml100k_path()
    if path is None:
        pytest.skip("MovieLens 100K u.data not found (set SECEMB_ML100K)")
    return path


@pytest.fixture(scope="session")
def ml100k_required():
    """Like ``ml100k`` but a missing file fails the test instead of skipping it."""
    path = ml100k_path()
    if path is None:
        pytest.fail("MovieLens 100K u.data not found (set SECEMB_ML100K)")
    return path


def pytest_configure(config):
    config._secemb_verdicts = []


@pytest.fixture
def verdict(request):
    """Record and print one PASS/FAIL line per acceptance criterion; returns ``ok``."""

    def report(k: int, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'} criterion {k}: {detail}"
        request.config._secemb_verdicts.append(line)
        print(line)
        return ok

    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_secemb_verdicts", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
