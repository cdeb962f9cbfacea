from __future__ import annotations

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", max_examples=200, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture(scope="session")
def benchmark_scenes():
    from zigzag.synthetic import generate_benchmark

    return generate_benchmark()


@pytest.fixture(scope="session")
def benchmark_dataset(benchmark_scenes):
    from zigzag.pipeline import dataset_from_scenes

    return dataset_from_scenes(benchmark_scenes)


# acceptance verdicts, printed once at the end of the session
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def verdict():
    def record(criterion: int, ok: bool, detail: str) -> bool:
        ACCEPTANCE[criterion] = (bool(ok), detail)
        print(f"criterion {criterion}: {'PASS' if ok else 'FAIL'} ({detail})")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} ({detail})")
