from __future__ import annotations

import pytest
from hypothesis import HealthCheck, settings

from vars_ecg.signal import EcgRecord, default_synth_spec, synth_generate

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# (id, title, passed, detail) rows collected by the acceptance tests
ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


@pytest.fixture
def acceptance():
    def record(idx: int, title: str, passed: bool, detail: str) -> None:
        ACCEPTANCE[idx] = (title, bool(passed), detail)
        print(f"[{idx}] {'PASS' if passed else 'FAIL'} {title}: {detail}")
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for idx in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[idx]
        terminalreporter.write_line(f"[{idx:>2}] {'PASS' if ok else 'FAIL'}  {title}: {detail}")


@pytest.fixture(scope="session")
def tiny_dataset() -> list[EcgRecord]:
    """Twelve short synthetic records, four per class."""
    spec = default_synth_spec(4)
    return synth_generate(spec, seed=11)


@pytest.fixture(scope="session")
def e2e():
    """The desk-scale run: 600 synthetic records, 70/30 split, default config."""
    from e2e_run import run_end_to_end
    return run_end_to_end()
