import pytest
from hypothesis import HealthCheck, settings

from upcyclelab.config import toy_config
from upcyclelab.model import init_dense
from upcyclelab.numerics import RngStream

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return RngStream(1234)


@pytest.fixture(scope="session")
def toy_dense():
    return init_dense(toy_config(), RngStream(7))


@pytest.fixture(scope="session")
def tiny_cfg():
    return toy_config(d_model=16, n_layers=2, n_heads=4, n_kv_heads=2, ffn_hidden=24, vocab_size=32,
                      max_seq_len=16)


ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def acceptance():
    """Record one verdict line per acceptance criterion; returns the verdict."""

    def record(number: int, checks: dict[str, bool], detail: str = "") -> bool:
        ok = all(checks.values())
        failed = [name for name, good in checks.items() if not good]
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}"
        if failed:
            line += f" [failed: {', '.join(failed)}]"
        if detail:
            line += f" {detail}"
        ACCEPTANCE_LINES[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
