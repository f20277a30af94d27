import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from tlsfixtures import build_corpus  # noqa: E402


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """Five OpenSSL sessions, alternating HTTP/1.1 and HTTP/2."""
    return build_corpus(tmp_path_factory.mktemp("small"), 5, seed=11)


@pytest.fixture(scope="session")
def one_session(tmp_path_factory):
    return build_corpus(tmp_path_factory.mktemp("one"), 1, seed=5, http2=False)


@pytest.fixture(scope="session")
def pki(tmp_path_factory):
    from tlsfixtures import make_pki

    return make_pki(tmp_path_factory.mktemp("pki"))


@pytest.fixture(scope="session")
def rogue_pki(tmp_path_factory):
    """A second, unrelated CA."""
    from tlsfixtures import make_pki

    return make_pki(tmp_path_factory.mktemp("rogue"))


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion(request):
    """Context manager recording one PASS/FAIL line for an acceptance criterion."""
    import contextlib
    import time

    @contextlib.contextmanager
    def record(label: str):
        detail: dict[str, str] = {}
        start = time.perf_counter()
        try:
            yield detail
        except BaseException as exc:
            extra = f" ({type(exc).__name__}: {str(exc).splitlines()[0][:120] if str(exc) else ''})"
            line = f"FAIL  {label}{extra}"
            ACCEPTANCE_LINES.append(line)
            print(line)
            raise
        elapsed = time.perf_counter() - start
        info = ", ".join(f"{k}={v}" for k, v in detail.items())
        line = f"PASS  {label} [{elapsed:.2f}s{', ' + info if info else ''}]"
        ACCEPTANCE_LINES.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
