import pytest
import torch

torch.set_num_threads(1)

VERDICTS: list[str] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training checks")


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)


@pytest.fixture
def verdict():
    """Record one PASS/FAIL/SKIP line per criterion; returns the pass flag for asserting."""
    def record(label, ok, detail=""):
        status = "SKIP" if ok is None else ("PASS" if ok else "FAIL")
        line = f"criterion {label}: {status}  {detail}".rstrip()
        VERDICTS.append(line)
        print(line)
        return ok
    return record


@pytest.fixture
def tmp_out(tmp_path, monkeypatch):
    monkeypatch.setenv("SDFCOMPLETE_OUT", str(tmp_path / "runs"))
    return tmp_path
