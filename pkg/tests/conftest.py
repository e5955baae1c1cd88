import numpy as np
import pytest

from isokann.model import ChiModel


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def linear_model(w, b=0.0):
    """1D model with no hidden layer: sigmoid(w x + b)."""
    return ChiModel((1, 1), [np.array([[float(w)]])], [np.array([float(b)])])


# ---- acceptance summary: one PASS/FAIL line per criterion, printed at the end of the run

ACCEPTANCE_LINES = []


class criterion:
    """Context manager that records a PASS/FAIL line for an acceptance criterion."""

    def __init__(self, number, title):
        self.number, self.title = number, title
        self.details = []

    def note(self, text):
        self.details.append(text)

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        status = "PASS" if exc_type is None else "FAIL"
        detail = "; ".join(self.details)
        if exc_type is not None:
            first = str(exc).strip().splitlines()[0] if str(exc).strip() else exc_type.__name__
            detail = f"{detail}; {first}" if detail else first
        line = f"criterion {self.number} [{status}] {self.title}: {detail}"
        ACCEPTANCE_LINES.append((self.number, line))
        print(line)
        return False


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
