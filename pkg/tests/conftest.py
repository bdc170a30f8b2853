import pytest

from artda.data import DatasetSpec, prepare_task


@pytest.fixture(scope="session")
def small_task():
    """3 classes of 16x16 glyphs: fast enough for many short training runs."""
    spec = DatasetSpec(num_classes=3, samples_per_class=40, image_size=16,
                       sources=("A", "C", "D"), target="B")
    return prepare_task(spec)


VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    """Record one pass/fail line for an acceptance criterion, then assert it."""

    def record(number: int, ok: bool, detail: str) -> None:
        VERDICTS.append(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail

    return record


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS):
            terminalreporter.write_line(line)
