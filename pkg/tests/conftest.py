import csv
from pathlib import Path

import numpy as np
import pytest

from riskforge.cohort import load_dictionary
from riskforge.ehr_store import TABLE_HEADERS, load_repository, table_paths_in


def write_tables(directory, **tables):
    """Write the six tables (headers always present) from lists of row tuples."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, header in TABLE_HEADERS.items():
        with open(directory / f"{name}.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in tables.get(name, ()):
                w.writerow(["" if v is None else v for v in row])
    return table_paths_in(directory)


@pytest.fixture
def make_repo(tmp_path):
    counter = {"n": 0}

    def build(**tables):
        counter["n"] += 1
        return load_repository(write_tables(tmp_path / f"repo{counter['n']}", **tables))

    return build


@pytest.fixture(scope="session")
def dictionary():
    return load_dictionary()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance criteria report one line each in the terminal summary
ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def report_criterion():
    def record(number: int, passed: bool, detail: str) -> bool:
        line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES[number] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
