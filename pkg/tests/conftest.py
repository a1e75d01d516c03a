import re

import numpy as np
import pytest

from latephase.numerics import RngStream

_CRITERIA = []


def record_criterion(number, name, passed, detail=""):
    _CRITERIA.append((number, name, bool(passed), detail))


@pytest.fixture
def criterion():
    return record_criterion


@pytest.fixture
def rng():
    return RngStream(1234, 0)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    key = lambda c: (int(re.match(r"\d+", str(c[0])).group()), str(c[0]))
    for number, name, passed, detail in sorted(_CRITERIA, key=key):
        status = "PASS" if passed else "FAIL"
        line = f"[{status}] criterion {number}: {name}"
        if detail:
            line += f" -- {detail}"
        terminalreporter.write_line(line)


def random_spd(gen, n, low=0.5, high=1.5):
    q, _ = np.linalg.qr(gen.standard_normal((n, n)))
    return (q * gen.uniform(low, high, n)) @ q.T


def random_psd(gen, n):
    a = gen.standard_normal((n, n))
    return a @ a.T / n
