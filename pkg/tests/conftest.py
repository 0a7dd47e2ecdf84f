import math

import pytest


def t3_cdf(x: float) -> float:
    """Closed-form CDF of the Student t with 3 degrees of freedom."""
    u = x / math.sqrt(3.0)
    return 0.5 + (u / (1.0 + u * u) + math.atan(u)) / math.pi


def t3_quantile(p: float) -> float:
    # plain bisection on the closed-form CDF, independent of scipy's ppf
    lo, hi = -1e3, 1e3
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if t3_cdf(mid) < p:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@pytest.fixture
def t3q():
    return t3_quantile


# acceptance lines collected during the session and echoed in the summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
