"""The ten acceptance criteria at their required tolerances.

Each result line is collected and printed in the terminal summary.
"""

from __future__ import annotations

import pytest

from mfcsolve.acceptance import CRITERIA, run_criterion

LINES: list[str] = []


@pytest.mark.slow
@pytest.mark.parametrize("number", sorted(CRITERIA))
def test_criterion(number):
    res = run_criterion(number)
    LINES.append(res.line())
    print(res.line())
    assert res.passed, res.line()
