"""The fifteen primary acceptance criteria at full scale, one test each.

Each test prints a PASS/FAIL line; the lines are repeated in the terminal
summary.  Checks run on one shared context so the big path batches are
simulated once.
"""

import json
import os

import pytest

from conftest import ACCEPTANCE_LINES
from wickmart.verify import CHECKS, Context, run_check

pytestmark = pytest.mark.slow


@pytest.fixture(scope="module")
def ctx():
    return Context(seed=0, scale=1.0, threads=os.cpu_count() or 1)


@pytest.mark.parametrize("fn", CHECKS, ids=[f"{i:02d}-{fn.__name__[6:]}" for i, fn in enumerate(CHECKS, 1)])
def test_criterion(ctx, fn):
    res = run_check(fn, ctx)
    ACCEPTANCE_LINES.append(res.line())
    print(res.line())
    print(json.dumps(res.to_json()["detail"], sort_keys=True)[:4000])
    assert res.passed, res.line()
