"""Acceptance criteria at full scale, one test per criterion.

Each test prints ``criterion N <name>: PASS|FAIL`` plus its key measurements,
and the session summary repeats the verdict lines. The whole set takes about
six minutes on one core; ``LDCONTROL_ACCEPTANCE_PROFILE=quick`` shrinks the
sample sizes for a smoke run (some statistical criteria are expected to fail
at that size).
"""

import json
import os

import pytest

from ldcontrol import acceptance

PROFILE = os.environ.get("LDCONTROL_ACCEPTANCE_PROFILE", "full")

pytestmark = pytest.mark.acceptance


@pytest.fixture(scope="module", autouse=True)
def _fresh_cache():
    acceptance._cache.clear()
    yield
    acceptance._cache.clear()


@pytest.mark.parametrize("cid", sorted(acceptance.CRITERIA))
def test_criterion(cid, record_property):
    res = acceptance.CRITERIA[cid](PROFILE, 0)
    verdict = "PASS" if res["pass"] else "FAIL"
    line = f"criterion {cid:>2} {res['name']}: {verdict}"
    record_property("acceptance_line", line)
    print("\n" + line)
    print(f"  threshold: {res['threshold']}")
    measured = {k: v for k, v in res.items() if k not in ("id", "name", "pass", "threshold")}
    print("  " + json.dumps(measured, default=float, sort_keys=True)[:800])
    assert res["pass"], res
