import time

import pytest

from vopd_lab.verify import run_checks, summary


@pytest.fixture(scope="module")
def default_results():
    start = time.perf_counter()
    results = run_checks(0)
    return results, time.perf_counter() - start


def test_all_pass(default_results):
    results, _ = default_results
    failed = [r.line() for r in results if not r.passed]
    assert not failed, failed
    assert len(results) == 14


def test_fast(default_results):
    assert default_results[1] < 60.0


@pytest.mark.parametrize("seed", [1, 7])
def test_other_seeds(seed):
    assert all(r.passed for r in run_checks(seed))


def test_detach_hook_fails_exactly_gradient_checks():
    failed = {r.name for r in run_checks(0, detach_baseline=False) if not r.passed}
    assert "detach structure" in failed
    assert failed <= {"detach structure", "unbiasedness"}


def test_summary_shape(default_results):
    results, _ = default_results
    data = summary(results, 0)
    assert data["seed"] == 0 and data["passed"] is True
    names = [c["name"] for c in data["checks"]]
    assert len(set(names)) == len(names)


def test_lines_are_single_line(default_results):
    for r in default_results[0]:
        line = r.line()
        assert "\n" not in line and ("PASS" in line or "FAIL" in line)
