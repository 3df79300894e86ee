"""Every registered differentiable op passes finite-difference checking."""

import numpy as np
import pytest

from vqseg.gradcheck import OP_CHECKS, fd_check, run_op_checks
from vqseg.rng import CounterRng


@pytest.mark.parametrize("check", OP_CHECKS, ids=lambda c: c.name)
def test_op_passes_fd_on_random_inputs(check):
    # 16 instances per op, eps 1e-4, double precision: < 1e-5 required
    worst = 0.0
    for i in range(16):
        rng = CounterRng(2024 + i, counter=i * 7919)
        f, x = check.build(rng)
        worst = max(worst, fd_check(f, x, eps=1e-4))
    assert worst < 1e-5, f"{check.name}: max relative error {worst}"


def test_run_op_checks_reports_all_ops():
    report = run_op_checks(instances=2, seed=3)
    assert set(report) == {c.name for c in OP_CHECKS}
    assert all(v < 1e-5 for v in report.values())


def test_run_op_checks_deterministic():
    a = run_op_checks(instances=2, seed=5)
    b = run_op_checks(instances=2, seed=5)
    assert a == b
