import inspect

import numpy as np

from stage_world import numerics as nx
from stage_world.gradcheck import OP_CHECKS, STEP, OpCheck, check_op, run_gradchecks


def _broken_double(a: nx.Tensor) -> nx.Tensor:
    # forward doubles, backward forgets the factor
    return nx._emit("broken", a.data * 2.0, (a,), lambda g: (g,))


def _broken_build(rng):
    store = nx.ParamStore()
    store.add("x", rng.normal(0.0, 1.0, (3, 4)))
    return (lambda: nx.sum_all(_broken_double(store["x"]))), store


def test_every_op_matches_finite_differences():
    report = run_gradchecks()
    assert len(report.results) == len(OP_CHECKS)
    assert report.passed, report.failures()
    assert all(np.isfinite(result.max_rel_err) for result in report.results)


def test_broken_gradient_is_caught():
    checks = [OpCheck("broken", _broken_build), *[c for c in OP_CHECKS if c.name == "add"]]
    report = run_gradchecks(checks)
    assert not report.passed
    assert report.failures() == ["broken"]
    assert report.results[0].max_rel_err > 0.4


def test_only_filters_checks_and_dataframe_columns():
    report = run_gradchecks(only=["matmul", "dct2"])
    frame = report.to_dataframe()
    assert list(frame.columns) == ["op", "max_rel_err", "worst_param", "passed"]
    assert list(frame["op"]) == ["matmul", "dct2"]
    assert frame["passed"].all()


def test_difference_step_matches_numerics_default():
    default_h = inspect.signature(nx.finite_difference_check).parameters["h"].default
    assert STEP == default_h == 1e-3
    assert inspect.signature(check_op).parameters["h"].default == 1e-3
