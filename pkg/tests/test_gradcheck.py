"""Finite-difference agreement for every operator and the end-to-end net."""

import pytest

from microct_seg.gradcheck import THRESHOLD, run_suite


@pytest.fixture(scope="module")
def suite():
    return run_suite(seed=0)


def test_every_operator_below_threshold(suite):
    for result in suite:
        assert result.max_rel_err < THRESHOLD, (
            f"{result.name}: {result.max_rel_err:.3e} >= {THRESHOLD}")


def test_end_to_end_network_within_module_tolerance(suite):
    fcn = [r for r in suite if r.name == "fcn_end_to_end"]
    assert len(fcn) == 1
    assert fcn[0].max_rel_err < 1e-3


def test_suite_covers_all_operators(suite):
    names = {r.name for r in suite}
    for op in ("conv2d", "batchnorm2d_train", "batchnorm2d_eval", "relu",
               "maxpool2d", "bilinear_upsample", "dropout", "add", "mul",
               "sum", "bce_with_logits", "fcn_end_to_end"):
        assert any(op in n for n in names), f"no check covering {op}"


def test_rerun_is_deterministic(suite):
    again = run_suite(seed=0)
    assert [(r.name, r.max_rel_err) for r in suite] == \
           [(r.name, r.max_rel_err) for r in again]
