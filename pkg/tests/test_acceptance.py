"""Full-scale certification gate.

Each test runs one check from the certification suite at its default scale
and prints a single verdict line before asserting, so a red run still shows
every measured detail.  The losslessness test also runs the corrupted-
verification negative control, which must fail.
"""

from specdiff import certify


def _report(res) -> None:
    print(f"[{'PASS' if res.passed else 'FAIL'}] {res.name}: {res.detail}")


def test_rmc_unbiasedness():
    res = certify.check_rmc_unbiasedness()
    _report(res)
    assert res.passed


def test_maximal_coupling_law():
    res = certify.check_coupling_law()
    _report(res)
    assert res.passed


def test_losslessness_with_negative_control():
    res = certify.check_losslessness()
    _report(res)
    assert res.passed
    control = certify.check_losslessness(sabotage=True)
    _report(control)
    # corrupted verification must be caught at full sample size
    assert not control.passed


def test_oracle_identity():
    res = certify.check_oracle_identity()
    _report(res)
    assert res.passed


def test_relaxation_reduction():
    res = certify.check_relaxation()
    _report(res)
    assert res.passed


def test_uncertainty_trend():
    res = certify.check_uncertainty_trend()
    _report(res)
    assert res.passed


def test_gradient_certification():
    res = certify.check_gradients()
    _report(res)
    assert res.passed


def test_epsilon_law():
    res = certify.check_epsilon_law()
    _report(res)
    assert res.passed


def test_efficiency_bound():
    res = certify.check_efficiency_bound()
    _report(res)
    assert res.passed
