import numpy as np
import pytest

from numsens.errors import ContractViolationError
from numsens.risktol import (
    gkw_decompose,
    hessian_from_gkw,
    recovery_residual,
    risk_tolerance,
    risk_tolerance_measure,
)
from numsens.sensitivity import expansion_report
from numsens.solver import solve_pair


def test_power_closed_form(asym, halfpow):
    opt = solve_pair(asym, halfpow, 1.0, 0.0)
    rt = risk_tolerance(asym, halfpow, 1.0, optimum=opt)
    assert rt.exists
    assert rt.initial == pytest.approx(1.0 / (1.0 - 0.5), rel=1e-10)
    assert np.allclose(rt.process.values,
                       opt.primal.wealth.values / 0.5, rtol=1e-10)
    assert np.all(rt.process.values > 0.0)
    # terminal replication is leafwise exact
    assert np.allclose(rt.process.terminal, rt.payoff, atol=1e-12)


def test_log_closed_form(t1, logu):
    opt = solve_pair(t1, logu, 2.0, 0.0)
    rt = risk_tolerance(t1, logu, 2.0, optimum=opt)
    assert rt.exists
    assert rt.initial == pytest.approx(2.0, rel=1e-12)
    assert np.allclose(rt.process.values, opt.primal.wealth.values, rtol=1e-12)


def test_mixture_not_replicable(asym, mix):
    rt = risk_tolerance(asym, mix, 1.0)
    assert not rt.exists
    assert rt.certificate > 1e-4
    assert rt.process is None
    with pytest.raises(ContractViolationError):
        gkw_decompose(asym, mix, 1.0, rt)


def test_measures_coincide_for_power_and_log(asym, t1, halfpow, logu):
    for m, u in ((asym, halfpow), (t1, logu)):
        opt = solve_pair(m, u, 1.0, 0.0)
        rt = risk_tolerance(m, u, 1.0, optimum=opt)
        w = risk_tolerance_measure(m, 1.0, rt, opt)
        assert np.allclose(w, opt.r_weights, atol=1e-12)
        assert w.sum() == pytest.approx(1.0, abs=1e-12)


def test_gkw_trivial_for_bank_direction(bank_dir, halfpow):
    opt = solve_pair(bank_dir, halfpow, 1.0, 0.0)
    rt = risk_tolerance(bank_dir, halfpow, 1.0, optimum=opt)
    dec = gkw_decompose(bank_dir, halfpow, 1.0, rt, optimum=opt)
    assert np.all(dec.P.values == 0.0)
    assert dec.P0 == 0.0
    assert np.max(np.abs(dec.M_component.values)) == 0.0
    assert np.max(np.abs(dec.N_component.values)) == 0.0


def test_gkw_trivial_for_log(asym, logu):
    # unit risk aversion kills the target payoff regardless of the direction
    opt = solve_pair(asym, logu, 1.0, 0.0)
    rt = risk_tolerance(asym, logu, 1.0, optimum=opt)
    dec = gkw_decompose(asym, logu, 1.0, rt, optimum=opt)
    assert dec.P0 == 0.0
    ex = expansion_report(asym, logu, 1.0, optimum=opt)
    terms = hessian_from_gkw(dec, asym, logu, 1.0, rt, opt, ex.a_xx)
    assert terms.a_xe == 0.0
    assert terms.a_ee == pytest.approx(ex.a_ee, abs=1e-10)


def test_gkw_cross_check_power_incomplete(asym, halfpow):
    opt = solve_pair(asym, halfpow, 1.0, 0.0)
    rt = risk_tolerance(asym, halfpow, 1.0, optimum=opt)
    ex = expansion_report(asym, halfpow, 1.0, optimum=opt)
    dec = gkw_decompose(asym, halfpow, 1.0, rt, optimum=opt)
    terms = hessian_from_gkw(dec, asym, halfpow, 1.0, rt, opt, ex.a_xx)
    assert terms.a_ee == pytest.approx(ex.a_ee, abs=1e-8)
    assert terms.b_ee == pytest.approx(ex.b_ee, abs=1e-8)
    assert terms.a_xe == pytest.approx(ex.a_xe, abs=1e-8)
    assert terms.b_ye == pytest.approx(ex.b_ye, abs=1e-8)
    assert recovery_residual(dec, ex, rt) <= 1e-8
    assert dec.orthogonality_defect <= 1e-12


def test_gkw_two_period_power(twop, halfpow):
    opt = solve_pair(twop, halfpow, 1.0, 0.0)
    rt = risk_tolerance(twop, halfpow, 1.0, optimum=opt)
    assert rt.exists
    ex = expansion_report(twop, halfpow, 1.0, optimum=opt)
    dec = gkw_decompose(twop, halfpow, 1.0, rt, optimum=opt)
    terms = hessian_from_gkw(dec, twop, halfpow, 1.0, rt, opt, ex.a_xx)
    for got, want in ((terms.a_ee, ex.a_ee), (terms.b_ee, ex.b_ee),
                      (terms.a_xe, ex.a_xe), (terms.b_ye, ex.b_ye)):
        assert got == pytest.approx(want, abs=1e-8)
    assert recovery_residual(dec, ex, rt) <= 1e-8
