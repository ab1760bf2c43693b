import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nlhodge.backlund import (
    conformal_forward_t,
    conformal_inverse_t,
    conformal_x,
    dual_identity_defect,
    dual_transform,
    ellipticity_sign_check,
    verify_dual,
)
from nlhodge.construct import verify_system
from nlhodge.density import Density, EtaMap, apply_A, make_branch, transform_density_t, transform_density_x
from nlhodge.errors import PreconditionError
from nlhodge.expr import parse_form
from nlhodge.forms import DiscreteForm, Grid, exterior_d, hodge_star, qnorm, wedge

from conftest import orders


def test_dual_of_constant_form_constant_density():
    g = Grid.box(3, res=5)
    w = DiscreteForm.from_components(g, 1, {(1,): 0.2, (2,): -0.7})
    xi, pair, rec = dual_transform(w, Density.constant())
    assert np.allclose(xi.coeffs, hodge_star(w).coeffs)
    rep = verify_dual(xi, pair)
    assert rep.codiff[1] <= 1e-13 and rep.frobenius[1] <= 1e-13
    assert rec.degree_in == 1 and rec.degree_out == 2


@settings(max_examples=20, deadline=None)
@given(n=st.integers(2, 4), k=st.integers(1, 3), seed=st.integers(0, 2**31))
def test_dual_identity(n, k, seed):
    k = 1 + (k - 1) % (n - 1)
    from math import comb
    rng = np.random.default_rng(seed)
    g = Grid.box(n, res=3)
    c = rng.standard_normal((comb(n, k),) + g.shape)
    c *= np.sqrt(rng.uniform(0.05, 3.0, g.shape) / np.einsum("i...,i...->...", c, c))
    w = DiscreteForm(g, k, c)
    xi, pair, _ = dual_transform(w, Density.minimal())
    assert dual_identity_defect(w, xi, pair) <= 1e-10


def test_dual_identity_hyperbolic():
    g = Grid.box(2, res=5)
    w = DiscreteForm.from_components(g, 1, {(1,): np.sqrt(2.0 + g.coords[0])})
    rho = Density.born_infeld()
    xi, pair, rec = dual_transform(w, rho, make_branch(rho, (1.0, np.inf), (False, False)))
    assert rec.regimes == ("hyperbolic", "hyperbolic")
    assert dual_identity_defect(w, xi, pair) <= 1e-10


def test_dual_rejects_mixed_branches():
    g = Grid.box(2, res=5)
    w = DiscreteForm.from_components(g, 1, {(1,): 2.0 * g.coords[0]})  # Q spans 0..4, across t = 1
    with pytest.raises(PreconditionError):
        dual_transform(w, Density.born_infeld())


def test_residual_transport_scherk():
    rho = Density.minimal()
    src_err, dual_err = [], []
    for N in (33, 65, 129):
        g = Grid(((-0.9, 0.9), (-0.9, 0.9)), (N, N))
        w = parse_form("log(cos(x1)/cos(x2))").d(2).sample(g)
        src = verify_system(w, rho)
        xi, pair, _ = dual_transform(w, rho)
        dual = verify_dual(xi, pair)
        # source co-differential residual becomes the dual Frobenius residual and back
        src_err.append(src.codiff[0])
        dual_err.append(dual.frobenius[0])
        assert dual.frobenius[0] <= 10 * (src.codiff[0] + max(g.h) ** 2)
        assert dual.codiff[0] <= 10 * (src.frobenius[0] + max(g.h) ** 2)
    assert np.all(np.abs(orders(dual_err) - 2) < 0.3)


def test_dual_with_gamma_and_sigma():
    # rho = 1 on n = 2: w = exp(x2) dx1 has dw = dx2 ^ w and d*w = 0
    g = Grid.box(2, res=33)
    w = parse_form("exp(x2)*dx1").sample(g)
    gamma = parse_form("dx2").sample(g)
    src = verify_system(w, Density.constant(), Gamma=gamma, Sigma=DiscreteForm.zeros(g, 1))
    xi, pair, _ = dual_transform(w, Density.constant())
    dual = verify_dual(xi, pair, Gamma=gamma, Sigma=DiscreteForm.zeros(g, 1))
    assert dual.frobenius[0] <= 10 * (src.codiff[0] + max(g.h) ** 2)
    assert dual.codiff[0] <= 10 * (src.frobenius[0] + max(g.h) ** 2)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31), c=st.floats(-0.5, 0.5))
def test_conformal_t_round_trip(seed, c):
    rng = np.random.default_rng(seed)
    g = Grid.box(2, res=5)
    w = DiscreteForm(g, 1, rng.uniform(-1, 1, (2,) + g.shape))
    for eta in (c, EtaMap(f"{c}*t/(1+t)")):
        w0 = conformal_forward_t(w, eta)
        assert np.max(np.abs(conformal_inverse_t(w0, eta).coeffs - w.coeffs)) <= 1e-10
        w1 = conformal_inverse_t(w, eta)
        assert np.max(np.abs(conformal_forward_t(w1, eta).coeffs - w.coeffs)) <= 1e-10


def test_conformal_t_norm_relation():
    g = Grid.box(2, res=5)
    w = DiscreteForm(g, 1, np.random.default_rng(1).uniform(-1, 1, (2,) + g.shape))
    em = EtaMap("0.2*t", interval=(0.0, 2.0))
    w0 = conformal_forward_t(w, em)
    assert np.allclose(qnorm(w0), em.f(qnorm(w)), rtol=1e-14)


def test_conformal_x_example():
    # omega0 = dx1 with rho0 = exp(x2) solves delta(rho0 omega0) = 0; eta = zeta = x2 pulls it back
    g = Grid.box(2, res=9)
    w0 = parse_form("dx1").sample(g)
    w1 = conformal_x(w0, "x2", "inverse")
    assert np.allclose(w1[(1,)], np.exp(g.coords[1]))
    assert np.allclose(conformal_x(w1, "x2", "forward").coeffs, w0.coeffs, atol=1e-14)
    rho0 = transform_density_x(Density.constant(), 0.0, "-x2")
    assert verify_system(w0, rho0).codiff[1] < 1e-12


def test_conformal_x_bad_direction():
    g = Grid.box(2, res=3)
    with pytest.raises(PreconditionError):
        conformal_x(DiscreteForm.zeros(g, 1), 0.0, "sideways")


def test_phi_identity_t_and_transport():
    # omega1 solving the eta = 0 system maps to omega0 whose density is rho0
    rho1 = Density.minimal()
    em = EtaMap("0.1*t/(1+t)")
    rho0 = transform_density_t(rho1, em, None)
    g = Grid.box(2, res=5)
    w1 = DiscreteForm(g, 1, np.random.default_rng(3).uniform(-1, 1, (2,) + g.shape))
    w0 = conformal_forward_t(w1, em)
    # rho0(|w0|^2) w0 = exp(-zeta) rho1(|w1|^2) w1 with zeta = 0
    assert np.max(np.abs(apply_A(rho0, w0).coeffs - apply_A(rho1, w1).coeffs)) <= 1e-10


@pytest.mark.parametrize("rho1,eta,zeta,lo,hi", [
    (Density.minimal(), "0.1*t/(1+t)", "0.2*t", 0.0, 3.0),
    (Density.from_expression("1/(1+t)"), "0.05*t", "0.1*t^2", 0.01, 2.5),
    (Density.maximal(), 0.2, 0.0, 0.0, 0.6),
])
def test_ellipticity_sign_rule(rho1, eta, zeta, lo, hi):
    em = EtaMap(eta, interval=(0.0, 8.0)) if isinstance(eta, str) else EtaMap(eta)
    th = np.linspace(lo, hi, 1000)[1:]
    rep = ellipticity_sign_check(rho1, zeta, em, th)
    assert rep["disagree"] == 0
    assert rep["agree"] + rep["inconclusive"] == rep["probes"]
    assert rep["agree"] > 900


def test_ellipticity_sign_rule_detects_hyperbolic():
    rho1 = Density.from_expression("1/(1+t)")
    rep = ellipticity_sign_check(rho1, 0.0, EtaMap(0.0), np.linspace(1.5, 4.0, 50))
    assert set(rep["regime0"]) == {"hyperbolic"}
