import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import brentq

from nlhodge.density import (
    GUARD,
    Density,
    EtaMap,
    apply_A,
    apply_B,
    check_admissible,
    classify,
    density_from_eta,
    dual_density,
    make_branch,
    psi_invert,
    transform_density_t,
    transform_density_x,
)
from nlhodge.expr import parse_expression
from nlhodge.errors import DomainError, InadmissibleSystem, PreconditionError, RangeError
from nlhodge.forms import DiscreteForm, Grid, qnorm


def bi_branch(sign):
    rho = Density.born_infeld()
    if sign == "+":
        return make_branch(rho, (0.0, 1.0), closed=(True, False))
    return make_branch(rho, (1.0, np.inf), closed=(False, False))


def form_with_q(grid, k, q, seed):
    """Random k-form rescaled so that |w|^2 = q pointwise."""
    rng = np.random.default_rng(seed)
    from math import comb
    c = rng.standard_normal((comb(grid.n, k),) + grid.shape)
    c *= np.sqrt(q / np.einsum("i...,i...->...", c, c))
    return DiscreteForm(grid, k, c)


# -- evaluation and guards ----------------------------------------------------------------


def test_family_values():
    assert Density.minimal()(3.0) == pytest.approx(0.5)
    assert Density.maximal()(0.75) == pytest.approx(2.0)
    assert Density.born_infeld()(0.5) == pytest.approx(np.sqrt(2))
    assert Density.extremal()(5.0) == pytest.approx(0.5)
    assert Density.p_power(4)(3.0) == pytest.approx(9.0)
    assert Density.constant(2.5)(7.0) == 2.5


def test_guard_near_singularity():
    rho = Density.born_infeld()
    with pytest.raises(DomainError):
        rho(1.0 + 0.5 * GUARD)
    rho(1.0 + 2 * GUARD)
    with pytest.raises(DomainError) as err:
        Density.maximal()(np.array([0.2, 1.5, 0.3]))
    assert list(err.value.nodes) == [1] or err.value.nodes is not None


def test_derivatives_match_differences():
    t = np.linspace(0.1, 0.9, 9)
    for rho in (Density.minimal(), Density.maximal(), Density.born_infeld(), Density.p_power(3)):
        h = 1e-6
        fd = (rho(t + h) - rho(t - h)) / (2 * h)
        assert np.allclose(rho.deriv(t), fd, rtol=1e-6)


def test_table_density_is_monotone_interpolant():
    t = np.linspace(0, 2, 11)
    rho = Density.table(t, 1.0 / np.sqrt(1.0 + t))
    mid = 0.5 * (t[1:] + t[:-1])
    assert np.max(np.abs(rho(mid) - 1.0 / np.sqrt(1.0 + mid))) < 1e-3
    with pytest.raises(PreconditionError):
        Density.table([0, 1, 1], [1, 1, 1])


def test_expression_density_x_dependent():
    rho = Density.from_expression("exp(x1)/sqrt(1+t)")
    assert rho.x_dependent
    assert rho(np.array(3.0), (np.array(0.0),)) == pytest.approx(0.5)


# -- classification and inversion -----------------------------------------------------------


def test_born_infeld_classification():
    rep = classify(Density.born_infeld(), (0.0, 4.0))
    assert [b.regime for b in rep.branches] == ["elliptic", "hyperbolic"]
    assert len(rep.singular_points) == 1 and abs(rep.singular_points[0] - 1.0) <= 1e-8
    e, h = rep.branches
    assert e.t_interval[0] == 0.0 and abs(e.t_interval[1] - 1.0) <= 1e-8
    assert abs(h.t_interval[0] - 1.0) <= 1e-8


def test_constant_and_minimal_single_elliptic_branch():
    for rho in (Density.constant(), Density.minimal()):
        rep = classify(rho)
        assert len(rep.branches) == 1 and rep.branches[0].regime == "elliptic"


def test_sonic_point_detected():
    # phi = t (1 + t)^-2 rises then falls; the turning point is t = 1
    rho = Density.from_expression("1/(1+t)")
    rep = classify(rho, (0.0, 5.0))
    assert len(rep.sonic_points) == 1 and abs(rep.sonic_points[0] - 1.0) < 1e-8
    assert [b.regime for b in rep.branches] == ["elliptic", "hyperbolic"]


def test_born_infeld_psi_plus_closed_form():
    r = np.concatenate([np.linspace(0.0, 1.0, 500), np.geomspace(1.0, 1e4, 500)])
    t = psi_invert(bi_branch("+"), r)
    assert np.max(np.abs(t - r / (r + 1))) <= 1e-10


def test_born_infeld_psi_minus_closed_form():
    r = np.geomspace(1.001, 1e4, 1000)
    exact = r / (r - 1)
    t = psi_invert(bi_branch("-"), r)
    assert np.max(np.abs(t - exact) / exact) <= 1e-10


def test_psi_out_of_range():
    with pytest.raises(RangeError):
        psi_invert(bi_branch("-"), np.array([0.5]))
    with pytest.raises(RangeError):
        psi_invert(make_branch(Density.minimal(), (0.0, np.inf)), np.array([1.5]))


@settings(max_examples=100, deadline=None)
@given(r=st.floats(0.0, 0.999))
def test_psi_minimal_matches_brentq(r):
    rho = Density.minimal()
    b = make_branch(rho, (0.0, np.inf))
    t = float(psi_invert(b, np.array([r]))[0])
    ref = 0.0 if r == 0 else brentq(lambda s: s / (1 + s) - r, 0.0, 1e6, xtol=1e-15)
    assert abs(t - ref) <= 1e-9 * max(1.0, ref)
    assert abs(rho.phi(t) - r) <= 1e-12 * max(1.0, r)


def test_minimal_A_B_examples():
    g = Grid.box(2, res=3)
    rho = Density.minimal()
    w = DiscreteForm.from_components(g, 1, {(1,): np.sqrt(3.0)})
    assert np.allclose(qnorm(apply_A(rho, w)), 0.75)
    wt = DiscreteForm.from_components(g, 1, {(1,): np.sqrt(0.75)})
    b = apply_B(make_branch(rho, (0.0, np.inf)), wt)
    assert np.allclose(b.coeffs, 2 * wt.coeffs)


def test_born_infeld_A_example():
    g = Grid.box(2, res=3)
    w = DiscreteForm.from_components(g, 2, {(1, 2): 1 / np.sqrt(2)})
    assert np.allclose(apply_A(Density.born_infeld(), w)[(1, 2)], 1.0)


CASES = {
    "constant": (Density.constant(2.0), (0.0, np.inf), (True, False), (0.0, 5.0)),
    "p_power": (Density.p_power(1.0), (0.0, np.inf), (False, False), (0.05, 4.0)),
    "minimal": (Density.minimal(), (0.0, np.inf), (True, False), (0.0, 10.0)),
    "maximal": (Density.maximal(), (0.0, 1.0), (True, False), (0.0, 0.95)),
    "bi_plus": (Density.born_infeld(), (0.0, 1.0), (True, False), (0.1, 0.9)),
    "bi_minus": (Density.born_infeld(), (1.0, np.inf), (False, False), (1.1, 6.0)),
    "extremal": (Density.extremal(), (1.0, np.inf), (False, False), (1.1, 6.0)),
}


@pytest.mark.parametrize("name", sorted(CASES))
@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**31), k=st.integers(1, 2))
def test_A_B_inverse(name, seed, k):
    rho, interval, closed, (qa, qb) = CASES[name]
    branch = make_branch(rho, interval, closed)
    g = Grid.box(3, res=4)
    q = np.random.default_rng(seed).uniform(qa, qb, g.shape)
    w = form_with_q(g, k, q, seed)
    a = apply_A(rho, w)
    assert np.max(np.abs(apply_B(branch, a).coeffs - w.coeffs)) <= 1e-10
    wt = form_with_q(g, k, rho.phi(q), seed + 7)
    back = apply_A(rho, apply_B(branch, wt))
    assert np.max(np.abs(back.coeffs - wt.coeffs)) <= 1e-10
    # |B(wt)|^2 = psi(|wt|^2)
    assert np.max(np.abs(qnorm(apply_B(branch, wt)) - psi_invert(branch, qnorm(wt)))) <= 1e-10 * max(1, qb)


# -- dual pairs ---------------------------------------------------------------------------------


def test_minimal_dual_is_maximal():
    rho = Density.minimal()
    pair = dual_density(rho, make_branch(rho, (0.0, np.inf)))
    th = np.linspace(0.0, 0.99, 1000)
    assert np.max(np.abs(pair.rho_hat(th) - 1.0 / np.sqrt(1.0 - th))) <= 1e-12 * np.max(1.0 / np.sqrt(1.0 - th))
    assert pair.hat_branch.regime == "elliptic"


def test_extremal_self_dual():
    rho = Density.extremal()
    pair = dual_density(rho, make_branch(rho, (1.0, np.inf), closed=(False, False)))
    th = np.linspace(1.05, 20.0, 1000)
    assert np.max(np.abs(pair.rho_hat(th) / rho(th) - 1.0)) <= 1e-12
    assert pair.hat_branch.regime == pair.branch.regime == "hyperbolic"


def test_constant_dual():
    rho = Density.constant(3.0)
    pair = dual_density(rho, make_branch(rho, (0.0, np.inf)))
    t = np.linspace(0, 5, 11)
    assert np.allclose(pair.rho_hat(9.0 * t), 1.0 / 3.0, rtol=1e-13)


@pytest.mark.parametrize("name", ["minimal", "maximal", "bi_plus", "bi_minus", "p_power"])
def test_dual_identities(name):
    rho, interval, closed, (qa, qb) = CASES[name]
    branch = make_branch(rho, interval, closed)
    pair = dual_density(rho, branch)
    t = np.linspace(qa, qb, 400)
    th = rho.phi(t)
    assert np.max(np.abs(rho(t) * pair.rho_hat(th) - 1.0)) <= 1e-12
    assert np.max(np.abs(pair.rho_hat.phi(th) - t) / np.maximum(1, t)) <= 1e-10
    assert pair.hat_branch.regime == branch.regime
    # involution
    back = dual_density(pair.rho_hat, pair.hat_branch)
    assert np.max(np.abs(back.rho_hat(t) / rho(t) - 1.0)) <= 1e-10


# -- densities from eta ---------------------------------------------------------------------


def test_density_from_constant_eta():
    rho = density_from_eta(0.7, (0.0, 3.0))
    t = np.linspace(0, 3 * np.exp(-1.4), 20)
    assert np.allclose(rho(t), np.exp(0.7), rtol=1e-13)
    assert np.allclose(density_from_eta(0.0, (0.0, 2.0))(np.linspace(0, 2, 5)), 1.0)


def test_density_from_linear_eta_matches_bisection():
    rho = density_from_eta("t", (0.0, 0.4))
    for t in (0.05, 0.1, 0.15, 0.17):
        s = brentq(lambda s: s * np.exp(-2 * s) - t, 0.0, 0.4, xtol=1e-15)
        assert rho(t) == pytest.approx(np.exp(s), rel=1e-12)


def test_density_from_eta_not_injective():
    with pytest.raises(PreconditionError):
        density_from_eta("t", (0.0, 2.0))


# -- conformal transforms ----------------------------------------------------------------------


def test_eta_map_constant():
    em = EtaMap(0.3)
    th = np.linspace(0, 4, 9)
    assert np.allclose(em.g(th), th * np.exp(0.6))
    assert np.allclose(em.f(em.g(th)), th)


@settings(max_examples=50, deadline=None)
@given(th=st.floats(0.0, 5.0))
def test_eta_map_inverse_matches_brentq(th):
    em = EtaMap("0.1*t/(1+t)")
    t = float(em.g(np.array([th]))[0])
    ref = 0.0 if th == 0 else brentq(lambda s: s * np.exp(-0.2 * s / (1 + s)) - th, 0.0, 50.0, xtol=1e-15)
    assert abs(t - ref) <= 1e-10 * max(1.0, ref)


def test_transform_t_examples():
    rho1 = Density.minimal()
    t = np.linspace(0, 3, 13)
    assert np.allclose(transform_density_t(rho1, 0.0)(t), rho1(t), rtol=1e-14)
    c = 0.4
    rho0 = transform_density_t(rho1, c)
    assert np.allclose(rho0(t), np.exp(c) * rho1(np.exp(2 * c) * t), rtol=1e-13)


@pytest.mark.parametrize("eta,zeta", [("0.1*t/(1+t)", "0.2*t"), (0.3, "sin(t)"), ("0.05*t", 0.0)])
def test_phi_identity(eta, zeta):
    rho1 = Density.minimal()
    em = EtaMap(eta, interval=(0.0, 5.0)) if isinstance(eta, str) else EtaMap(eta)
    rho0 = transform_density_t(rho1, em, zeta)
    hi = em.image[1] if np.isfinite(em.image[1]) else 5.0
    th = np.linspace(0.0, 0.99 * hi, 200)
    t = em.g(th)
    z = parse_expression(zeta).of_t(t) if isinstance(zeta, str) else np.full_like(t, zeta)
    rhs = t * (rho1(t) * np.exp(-z)) ** 2
    assert np.max(np.abs(rho0.phi(th) - rhs)) <= 1e-10


def test_transform_t_inverse_round_trip():
    rho1 = Density.minimal()
    em = EtaMap("0.1*t/(1+t)")
    rho0 = transform_density_t(rho1, em, "0.2*t")
    back = transform_density_t(rho0, em, "0.2*t", inverse=True)
    t = np.linspace(0, 4, 17)
    assert np.allclose(back(t), rho1(t), rtol=1e-12)


def test_transform_x_examples():
    g = Grid.box(2, res=5)
    x = g.coords
    t = np.full(g.shape, 0.7)
    rho1 = Density.minimal()
    same = transform_density_x(rho1, 0.0)
    assert np.allclose(same(t, x), rho1(t))
    eq = transform_density_x(rho1, "x1*x2", "x1*x2")
    assert np.allclose(eq(t, x), rho1(np.exp(2 * x[0] * x[1]) * t))
    c = 0.25
    assert np.allclose(transform_density_x(rho1, c)(t, x), np.exp(c) / np.sqrt(1 + np.exp(2 * c) * t))
    back = transform_density_x(transform_density_x(rho1, "x1", "x2"), "x1", "x2", inverse=True)
    assert np.allclose(back(t, x), rho1(t), rtol=1e-13)


def test_transform_x_domain_error():
    g = Grid.box(2, res=5)
    rho0 = transform_density_x(Density.maximal(), 1.0)
    with pytest.raises(DomainError):
        rho0(np.full(g.shape, 0.5), g.coords)


# -- admissibility ---------------------------------------------------------------------------------


def test_admissible_constant():
    sys_ = check_admissible(Density.constant(1.0))
    assert sys_.Q_s == pytest.approx(100.0)
    assert sys_.bound_k == pytest.approx(1.0)
    assert sys_.caveats


def test_admissible_maximal_sonic_bound():
    sys_ = check_admissible(Density.maximal(), bound_k=0.5)
    assert abs(sys_.Q_s - 0.75) <= 1e-8


def test_admissible_fails_on_hyperbolic_branch():
    probes = np.linspace(1.1, 5.0, 50)
    with pytest.raises(InadmissibleSystem) as err:
        check_admissible(Density.born_infeld(), t_probe=probes)
    assert err.value.condition == "c"
