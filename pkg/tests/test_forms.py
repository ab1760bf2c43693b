import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from math import comb

from nlhodge.errors import PreconditionError
from nlhodge.forms import (
    DiscreteForm,
    Grid,
    basis,
    codifferential,
    exterior_d,
    hodge_star,
    l2_inner,
    l2_norm,
    permutation_sign,
    qnorm,
    wedge,
)

from conftest import orders


def random_form(grid, k, seed):
    rng = np.random.default_rng(seed)
    return DiscreteForm(grid, k, rng.standard_normal((comb(grid.n, k),) + grid.shape))


def smooth_form(grid, k, phase=0.0):
    """Smooth, non-polynomial coefficients so differencing errors are visible."""
    x = grid.coords
    comps = []
    for j, _ in enumerate(basis(grid.n, k)):
        v = np.ones(grid.shape)
        for i, xi in enumerate(x):
            v = v * np.cos((i + j + 1) * xi + phase + 0.3 * j)
        comps.append(v)
    return DiscreteForm(grid, k, np.array(comps))


dims = st.integers(2, 4)


def test_grid_basics():
    g = Grid(((0, 1), (0, 2)), (5, 9))
    assert g.n == 2 and g.shape == (5, 9)
    assert np.allclose(g.h, (0.25, 0.25))
    assert np.isclose(g.weights.sum(), 2.0)
    assert g.interior(1).sum() == 3 * 7


def test_grid_rejects_bad_input():
    with pytest.raises(PreconditionError):
        Grid(((0, 1),), (5,))
    with pytest.raises(PreconditionError):
        Grid(((0, 1), (1, 1)), (5, 5))
    with pytest.raises(PreconditionError):
        Grid(((0, 1), (0, 1)), (2, 5))


def test_permutation_sign():
    assert permutation_sign((0, 1, 2)) == 1
    assert permutation_sign((1, 0, 2)) == -1
    assert permutation_sign((2, 0, 1)) == 1
    assert permutation_sign((0, 0)) == 0


def test_from_components_sign_correction():
    g = Grid.box(3, res=3)
    a = DiscreteForm.from_components(g, 2, {(2, 1): 1.0})
    assert np.all(a[(1, 2)] == -1.0)


def test_qnorm_examples():
    g = Grid.box(2, res=5)
    assert np.all(qnorm(DiscreteForm.from_components(g, 2, {(1, 2): 1.0})) == 1.0)
    assert np.all(qnorm(DiscreteForm.from_components(g, 1, {(1,): 3.0, (2,): 4.0})) == 25.0)


def test_unit_inner_product():
    g = Grid.box(2, res=9)
    dx1 = DiscreteForm.from_components(g, 1, {(1,): 1.0})
    assert l2_inner(dx1, dx1) == pytest.approx(1.0, abs=1e-14)


def test_degree_mismatch_rejected():
    g = Grid.box(2, res=5)
    with pytest.raises(PreconditionError):
        l2_inner(DiscreteForm.zeros(g, 1), DiscreteForm.zeros(g, 2))
    with pytest.raises(PreconditionError):
        wedge(DiscreteForm.zeros(g, 2), DiscreteForm.zeros(g, 1))


@settings(max_examples=30, deadline=None)
@given(n=dims, k=st.integers(0, 4), seed=st.integers(0, 2**31))
def test_star_star_sign(n, k, seed):
    k = k % (n + 1)
    a = random_form(Grid.box(n, res=3), k, seed)
    sign = (-1) ** (k * (n - k))
    assert np.array_equal(hodge_star(hodge_star(a)).coeffs, sign * a.coeffs)


@settings(max_examples=30, deadline=None)
@given(n=dims, k=st.integers(0, 4), l=st.integers(0, 4), seed=st.integers(0, 2**31))
def test_wedge_antisymmetry(n, k, l, seed):
    k, l = k % (n + 1), l % (n + 1)
    if k + l > n:
        return
    g = Grid.box(n, res=3)
    a, b = random_form(g, k, seed), random_form(g, l, seed + 1)
    assert np.allclose(wedge(a, b).coeffs, (-1) ** (k * l) * wedge(b, a).coeffs, atol=1e-14)


@settings(max_examples=30, deadline=None)
@given(n=dims, k=st.integers(0, 4), seed=st.integers(0, 2**31))
def test_qnorm_matches_star_wedge(n, k, seed):
    k = k % (n + 1)
    a = random_form(Grid.box(n, res=3), k, seed)
    q = hodge_star(wedge(a, hodge_star(a))).coeffs[0]
    assert np.max(np.abs(qnorm(a) - q)) <= 1e-13 * max(1.0, np.abs(q).max())


@settings(max_examples=20, deadline=None)
@given(n=dims, k=st.integers(0, 2), seed=st.integers(0, 2**31))
def test_dd_zero_interior(n, k, seed):
    if k + 2 > n:
        return
    a = random_form(Grid.box(n, res=7 if n < 4 else 6), k, seed)
    dd = exterior_d(exterior_d(a))
    mask = a.grid.interior(2)
    assert np.max(np.abs(dd.coeffs[:, mask])) <= 1e-10


def test_dd_zero_smooth_everywhere_interior():
    g = Grid.box(3, res=17)
    a = smooth_form(g, 1)
    dd = exterior_d(exterior_d(a))
    assert np.max(np.abs(dd.coeffs[:, g.interior(2)])) < 1e-10


def test_exterior_d_exact_on_quadratics():
    g = Grid.box(2, res=9)
    x1, x2 = g.coords
    u = DiscreteForm.scalar(g, x1**2 + x1 * x2)
    du = exterior_d(u)
    assert np.allclose(du[(1,)], 2 * x1 + x2, atol=1e-12)
    assert np.allclose(du[(2,)], x1, atol=1e-12)


def test_codifferential_of_exact_gradient_is_minus_laplacian():
    # delta d u = -Laplacian u for the sign convention in use
    g = Grid.box(2, res=17)
    x1, x2 = g.coords
    u = DiscreteForm.scalar(g, x1**2 + 3 * x2**2)
    lap = codifferential(exterior_d(u)).coeffs[0]
    assert np.allclose(lap[g.interior(2)], -8.0, atol=1e-10)


def test_delta_delta_zero():
    g = Grid.box(3, res=13)
    a = smooth_form(g, 2)
    dd = codifferential(codifferential(a))
    assert np.max(np.abs(dd.coeffs[:, g.interior(2)])) < 1e-10


def adjointness_defect(res, n=2, k=0):
    g = Grid.box(n, res=res)
    x = g.coords
    bump = np.prod([np.sin(np.pi * xi) for xi in x], axis=0)
    a = smooth_form(g, k)
    a = DiscreteForm(g, k, a.coeffs * bump)
    b = smooth_form(g, k + 1, phase=0.4)
    return abs(l2_inner(exterior_d(a), b) - l2_inner(a, codifferential(b)))


@pytest.mark.parametrize("n,k", [(2, 0), (2, 1), (3, 1)])
def test_adjointness_second_order(n, k):
    res = (17, 33, 65) if n == 3 else (33, 65, 129)
    defects = [adjointness_defect(r, n, k) for r in res]
    assert np.all(np.abs(orders(defects) - 2.0) < 0.35), defects


def test_l2_norm_mask():
    g = Grid.box(2, res=5)
    a = DiscreteForm.from_components(g, 1, {(1,): 1.0})
    assert l2_norm(a) == pytest.approx(1.0)
    assert l2_norm(a, g.interior(1)) < 1.0
