import numpy as np
import pytest

from nlhodge.bvp import BoundaryData, SolverConfig, continuation, solve_dirichlet, solve_neumann, verify_bvp
from nlhodge.density import Density, EtaMap, check_admissible
from nlhodge.errors import PreconditionError, SonicExceeded
from nlhodge.forms import Grid

from conftest import orders

SCHERK = "log(cos(x1)/cos(x2))"


def l2_error(sol, exact):
    g = sol.grid
    return float(np.sqrt(np.sum(g.weights * (sol.u - exact) ** 2)))


def square(N, a=1.0):
    return Grid(((-a, a), (-a, a)), (N, N))


def test_bilinear_harmonic_exact():
    system = check_admissible(Density.constant())
    g = Grid.box(2, res=17)
    sol = solve_dirichlet(system, BoundaryData.dirichlet("x1*x2"), g)
    assert np.max(np.abs(sol.u - g.coords[0] * g.coords[1])) <= 1e-10
    rep = verify_bvp(sol)
    assert rep.codiff[1] <= 1e-10 and rep.frobenius[1] <= 1e-10
    assert rep.extra["trace"] <= 1e-10 and rep.extra["conformal"] <= 1e-10
    assert sol.report.converged and sol.report.subsonic


def test_solution_unpacks():
    system = check_admissible(Density.constant())
    u, w0, w, report = solve_dirichlet(system, BoundaryData.dirichlet("x1"), Grid.box(2, res=5))
    assert report.converged and w.k == 1 and w0.k == 1


def test_maximal_constant_gradient_exact():
    system = check_admissible(Density.maximal(), bound_k=0.5)
    sol = solve_dirichlet(system, BoundaryData.dirichlet("0.8*x1"), Grid.box(2, res=17))
    assert np.max(np.abs(sol.u - 0.8 * sol.grid.coords[0])) <= 1e-10
    assert sol.report.max_q == pytest.approx(0.64)


def test_quadratic_with_source_exact():
    system = check_admissible(Density.constant())
    g = Grid.box(2, res=17)
    sol = solve_dirichlet(system, BoundaryData.dirichlet("x1^2 + x2^2", sigma="2*x1*dx1 + 2*x2*dx2"), g)
    assert np.max(np.abs(sol.u - (g.coords[0] ** 2 + g.coords[1] ** 2))) <= 1e-10


def test_scherk_second_order():
    system = check_admissible(Density.minimal())
    data = BoundaryData.dirichlet(SCHERK)
    errs, codiff = [], []
    for N in (33, 65, 129):
        sol = solve_dirichlet(system, data, square(N))
        x1, x2 = sol.grid.coords
        errs.append(l2_error(sol, np.log(np.cos(x1) / np.cos(x2))))
        rep = verify_bvp(sol)
        codiff.append(rep.codiff[0])
        assert rep.extra["trace"] <= 1e-10
        assert sol.report.energy_monotone
    assert np.all(np.abs(orders(errs) - 2) < 0.3), errs
    assert np.all(np.abs(orders(codiff) - 2) < 0.5), codiff


def test_transformed_system_manufactured():
    system = check_admissible(Density.minimal(), zeta="0.1*t", eta=EtaMap("0.02*t/(1+t)"))

    def grad(x):
        return np.stack([0.5 * np.cos(x[0]) * x[1], 0.5 * np.sin(x[0])])

    def sigma(x):
        G = grad(x)
        return system.rho0(G[0] ** 2 + G[1] ** 2) * G

    errs, frob = [], []
    for N in (17, 33, 65):
        sol = solve_dirichlet(system, BoundaryData.dirichlet("0.5*sin(x1)*x2", sigma=sigma), square(N))
        errs.append(l2_error(sol, 0.5 * np.sin(sol.grid.coords[0]) * sol.grid.coords[1]))
        rep = verify_bvp(sol)
        frob.append(rep.frobenius[0])
        assert rep.extra["conformal"] <= 1e-10 and rep.extra["trace"] <= 1e-10
    assert np.all(np.abs(orders(errs) - 2) < 0.3)
    assert np.all(np.abs(orders(frob) - 2) < 0.3)


def test_neumann_linear_exact():
    system = check_admissible(Density.constant())
    sol = solve_neumann(system, BoundaryData.neumann("dx1"), Grid.box(2, res=17))
    assert np.max(np.abs(sol.u - sol.grid.coords[0])) <= 1e-10
    assert verify_bvp(sol).extra["flux"] <= 1e-10


def test_neumann_scherk_second_order():
    system = check_admissible(Density.minimal())
    # flux = rho(|du|^2) du for the Scherk potential
    nu = lambda x: Density.minimal()(np.tan(x[0]) ** 2 + np.tan(x[1]) ** 2) * np.stack([-np.tan(x[0]), np.tan(x[1])])  # noqa: E731
    errs = []
    for N in (33, 65, 129):
        sol = solve_neumann(system, BoundaryData.neumann(nu), square(N))
        x1, x2 = sol.grid.coords
        exact = np.log(np.cos(x1) / np.cos(x2))
        exact = exact - exact.ravel()[0]
        errs.append(l2_error(sol, exact))
    assert np.all(np.abs(orders(errs) - 2) < 0.3), errs


def test_neumann_incompatible_rejected():
    system = check_admissible(Density.constant())
    with pytest.raises(PreconditionError):
        solve_neumann(system, BoundaryData.neumann("dx1 + x1*dx1"), Grid.box(2, res=9))


def test_neumann_per_side_values():
    system = check_admissible(Density.constant())
    g = Grid.box(2, res=9)
    nu = {"left": -np.ones(9), "right": np.ones(9), "bottom": np.zeros(9), "top": np.zeros(9)}
    sol = solve_neumann(system, BoundaryData.neumann(nu), g)
    assert np.max(np.abs(sol.u - g.coords[0])) <= 1e-10


def test_dirichlet_only_on_rectangles():
    system = check_admissible(Density.constant())
    with pytest.raises(PreconditionError):
        solve_dirichlet(system, BoundaryData.dirichlet("x1"), Grid.box(3, res=5))


def test_initial_iterate_over_guard():
    system = check_admissible(Density.maximal(), bound_k=0.5)
    with pytest.raises(SonicExceeded):
        solve_dirichlet(system, BoundaryData.dirichlet("0.95*x1"), Grid.box(2, res=9))


def test_minimal_continuation_stays_subsonic():
    system = check_admissible(Density.minimal())
    sol, path = continuation(system, BoundaryData.dirichlet(SCHERK), np.linspace(0, 1, 6), square(17))
    assert path.stayed_subsonic and sol.report.converged
    assert len(path.continuation) == 6
    qs = [row["max_q"] for row in path.continuation]
    assert np.all(np.diff(qs) > 0)


def test_maximal_continuation_trips():
    system = check_admissible(Density.maximal(), bound_k=0.5)
    with pytest.raises(SonicExceeded) as err:
        continuation(system, BoundaryData.dirichlet("x1"), np.linspace(0, 1, 11), Grid.box(2, res=33))
    path = err.value.report
    assert path.stayed_subsonic is False
    assert abs(path.tau_s - np.sqrt(0.75)) <= 0.05 * np.sqrt(0.75)
    assert path.tau_guard < path.tau_s
    qs = [row["max_q"] for row in path.continuation]
    assert np.all(np.diff(qs) > 0) and qs[-1] > 0.95 * path.guard


def test_bad_tau_grid():
    system = check_admissible(Density.constant())
    with pytest.raises(PreconditionError):
        continuation(system, BoundaryData.dirichlet("x1"), [0.5, 0.2], Grid.box(2, res=5))


def test_cg_path_matches_direct():
    system = check_admissible(Density.minimal())
    g = square(33)
    direct = solve_dirichlet(system, BoundaryData.dirichlet(SCHERK), g)
    iterative = solve_dirichlet(system, BoundaryData.dirichlet(SCHERK), g, SolverConfig(direct_limit=0))
    assert iterative.report.linear_solver == "cg-jacobi"
    assert np.max(np.abs(direct.u - iterative.u)) < 1e-9
