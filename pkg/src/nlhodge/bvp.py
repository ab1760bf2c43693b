"""Subsonic Dirichlet and Neumann problems on rectangles.

A gradient-recursive 1-form w on a rectangle is carried by the conformal
correspondence to w0 = du, where u solves

    div(rho0(x, |grad u|^2) grad u) = div(sigma)

with rho0 the transformed density of an admissible system. The scalar
problem is discretized variationally: each cell contributes
``h1 h2 G(q_c)`` with ``G' = rho0 / 2`` and ``q_c`` the average of the
squared edge differences on its four sides, so that rho0 = 1 reduces to the
five-point Laplacian. Kacanov iteration (coefficients frozen at the current
iterate) is followed by Newton once steps are small, both with a backtracking
line search on the discrete energy that also keeps every trial iterate below
the sonic guard.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import cg, spsolve

from .backlund import conformal_inverse_t
from .construct import ResidualReport, _inner_integral, norms
from .density import AdmissibleSystem, as_t_function, as_x_function
from .errors import NonConvergence, PreconditionError, SonicExceeded
from .expr import FormExpression, parse_form
from .forms import DiscreteForm, Grid, exterior_d, hodge_star, qnorm, wedge

__all__ = [
    "SolverConfig",
    "BoundaryData",
    "SolveReport",
    "BVPSolution",
    "solve_dirichlet",
    "solve_neumann",
    "continuation",
    "verify_bvp",
]

SIDES = ("left", "right", "bottom", "top")


@dataclass(frozen=True)
class SolverConfig:
    tol: float = 1e-10
    max_iters: int = 200
    newton_switch: float = 1e-3
    margin: float = 0.02
    direct_limit: int = 257 * 257
    cg_tol: float = 1e-13
    quad_panels: int = 64
    compat_tol: float = 1e-10


def _vector_field(spec):
    """Normalize a 1-form (str, FormExpression, callable) to ``F(points) -> (2, ...)``."""
    if spec is None:
        return None
    if isinstance(spec, str):
        spec = parse_form(spec, k=1)
    if isinstance(spec, FormExpression):
        if spec.k != 1:
            raise PreconditionError("flux and source data must be 1-forms")
        comps = [spec.components.get((i,)) for i in (1, 2)]

        def F(x):
            shape = np.shape(x[0])
            return np.stack([np.broadcast_to(np.asarray(c.of_x(x), dtype=float), shape) if c is not None
                             else np.zeros(shape) for c in comps])
        return F
    return lambda x: np.asarray(spec(x), dtype=float)


@dataclass(frozen=True)
class BoundaryData:
    """Boundary data scaled by ``tau``.

    Dirichlet: potential g with u = g on the boundary. Neumann: flux 1-form
    nu (whose normal part is prescribed), or a dict of per-side normal
    values ordered along increasing coordinate. ``sigma`` is an optional
    source 1-form entering as ``div(sigma)``.
    """

    kind: str
    g: object = None
    nu: object = None
    sigma: object = None
    tau: float = 1.0

    @classmethod
    def dirichlet(cls, g, sigma=None):
        return cls("dirichlet", g=g, sigma=sigma)

    @classmethod
    def neumann(cls, nu, sigma=None):
        return cls("neumann", nu=nu, sigma=sigma)

    def scaled(self, tau):
        return replace(self, tau=float(tau))

    def g_at(self, x):
        return self.tau * as_x_function(self.g)(x)

    def sigma_at(self, x):
        F = _vector_field(self.sigma)
        if F is None:
            return np.zeros((2,) + np.shape(x[0]))
        return self.tau * F(x)

    def normal_flux(self, grid):
        """Per-side arrays of prescribed normal flux nu . n at boundary nodes."""
        if isinstance(self.nu, dict):
            out = {s: self.tau * np.asarray(self.nu[s], dtype=float) for s in SIDES}
        else:
            F = _vector_field(self.nu)
            out = {}
            for side, (pts, normal) in _side_geometry(grid).items():
                vals = F(pts)
                out[side] = self.tau * (normal[0] * vals[0] + normal[1] * vals[1])
        for side, n in zip(SIDES, (grid.res[1], grid.res[1], grid.res[0], grid.res[0])):
            if out[side].shape != (n,):
                raise PreconditionError(f"flux on side {side} needs {n} values")
        return out


def _side_geometry(grid):
    """Boundary node coordinates and outward normals per side."""
    x1, x2 = grid.axes
    return {
        "left": ((np.full_like(x2, x1[0]), x2), (-1.0, 0.0)),
        "right": ((np.full_like(x2, x1[-1]), x2), (1.0, 0.0)),
        "bottom": ((x1, np.full_like(x1, x2[0])), (0.0, -1.0)),
        "top": ((x1, np.full_like(x1, x2[-1])), (0.0, 1.0)),
    }


def _side_nodes(grid):
    n1, n2 = grid.res
    idx = np.arange(n1 * n2).reshape(n1, n2)
    return {"left": idx[0, :], "right": idx[-1, :], "bottom": idx[:, 0], "top": idx[:, -1]}


def _trapezoid(n, h):
    w = np.full(n, h)
    w[0] = w[-1] = h / 2
    return w


@dataclass
class SolveReport:
    converged: bool = False
    iterations: int = 0
    residual: float = np.inf
    max_q: float = 0.0
    max_q0: float = 0.0
    Q_s: float = np.inf
    guard: float = np.inf
    subsonic: bool = False
    energy_monotone: bool = True
    history: list = field(default_factory=list)
    continuation: list = field(default_factory=list)
    continuity: list = field(default_factory=list)
    tau_guard: float | None = None
    tau_s: float | None = None
    stayed_subsonic: bool | None = None
    linear_solver: str = ""

    def as_dict(self):
        out = {k: v for k, v in self.__dict__.items()}
        for k, v in out.items():
            if isinstance(v, float) and not np.isfinite(v):
                out[k] = None
        return out


@dataclass
class BVPSolution:
    u: np.ndarray
    w0: DiscreteForm
    w: DiscreteForm
    report: SolveReport
    system: AdmissibleSystem
    data: BoundaryData
    grid: Grid

    def __iter__(self):
        return iter((self.u, self.w0, self.w, self.report))


class _Scheme:
    """Cell-based variational discretization on a 2-D node grid."""

    def __init__(self, grid, rho0, data, cfg):
        if grid.n != 2:
            raise PreconditionError("boundary-value solves are implemented on 2-D rectangles only")
        self.grid, self.rho0, self.data, self.cfg = grid, rho0, data, cfg
        n1, n2 = grid.res
        h1, h2 = grid.h
        self.w = h1 * h2
        idx = np.arange(n1 * n2).reshape(n1, n2)
        cells = (n1 - 1) * (n2 - 1)
        rows = np.arange(cells)
        x1, x2 = grid.axes
        m1, m2 = 0.5 * (x1[:-1] + x1[1:]), 0.5 * (x2[:-1] + x2[1:])

        def op(a, b, h):
            data = np.concatenate([np.full(cells, 1.0 / h), np.full(cells, -1.0 / h)])
            cols = np.concatenate([a.ravel(), b.ravel()])
            return sp.csr_matrix((data, (np.concatenate([rows, rows]), cols)), shape=(cells, n1 * n2))

        mesh = lambda a, b: tuple(np.meshgrid(a, b, indexing="ij"))  # noqa: E731
        self.ops = [
            (op(idx[1:, :-1], idx[:-1, :-1], h1), 0, mesh(m1, x2[:-1])),
            (op(idx[1:, 1:], idx[:-1, 1:], h1), 0, mesh(m1, x2[1:])),
            (op(idx[:-1, 1:], idx[:-1, :-1], h2), 1, mesh(x1[:-1], m2)),
            (op(idx[1:, 1:], idx[1:, :-1], h2), 1, mesh(x1[1:], m2)),
        ]
        centers = mesh(m1, m2)
        self.centers = tuple(c.ravel() for c in centers)
        self.x_cells = self.centers if rho0.x_dependent else None
        # source contributions sampled at edge midpoints
        self.sigma = [data.sigma_at(tuple(p.ravel() for p in pts))[axis] for _, axis, pts in self.ops]
        self.load = sum(B.T @ s for (B, _, _), s in zip(self.ops, self.sigma)) * (self.w / 2)
        self.boundary = np.zeros(n1 * n2)
        if data.kind == "neumann":
            self._neumann_load()
        self.weights = grid.weights.ravel()

    def _neumann_load(self):
        grid = self.grid
        flux = self.data.normal_flux(grid)
        nodes = _side_nodes(grid)
        geom = _side_geometry(grid)
        h1, h2 = grid.h
        defect, scale = 0.0, 0.0
        for side in SIDES:
            pts, normal = geom[side]
            s = self.data.sigma_at(pts)
            sig_n = normal[0] * s[0] + normal[1] * s[1]
            wts = _trapezoid(len(nodes[side]), h2 if side in ("left", "right") else h1)
            vals = flux[side] - sig_n
            np.add.at(self.boundary, nodes[side], wts * vals)
            defect += float(np.sum(wts * vals))
            scale += float(np.sum(wts * (np.abs(flux[side]) + np.abs(sig_n))))
        self.compat = defect
        if abs(defect) > self.cfg.compat_tol * max(1.0, scale):
            raise PreconditionError(
                f"Neumann data violate the compatibility condition: boundary integral of nu_n - sigma_n = {defect:.3e}")

    def state(self, u, with_energy=False):
        b = [B @ u for B, _, _ in self.ops]
        q = 0.5 * (b[0] ** 2 + b[1] ** 2) + 0.5 * (b[2] ** 2 + b[3] ** 2)
        rho = self.rho0(q, self.x_cells)
        grad = (self.w / 2) * sum(B.T @ (rho * bi) for (B, _, _), bi in zip(self.ops, b)) - self.load - self.boundary
        out = {"b": b, "q": q, "rho": rho, "grad": grad}
        if with_energy:
            G, _ = _inner_integral(self.rho0, q, self.x_cells, panels=self.cfg.quad_panels)
            lin = (self.w / 2) * sum(float(s @ bi) for s, bi in zip(self.sigma, b)) + float(self.boundary @ u)
            out["energy"] = self.w * 0.5 * float(G.sum()) - lin
        return out

    def matrix(self, st, newton):
        rho = sp.diags(st["rho"])
        K = sum(B.T @ rho @ B for B, _, _ in self.ops)
        if newton:
            drho = self.rho0.deriv(st["q"], self.x_cells)
            V = sum(sp.diags(bi) @ B for (B, _, _), bi in zip(self.ops, st["b"]))
            K = K + V.T @ sp.diags(drho) @ V
        return (self.w / 2) * K.tocsr()

    def residual(self, grad, free):
        r = grad[free] / self.weights[free]
        return float(np.sqrt(np.sum(self.weights[free] * r * r)))


def _linear_solve(A, rhs, cfg):
    if A.shape[0] <= cfg.direct_limit:
        return spsolve(A.tocsc(), rhs), "direct"
    diag = A.diagonal()
    M = sp.diags(1.0 / diag)
    x, info = cg(A, rhs, rtol=cfg.cg_tol, atol=0.0, maxiter=20 * A.shape[0], M=M)
    if info != 0:
        raise NonConvergence(f"conjugate gradient stopped with info={info}")
    return x, "cg-jacobi"


def _nodal(u, grid):
    w0 = exterior_d(DiscreteForm.scalar(grid, u.reshape(grid.shape)))
    return w0, qnorm(w0)


def _initial(scheme, free, fixed_vals, cfg):
    """Solution of the linear problem with rho0 replaced by 1."""
    n = scheme.grid.size
    u = np.zeros(n)
    fixed = ~free
    u[fixed] = fixed_vals
    K = (scheme.w / 2) * sum(B.T @ B for B, _, _ in scheme.ops)
    K = K.tocsr()
    rhs = scheme.load + scheme.boundary - K[:, fixed] @ u[fixed]
    u[free], _ = _linear_solve(K[free][:, free], rhs[free], cfg)
    return u


def _solve(system, data, grid, cfg, u0, free, fixed_vals):
    cfg = cfg or SolverConfig()
    rho0 = system.rho0
    guard_t = system.Q_s * (1.0 - cfg.margin)
    guard0 = float(system.eta.f(np.asarray(guard_t)))  # same guard expressed for |w0|^2
    scheme = _Scheme(grid, rho0, data, cfg)
    report = SolveReport(Q_s=system.Q_s, guard=guard_t)

    if u0 is None:
        u = _initial(scheme, free, fixed_vals, cfg)
    else:
        u = np.asarray(u0, dtype=float).ravel().copy()
        u[~free] = fixed_vals

    def over(u_try):
        b = [B @ u_try for B, _, _ in scheme.ops]
        q = 0.5 * (b[0] ** 2 + b[1] ** 2) + 0.5 * (b[2] ** 2 + b[3] ** 2)
        _, q_nodes = _nodal(u_try, grid)
        return max(float(q.max()), float(q_nodes.max()))

    q_start = over(u)
    if q_start >= guard0:
        report.max_q0 = q_start
        report.max_q = float(system.eta.g(np.asarray(q_start)))
        raise SonicExceeded(f"initial iterate has max |w0|^2 = {q_start:.6g} beyond the guard {guard0:.6g}",
                            max_q=report.max_q, report=report)

    st = scheme.state(u, with_energy=True)
    newton = False
    energies = [st["energy"]]
    for it in range(1, cfg.max_iters + 1):
        res = scheme.residual(st["grad"], free)
        report.history.append({"iteration": it - 1, "residual": res, "energy": st["energy"],
                               "mode": "newton" if newton else "kacanov"})
        if res <= cfg.tol:
            report.converged = True
            break
        A = scheme.matrix(st, newton)[free][:, free]
        step = np.zeros_like(u)
        step[free], report.linear_solver = _linear_solve(A, -st["grad"][free], cfg)
        slope = float(st["grad"] @ step)
        alpha, accepted, blocked = 1.0, False, False
        for _ in range(40):
            trial = u + alpha * step
            if over(trial) >= guard0:
                blocked = True
                alpha *= 0.5
                continue
            st_try = scheme.state(trial, with_energy=True)
            res_try = scheme.residual(st_try["grad"], free)
            armijo = st_try["energy"] <= st["energy"] + 1e-4 * alpha * min(slope, 0.0)
            flat = abs(st_try["energy"] - st["energy"]) <= 1e-13 * max(1.0, abs(st["energy"])) and res_try < res
            if armijo or flat:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            report.iterations = it
            report.residual = res
            if blocked:
                report.max_q0 = over(u)
                report.max_q = float(system.eta.g(np.asarray(report.max_q0)))
                raise SonicExceeded("iteration is pinned against the sonic guard", max_q=report.max_q, report=report)
            raise NonConvergence(f"line search failed at iteration {it} with residual {res:.3e}", report=report)
        u, st = trial, st_try
        energies.append(st["energy"])
        if np.max(np.abs(alpha * step)) < cfg.newton_switch * max(1.0, np.max(np.abs(u))):
            newton = True
    else:
        res = scheme.residual(st["grad"], free)
        report.iterations, report.residual = cfg.max_iters, res
        if res > cfg.tol:
            raise NonConvergence(f"no convergence after {cfg.max_iters} iterations (residual {res:.3e})", report=report)
        report.converged = True

    report.iterations = len(report.history) - 1
    report.residual = report.history[-1]["residual"]
    diffs = np.diff(energies)
    report.energy_monotone = bool(np.all(diffs <= 1e-12 * max(1.0, abs(energies[0]))))
    w0, q0 = _nodal(u, grid)
    w = conformal_inverse_t(w0, system.eta)
    report.max_q0 = float(q0.max())
    report.max_q = float(qnorm(w).max())
    report.subsonic = report.max_q < guard_t
    if over(u) >= guard0:
        raise SonicExceeded(f"solution reaches the sonic guard: max Q = {report.max_q:.6g}", max_q=report.max_q,
                            report=report)
    return BVPSolution(u.reshape(grid.shape), w0, w, report, system, data, grid)


def solve_dirichlet(system, data, grid, cfg=None, u0=None):
    """Solve with ``u = g`` on the boundary; returns a :class:`BVPSolution`."""
    if data.kind != "dirichlet":
        raise PreconditionError("solve_dirichlet needs Dirichlet data")
    free = grid.interior(1).ravel()
    fixed_vals = data.g_at(tuple(c.ravel() for c in grid.coords))[~free]
    return _solve(system, data, grid, cfg, u0, free, fixed_vals)


def solve_neumann(system, data, grid, cfg=None, u0=None):
    """Solve with prescribed normal flux; the gauge is ``u = 0`` at the lower-left corner."""
    if data.kind != "neumann":
        raise PreconditionError("solve_neumann needs Neumann data")
    free = np.ones(grid.size, dtype=bool)
    free[0] = False
    return _solve(system, data, grid, cfg, u0, free, np.zeros(1))


def _solver_for(data):
    return solve_dirichlet if data.kind == "dirichlet" else solve_neumann


def continuation(system, data, taus, grid, cfg=None, rel_tol=1e-3):
    """Warm-started solves along ``tau -> tau * data``.

    Stops at the first sonic trip, brackets the guard crossing ``tau_guard``
    by bisection to relative ``rel_tol`` and extrapolates ``max Q(tau)`` to
    ``Q_s`` by a secant through the last two subsonic points to estimate
    ``tau_s``. Returns ``(last_solution, report)``.
    """
    taus = np.asarray(taus, dtype=float)
    if taus.size == 0 or np.any(np.diff(taus) <= 0) or taus[0] < 0:
        raise PreconditionError("tau grid must be nonempty, nonnegative and increasing")
    solve = _solver_for(data)
    path = SolveReport(Q_s=system.Q_s, guard=system.Q_s * (1.0 - (cfg or SolverConfig()).margin))
    last, last_tau, tripped = None, None, None

    def attempt(tau, prev, prev_tau):
        u0 = prev.u * (tau / prev_tau) if prev is not None and prev_tau else None
        return solve(system, data.scaled(tau), grid, cfg, u0)

    for tau in taus:
        try:
            sol = attempt(tau, last, last_tau)
        except SonicExceeded as err:
            tripped = (float(tau), err)
            break
        path.continuation.append({"tau": float(tau), "max_q": sol.report.max_q, "residual": sol.report.residual,
                                  "iterations": sol.report.iterations})
        if last is not None:
            path.continuity.append({"tau": float(tau), "du": float(np.sqrt(np.sum(grid.weights * (sol.u - last.u) ** 2)))})
        last, last_tau = sol, float(tau)
    if tripped is None:
        path.stayed_subsonic = True
        path.subsonic = True
        path.converged = True
        if last is not None:
            path.max_q, path.residual = last.report.max_q, last.report.residual
        return last, path

    path.stayed_subsonic = False
    good, bad = (last_tau if last_tau is not None else 0.0), tripped[0]
    good_sol = last
    while bad - good > rel_tol * max(abs(bad), 1e-300):
        mid = 0.5 * (good + bad)
        try:
            sol = attempt(mid, good_sol, good)
        except SonicExceeded:
            bad = mid
            continue
        path.continuation.append({"tau": mid, "max_q": sol.report.max_q, "residual": sol.report.residual,
                                  "iterations": sol.report.iterations})
        good, good_sol = mid, sol
    path.continuation.sort(key=lambda row: row["tau"])
    path.tau_guard = good
    pts = [(r["tau"], r["max_q"]) for r in path.continuation]
    if len(pts) >= 2:
        (t1, q1), (t2, q2) = pts[-2], pts[-1]
        if q2 > q1:
            path.tau_s = t2 + (system.Q_s - q2) * (t2 - t1) / (q2 - q1)
    if good_sol is not None:
        path.max_q, path.residual = good_sol.report.max_q, good_sol.report.residual
    path.converged = good_sol is not None
    path.subsonic = False
    raise SonicExceeded(f"sonic guard tripped at tau = {tripped[0]:.6g}; tau_s ~ {path.tau_s}",
                        max_q=path.max_q, report=path)


def verify_bvp(sol, depth=2):
    """Residuals of the original system for a pulled-back solution.

    Line 1: ``exp(-zeta)(d*(rho w) - d zeta(Q) ^ *(rho w)) - d*sigma``; line 2:
    ``dw - d eta(Q) ^ w``; the boundary line is the tangential trace of
    ``exp(-eta(Q)) w`` against ``dg`` (Dirichlet) or the normal flux of
    ``rho exp(-zeta) w`` against nu (Neumann). ``extra['conformal']`` is the
    max deviation of ``exp(-eta(|w|^2)) w`` from ``w0``. Interior norms skip
    ``depth`` node layers: the first layer nests a one-sided boundary
    difference inside a second difference and is only first order.
    """
    grid, system, data = sol.grid, sol.system, sol.data
    w, w0 = sol.w, sol.w0
    x = grid.coords
    Q = qnorm(w)
    zeta = as_t_function(system.zeta)(Q, x)
    eta = system.eta.eta(Q)
    rw = w * system.rho(Q, x if system.rho.x_dependent else None)
    star = hodge_star(rw)
    sigma = DiscreteForm(grid, 1, data.sigma_at(x))
    # the source enters the transformed equation unweighted, hence the exp(-zeta) factor
    lhs = exterior_d(star) - wedge(exterior_d(DiscreteForm.scalar(grid, zeta)), star)
    line1 = lhs * np.exp(-zeta) - exterior_d(hodge_star(sigma))
    line2 = exterior_d(w) - wedge(exterior_d(DiscreteForm.scalar(grid, eta)), w)
    mask = grid.interior(depth) if depth else None
    report = ResidualReport(grid.h, norms(line1, mask), norms(line2, mask), None, 0, float(Q.max()))
    pulled = w * np.exp(-eta)
    report.extra["conformal"] = float(np.max(np.abs(pulled.coeffs - w0.coeffs)))
    nodes = {"left": (0, slice(None)), "right": (-1, slice(None)), "bottom": (slice(None), 0), "top": (slice(None), -1)}
    if data.kind == "dirichlet":
        gvals = data.g_at(x)
        dg = exterior_d(DiscreteForm.scalar(grid, gvals))
        trace = 0.0
        for side, sl in nodes.items():
            comp = 1 if side in ("bottom", "top") else 2  # tangential component
            trace = max(trace, float(np.max(np.abs(pulled[(comp,)][sl] - dg[(comp,)][sl]))))
        report.extra["trace"] = trace
    else:
        flux = data.normal_flux(grid)
        geom = _side_geometry(grid)
        weighted = rw * np.exp(-zeta)
        worst = 0.0
        for side, sl in nodes.items():
            normal = geom[side][1]
            fn = normal[0] * weighted[(1,)][sl] + normal[1] * weighted[(2,)][sl]
            worst = max(worst, float(np.max(np.abs(fn - flux[side]))))
        report.extra["flux"] = worst
    return report
