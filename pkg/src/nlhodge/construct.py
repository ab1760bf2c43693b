"""Explicit solutions from stream forms, residual verification and the energy.

A stream form f with ``rho(Q) w = *df`` turns the co-differential equation
into a pointwise algebraic problem, solved by ``w = *df / rho(psi(|df|^2))``.
The residual checks in this module are what the rest of the package uses to
judge every constructed or transformed field.
"""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .density import Density, MonotoneBranch, apply_A, apply_B, classify, make_branch, psi_invert
from .errors import DomainError, NonConvergence, PreconditionError, RangeError, SonicWarning
from .expr import FormExpression, parse_form
from .forms import (
    DiscreteForm,
    basis,
    codifferential,
    exterior_d,
    hodge_star,
    l2_inner,
    l2_norm,
    max_norm,
    permutation_sign,
    qnorm,
    wedge,
)

__all__ = [
    "SONIC_MARGIN",
    "ResidualReport",
    "StreamInput",
    "norms",
    "from_stream",
    "born_infeld_family",
    "verify_system",
    "gamma_recover",
    "integrating_factor_defect",
    "aharmonic_check",
    "energy",
    "energy_gradient_check",
    "euler_lagrange_residual",
]

SONIC_MARGIN = 1e-6  # relative distance to an open branch end that counts as sonic


def norms(form, mask=None):
    """(L2, max) norms of a form, optionally restricted to a node mask."""
    return l2_norm(form, mask), max_norm(form, mask)


def _mask(grid, depth):
    return grid.interior(depth) if depth else None


@dataclass
class ResidualReport:
    """Residual norms of the (possibly inhomogeneous) Hodge-Frobenius system.

    Each residual is an ``(l2, max)`` pair or None when it does not apply
    (for instance ``w ^ dw`` once its degree exceeds n).
    """

    h: tuple
    codiff: tuple | None = None
    frobenius: tuple | None = None
    integrability: tuple | None = None
    sonic_nodes: int = 0
    max_q: float = 0.0
    extra: dict = field(default_factory=dict)

    def as_dict(self):
        return asdict(self)


def _count_sonic(values, interval, closed):
    """Nodes within the relative guard distance of an open end of ``interval``."""
    lo, hi = interval
    finite = [e for e in (lo, hi) if np.isfinite(e)]
    width = (hi - lo) if np.isfinite(hi - lo) else max(1.0, *(abs(e) for e in finite))
    near = np.zeros(np.shape(values), dtype=bool)
    for end, c in zip((lo, hi), closed):
        if np.isfinite(end) and not c:
            near |= np.abs(values - end) < SONIC_MARGIN * width
    return int(near.sum())


def verify_system(w, rho, Gamma=None, Sigma=None, branch=None, depth=0):
    """Residuals of ``d*(rho w) = Sigma ^ *(rho w)`` and ``dw = Gamma ^ w``.

    Without Sigma the co-differential residual is ``delta(rho w)``; without
    Gamma the Frobenius residual is ``dw`` itself. ``depth`` excludes that
    many layers of boundary nodes from the norms.
    """
    grid = w.grid
    n, k = grid.n, w.k
    mask = _mask(grid, depth)
    q = qnorm(w)
    rw = apply_A(rho, w)
    codiff = None
    if Sigma is not None:
        star = hodge_star(rw)
        if star.k < n:
            codiff = norms(exterior_d(star) - wedge(Sigma, star), mask)
    elif k >= 1:
        codiff = norms(codifferential(rw), mask)
    frob = integ = None
    if k < n:
        dw = exterior_d(w)
        res = dw - wedge(Gamma, w) if Gamma is not None else dw
        frob = norms(res, mask)
        if 2 * k + 1 <= n:
            integ = norms(wedge(w, dw), mask)
    sonic = _count_sonic(q, branch.t_interval, branch.closed) if branch is not None else 0
    return ResidualReport(grid.h, codiff, frob, integ, sonic, float(q.max()))


@dataclass
class StreamInput:
    """Stream data: a form f with F = df, or a closed form F given directly."""

    branch: MonotoneBranch
    f: object = None
    F: object = None

    def __post_init__(self):
        if (self.f is None) == (self.F is None):
            raise PreconditionError("give exactly one of f and F")
        if isinstance(self.f, str):
            self.f = parse_form(self.f)
        if isinstance(self.F, str):
            self.F = parse_form(self.F)


def _closed_form(inp, grid):
    """Sample F on the grid; analytic d is used when f is an expression."""
    n = grid.n
    if inp.f is not None:
        if isinstance(inp.f, FormExpression):
            return inp.f.d(n).sample(grid)
        return exterior_d(inp.f)
    F = inp.F.sample(grid) if isinstance(inp.F, FormExpression) else inp.F
    if isinstance(inp.F, FormExpression):
        dF = inp.F.d(n).sample(grid) if F.k < n else None
        scale = max(1.0, max_norm(F))
        if dF is not None and max_norm(dF) > 1e-8 * scale:
            raise PreconditionError(f"F is not closed: max |dF| = {max_norm(dF):.3g}")
    elif F.k < n:
        # sampled data: dF can only be asked to be small at the discretization scale
        tol = 100.0 * max(grid.h) ** 2 * max(1.0, l2_norm(F))
        if l2_norm(exterior_d(F)) > tol:
            raise PreconditionError(f"F is not closed at O(h^2): ||dF|| = {l2_norm(exterior_d(F)):.3g} > {tol:.3g}")
    return F


def from_stream(grid, inp, depth=0):
    """Solution ``w = *F / rho(psi(|F|^2))`` of ``delta(rho(|w|^2) w) = 0``.

    Returns ``(w, report)``. Raises :class:`RangeError` listing nodes where
    ``|F|^2`` leaves the branch image; warns with :class:`SonicWarning` when
    nodes come within the guard distance of an open image end.
    """
    branch = inp.branch
    rho = branch.rho
    F = _closed_form(inp, grid)
    r = qnorm(F)
    bad = ~branch.contains_r(r)
    if np.any(bad):
        nodes = [tuple(int(i) for i in idx) for idx in np.argwhere(bad)[:20]]
        raise RangeError(f"|dF|^2 leaves the branch image {branch.r_interval} at {int(bad.sum())} nodes", nodes=nodes)
    sonic = _count_sonic(r, branch.r_interval, branch.r_closed)
    if sonic:
        warnings.warn(f"{sonic} nodes within the sonic guard of the branch image {branch.r_interval}", SonicWarning)
    x = grid.coords if rho.x_dependent else None
    t = psi_invert(branch, r, x)
    w = hodge_star(F) / rho(t, x)
    report = verify_system(w, rho, depth=depth)
    report.sonic_nodes = sonic
    report.extra["max_r"] = float(r.max())
    return w, report


def born_infeld_family(grid, f, sign="+", depth=0):
    """Member of the Born-Infeld families ``w = *df / sqrt(|df|^2 +- 1)``."""
    if sign not in ("+", "-"):
        raise PreconditionError("sign must be '+' or '-'")
    rho = Density.born_infeld()
    interval = (0.0, 1.0) if sign == "+" else (1.0, np.inf)
    branch = make_branch(rho, interval, closed=(sign == "+", False))
    w, report = from_stream(grid, StreamInput(branch, f=f), depth=depth)
    if sign == "+" and not report.max_q < 1.0:
        raise RangeError(f"W+ member with max Q = {report.max_q} >= 1")
    return w, report


# -- Frobenius structure -----------------------------------------------------------------


def _wedge_matrix(w):
    """Matrices M(x) with ``Gamma ^ w = M(x) Gamma`` for 1-forms Gamma."""
    n, k = w.grid.n, w.k
    rows = basis(n, k + 1)
    pos = {idx: p for p, idx in enumerate(rows)}
    M = np.zeros(w.grid.shape + (len(rows), n))
    for j in range(n):
        for q, I in enumerate(basis(n, k)):
            s = permutation_sign((j,) + I)
            if s:
                M[..., pos[tuple(sorted((j,) + I))], j] += s * w.coeffs[q]
    return M


def gamma_recover(w, threshold=1e-8, depth=0):
    """Pointwise minimal-norm least-squares Gamma with ``dw ~ Gamma ^ w``.

    Only degrees 1 and n-1 are supported. Nodes with ``|w| < threshold``
    are excluded: Gamma is set to zero there and they are listed in the
    returned dict under ``excluded``.
    """
    grid = w.grid
    n, k = grid.n, w.k
    if k not in (1, n - 1):
        raise PreconditionError(f"Gamma recovery needs degree 1 or n-1, got {k}")
    dw = exterior_d(w)
    M = _wedge_matrix(w)
    rhs = np.moveaxis(dw.coeffs, 0, -1)
    small = np.sqrt(qnorm(w)) < threshold
    sol = np.einsum("...ij,...j->...i", np.linalg.pinv(M), rhs)
    sol[small] = 0.0
    Gamma = DiscreteForm(grid, 1, np.moveaxis(sol, -1, 0))
    fit = dw - wedge(Gamma, w)
    excluded = [tuple(int(i) for i in idx) for idx in np.argwhere(small)]
    keep = ~small if depth == 0 else (~small & grid.interior(depth))
    return Gamma, {"fit": norms(fit, keep), "excluded": excluded}


def integrating_factor_defect(w, eta, depth=0):
    """Norms of ``d(exp(-eta) w)`` for a 0-form (or array) eta."""
    eta = eta.coeffs[0] if isinstance(eta, DiscreteForm) else np.asarray(eta, dtype=float)
    return norms(exterior_d(w * np.exp(-eta)), _mask(w.grid, depth))


def aharmonic_check(rho, branch, u=None, v=None, wt=None, grid=None, depth=0):
    """Checks of the A-harmonic correspondence for ``wt = A(du)`` (or a given wt).

    Reports ``||A(du) - delta v||`` (when v is given), ``||delta wt||``, the
    nonlinear Frobenius defect ``||d wt - d ln rho(|B(wt)|^2) ^ wt||`` and
    ``||d B(wt)||``. Expressions for u are differentiated analytically.
    """
    if isinstance(u, str):
        u = parse_form(u)
    if isinstance(v, str):
        v = parse_form(v)
    if wt is None:
        if u is None:
            raise PreconditionError("give u or wt")
        if isinstance(u, FormExpression):
            if grid is None:
                raise PreconditionError("a grid is needed to sample expressions")
            du = u.d(grid.n).sample(grid)
        else:
            du = exterior_d(u)
        wt = apply_A(rho, du)
    grid = wt.grid
    mask = _mask(grid, depth)
    out = {"h": grid.h}
    if v is not None:
        vf = v.sample(grid) if isinstance(v, FormExpression) else v
        out["conjugate"] = norms(wt - codifferential(vf), mask)
    out["codiff"] = norms(codifferential(wt), mask) if wt.k >= 1 else None
    w = apply_B(branch, wt)
    x = grid.coords if rho.x_dependent else None
    log_rho = DiscreteForm.scalar(grid, np.log(rho(qnorm(w), x)))
    if wt.k < grid.n:
        out["frobenius"] = norms(exterior_d(wt) - wedge(exterior_d(log_rho), wt), mask)
        out["closed"] = norms(exterior_d(w), mask)
    return out


# -- energy ------------------------------------------------------------------------------------


def _inner_integral(rho, q, x=None, panels=None, tol=1e-10, max_panels=2 ** 14):
    """``G(q) = int_0^q rho(s) ds`` by composite Simpson with panel doubling.

    Returns ``(G, panels)``. With ``panels`` given that count is used as is,
    so that nearby evaluations share one quadrature rule.
    """
    q = np.asarray(q, dtype=float).ravel()
    xs = tuple(np.asarray(xi).ravel()[:, None] for xi in x) if x is not None else None
    # densities open at 0 (p-power) take their raw limit value at the s = 0 node
    open_at_zero = rho.domain[0] == 0.0 and not rho.closed[0]
    live = q > 0 if open_at_zero else np.ones(q.shape, dtype=bool)

    def simpson(m):
        u = np.linspace(0.0, 1.0, m + 1)
        wts = np.ones(m + 1)
        wts[1:-1:2], wts[2:-1:2] = 4.0, 2.0
        ql = q[live]
        s = ql[:, None] * u[None, :]
        xb = tuple(np.broadcast_to(xi[live], s.shape) for xi in xs) if xs is not None else None
        if open_at_zero:
            vals = np.empty_like(s)
            vals[:, 1:] = rho(s[:, 1:], tuple(xi[:, 1:] for xi in xb) if xb is not None else None)
            with np.errstate(divide="ignore", invalid="ignore"):
                vals[:, 0] = rho.fn(s[:, 0], tuple(xi[:, 0] for xi in xb) if xb is not None else None)
            if not np.all(np.isfinite(vals[:, 0])):
                raise DomainError(f"{rho!r} is unbounded at 0; Simpson's rule does not apply")
        else:
            vals = rho(s, xb)
        out = np.zeros_like(q)
        out[live] = ql * (vals @ wts) / (3.0 * m)
        return out

    if panels is not None:
        return simpson(panels), panels
    m = 8
    prev = simpson(m)
    while True:
        m *= 2
        cur = simpson(m)
        if np.all(np.abs(cur - prev) <= tol * np.maximum(1.0, np.abs(cur))):
            return cur, m
        if m >= max_panels:
            raise NonConvergence(f"inner energy quadrature did not settle with {m} panels")
        prev = cur


def energy(w, rho, panels=None, return_panels=False):
    """``E = 1/2 int G(|w|^2) dx`` with the trapezoid rule over the grid."""
    grid = w.grid
    q = qnorm(w)
    x = grid.coords if rho.x_dependent else None
    G, m = _inner_integral(rho, q, x, panels)
    E = 0.5 * float(np.sum(grid.weights.ravel() * G))
    return (E, m) if return_panels else E


def energy_gradient_check(w, rho, phi, eta=None, eps=1e-5):
    """Relative defect between a central difference of E and ``<rho(Q) w, dir>``.

    The variation direction is ``d phi``, or ``exp(eta) d phi`` when a 0-form
    eta with ``Gamma = d eta`` is given.
    """
    if phi.k != w.k - 1:
        raise PreconditionError(f"test form must have degree {w.k - 1}")
    direction = exterior_d(phi)
    if eta is not None:
        eta = eta.coeffs[0] if isinstance(eta, DiscreteForm) else np.asarray(eta, dtype=float)
        direction = direction * np.exp(eta)
    _, m = energy(w, rho, return_panels=True)
    ep = energy(w + direction * eps, rho, panels=m)
    em = energy(w - direction * eps, rho, panels=m)
    fd = (ep - em) / (2 * eps)
    exact = l2_inner(apply_A(rho, w), direction)
    defect = abs(fd - exact) / max(abs(exact), 1e-300)
    return {"fd": fd, "exact": exact, "defect": defect, "panels": m}


def euler_lagrange_residual(w, rho, Gamma=None, depth=0):
    """Norms of ``delta(rho w) - (-1)^(n(k+1)) *(Gamma ^ *(rho w))``."""
    n, k = w.grid.n, w.k
    rw = apply_A(rho, w)
    res = codifferential(rw)
    if Gamma is not None:
        sign = -1.0 if (n * (k + 1)) % 2 else 1.0
        res = res - hodge_star(wedge(Gamma, hodge_star(rw))) * sign
    return norms(res, _mask(w.grid, depth))
