"""Densities rho(x, t), their phi-maps, monotone branches and dual pairs.

The central object is ``phi(t) = t * rho(t)**2``. On an interval where phi is
strictly monotone the operator ``A(w) = rho(|w|^2) w`` is invertible with
inverse ``B(v) = v / rho(psi(|v|^2))``, ``psi`` being the inverse of phi on
that interval; increasing phi is the elliptic regime, decreasing phi the
hyperbolic one.
"""

from __future__ import annotations

import inspect
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.interpolate import PchipInterpolator

from ._inverse import invert_monotone
from .errors import DomainError, InadmissibleSystem, PreconditionError, RangeError
from .expr import Expr, parse_expression
from .forms import DiscreteForm, qnorm

__all__ = [
    "GUARD",
    "Density",
    "MonotoneBranch",
    "RegimeReport",
    "DualPair",
    "EtaMap",
    "AdmissibleSystem",
    "phi",
    "classify",
    "make_branch",
    "psi_invert",
    "apply_A",
    "apply_B",
    "dual_density",
    "density_from_eta",
    "transform_density_t",
    "transform_density_x",
    "check_admissible",
    "as_t_function",
    "as_x_function",
    "depends_on_x",
]

GUARD = 1e-8  # evaluations this close to a declared singularity are domain errors
FAMILIES = ("constant", "p_power", "minimal", "maximal", "born_infeld", "extremal", "table", "expression")


def _fd(fn, t, scale=1e-3):
    """Five-point central difference of ``fn`` at ``t`` (arrays allowed)."""
    t = np.asarray(t, dtype=float)
    h = scale * np.maximum(1.0, np.abs(t))
    with np.errstate(invalid="ignore", divide="ignore"):
        d = (fn(t - 2 * h) - 8 * fn(t - h) + 8 * fn(t + h) - fn(t + 2 * h)) / (12 * h)
        bad = ~np.isfinite(d)
        if np.any(bad):
            # one-sided second-order fallback next to the edge of a natural domain
            fwd = (-3 * fn(t) + 4 * fn(t + h) - fn(t + 2 * h)) / (2 * h)
            bwd = (3 * fn(t) - 4 * fn(t - h) + fn(t - 2 * h)) / (2 * h)
            d = np.where(bad, np.where(np.isfinite(fwd), fwd, bwd), d)
    return d


def _bad_nodes(mask, limit=20):
    return [tuple(int(i) for i in idx) for idx in np.argwhere(np.atleast_1d(mask))[:limit]]


def as_t_function(f):
    """Normalize ``f`` (None, number, Expr, str, f(t) or f(t, x)) to ``f(t, x=None)``."""
    if f is None:
        f = 0.0
    if isinstance(f, str):
        f = parse_expression(f)
    if isinstance(f, (int, float)):
        c = float(f)
        return lambda t, x=None: np.full(np.shape(t), c)
    if isinstance(f, Expr):
        return lambda t, x=None: np.broadcast_to(np.asarray(f.of_t(t, x), dtype=float), np.broadcast_shapes(np.shape(t), *(np.shape(xi) for xi in (x or ())))).copy()
    try:
        params = [p for p in inspect.signature(f).parameters.values() if p.kind in (p.POSITIONAL_ONLY, p.POSITIONAL_OR_KEYWORD)]
    except (TypeError, ValueError):
        params = []
    if len(params) >= 2:
        return lambda t, x=None: np.asarray(f(t, x), dtype=float)
    return lambda t, x=None: np.asarray(f(t), dtype=float) * np.ones(np.shape(t))


def as_x_function(f):
    """Normalize ``f`` (None, number, Expr, str or f(x)) to ``f(x)`` with x a coordinate tuple."""
    if f is None:
        f = 0.0
    if isinstance(f, str):
        f = parse_expression(f)
    if isinstance(f, (int, float)):
        c = float(f)
        return lambda x: np.full(np.shape(x[0]), c)
    if isinstance(f, Expr):
        return lambda x: np.broadcast_to(np.asarray(f.of_x(x), dtype=float), np.shape(x[0])).copy()
    return lambda x: np.asarray(f(x), dtype=float)


def _subset_x(x, idx):
    if x is None:
        return None
    return tuple(np.asarray(xi).ravel()[idx] for xi in x)


def _broadcast_x(x, shape):
    if x is None:
        return None
    return tuple(np.broadcast_to(np.asarray(xi, dtype=float), shape) for xi in x)


class Density:
    """Positive density ``rho(t, x)`` with derivative in t and family metadata.

    ``fn(t, x)`` and ``dfn(t, x)`` are raw vectorized evaluators; calling the
    density goes through the domain guard, which turns points outside the
    domain, or within ``GUARD`` of a declared singularity, into a
    :class:`DomainError` naming the offending positions.
    """

    def __init__(self, fn, dfn=None, *, family="user", params=None, domain=(0.0, np.inf),
                 closed=(True, False), singular=(), x_dependent=False, phi_limits=None):
        self.fn = fn
        self._dfn = dfn
        self.family = family
        self.params = dict(params or {})
        self.domain = (float(domain[0]), float(domain[1]))
        self.closed = tuple(closed)
        self.singular = tuple(float(s) for s in singular)
        self.x_dependent = x_dependent
        # limits of phi at singular points / infinity, keyed by t value (np.inf allowed)
        self.phi_limits = dict(phi_limits or {})

    def __repr__(self):
        args = ", ".join(f"{k}={v}" for k, v in self.params.items())
        return f"Density({self.family}{', ' + args if args else ''})"

    # -- guarded evaluation -------------------------------------------------------
    def check(self, t):
        t = np.asarray(t, dtype=float)
        lo, hi = self.domain
        bad = ~np.isfinite(t) | (t < lo) | (t > hi)
        if not self.closed[0]:
            bad |= t == lo
        if not self.closed[1]:
            bad |= t == hi
        near = np.zeros(t.shape, dtype=bool)
        for s in self.singular:
            near |= np.abs(t - s) < GUARD
        if np.any(bad | near):
            kind = "singularity" if np.any(near) else "domain"
            where = "near singular point" if np.any(near) else "outside domain"
            raise DomainError(f"{self!r}: argument {where} {self.domain} ({kind})", nodes=_bad_nodes(bad | near))
        return t

    def __call__(self, t, x=None):
        t = self.check(t)
        with np.errstate(divide="ignore", invalid="ignore"):
            val = np.asarray(self.fn(t, x), dtype=float)
        bad = ~(val > 0) | ~np.isfinite(val)
        if np.any(bad):
            raise DomainError(f"{self!r} is not positive and finite at some points", nodes=_bad_nodes(bad))
        return val

    eval = __call__

    def deriv(self, t, x=None):
        t = self.check(t)
        if self._dfn is not None:
            return np.asarray(self._dfn(t, x), dtype=float)
        return _fd(lambda s: self.fn(s, x), t)

    def phi(self, t, x=None):
        t = np.asarray(t, dtype=float)
        return t * self(t, x) ** 2

    def dphi(self, t, x=None):
        t = np.asarray(t, dtype=float)
        r = self(t, x)
        return r * r + 2.0 * t * r * self.deriv(t, x)

    # -- families -------------------------------------------------------------------
    @classmethod
    def constant(cls, c=1.0):
        c = float(c)
        if not c > 0:
            raise PreconditionError("constant density must be positive")
        return cls(lambda t, x=None: np.full(np.shape(t), c), lambda t, x=None: np.zeros(np.shape(t)),
                   family="constant", params={"c": c}, phi_limits={np.inf: np.inf})

    @classmethod
    def p_power(cls, p):
        """``rho = t^(p/2)``; for p = 0 this is the constant 1."""
        p = float(p)
        if p == 0:
            return cls.constant(1.0)
        at_inf = np.inf if p > -1 else (1.0 if p == -1 else 0.0)
        at_zero = 0.0 if p > -1 else (1.0 if p == -1 else np.inf)
        return cls(lambda t, x=None: t ** (p / 2), lambda t, x=None: (p / 2) * t ** (p / 2 - 1),
                   family="p_power", params={"p": p}, closed=(False, False),
                   phi_limits={np.inf: at_inf, 0.0: at_zero})

    @classmethod
    def minimal(cls):
        return cls(lambda t, x=None: 1.0 / np.sqrt(1.0 + t), lambda t, x=None: -0.5 * (1.0 + t) ** -1.5,
                   family="minimal", phi_limits={np.inf: 1.0})

    @classmethod
    def maximal(cls):
        return cls(lambda t, x=None: 1.0 / np.sqrt(1.0 - t), lambda t, x=None: 0.5 * (1.0 - t) ** -1.5,
                   family="maximal", domain=(0.0, 1.0), closed=(True, False), singular=(1.0,),
                   phi_limits={1.0: np.inf})

    @classmethod
    def born_infeld(cls):
        return cls(lambda t, x=None: np.abs(t - 1.0) ** -0.5,
                   lambda t, x=None: -0.5 * np.sign(t - 1.0) * np.abs(t - 1.0) ** -1.5,
                   family="born_infeld", singular=(1.0,), phi_limits={1.0: np.inf, np.inf: 1.0})

    @classmethod
    def extremal(cls):
        return cls(lambda t, x=None: 1.0 / np.sqrt(t - 1.0), lambda t, x=None: -0.5 * (t - 1.0) ** -1.5,
                   family="extremal", domain=(1.0, np.inf), closed=(False, False), singular=(1.0,),
                   phi_limits={1.0: np.inf, np.inf: 1.0})

    @classmethod
    def table(cls, t_samples, rho_samples):
        """Monotone-cubic (PCHIP) interpolation of sampled ``(t, rho)`` pairs."""
        t_samples = np.asarray(t_samples, dtype=float)
        rho_samples = np.asarray(rho_samples, dtype=float)
        if t_samples.ndim != 1 or t_samples.size < 2 or np.any(np.diff(t_samples) <= 0):
            raise PreconditionError("table t values must be strictly increasing with at least 2 entries")
        if np.any(rho_samples <= 0):
            raise PreconditionError("table density values must be positive")
        interp = PchipInterpolator(t_samples, rho_samples, extrapolate=False)
        dinterp = interp.derivative()
        return cls(lambda t, x=None: interp(t), lambda t, x=None: dinterp(t), family="table",
                   params={"n": int(t_samples.size)}, domain=(t_samples[0], t_samples[-1]), closed=(True, True))

    @classmethod
    def from_expression(cls, src, domain=(0.0, np.inf), closed=(True, False), singular=()):
        expr = src if isinstance(src, Expr) else parse_expression(src)
        fn = as_t_function(expr)
        x_dep = any(v.startswith("x") for v in expr.variables)
        return cls(lambda t, x=None: fn(t, x), family="expression", params={"expr": expr.source},
                   domain=domain, closed=closed, singular=singular, x_dependent=x_dep)

    @classmethod
    def from_spec(cls, spec):
        """Build from a schema dict: ``{"family": name, ...params}``."""
        spec = dict(spec)
        family = spec.pop("family")
        if family == "constant":
            return cls.constant(spec.pop("c", 1.0))
        if family == "p_power":
            return cls.p_power(spec.pop("p"))
        if family in ("minimal", "maximal", "born_infeld", "extremal"):
            return getattr(cls, family)()
        if family == "table":
            return cls.table(spec.pop("t"), spec.pop("rho"))
        if family == "expression":
            domain = spec.pop("domain", (0.0, np.inf))
            return cls.from_expression(spec.pop("expr"), domain=tuple(float(d) for d in domain))
        raise PreconditionError(f"unknown density family {family!r}; expected one of {FAMILIES}")


def phi(rho, t, x=None):
    """``phi_rho(t) = t * rho(t)^2``."""
    return rho.phi(t, x)


# -- branches and classification -----------------------------------------------------------


@dataclass(frozen=True)
class MonotoneBranch:
    """Interval of strict monotonicity of phi together with its image.

    ``t_interval`` may have ``inf`` as upper end; ``closed`` flags whether the
    t-endpoints belong to the branch.
    """

    rho: Density
    t_interval: tuple
    r_interval: tuple
    direction: str
    closed: tuple = (False, False)
    x_ref: object = None

    @property
    def regime(self):
        return "elliptic" if self.direction == "increasing" else "hyperbolic"

    @property
    def increasing(self):
        return self.direction == "increasing"

    @property
    def r_closed(self):
        """Closedness of the image ends, ordered like ``r_interval``."""
        c = self.closed if self.increasing else self.closed[::-1]
        return tuple(bool(ci and np.isfinite(ri)) for ci, ri in zip(c, self.r_interval))

    def eval_bounds(self):
        """Finite-safe t bracket: open or singular ends are moved inward."""
        lo, hi = self.t_interval
        if not self.closed[0]:
            lo = lo + (2 * GUARD if _is_singular(self.rho, lo) else 1e-12 * max(1.0, abs(lo)))
        if np.isfinite(hi) and not self.closed[1]:
            hi = hi - (2 * GUARD if _is_singular(self.rho, hi) else 1e-12 * max(1.0, abs(hi)))
        return lo, hi

    def psi(self, r, x=None):
        return psi_invert(self, r, x)

    def contains_t(self, t):
        t = np.asarray(t, dtype=float)
        lo, hi = self.t_interval
        inside = (t > lo) & (t < hi)
        if self.closed[0]:
            inside |= t == lo
        if self.closed[1]:
            inside |= t == hi
        return inside

    def contains_r(self, r):
        r = np.asarray(r, dtype=float)
        r1, r2 = self.r_interval
        return (r >= r1) & (r <= r2)

    def __str__(self):
        lo, hi = self.t_interval
        lb = "[" if self.closed[0] else "("
        rb = "]" if self.closed[1] and np.isfinite(hi) else ")"
        return f"{self.regime} t in {lb}{lo:.10g}, {hi:.10g}{rb} -> r in [{self.r_interval[0]:.10g}, {self.r_interval[1]:.10g}]"


@dataclass
class RegimeReport:
    branches: list
    sonic_points: list = field(default_factory=list)
    singular_points: list = field(default_factory=list)
    low_confidence: bool = False

    def branch_at(self, t):
        for b in self.branches:
            if bool(b.contains_t(t)):
                return b
        raise RangeError(f"t={t} is not inside any monotone branch")

    def elliptic(self):
        return [b for b in self.branches if b.regime == "elliptic"]

    def hyperbolic(self):
        return [b for b in self.branches if b.regime == "hyperbolic"]


def _is_singular(rho, t):
    return any(abs(t - s) < 4 * GUARD for s in rho.singular)


def _scalar_dphi(rho, t, x):
    return float(np.asarray(rho.dphi(np.asarray(t, dtype=float), x)).ravel()[0])


def _safe_phi(rho, t, x):
    try:
        with np.errstate(all="ignore"):
            v = float(np.asarray(rho.phi(np.asarray(t, dtype=float), x)).ravel()[0])
    except DomainError:
        return np.inf
    return v if np.isfinite(v) else np.inf


def _sample(a, b, n):
    if np.isfinite(b):
        return np.linspace(a, b, n)
    span = max(1.0, abs(a))
    near = a + np.linspace(0.0, 4 * span, n // 2, endpoint=False)
    far = a + np.geomspace(4 * span, 1e12 * span, n - n // 2)
    return np.concatenate([near, far])


def _signs(rho, ts, x):
    with np.errstate(all="ignore"):
        d = np.asarray(rho.dphi(ts, x), dtype=float)
    s = np.sign(d)
    s[~np.isfinite(d)] = 0
    return s


def _locate_turn(rho, a, b, maximize, x):
    """Find where phi turns between a and b: ternary search on phi, then classify the point."""
    sgn = 1.0 if maximize else -1.0

    def score(t):
        v = _safe_phi(rho, t, x)
        return sgn * v if np.isfinite(v) else np.inf

    lo, hi = a, b
    for _ in range(200):
        if hi - lo <= 1e-13 * max(1.0, abs(lo)):
            break
        m1 = lo + (hi - lo) / 3
        m2 = hi - (hi - lo) / 3
        if score(m1) < score(m2):
            lo = m1
        else:
            hi = m2
    t_star = 0.5 * (lo + hi)
    probe = 1e-9 * max(1.0, abs(t_star))
    ends = max(abs(_safe_phi(rho, a, x)), abs(_safe_phi(rho, b, x)), 1.0)
    near = [_safe_phi(rho, t_star - probe, x), _safe_phi(rho, t_star + probe, x)]
    if any(not np.isfinite(v) or abs(v) > 1e6 * ends for v in near):
        return t_star, "singular"
    # smooth turning point: polish with bisection on the sign of dphi
    lo, hi = max(a, t_star - 1e-5 * max(1.0, abs(t_star))), min(b, t_star + 1e-5 * max(1.0, abs(t_star)))
    try:
        s_lo, s_hi = np.sign(_scalar_dphi(rho, lo, x)), np.sign(_scalar_dphi(rho, hi, x))
        if s_lo * s_hi < 0:
            for _ in range(200):
                mid = 0.5 * (lo + hi)
                if hi - lo <= 1e-12 * max(1.0, abs(mid)):
                    break
                if np.sign(_scalar_dphi(rho, mid, x)) == s_lo:
                    lo = mid
                else:
                    hi = mid
            t_star = 0.5 * (lo + hi)
    except DomainError:
        pass
    return t_star, "sonic"


def _phi_end(rho, t, inward, x):
    """phi at a branch end (limit values for infinity and singular points)."""
    for key, val in rho.phi_limits.items():
        if (np.isinf(key) and np.isinf(t)) or (np.isfinite(key) and np.isfinite(t) and abs(key - t) < 4 * GUARD):
            return float(val)
    if np.isinf(t):
        return _safe_phi(rho, 1e15, x)
    try:
        return float(np.asarray(rho.phi(np.asarray(t), x)).ravel()[0])
    except DomainError:
        return _safe_phi(rho, np.nextafter(t, inward), x)


def _branch(rho, a, b, closed, increasing, x):
    ra = _phi_end(rho, a, b, x)
    rb = _phi_end(rho, b, a, x)
    r_interval = (min(ra, rb), max(ra, rb))
    return MonotoneBranch(rho, (float(a), float(b)), r_interval, "increasing" if increasing else "decreasing",
                          tuple(closed), x_ref=x)


def classify(rho, interval=None, n_samples=256, x=None):
    """Split ``interval`` into maximal sampled monotone branches of phi.

    Sign changes of ``dphi/dt`` between samples are located by a ternary
    search on phi and labelled sonic (smooth turning point) or singular
    (blow-up). Declared singularities of ``rho`` split the interval up
    front. If doubling the sampling changes the number of sign changes the
    report is flagged ``low_confidence``.
    """
    if n_samples < 16:
        raise PreconditionError("classify needs at least 16 samples")
    lo, hi = interval if interval is not None else rho.domain
    lo, hi = max(float(lo), rho.domain[0]), min(float(hi), rho.domain[1])
    if not hi > lo:
        raise PreconditionError(f"interval ({lo}, {hi}) does not meet the domain {rho.domain}")
    closed_lo = rho.closed[0] or lo > rho.domain[0]
    closed_hi = np.isfinite(hi) and (rho.closed[1] or hi < rho.domain[1])
    cuts = sorted(s for s in rho.singular if lo < s < hi)
    edges = [lo] + cuts + [hi]
    closed_flags = [closed_lo] + [False] * len(cuts) + [closed_hi]
    if _is_singular(rho, lo):
        closed_flags[0] = False
    if np.isfinite(hi) and _is_singular(rho, hi):
        closed_flags[-1] = False

    report = RegimeReport(branches=[], singular_points=list(cuts))
    for a, b, ca, cb in zip(edges[:-1], edges[1:], closed_flags[:-1], closed_flags[1:]):
        piece = MonotoneBranch(rho, (a, b), (0.0, 0.0), "increasing", (ca, cb))
        ea, eb = piece.eval_bounds()
        if np.isfinite(b) and not eb > ea:
            continue
        turns = []
        counts = []
        for n in (n_samples, 2 * n_samples):
            ts = _sample(ea, eb if np.isfinite(b) else np.inf, n)
            s = _signs(rho, ts, x)
            # zeros inherit the sign of the nearest nonzero neighbour
            nz = np.flatnonzero(s)
            if nz.size == 0:
                report.low_confidence = True
                counts.append(-1)
                continue
            s = s[nz[np.clip(np.searchsorted(nz, np.arange(s.size)), 0, nz.size - 1)]]
            changes = np.flatnonzero(s[:-1] != s[1:])
            counts.append(len(changes))
            if n == n_samples:
                coarse = (ts, s, changes)
        if counts[0] != counts[1]:
            report.low_confidence = True
        if counts[0] < 0:
            continue
        ts, s, changes = coarse
        for i in changes:
            t_star, kind = _locate_turn(rho, ts[i], ts[i + 1], s[i] > 0, x)
            turns.append((t_star, kind))
            (report.singular_points if kind == "singular" else report.sonic_points).append(t_star)
        starts = [a] + [t for t, _ in turns]
        stops = [t for t, _ in turns] + [b]
        signs = [s[0]] + [s[i + 1] for i in changes]
        for j, (t1, t2, sg) in enumerate(zip(starts, stops, signs)):
            c1 = ca if j == 0 else False
            c2 = cb if j == len(starts) - 1 else False
            report.branches.append(_branch(rho, t1, t2, (c1, c2), sg > 0, x))
    report.singular_points.sort()
    report.sonic_points.sort()
    return report


def make_branch(rho, t_interval, closed=(True, False), n_samples=256, x=None):
    """Branch on a caller-named interval, after a sampled monotonicity check."""
    a, b = float(t_interval[0]), float(t_interval[1])
    probe = MonotoneBranch(rho, (a, b), (0.0, 0.0), "increasing", tuple(closed))
    ea, eb = probe.eval_bounds()
    s = _signs(rho, _sample(ea, eb, n_samples), x)
    s = s[s != 0]
    if s.size == 0 or np.any(s != s[0]):
        raise PreconditionError(f"phi is not strictly monotone on {t_interval} for {rho!r}")
    return _branch(rho, a, b, closed, s[0] > 0, x)


# -- inversion and the A/B operators -----------------------------------------------------


def psi_invert(branch, r, x=None):
    """Inverse of phi restricted to ``branch``, evaluated elementwise at ``r``.

    Bisection to a coarse bracket, then Newton with ``dphi = rho^2 + 2 t rho rho'``;
    the result satisfies ``|phi(t) - r| <= 1e-12 max(1, |r|)`` unless the
    bracket collapses to floating-point resolution first.
    """
    r = np.asarray(r, dtype=float)
    rho = branch.rho
    xs = _broadcast_x(x, r.shape) if x is not None else None
    flat = tuple(xi.ravel() for xi in xs) if xs is not None else None
    lo, hi = branch.eval_bounds()
    try:
        t = invert_monotone(
            lambda t, idx: rho.phi(t, _subset_x(flat, idx)),
            lambda t, idx: rho.dphi(t, _subset_x(flat, idx)),
            r, lo, hi, increasing=branch.increasing, tol=1e-15,
        )
    except RangeError as err:
        nodes = [tuple(int(i) for i in np.unravel_index(k, r.shape)) for k in np.asarray(err.nodes)[:20]] if r.shape else [()]
        raise RangeError(f"squared norm outside the branch image {branch.r_interval}", nodes=nodes) from None
    return t


def _x_of(form, rho):
    return form.grid.coords if rho.x_dependent else None


def apply_A(rho, w):
    """``A(w) = rho(|w|^2) w`` pointwise."""
    q = qnorm(w)
    try:
        scale = rho(q, _x_of(w, rho))
    except DomainError as err:
        raise DomainError(f"|w|^2 hits the domain boundary or a singularity of {rho!r}", nodes=err.nodes) from None
    return w * scale


def apply_B(branch, wt):
    """``B(v) = v / rho(psi(|v|^2))`` pointwise, inverse of A on the branch."""
    q = qnorm(wt)
    x = _x_of(wt, branch.rho)
    t = psi_invert(branch, q, x)
    return wt / branch.rho(t, x)


# -- duality ---------------------------------------------------------------------------------


@dataclass(frozen=True)
class DualPair:
    rho: Density
    rho_hat: Density
    branch: MonotoneBranch
    hat_branch: MonotoneBranch


def dual_density(rho, branch):
    """Dual density ``rho_hat(that) = 1 / rho(psi(that))`` on the branch image."""
    if branch.rho is not rho:
        raise PreconditionError("branch belongs to a different density")
    r1, r2 = branch.r_interval
    t1, t2 = branch.t_interval
    # r end -> the t end it comes from
    if branch.increasing:
        ends = {"lo": (t1, branch.closed[0]), "hi": (t2, branch.closed[1])}
    else:
        ends = {"lo": (t2, branch.closed[1]), "hi": (t1, branch.closed[0])}
    closed = (bool(ends["lo"][1] and np.isfinite(r1)), bool(ends["hi"][1] and np.isfinite(r2)))
    singular = [r for r, c in zip((r1, r2), closed) if np.isfinite(r) and not c and r > 0]
    phi_limits = {}
    for r_end, (t_end, c) in zip((r1, r2), (ends["lo"], ends["hi"])):
        if not c:
            phi_limits[r_end] = t_end

    def fn(th, x=None):
        t = psi_invert(branch, th, x)
        return 1.0 / rho(t, x)

    def dfn(th, x=None):
        t = psi_invert(branch, th, x)
        r = rho(t, x)
        return -rho.deriv(t, x) / (r * r * rho.dphi(t, x))

    rho_hat = Density(fn, dfn, family="dual", params={"of": rho.family}, domain=(r1, r2), closed=closed,
                      singular=singular, x_dependent=rho.x_dependent, phi_limits=phi_limits)
    hat_branch = MonotoneBranch(rho_hat, (r1, r2), (min(t1, t2), max(t1, t2)), branch.direction, closed, branch.x_ref)
    return DualPair(rho, rho_hat, branch, hat_branch)


def density_from_eta(eta_tilde, interval, deta=None, n_samples=256):
    """Density ``rho(t) = exp(eta~(f^-1(t)))`` with ``f(s) = s exp(-2 eta~(s))`` on ``interval``."""
    eta = as_t_function(eta_tilde)
    a, b = float(interval[0]), float(interval[1])
    if not (np.isfinite(a) and np.isfinite(b) and b > a):
        raise PreconditionError("density_from_eta needs a finite interval")
    deta_fn = as_t_function(deta) if deta is not None else (lambda s, x=None: _fd(lambda u: eta(u), s))

    def f(s):
        return s * np.exp(-2.0 * eta(s))

    def df(s):
        return np.exp(-2.0 * eta(s)) * (1.0 - 2.0 * s * deta_fn(s))

    slopes = np.sign(df(np.linspace(a, b, n_samples)))
    if np.any(slopes == 0) or np.any(slopes != slopes[0]):
        raise PreconditionError(f"f(s) = s exp(-2 eta(s)) is not injective on {interval}")
    increasing = slopes[0] > 0
    fa, fb = float(f(np.asarray(a))), float(f(np.asarray(b)))

    def finv(t):
        return invert_monotone(lambda s, idx: f(s), lambda s, idx: df(s), t, a, b, increasing=increasing, tol=1e-15)

    def fn(t, x=None):
        return np.exp(eta(finv(t)))

    def dfn(t, x=None):
        s = finv(t)
        return np.exp(eta(s)) * deta_fn(s) / df(s)

    return Density(fn, dfn, family="from_eta", domain=(min(fa, fb), max(fa, fb)), closed=(True, True))


# -- conformal transforms of densities ---------------------------------------------------------


class EtaMap:
    """A t-dependent conformal exponent eta together with ``f(t) = t exp(-2 eta(t))`` and its inverse g."""

    def __init__(self, eta=None, deta=None, interval=(0.0, np.inf), n_samples=256):
        self.eta = as_t_function(eta)
        self.interval = (float(interval[0]), float(interval[1]))
        if deta is not None:
            self.deta = as_t_function(deta)
        elif isinstance(eta, (int, float)) or eta is None:
            self.deta = lambda t, x=None: np.zeros(np.shape(t))
        else:
            self.deta = lambda t, x=None: _fd(lambda s: self.eta(s), t)
        a, b = self.interval
        slopes = np.sign(self.df(_sample(a, b, n_samples)))
        slopes = slopes[np.isfinite(slopes)]
        if slopes.size == 0 or np.any(slopes == 0) or np.any(slopes != slopes[0]):
            raise PreconditionError(f"f_eta is not strictly monotone on {self.interval}")
        self.increasing = bool(slopes[0] > 0)
        # constant exponent: f and g are plain rescalings
        self.const = 0.0 if eta is None else (float(eta) if isinstance(eta, (int, float)) else None)

    @classmethod
    def constant(cls, c):
        return cls(float(c))

    def f(self, t):
        t = np.asarray(t, dtype=float)
        return t * np.exp(-2.0 * self.eta(t))

    def df(self, t):
        t = np.asarray(t, dtype=float)
        return np.exp(-2.0 * self.eta(t)) * (1.0 - 2.0 * t * self.deta(t))

    @cached_property
    def image(self):
        a, b = self.interval
        fa = float(self.f(np.asarray(a)))
        fb = float(self.f(np.asarray(b))) if np.isfinite(b) else (np.inf if self.increasing else 0.0)
        return (min(fa, fb), max(fa, fb))

    def g(self, that):
        """Inverse of f on the interval."""
        that = np.asarray(that, dtype=float)
        a, b = self.interval
        if self.const is not None and a == 0.0 and np.isinf(b):
            if np.any(that < 0):
                raise RangeError("value outside the image of f_eta", nodes=np.flatnonzero(that.ravel() < 0))
            return that * np.exp(2.0 * self.const)
        try:
            return invert_monotone(lambda t, idx: self.f(t), lambda t, idx: self.df(t), that, a, b,
                                   increasing=self.increasing, tol=1e-15)
        except RangeError as err:
            raise RangeError(f"value outside the image {self.image} of f_eta", nodes=err.nodes) from None

    def dg(self, that):
        return 1.0 / self.df(self.g(that))


def _as_eta_map(eta):
    return eta if isinstance(eta, EtaMap) else EtaMap(eta)


def depends_on_x(f):
    """Whether a coefficient function (Expr, str, number or callable) may vary with x."""
    if f is None or isinstance(f, (int, float)):
        return False
    if isinstance(f, str):
        f = parse_expression(f)
    if isinstance(f, Expr):
        return any(v.startswith("x") for v in f.variables)
    try:
        params = [p for p in inspect.signature(f).parameters.values() if p.kind in (p.POSITIONAL_ONLY, p.POSITIONAL_OR_KEYWORD)]
    except (TypeError, ValueError):
        return True
    return len(params) >= 2


def transform_density_t(rho1, eta, zeta=None, inverse=False):
    """Density of the conformally transformed field for t-dependent exponents.

    Forward: ``rho0(that) = exp(eta(g(that)) - zeta(g(that))) rho1(g(that))``.
    Inverse (``inverse=True``, argument read as rho0):
    ``rho1(t) = exp(zeta(t) - eta(t)) rho0(f(t))``.
    """
    em = _as_eta_map(eta)
    z = as_t_function(zeta)

    def dz(t, x=None):
        return _fd(lambda s: z(s, x), t)

    src = rho1
    if not inverse:
        def fn(th, x=None):
            t = em.g(th)
            return np.exp(em.eta(t) - z(t, x)) * src(t, x)

        def dfn(th, x=None):
            t = em.g(th)
            base = np.exp(em.eta(t) - z(t, x))
            return (base * src(t, x) * (em.deta(t) - dz(t, x)) + base * src.deriv(t, x)) / em.df(t)

        lo = max(src.domain[0], em.interval[0])
        hi = min(src.domain[1], em.interval[1])
        ends = em.f(np.array([lo])) [0], (em.f(np.array([hi]))[0] if np.isfinite(hi) else em.image[1])
        domain = (min(ends), max(ends))
        singular = [float(em.f(np.asarray(s))) for s in src.singular]
        closed = src.closed if em.increasing else src.closed[::-1]
        limits = {float(em.f(np.asarray(k))) if np.isfinite(k) else em.image[1]: v for k, v in src.phi_limits.items()}
    else:
        def fn(t, x=None):
            return np.exp(z(t, x) - em.eta(t)) * src(em.f(t), x)

        def dfn(t, x=None):
            base = np.exp(z(t, x) - em.eta(t))
            s = em.f(t)
            return base * src(s, x) * (dz(t, x) - em.deta(t)) + base * src.deriv(s, x) * em.df(t)

        lo, hi = src.domain

        def g_end(v):
            # image endpoints map back to interval endpoints exactly
            for edge, back in zip(em.image, em.interval if em.increasing else em.interval[::-1]):
                if v == edge:
                    return back
            return float(em.g(np.asarray(v)))

        ends = (g_end(max(lo, em.image[0])), g_end(hi) if np.isfinite(hi) else em.interval[1])
        domain = (min(ends), max(ends))
        singular = [float(em.g(np.asarray(s))) for s in src.singular if em.image[0] <= s <= em.image[1]]
        closed = src.closed
        limits = {}
    return Density(fn, dfn, family="transformed_t", params={"inverse": inverse}, domain=domain, closed=closed,
                   singular=singular, x_dependent=src.x_dependent or depends_on_x(zeta), phi_limits=limits)


def transform_density_x(rho1, eta, zeta=None, inverse=False):
    """Density of the conformally transformed field for x-dependent exponents.

    Forward: ``rho0(x, t) = exp(eta(x) - zeta(x)) rho1(exp(2 eta(x)) t)``;
    inverse: ``rho1(x, t) = exp(zeta(x) - eta(x)) rho0(exp(-2 eta(x)) t)``.
    """
    e = as_x_function(eta)
    z = as_x_function(zeta)
    sgn = -1.0 if inverse else 1.0
    src = rho1

    def need(x):
        if x is None:
            raise PreconditionError("an x-dependent density needs coordinates")
        return x

    def fn(t, x=None):
        x = need(x)
        ex, zx = e(x), z(x)
        return np.exp(sgn * (ex - zx)) * src(np.exp(2 * sgn * ex) * t, x)

    def dfn(t, x=None):
        x = need(x)
        ex, zx = e(x), z(x)
        stretch = np.exp(2 * sgn * ex)
        return np.exp(sgn * (ex - zx)) * stretch * src.deriv(stretch * t, x)

    return Density(fn, dfn, family="transformed_x", params={"inverse": inverse}, domain=(0.0, np.inf),
                   x_dependent=True)


# -- admissibility ---------------------------------------------------------------------------------


@dataclass
class AdmissibleSystem:
    """Triple (rho, zeta, eta) that passed the sampled admissibility checks.

    ``Q_s`` is the sonic speed estimated from the probes; ``caveats`` lists
    what could only be verified on the probe range.
    """

    rho: Density
    zeta: object  # as given: None, number, expression or callable of (t, x)
    eta: EtaMap
    bound_k: float
    Q_s: float
    caveats: list = field(default_factory=list)

    @cached_property
    def rho0(self):
        return transform_density_t(self.rho, self.eta, self.zeta)

    def f_eta(self, t):
        return self.eta.f(t)

    def g_eta(self, that):
        return self.eta.g(that)


def _admissibility_at(rho, zeta, em, t, xs, bound_k):
    """(b_ok, c_ok, rho0 values) at a single t over all x probes."""
    tt = np.full(np.shape(xs[0]) if xs is not None else (1,), float(t))
    try:
        r = rho(tt, xs)
        z = zeta(tt, xs)
        dr = rho.deriv(tt, xs)
    except DomainError:
        return False, False, None
    dz = _fd(lambda s: zeta(s, xs), tt)
    rho0 = r * np.exp(em.eta(tt) - z)
    dphi = np.exp(-2 * z) * (r * r + 2 * tt * r * dr - 2 * tt * r * r * dz)
    c_ok = bool(np.all(dphi * np.sign(em.df(tt)) > 0))
    if bound_k is None:
        b_ok = bool(np.all(np.isfinite(rho0) & (rho0 > 0)))
    else:
        b_ok = bool(np.all((rho0 >= bound_k) & (rho0 <= 1.0 / bound_k)))
    return b_ok, c_ok, rho0


def check_admissible(rho, zeta=None, eta=None, t_probe=None, x_probe=None, bound_k=None, tol=1e-10):
    """Verify the admissibility conditions on a probe grid and estimate ``Q_s``.

    a) f_eta injective (sampled) with ``g(f(t)) = t`` to 1e-10 on the probes;
    b) ``rho0 = rho exp(eta - zeta)`` within ``[k, 1/k]``: with ``bound_k``
       given this bounds ``Q_s``, otherwise the best k is reported;
    c) ``d/dt phi_{rho exp(-zeta)} * g_eta' > 0``.

    ``Q_s`` is the largest probed T for which b) and c) hold on (0, T),
    refined by bisection between the last passing and first failing probe.
    Raises :class:`InadmissibleSystem` naming the condition and a witness.
    """
    zeta_fn = as_t_function(zeta)
    if t_probe is None:
        top = rho.domain[1] if np.isfinite(rho.domain[1]) else 100.0
        t_probe = np.linspace(0.0, top, 1025)[1:]
    t_probe = np.sort(np.asarray(t_probe, dtype=float))
    t_probe = t_probe[t_probe > 0]
    if t_probe.size == 0:
        raise PreconditionError("probe grid is empty")
    xs = tuple(np.asarray(xi, dtype=float).ravel() for xi in x_probe) if x_probe is not None else None
    try:
        em = eta if isinstance(eta, EtaMap) else EtaMap(eta, interval=(0.0, np.inf))
    except PreconditionError as err:
        raise InadmissibleSystem("a", None, f"condition a) fails: {err}") from None
    fvals = em.f(t_probe)
    if not em.increasing or np.any(np.diff(fvals) <= 0):
        witness = float(t_probe[np.argmax(np.diff(fvals) <= 0)]) if np.any(np.diff(fvals) <= 0) else float(t_probe[0])
        raise InadmissibleSystem("a", {"t": witness}, "condition a) fails: f_eta is not increasing on the probes")
    back = em.g(fvals)
    if np.max(np.abs(back - t_probe) / np.maximum(1.0, t_probe)) > tol:
        i = int(np.argmax(np.abs(back - t_probe)))
        raise InadmissibleSystem("a", {"t": float(t_probe[i])}, "condition a) fails: g_eta(f_eta(t)) != t")

    rho0_min = np.inf
    fail = None
    for i, t in enumerate(t_probe):
        b_ok, c_ok, rho0 = _admissibility_at(rho, zeta_fn, em, t, xs, bound_k)
        if not (b_ok and c_ok):
            fail = (i, "c" if not c_ok else "b")
            break
        rho0_min = min(rho0_min, float(np.min(np.minimum(rho0, 1.0 / rho0))))
    caveats = ["surjectivity of f_eta verified only on the probe range"]
    if fail is None:
        Q_s = float(t_probe[-1])
        caveats.append("Q_s is the top of the probe range; conditions held on every probe")
    else:
        i, cond = fail
        if i == 0:
            raise InadmissibleSystem(cond, {"t": float(t_probe[0])},
                                     f"condition {cond}) fails at the first probe t={t_probe[0]:.6g}")
        good, bad = float(t_probe[i - 1]), float(t_probe[i])
        while bad - good > 1e-12 * max(1.0, bad):
            mid = 0.5 * (good + bad)
            b_ok, c_ok, _ = _admissibility_at(rho, zeta_fn, em, mid, xs, bound_k)
            if b_ok and c_ok:
                good = mid
            else:
                bad = mid
        Q_s = good
    k = bound_k if bound_k is not None else min(1.0, rho0_min)
    return AdmissibleSystem(rho, zeta, em, float(k), Q_s, caveats)
