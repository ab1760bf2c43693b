"""Hodge-Backlund duality and the two conformal correspondences.

``dual_transform`` maps a k-form w to ``xi = *(rho(|w|^2) w)``; the dual
density ``rho_hat`` then satisfies ``*(rho_hat(|xi|^2) xi) = (-1)^(k(n-k)) w``.
The conformal maps rescale w by ``exp(-eta)`` with eta a function of
``|w|^2`` or of position.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .construct import verify_system
from .density import (
    EtaMap,
    as_t_function,
    as_x_function,
    classify,
    dual_density,
    transform_density_t,
)
from .errors import PreconditionError, RangeError
from .forms import hodge_star, qnorm

__all__ = [
    "TransformRecord",
    "dual_transform",
    "verify_dual",
    "dual_identity_defect",
    "conformal_forward_t",
    "conformal_inverse_t",
    "conformal_x",
    "ellipticity_sign_check",
]


@dataclass
class TransformRecord:
    kind: str
    direction: str
    degree_in: int
    degree_out: int
    densities: tuple
    eta: str | None = None
    zeta: str | None = None
    regimes: tuple = ()
    notes: list = field(default_factory=list)


def _branch_for(rho, q, x=None):
    """The monotone branch of rho containing every value of q."""
    report = classify(rho, x=x)
    for b in report.branches:
        if np.all(b.contains_t(q)):
            return b
    raise PreconditionError(f"|w|^2 spans more than one monotone branch of {rho!r}")


def dual_transform(w, rho, branch=None):
    """``xi = *(rho(|w|^2) w)`` together with the dual pair it lives in.

    Returns ``(xi, pair, record)``; ``pair.rho_hat`` is the density of the
    dual system.
    """
    q = qnorm(w)
    x = w.grid.coords if rho.x_dependent else None
    if branch is None:
        branch = _branch_for(rho, q)
    elif not np.all(branch.contains_t(q)):
        raise RangeError("|w|^2 leaves the given branch")
    pair = dual_density(rho, branch)
    xi = hodge_star(w * rho(q, x))
    record = TransformRecord("dual", "forward", w.k, xi.k, (repr(rho), repr(pair.rho_hat)),
                             regimes=(branch.regime, pair.hat_branch.regime))
    return xi, pair, record


def verify_dual(xi, pair, Gamma=None, Sigma=None, depth=0):
    """Residuals of the dual system ``d*(rho_hat xi) = Gamma ^ *(rho_hat xi)``, ``d xi = Sigma ^ xi``.

    The roles of the two 1-forms swap relative to the source system.
    """
    return verify_system(xi, pair.rho_hat, Gamma=Sigma, Sigma=Gamma, branch=pair.hat_branch, depth=depth)


def dual_identity_defect(w, xi, pair):
    """Max of ``|*(rho_hat(|xi|^2) xi) - (-1)^(k(n-k)) w|``."""
    x = xi.grid.coords if pair.rho_hat.x_dependent else None
    back = hodge_star(xi * pair.rho_hat(qnorm(xi), x))
    n, k = w.grid.n, w.k
    sigma = -1.0 if (k * (n - k)) % 2 else 1.0
    return float(np.max(np.abs(back.coeffs - sigma * w.coeffs)))


def _eta_map(eta):
    return eta if isinstance(eta, EtaMap) else EtaMap(eta)


def conformal_forward_t(w1, eta):
    """``w0 = exp(-eta(|w1|^2)) w1``; then ``|w0|^2 = f_eta(|w1|^2)``."""
    em = _eta_map(eta)
    return w1 * np.exp(-em.eta(qnorm(w1)))


def conformal_inverse_t(w0, eta):
    """``w1 = exp(eta(g_eta(|w0|^2))) w0``, the inverse of :func:`conformal_forward_t`."""
    em = _eta_map(eta)
    t = em.g(qnorm(w0))
    return w0 * np.exp(em.eta(t))


def conformal_x(w, eta, direction="forward"):
    """``w0 = exp(-eta(x)) w1`` (forward) or ``w1 = exp(eta(x)) w0`` (inverse)."""
    if direction not in ("forward", "inverse"):
        raise PreconditionError("direction must be 'forward' or 'inverse'")
    e = as_x_function(eta)(w.grid.coords)
    return w * np.exp(-e if direction == "forward" else e)


def _central(fn, t, rel=1e-6):
    h = rel * np.maximum(1.0, np.abs(t))
    return (fn(t + h) - fn(t - h)) / (2 * h)


def ellipticity_sign_check(rho1, zeta=None, eta=None, t_hat=None, x=None, noise=1e-10):
    """Compare ``sign d/dthat phi_rho0`` with ``sign d/dt phi_{rho1 exp(-zeta)} * sign g'``.

    All three derivatives are central finite differences. Probes where
    either side is below ``noise`` in magnitude are counted as inconclusive
    rather than compared.
    """
    em = _eta_map(eta)
    z = as_t_function(zeta)
    rho0 = transform_density_t(rho1, em, z)
    t_hat = np.asarray(t_hat, dtype=float)
    t = em.g(t_hat)

    def phi0(s):
        return rho0.phi(s, x)

    def phi1z(s):
        return s * (rho1(s, x) * np.exp(-z(s, x))) ** 2

    lhs = _central(phi0, t_hat)
    d1 = _central(phi1z, t)
    dg = _central(em.g, t_hat)
    rhs = d1 * dg
    inconclusive = (np.abs(lhs) < noise) | (np.abs(rhs) < noise)
    agree = (np.sign(lhs) == np.sign(d1) * np.sign(dg)) & ~inconclusive
    rel = np.abs(lhs - rhs) / np.maximum(np.abs(rhs), noise)
    return {
        "probes": int(t_hat.size),
        "agree": int(agree.sum()),
        "disagree": int((~agree & ~inconclusive).sum()),
        "inconclusive": int(inconclusive.sum()),
        "max_rel_mismatch": float(rel[~inconclusive].max()) if np.any(~inconclusive) else 0.0,
        "regime0": np.where(lhs > 0, "elliptic", "hyperbolic"),
    }
