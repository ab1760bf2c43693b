"""Vectorized inversion of monotone scalar maps.

Every node of a grid needs its own root, so the bracketing and Newton
phases run on whole arrays at once rather than one scalar at a time.
"""

import numpy as np

from .errors import RangeError

COARSE_TOL = 1e-6
MAX_ITER = 200


def invert_monotone(fun, dfun, target, lo, hi, increasing=True, tol=1e-12, max_iter=MAX_ITER):
    """Solve ``fun(t) = target`` elementwise for t in ``[lo, hi]``.

    ``fun(t, idx)`` and ``dfun(t, idx)`` receive 1-D arrays of trial values
    together with the flat indices (into ``target``) they belong to, so that
    position-dependent maps can pick their coordinates. ``hi`` may be
    ``inf``; the bracket is then expanded geometrically. Stops when ``|fun(t) - target| <= tol * max(1, |target|)``
    or the bracket has collapsed to floating-point resolution; Newton steps
    that leave the bracket are replaced by bisection, so the iteration cannot
    diverge on a valid bracket.

    Raises :class:`RangeError` listing the flat indices of targets that are
    not bracketed by ``[fun(lo), fun(hi)]``.
    """
    target = np.asarray(target, dtype=float)
    shape = target.shape
    r = target.ravel()
    s = 1.0 if increasing else -1.0
    lo = np.broadcast_to(np.asarray(lo, dtype=float), shape).ravel().copy()
    hi = np.broadcast_to(np.asarray(hi, dtype=float), shape).ravel().copy()

    def g(t, idx):
        return s * (np.asarray(fun(t, idx), dtype=float) - r[idx])

    if r.size == 0:
        return target.copy()
    everything = np.arange(r.size)
    open_top = ~np.isfinite(hi)
    if open_top.any():
        idx = everything[open_top]
        top = np.maximum(2.0 * lo[idx], lo[idx] + 1.0)
        for _ in range(max_iter):
            below = g(top, idx) < 0
            if not below.any():
                break
            lo[idx[below]] = top[below]
            top[below] = 2.0 * top[below] + 1.0
        else:
            raise RangeError("target exceeds the image of the branch", nodes=idx[below])
        hi[idx] = top

    # Bracket check at the finite ends the caller promised are evaluable.
    bad = np.zeros(r.size, dtype=bool)
    if (~open_top).any():
        idx = everything[~open_top]
        bad[idx] = g(hi[idx], idx) < -tol * np.maximum(1.0, np.abs(r[idx]))
    g_lo = g(lo, everything)
    bad |= g_lo > tol * np.maximum(1.0, np.abs(r))
    if bad.any():
        raise RangeError("target outside the image of the branch", nodes=np.flatnonzero(bad))

    # Phase 1: bisection to a coarse bracket.
    active = everything
    for _ in range(max_iter):
        width = hi[active] - lo[active]
        mid = lo[active] + 0.5 * width
        keep = width > COARSE_TOL * np.maximum(1.0, np.abs(mid))
        active = active[keep]
        if active.size == 0:
            break
        mid = mid[keep]
        up = g(mid, active) > 0
        hi[active[up]] = mid[up]
        lo[active[~up]] = mid[~up]

    # Phase 2: Newton polish inside the bracket.
    t = 0.5 * (lo + hi)
    active = everything
    for _ in range(max_iter):
        ta = t[active]
        res = g(ta, active)
        done = np.abs(res) <= tol * np.maximum(1.0, np.abs(r[active]))
        collapsed = (hi[active] - lo[active]) <= 4 * np.spacing(np.maximum(np.abs(lo[active]), np.abs(hi[active])))
        active_next = ~(done | collapsed)
        up = res > 0
        hi[active[up]] = np.minimum(hi[active[up]], ta[up])
        lo[active[~up]] = np.maximum(lo[active[~up]], ta[~up])
        active = active[active_next]
        if active.size == 0:
            break
        ta, res = ta[active_next], res[active_next]
        slope = s * np.asarray(dfun(ta, active), dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            step = ta - res / slope
        inside = np.isfinite(step) & (step > lo[active]) & (step < hi[active])
        t[active] = np.where(inside, step, 0.5 * (lo[active] + hi[active]))
    return t.reshape(shape)

