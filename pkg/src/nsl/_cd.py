"""Compiled coordinate-descent kernel.

Works on a design whose columns all have squared norm n, so every
coordinate subproblem is ``min_b 0.5 * (z - b)**2 + pen(|b|)``.
"""
import numpy as np
from numba import njit

HARD, L0, LASSO, SCAD, ENET = 0, 1, 2, 3, 4
FAMILY_CODES = {"hard": HARD, "l0": L0, "lasso": LASSO, "scad": SCAD, "elastic_net": ENET}


@njit(cache=True)
def penalty(t, lam, fam, a, mix):
    t = abs(t)
    if fam == HARD:
        if t >= lam:
            return 0.5 * lam * lam
        return lam * t - 0.5 * t * t
    if fam == L0:
        return 0.5 * lam * lam if t != 0.0 else 0.0
    if fam == LASSO:
        return lam * t
    if fam == SCAD:
        if t <= lam:
            return lam * t
        if t <= a * lam:
            return (2.0 * a * lam * t - t * t - lam * lam) / (2.0 * (a - 1.0))
        return 0.5 * lam * lam * (a + 1.0)
    return lam * (mix * t + 0.5 * (1.0 - mix) * t * t)


@njit(cache=True)
def _soft(z, lam):
    if z > lam:
        return z - lam
    if z < -lam:
        return z + lam
    return 0.0


@njit(cache=True)
def threshold(z, lam, fam, a, mix):
    if fam == HARD or fam == L0:
        return z if abs(z) > lam else 0.0
    if fam == LASSO:
        return _soft(z, lam)
    if fam == SCAD:
        az = abs(z)
        if az <= 2.0 * lam:
            return _soft(z, lam)
        if az <= a * lam:
            s = 1.0 if z > 0 else -1.0
            return ((a - 1.0) * z - s * a * lam) / (a - 2.0)
        return z
    return _soft(z, lam * mix) / (1.0 + lam * (1.0 - mix))


@njit(cache=True)
def _local(z, b, lam, fam, a, mix):
    return 0.5 * (z - b) * (z - b) + penalty(b, lam, fam, a, mix)


@njit(cache=True)
def coordinate_update(z, current, lam, fam, a, mix, boxed, T):
    """Univariate minimiser, optionally restricted to [-T, T], never worse than ``current``."""
    cand = threshold(z, lam, fam, a, mix)
    if boxed:
        if cand > T:
            cand = T
        elif cand < -T:
            cand = -T
        if _local(z, 0.0, lam, fam, a, mix) < _local(z, cand, lam, fam, a, mix):
            cand = 0.0
    if _local(z, cand, lam, fam, a, mix) > _local(z, current, lam, fam, a, mix):
        return current
    return cand


@njit(cache=True)
def objective_std(r, b, lam, fam, a, mix):
    n = r.shape[0]
    val = 0.0
    for i in range(n):
        val += r[i] * r[i]
    val /= 2.0 * n
    for j in range(b.shape[0]):
        if b[j] != 0.0:
            val += penalty(b[j], lam, fam, a, mix)
    return val


@njit(cache=True)
def _sweep(D, r, b, coords, lam, fam, a, mix, boxed, T):
    n = D.shape[0]
    max_change = 0.0
    for idx in range(coords.shape[0]):
        j = coords[idx]
        g = 0.0
        for i in range(n):
            g += D[i, j] * r[i]
        old = b[j]
        z = old + g / n
        new = coordinate_update(z, old, lam, fam, a, mix, boxed[j], T)
        if new != old:
            delta = new - old
            for i in range(n):
                r[i] -= delta * D[i, j]
            b[j] = new
            if abs(delta) > max_change:
                max_change = abs(delta)
    return max_change


@njit(cache=True)
def cd_solve(D, b, r, allowed, lam, fam, a, mix, boxed, T, max_iter, tol, trace):
    """Cyclic coordinate descent with active-set cycling.

    Updates ``b`` and the residual ``r = y - D @ b`` in place. Returns the
    number of sweeps, a convergence flag and the objective after each sweep
    (empty unless ``trace``).
    """
    full = np.flatnonzero(allowed)
    objs = np.empty(max_iter if trace else 0)
    sweeps = 0
    converged = False
    while sweeps < max_iter:
        change = _sweep(D, r, b, full, lam, fam, a, mix, boxed, T)
        if trace:
            objs[sweeps] = objective_std(r, b, lam, fam, a, mix)
        sweeps += 1
        if change < tol:
            converged = True
            break
        # cycle the current support until it settles, then re-check everything
        while sweeps < max_iter:
            active = np.flatnonzero(b != 0.0)
            change = _sweep(D, r, b, active, lam, fam, a, mix, boxed, T)
            if trace:
                objs[sweeps] = objective_std(r, b, lam, fam, a, mix)
            sweeps += 1
            if change < tol:
                break
    return sweeps, converged, objs[:sweeps]
