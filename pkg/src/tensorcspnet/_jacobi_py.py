"""Pure-numpy cyclic Jacobi sweeps, vectorized across a stack of matrices.

Used when the compiled extension is unavailable (or disabled through
``TENSORCSPNET_PURE=1``). Matrices that have converged are frozen, so each
result is independent of what else shares the stack.
"""
import numpy as np


def _offdiag(a):
    n = a.shape[-1]
    if n < 2:
        return np.zeros(a.shape[0])
    iu, ju = np.triu_indices(n, 1)
    sq = a[:, iu, ju] * a[:, iu, ju]
    # cumsum accumulates left to right, matching the compiled loop order
    return np.sqrt(2.0 * np.cumsum(sq, axis=1)[:, -1])


def _sweep(a, v):
    n = a.shape[-1]
    for p in range(n - 1):
        for q in range(p + 1, n):
            apq = a[:, p, q]
            skip = apq == 0.0
            if skip.all():
                continue
            app = a[:, p, p]
            aqq = a[:, q, q]
            with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
                tau = (aqq - app) / (2.0 * np.where(skip, 1.0, apq))
                root = np.sqrt(1.0 + tau * tau)
                t = np.where(tau >= 0.0, 1.0 / (tau + root), -1.0 / (-tau + root))
                t = np.where(np.abs(tau) > 1e150, 1.0 / (2.0 * tau), t)
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = t * c
            c = np.where(skip, 1.0, c)[:, None]
            s = np.where(skip, 0.0, s)[:, None]

            x = a[:, :, p].copy()
            y = a[:, :, q].copy()
            a[:, :, p] = c * x - s * y
            a[:, :, q] = s * x + c * y
            x = a[:, p, :].copy()
            y = a[:, q, :].copy()
            a[:, p, :] = c * x - s * y
            a[:, q, :] = s * x + c * y
            a[~skip, p, q] = 0.0
            a[~skip, q, p] = 0.0
            x = v[:, :, p].copy()
            y = v[:, :, q].copy()
            v[:, :, p] = c * x - s * y
            v[:, :, q] = s * x + c * y


def jacobi_sweeps(a, v, tol, max_sweeps, sweeps, off):
    """Same contract as the compiled ``jacobi_sweeps``."""
    resid = _offdiag(a)
    done = np.zeros(a.shape[0], dtype=np.int32)
    active = resid > tol
    for _ in range(max_sweeps):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        sub_a = a[idx]
        sub_v = v[idx]
        _sweep(sub_a, sub_v)
        a[idx] = sub_a
        v[idx] = sub_v
        done[idx] += 1
        resid[idx] = _offdiag(sub_a)
        active[idx] = resid[idx] > tol[idx]
    sweeps[:] = done
    off[:] = resid
