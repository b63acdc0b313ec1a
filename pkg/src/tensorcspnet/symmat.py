"""Symmetric-matrix kernels: eigendecomposition, spectral functions and
their reverse-mode derivatives.

Every function accepts a single ``(n, n)`` matrix or a stack ``(..., n, n)``.
The eigensolver is a cyclic Jacobi iteration; its inner sweeps run in a
compiled extension when available and in vectorized numpy otherwise. Set
``TENSORCSPNET_PURE=1`` to force the numpy path.
"""
import os
from typing import Callable, NamedTuple

import numpy as np

from .errors import DomainError, NumericalError

if os.environ.get("TENSORCSPNET_PURE", "") not in ("", "0"):
    from . import _jacobi_py as _kernel

    BACKEND = "python"
else:
    try:
        from . import _jacobi_ext as _kernel

        BACKEND = "compiled"
    except ImportError:  # extension not built
        from . import _jacobi_py as _kernel

        BACKEND = "python"

OFFDIAG_RTOL = 1e-12
MAX_SWEEPS = 100
DELTA_EIG = 1e-8


class EigPair(NamedTuple):
    """Eigendecomposition ``S = U diag(lam) U^T`` with ``lam`` descending."""

    U: np.ndarray
    lam: np.ndarray


def symmetrize(a):
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def _kernel_for(backend):
    if backend is None:
        return _kernel
    if backend == "python":
        from . import _jacobi_py

        return _jacobi_py
    if backend == "compiled":
        from . import _jacobi_ext

        return _jacobi_ext
    raise ValueError(f"unknown backend {backend!r}")


def set_backend(name):
    """Switch the process-wide eigensolver backend; returns the previous name."""
    global _kernel, BACKEND
    kernel = _kernel_for(name)
    prev, _kernel, BACKEND = BACKEND, kernel, name
    return prev


def sym_eig(S, *, backend=None) -> EigPair:
    """Eigendecomposition of a symmetric matrix (or stack) by cyclic Jacobi.

    The input is symmetrized first. Eigenvalues are sorted descending (stable,
    so ties keep the lower index first) and each eigenvector is signed so that
    its largest-magnitude component is positive.

    Raises
    ------
    NumericalError
        If some matrix is not diagonalized within ``MAX_SWEEPS`` sweeps.
    """
    S = np.asarray(S, dtype=np.float64)
    if S.ndim < 2 or S.shape[-1] != S.shape[-2]:
        raise ValueError(f"expected square matrices, got shape {S.shape}")
    if not np.all(np.isfinite(S)):
        raise DomainError("sym_eig input contains non-finite entries")
    batch_shape = S.shape[:-2]
    n = S.shape[-1]
    a = np.ascontiguousarray(symmetrize(S).reshape(-1, n, n))
    m = a.shape[0]
    v = np.zeros((m, n, n))
    v[:, np.arange(n), np.arange(n)] = 1.0
    tol = np.ascontiguousarray(OFFDIAG_RTOL * np.sqrt(np.einsum("kij,kij->k", a, a)))
    sweeps = np.zeros(m, dtype=np.int32)
    off = np.zeros(m)
    _kernel_for(backend).jacobi_sweeps(a, v, tol, MAX_SWEEPS, sweeps, off)
    bad = off > tol
    if np.any(bad):
        worst = float(off[bad].max())
        raise NumericalError(
            f"Jacobi eigensolver did not converge in {MAX_SWEEPS} sweeps "
            f"(off-diagonal residual {worst:.3e})",
            residual=worst,
        )

    lam = np.diagonal(a, axis1=-2, axis2=-1)
    order = np.argsort(-lam, axis=-1, kind="stable")
    lam = np.take_along_axis(lam, order, axis=-1)
    U = np.take_along_axis(v, order[:, None, :], axis=-1)
    # largest-|.| component positive; argmax picks the lowest index on ties
    lead = np.argmax(np.abs(U), axis=-2)
    sign = np.sign(np.take_along_axis(U, lead[:, None, :], axis=-2))
    sign[sign == 0] = 1.0
    U = U * sign
    return EigPair(U.reshape(batch_shape + (n, n)), lam.reshape(batch_shape + (n,)))


def reconstruct(eig: EigPair, values=None):
    """``U diag(values) U^T``; ``values`` defaults to the eigenvalues."""
    vals = eig.lam if values is None else values
    return (eig.U * vals[..., None, :]) @ np.swapaxes(eig.U, -1, -2)


def spectral(name, t=None):
    """Return ``(f, f_prime)`` for a named scalar spectral function."""
    if name == "log":
        return np.log, lambda x: 1.0 / x
    if name == "exp":
        return np.exp, np.exp
    if name == "sqrt":
        return np.sqrt, lambda x: 0.5 / np.sqrt(x)
    if name == "invsqrt":
        return lambda x: 1.0 / np.sqrt(x), lambda x: -0.5 * x ** -1.5
    if name == "pow":
        if t is None:
            raise ValueError("pow requires an exponent t")
        return lambda x: x ** t, lambda x: t * x ** (t - 1.0)
    if name == "identity":
        return lambda x: x, np.ones_like
    raise ValueError(f"unknown spectral function {name!r}")


_NEEDS_POSITIVE = {"log", "sqrt", "invsqrt", "pow"}


def fun_spd(S, f, t=None, *, eig: EigPair | None = None, return_eig=False):
    """Apply a spectral function ``U f(lam) U^T``.

    Parameters
    ----------
    S : ndarray, shape (..., n, n)
        Symmetric input; must be SPD for ``log``, ``sqrt``, ``invsqrt``, ``pow``.
    f : {"log", "exp", "sqrt", "invsqrt", "pow", "identity"}
    t : float, optional
        Exponent for ``pow``.
    eig : EigPair, optional
        Precomputed decomposition of ``S`` (``S`` is then ignored).
    return_eig : bool
        Also return the decomposition, for use by :func:`fun_spd_backward`.
    """
    if eig is None:
        eig = sym_eig(S)
    if f in _NEEDS_POSITIVE:
        lo = eig.lam[..., -1]
        if np.any(lo <= 0.0):
            raise DomainError(
                f"{f} requires positive eigenvalues; found {float(np.min(lo)):.6g}"
            )
    func, _ = spectral(f, t)
    out = reconstruct(eig, func(eig.lam))
    return (out, eig) if return_eig else out


def loewner(lam, f: Callable, f_prime: Callable):
    """Divided-difference matrix of ``f`` at the eigenvalues ``lam``."""
    li = lam[..., :, None]
    lj = lam[..., None, :]
    diff = li - lj
    scale = np.maximum(1.0, np.max(np.abs(lam), axis=-1))[..., None, None]
    close = np.abs(diff) <= DELTA_EIG * scale
    fl = f(lam)
    with np.errstate(divide="ignore", invalid="ignore"):
        quot = (fl[..., :, None] - fl[..., None, :]) / np.where(close, 1.0, diff)
    return np.where(close, f_prime(0.5 * (li + lj)), quot)


def fun_spd_backward(ctx: EigPair, f: Callable, f_prime: Callable, grad_out):
    """Gradient of ``<grad_out, U f(lam) U^T>`` with respect to the input.

    ``grad_out`` is symmetrized first (the forward output is symmetric, so
    only its symmetric part carries gradient).
    """
    U = ctx.U
    Ut = np.swapaxes(U, -1, -2)
    inner = Ut @ symmetrize(grad_out) @ U
    return symmetrize(U @ (loewner(ctx.lam, f, f_prime) * inner) @ Ut)


def is_spd(S, tol=0.0):
    """True iff the smallest eigenvalue of every matrix exceeds ``tol``."""
    return bool(np.all(sym_eig(S).lam[..., -1] > tol))


def min_eig(S):
    return sym_eig(S).lam[..., -1]
