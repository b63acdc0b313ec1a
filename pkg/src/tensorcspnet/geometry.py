"""Affine-invariant Riemannian geometry of the SPD cone.

Functions broadcast over leading stack dimensions where that is natural
(``distance``, ``log_map``, ``exp_map``); ``frechet_mean`` reduces a stack.
"""
import numpy as np

from .errors import DomainError, NumericalError
from .symmat import reconstruct, sym_eig, symmetrize

KARCHER_TOL = 1e-8
KARCHER_MAX_ITER = 50


def _roots(P, name="P"):
    """Return ``(P^{1/2}, P^{-1/2})`` from a single eigendecomposition."""
    eig = sym_eig(P)
    lo = eig.lam[..., -1]
    if np.any(lo <= 0.0):
        raise DomainError(
            f"{name} is not SPD (smallest eigenvalue {float(np.min(lo)):.6g})"
        )
    root = np.sqrt(eig.lam)
    return reconstruct(eig, root), reconstruct(eig, 1.0 / root)


def _whitened_eig(P1, P2):
    E, Ei = _roots(P1, "P1")
    eig = sym_eig(Ei @ P2 @ Ei)
    lo = eig.lam[..., -1]
    if np.any(lo <= 0.0):
        raise DomainError(
            f"P2 is not SPD (smallest eigenvalue {float(np.min(lo)):.6g})"
        )
    return E, Ei, eig


def airm_inner(P, v, w):
    """Affine-invariant inner product ``<P^-1/2 v P^-1/2, P^-1/2 w P^-1/2>_F``."""
    _, Pi = _roots(P)
    a = Pi @ v @ Pi
    b = Pi @ w @ Pi
    return np.sum(a * b, axis=(-2, -1))


def airm_norm(P, v):
    return np.sqrt(airm_inner(P, v, v))


def geodesic(P1, P2, t):
    """Point at parameter ``t`` on the geodesic from ``P1`` to ``P2``."""
    E, _, eig = _whitened_eig(P1, P2)
    return symmetrize(E @ reconstruct(eig, eig.lam ** t) @ E)


def distance(P1, P2):
    """Geodesic distance ``||log(P1^-1/2 P2 P1^-1/2)||_F``."""
    _, _, eig = _whitened_eig(P1, P2)
    return np.sqrt(np.sum(np.log(eig.lam) ** 2, axis=-1))


def log_map(P, Q):
    """Riemannian logarithm of ``Q`` at base point ``P``."""
    E, _, eig = _whitened_eig(P, Q)
    return symmetrize(E @ reconstruct(eig, np.log(eig.lam)) @ E)


def exp_map(P, v):
    """Riemannian exponential of the tangent vector ``v`` at ``P``."""
    E, Ei = _roots(P)
    eig = sym_eig(Ei @ v @ Ei)
    return symmetrize(E @ reconstruct(eig, np.exp(eig.lam)) @ E)


def parallel_transport(P1, P2, v):
    """Transport ``v`` from the tangent space at ``P1`` to the one at ``P2``.

    Evaluates ``(P2 P1^-1)^{1/2} v (P1^-1 P2)^{1/2}`` as
    ``E R E^-1 v E^-1 R E`` with ``E = P1^{1/2}`` and
    ``R = (E^-1 P2 E^-1)^{1/2}``, so only SPD square roots are taken.
    """
    E, Ei, eig = _whitened_eig(P1, P2)
    R = reconstruct(eig, np.sqrt(eig.lam))
    left = E @ R @ Ei
    return symmetrize(left @ v @ np.swapaxes(left, -1, -2))


def congruence(W, P):
    """``W P W^T``; SPD only when ``W`` has full row rank."""
    return W @ P @ np.swapaxes(W, -1, -2)


def frechet_objective(M, batch, weights):
    d = distance(M, batch)
    return float(np.sum(weights * d ** 2))


def _check_weights(n, weights):
    if weights is None:
        return np.full(n, 1.0 / n)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (n,):
        raise ValueError(f"expected {n} weights, got shape {w.shape}")
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
        raise ValueError("weights must be non-negative and sum to 1")
    return w


def frechet_mean(batch, weights=None, tol=KARCHER_TOL, max_iter=KARCHER_MAX_ITER,
                 return_history=False, strict=True):
    """Weighted Riemannian barycenter by unit-step Karcher flow.

    Starts from the weighted arithmetic mean and iterates
    ``M <- Exp_M(sum_i w_i Log_M(P_i))`` until the Frobenius norm of the
    Riemannian gradient ``sum_i w_i Log_M(P_i)`` drops below ``tol``. If a
    step raises the objective (possible for widely spread batches, where the
    unit step overshoots) it is retried at half length and the shorter step
    is kept for the remaining iterations.

    Parameters
    ----------
    batch : ndarray, shape (N, n, n)
    weights : ndarray, shape (N,), optional
        Defaults to uniform weights.
    return_history : bool
        Also return the list of gradient norms, one per iteration.
    strict : bool
        If false, return the best iterate instead of raising when ``tol`` is
        not reached (the history then ends above ``tol``).

    Raises
    ------
    NumericalError
        If the gradient norm is still above ``tol`` after ``max_iter`` steps
        and ``strict`` is true.
    """
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 3 or batch.shape[0] == 0:
        raise ValueError("frechet_mean needs a non-empty (N, n, n) stack")
    w = _check_weights(batch.shape[0], weights)
    wb = w[:, None, None]
    M = symmetrize(np.sum(wb * batch, axis=0))
    history = []
    step, prev = 1.0, None
    for it in range(max_iter + 1):
        E, Ei = _roots(M, "Karcher iterate")
        inner = sym_eig(Ei @ batch @ Ei)
        if np.any(inner.lam[..., -1] <= 0.0):
            raise DomainError("frechet_mean batch contains a non-SPD matrix")
        logs = np.log(inner.lam)
        obj = float(np.sum(w * np.sum(logs ** 2, axis=-1)))
        if prev is not None and obj > prev[0] * (1 + 1e-12):
            # overshoot on a widely spread batch: retry the step at half length
            step *= 0.5
            obj, E, T, M = prev
        else:
            T = np.sum(wb * reconstruct(inner, logs), axis=0)
            grad_norm = float(np.linalg.norm(E @ T @ E))
            history.append(grad_norm)
            if grad_norm < tol:
                return (M, history) if return_history else M
        if it == max_iter:
            break
        prev = (obj, E, T, M)
        sv = sym_eig(step * T)
        M = symmetrize(E @ reconstruct(sv, np.exp(sv.lam)) @ E)
    if not strict:
        return (M, history) if return_history else M
    raise NumericalError(
        f"Karcher flow did not reach tol={tol:g} in {max_iter} iterations "
        f"(gradient norm {history[-1]:.3e})",
        residual=history[-1],
    )

