"""SPD network layers with exact backward passes.

Batches are plain arrays of shape ``(B, W, F, n, n)`` (batch, window, band,
matrix); most functions accept any ``(..., n, n)`` stack. Each ``*_forward``
returns ``(output, ctx)`` and the matching ``*_backward`` consumes ``ctx``.
"""
from dataclasses import dataclass

import numpy as np

from .errors import DomainError
from .geometry import exp_map, frechet_mean, geodesic
from .symmat import EigPair, fun_spd_backward, reconstruct, sym_eig, symmetrize

REEIG_EPS = 1e-4
RBN_MOMENTUM = 0.9


# --------------------------------------------------------------------------
# Stiefel parameters


def stiefel_init(o, C, rng, bands=None):
    """Orthonormal ``o x C`` matrix (or ``bands`` of them) from QR of a Gaussian."""
    shape = (o, C) if bands is None else (bands, o, C)
    G = rng.standard_normal(shape)
    return _orthonormalize(G)


def _as_tall(W):
    o, C = W.shape[-2:]
    return (W, False) if o > C else (np.swapaxes(W, -1, -2), True)


def _orthonormalize(W):
    X, flipped = _as_tall(W)
    Q, R = np.linalg.qr(X)
    d = np.sign(np.diagonal(R, axis1=-2, axis2=-1)).copy()
    d[d == 0] = 1.0
    Q = Q * d[..., None, :]
    return np.swapaxes(Q, -1, -2) if flipped else Q


def stiefel_residual(W):
    """Frobenius distance of ``W`` from orthonormality along its short side."""
    X, _ = _as_tall(W)
    k = X.shape[-1]
    gram = np.swapaxes(X, -1, -2) @ X
    return float(np.max(np.linalg.norm(gram - np.eye(k), axis=(-2, -1))))


def stiefel_retract(W, euclid_grad, lr):
    """One Riemannian SGD step on the Stiefel manifold.

    The Euclidean gradient is projected onto the tangent space at ``W``,
    a step of ``-lr`` is taken and the result is re-orthonormalized by QR
    with the sign of ``diag(R)`` fixed positive.
    """
    X, flipped = _as_tall(W)
    G = np.swapaxes(euclid_grad, -1, -2) if flipped else euclid_grad
    xi = G - X @ symmetrize(np.swapaxes(X, -1, -2) @ G)
    Y = X - lr * xi
    out = _orthonormalize(Y)
    return np.swapaxes(out, -1, -2) if flipped else out


# --------------------------------------------------------------------------
# BiMap


def bimap_forward(W, x):
    """Depthwise bilinear map ``W S W^T`` applied to every slice.

    ``W`` is ``(o, C)`` (shared by all slices) or ``(F, o, C)`` (one matrix
    per band, broadcast against the band axis of ``x``).
    """
    if W.shape[-1] != x.shape[-1]:
        raise ValueError(
            f"BiMap weight expects {W.shape[-1]}x{W.shape[-1]} inputs, "
            f"got {x.shape[-2]}x{x.shape[-1]}"
        )
    if W.ndim == 3 and (x.ndim < 3 or x.shape[-3] != W.shape[0]):
        raise ValueError(f"per-band BiMap needs {W.shape[0]} bands, got shape {x.shape}")
    y = W @ x @ np.swapaxes(W, -1, -2)
    return y, {"W": W, "x": x}


def _reduce_to(g, shape):
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))) if lead else g


def bimap_backward(ctx, grad_out):
    """Return ``(grad_x, euclid_grad_W)``."""
    W, x = ctx["W"], ctx["x"]
    Wt = np.swapaxes(W, -1, -2)
    grad_x = Wt @ grad_out @ W
    gw = grad_out @ W @ np.swapaxes(x, -1, -2) + np.swapaxes(grad_out, -1, -2) @ W @ x
    return grad_x, _reduce_to(gw, W.shape)


# --------------------------------------------------------------------------
# ReEig / LOG


def _clamp_fns(eps):
    def f(lam):
        return np.maximum(eps, lam)

    def f_prime(lam):
        return (lam > eps).astype(np.float64)

    return f, f_prime


def reeig_forward(x, eps=REEIG_EPS, eig: EigPair | None = None):
    """Eigenvalue rectification ``U max(eps, lam) U^T``."""
    if eps <= 0:
        raise ValueError("ReEig threshold must be positive")
    if eig is None:
        eig = sym_eig(x)
    f, _ = _clamp_fns(eps)
    return reconstruct(eig, f(eig.lam)), {"eig": eig, "eps": eps}


def reeig_backward(ctx, grad_out):
    f, f_prime = _clamp_fns(ctx["eps"])
    return fun_spd_backward(ctx["eig"], f, f_prime, grad_out)


def _log_fns():
    return np.log, lambda lam: 1.0 / lam


def logeig_forward(x):
    """Matrix logarithm of every slice (projection to the tangent space at I)."""
    eig = sym_eig(x)
    lo = eig.lam[..., -1]
    if np.any(lo <= 0.0):
        raise DomainError(
            f"LOG layer received a non-SPD slice (eigenvalue {float(np.min(lo)):.6g}); "
            "is a ReEig layer missing?"
        )
    return reconstruct(eig, np.log(eig.lam)), {"eig": eig}


def logeig_backward(ctx, grad_out):
    f, f_prime = _log_fns()
    return fun_spd_backward(ctx["eig"], f, f_prime, grad_out)


# --------------------------------------------------------------------------
# Riemannian batch normalization


@dataclass
class RbnState:
    """Per-band running means plus one learned SPD bias shared by all bands."""

    running_mean: np.ndarray  # (F, n, n)
    G: np.ndarray  # (n, n)
    momentum: float = RBN_MOMENTUM
    floor: float = REEIG_EPS

    @classmethod
    def identity(cls, bands, n, momentum=RBN_MOMENTUM, floor=REEIG_EPS):
        return cls(np.broadcast_to(np.eye(n), (bands, n, n)).copy(), np.eye(n),
                   momentum, floor)


def batch_means(x, floor=REEIG_EPS, return_residual=False):
    """Per-band Frechet mean of a ``(B, W, F, n, n)`` batch.

    Slices are eigenvalue-floored at ``floor`` before averaging, so rank
    deficient BiMap outputs (``o > C``) still have a well-defined mean. The
    mean is a stop-gradient centering statistic, so an extremely spread batch
    whose Karcher flow stalls above tolerance yields the best iterate rather
    than aborting training; ``return_residual`` exposes the final gradient
    norm per band.
    """
    B, Wn, F, n, _ = x.shape
    eig = sym_eig(x)
    floored = reconstruct(eig, np.maximum(floor, eig.lam))
    means, residual = [], []
    for j in range(F):
        M, hist = frechet_mean(floored[:, :, j].reshape(-1, n, n), return_history=True,
                               strict=False)
        means.append(M)
        residual.append(hist[-1])
    means = np.stack(means)
    return (means, np.array(residual)) if return_residual else means


def rbn_forward(x, state: RbnState, mode="train", batch_mean=None, update=True):
    """Recenter each band at its batch mean and bias towards ``G``.

    ``out = G^1/2 M^-1/2 S M^-1/2 G^1/2`` where ``M`` is the batch Frechet mean
    of the band in train mode and the running mean in eval mode. In train
    mode the running mean moves along the geodesic towards ``M`` by
    ``1 - momentum`` unless ``update`` is false. ``batch_mean`` replaces the
    computed means (used to freeze them in gradient checks).
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "train":
        if x.shape[0] < 2:
            raise ValueError("Riemannian BN needs a batch of at least 2 in train mode")
        if batch_mean is None:
            M, residual = batch_means(x, state.floor, return_residual=True)
        else:
            M, residual = batch_mean, None
        if update:
            state.running_mean = geodesic(state.running_mean, M, 1.0 - state.momentum)
    else:
        M, residual = state.running_mean, None
    m_eig = sym_eig(M)
    if np.any(m_eig.lam[..., -1] <= 0.0):
        raise DomainError("Riemannian BN mean is not SPD")
    m_isqrt = reconstruct(m_eig, 1.0 / np.sqrt(m_eig.lam))
    g_eig = sym_eig(state.G)
    g_sqrt = reconstruct(g_eig, np.sqrt(g_eig.lam))
    Z = m_isqrt @ x @ m_isqrt
    out = g_sqrt @ Z @ g_sqrt
    ctx = {"C": g_sqrt @ m_isqrt, "Z": Z, "g_sqrt": g_sqrt, "g_eig": g_eig,
           "G": state.G, "mean": M, "mean_residual": residual}
    return symmetrize(out), ctx


def rbn_backward(ctx, grad_out):
    """Return ``(grad_x, riem_grad_G)`` with the batch mean held constant."""
    C = ctx["C"]
    grad_out = symmetrize(grad_out)
    grad_x = np.swapaxes(C, -1, -2) @ grad_out @ C
    Gh, Z = ctx["g_sqrt"], ctx["Z"]
    d_gh = (grad_out @ Gh @ Z + Z @ Gh @ grad_out).reshape(-1, *Gh.shape).sum(axis=0)
    d_g = fun_spd_backward(ctx["g_eig"], np.sqrt, lambda lam: 0.5 / np.sqrt(lam), d_gh)
    G = ctx["G"]
    return grad_x, G @ symmetrize(d_g) @ G


def spd_step(G, riem_grad, lr):
    """Riemannian gradient step ``Exp_G(-lr * grad)``; stays SPD."""
    return exp_map(G, -lr * riem_grad)
