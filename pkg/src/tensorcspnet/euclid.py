"""Euclidean tail of the network: flattening, block-wise temporal
convolution, dense layers and softmax cross-entropy.
"""
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


@dataclass(frozen=True)
class ConvSpec:
    """Kernel width ``p`` (in band blocks), height ``q`` (in windows), ``r`` channels."""

    p: int
    q: int
    r: int

    def validate(self, W, F):
        if self.p not in (1, F):
            raise ValueError(f"conv width p must be 1 or F={F}, got {self.p}")
        if not 1 <= self.q <= W:
            raise ValueError(f"conv height q must lie in [1, {W}], got {self.q}")
        if self.r < 1:
            raise ValueError(f"conv channels r must be positive, got {self.r}")

    def output_shape(self, W, F):
        self.validate(W, F)
        return (W - self.q + 1, F - self.p + 1, self.r)


def flatten_concat(x):
    """``(B, W, F, o, o)`` tangent batch to a ``(B, W, F*o*o)`` grid.

    Row ``i`` concatenates the row-major flattening of every band's slice.
    """
    B, W, F, o, _ = x.shape
    return x.reshape(B, W, F * o * o)


def unflatten(grid, F, o):
    B, W, _ = grid.shape
    return grid.reshape(B, W, F, o, o)


def _blocks(grid, block):
    B, W, cols = grid.shape
    if cols % block:
        raise ValueError(f"grid width {cols} is not a multiple of the block size {block}")
    return grid.reshape(B, W, cols // block, block)


def conv2d_blockwise_forward(grid, spec: ConvSpec, weights, bias=None, block=None):
    """Valid 2D convolution with horizontal stride of one band block.

    Parameters
    ----------
    grid : ndarray, shape (B, W, F*block)
    weights : ndarray, shape (r, q, p, block)
    bias : ndarray, shape (r,), optional
    block : int
        Scalars per band block (``o*o``); inferred from ``weights``.

    Returns
    -------
    out : ndarray, shape (B, W-q+1, F-p+1, r)
    ctx : dict
    """
    block = weights.shape[-1] if block is None else block
    X = _blocks(grid, block)
    B, W, F, _ = X.shape
    spec.validate(W, F)
    if weights.shape != (spec.r, spec.q, spec.p, block):
        raise ValueError(
            f"conv weights must have shape {(spec.r, spec.q, spec.p, block)}, "
            f"got {weights.shape}"
        )
    # (B, W', F', block, q, p)
    patches = sliding_window_view(X, (spec.q, spec.p), axis=(1, 2))
    out = np.einsum("bijeak,cake->bijc", patches, weights, optimize=True)
    if bias is not None:
        out = out + bias
    return out, {"patches": patches, "weights": weights, "shape": X.shape,
                 "spec": spec, "has_bias": bias is not None}


def conv2d_blockwise_backward(ctx, grad_out):
    """Return ``(grad_grid, grad_weights, grad_bias)``; ``grad_bias`` is None without bias."""
    spec, Wt = ctx["spec"], ctx["weights"]
    B, W, F, block = ctx["shape"]
    grad_w = np.einsum("bijeak,bijc->cake", ctx["patches"], grad_out, optimize=True)
    grad_b = grad_out.sum(axis=(0, 1, 2)) if ctx["has_bias"] else None
    gx = np.zeros((B, W, F, block))
    Wo, Fo = W - spec.q + 1, F - spec.p + 1
    for a in range(spec.q):
        for k in range(spec.p):
            gx[:, a:a + Wo, k:k + Fo, :] += np.einsum("bijc,ce->bije", grad_out, Wt[:, a, k, :])
    return gx.reshape(B, W, F * block), grad_w, grad_b


def dense_forward(x, weights, bias=None):
    """Affine map ``x W^T + b`` over a ``(B, d_in)`` batch."""
    if x.shape[-1] != weights.shape[1]:
        raise ValueError(f"dense layer expects {weights.shape[1]} inputs, got {x.shape[-1]}")
    y = x @ weights.T
    if bias is not None:
        y = y + bias
    return y, {"x": x, "weights": weights, "has_bias": bias is not None}


def dense_backward(ctx, grad_out):
    """Return ``(grad_x, grad_weights, grad_bias)``."""
    grad_x = grad_out @ ctx["weights"]
    grad_w = grad_out.T @ ctx["x"]
    grad_b = grad_out.sum(axis=0) if ctx["has_bias"] else None
    return grad_x, grad_w, grad_b


def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(mask, grad_out):
    return grad_out * mask


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_ce(logits, labels):
    """Mean cross-entropy over a batch and its gradient w.r.t. the logits.

    ``logits`` may be a single vector with an integer ``labels``.
    """
    single = np.ndim(logits) == 1
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(labels))
    k = logits.shape[1]
    if labels.shape[0] != logits.shape[0]:
        raise ValueError("one label per row of logits is required")
    if np.any(labels < 0) or np.any(labels >= k):
        raise ValueError(f"labels must lie in [0, {k}), got {labels.tolist()}")
    n = logits.shape[0]
    logp = log_softmax(logits)
    loss = -float(np.mean(logp[np.arange(n), labels]))
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    return loss, (grad[0] if single else grad)


def glorot_uniform(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)
