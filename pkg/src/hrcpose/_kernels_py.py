"""Numpy implementations of the hot kernels (fallback for ``_kernels.pyx``)."""
import numpy as np


def maxpool_forward(x, groups):
    """Column-wise max over each block of ``len(x) // groups`` rows.

    Returns ``(out, argmax)``; ties resolve to the first row.
    """
    n = x.shape[0] // groups
    xr = x.reshape(groups, n, x.shape[1])
    idx = xr.argmax(axis=1)
    out = np.take_along_axis(xr, idx[:, None, :], axis=1)[:, 0, :]
    return out, idx


def maxpool_backward(grad, argmax, n):
    groups, d = grad.shape
    gx = np.zeros((groups, n, d), dtype=grad.dtype)
    np.put_along_axis(gx, argmax[:, None, :], grad[:, None, :], axis=1)
    return gx.reshape(groups * n, d)


def ranked_contrast(d2, mask, weight, tau):
    """Weighted ranking contrastive loss on a squared-distance matrix.

    loss = sum_ij w_ij * ( d_ij / tau + log sum_{k in mask[i, j]} exp(-d_ik / tau) )
    with ``d = sqrt(d2)``. Returns ``(loss, dloss/dd2)`` in float64; the
    gradient through the square root is taken as 0 where ``d == 0``. Pairs
    whose mask row is empty are skipped.
    """
    d2 = np.asarray(d2, dtype=np.float64)
    w = np.asarray(weight, dtype=np.float64)
    d = np.sqrt(np.maximum(d2, 0.0))
    # pairs with an empty denominator set contribute nothing
    active = (w != 0.0) & mask.any(axis=2)
    w = np.where(active, w, 0.0)
    if not active.any():
        return 0.0, np.zeros_like(d2)
    logits = np.where(mask, (-d / tau)[:, None, :], -np.inf)
    m = logits.max(axis=2)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(logits - m[:, :, None])
    z = e.sum(axis=2)
    safe_z = np.where(z > 0, z, 1.0)
    lse = m + np.log(safe_z)
    term = np.where(active, d / tau + lse, 0.0)
    loss = float((w * term).sum())
    p = e / safe_z[:, :, None]
    gd = w / tau - np.einsum("ij,ijk->ik", w, p) / tau
    with np.errstate(divide="ignore", invalid="ignore"):
        gd2 = np.where(d > 0, gd / (2.0 * d), 0.0)
    return loss, gd2
