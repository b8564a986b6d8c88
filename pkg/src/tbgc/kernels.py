"""Hot loops, each in a numba and a numpy flavour.

The public names ``softmax_xent``, ``resize_nearest`` and ``adamw_inplace``
point at the numba versions unless numba is disabled. ``sumsq`` is always the
numpy one, because BLAS ``dot`` beats the numba loop (~4x). The
``*_np`` / ``*_nb`` variants stay importable so tests and the benchmark can
compare them directly.
"""

from __future__ import annotations

import math

import numpy as np

from ._accel import NUMBA_ENABLED, njit

# ---------------------------------------------------------------- sum of squares


def sumsq_np(a: np.ndarray) -> float:
    flat = np.ascontiguousarray(a, dtype=np.float64).ravel()
    return float(np.dot(flat, flat))


@njit
def _sumsq_nb(flat):
    acc = 0.0
    for i in range(flat.shape[0]):
        acc += flat[i] * flat[i]
    return acc


def sumsq_nb(a: np.ndarray) -> float:
    return float(_sumsq_nb(np.ascontiguousarray(a, dtype=np.float64).ravel()))


# ---------------------------------------------------- softmax cross-entropy rows


def softmax_xent_np(logits: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy of ``target`` (row distributions) under softmax(logits).

    Returns ``(loss, dloss/dlogits)``.
    """
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    expd = np.exp(shifted)
    denom = expd.sum(axis=1, keepdims=True)
    logp = shifted - np.log(denom)
    loss = -float((target * logp).sum()) / n
    grad = (expd / denom - target) / n
    return loss, grad


@njit
def _softmax_xent_nb(logits, target):
    n, c = logits.shape
    grad = np.empty_like(logits)
    total = 0.0
    for i in range(n):
        mx = logits[i, 0]
        for j in range(1, c):
            if logits[i, j] > mx:
                mx = logits[i, j]
        denom = 0.0
        for j in range(c):
            e = math.exp(logits[i, j] - mx)
            grad[i, j] = e
            denom += e
        logd = math.log(denom)
        for j in range(c):
            total -= target[i, j] * (logits[i, j] - mx - logd)
            grad[i, j] = (grad[i, j] / denom - target[i, j]) / n
    return total / n, grad


def softmax_xent_nb(logits: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    loss, grad = _softmax_xent_nb(
        np.ascontiguousarray(logits, dtype=np.float64),
        np.ascontiguousarray(target, dtype=np.float64),
    )
    return float(loss), grad


# ------------------------------------------------------------ nearest resize

# Source index for output pixel i is floor((i + 0.5) * in / out), the
# half-pixel-centre convention; a 2x downscale therefore samples x[1::2].


def _nearest_index(n_in: int, n_out: int) -> np.ndarray:
    idx = np.floor((np.arange(n_out) + 0.5) * (n_in / n_out)).astype(np.int64)
    return np.minimum(idx, n_in - 1)


def resize_nearest_np(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbour resize over the two leading axes."""
    rows = _nearest_index(img.shape[0], out_h)
    cols = _nearest_index(img.shape[1], out_w)
    return img[rows][:, cols]


@njit
def _resize_nearest_nb(img, rows, cols):
    out = np.empty((rows.shape[0], cols.shape[0], img.shape[2]), dtype=img.dtype)
    for i in range(rows.shape[0]):
        r = rows[i]
        for j in range(cols.shape[0]):
            c = cols[j]
            for k in range(img.shape[2]):
                out[i, j, k] = img[r, c, k]
    return out


def resize_nearest_nb(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    rows = _nearest_index(img.shape[0], out_h)
    cols = _nearest_index(img.shape[1], out_w)
    squeeze = img.ndim == 2
    src = np.ascontiguousarray(img[..., None] if squeeze else img)
    out = _resize_nearest_nb(src, rows, cols)
    return out[..., 0] if squeeze else out


# ---------------------------------------------------------------- fused AdamW


def adamw_inplace_np(p, g, m, v, lr, wd, beta1, beta2, eps, bc1, bc2) -> None:
    """One decoupled AdamW update of ``p``, ``m``, ``v`` in place.

    ``bc1``/``bc2`` are the bias corrections ``1 - beta**t``.
    """
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    step = (m / bc1) / (np.sqrt(v / bc2) + eps) + wd * p
    p -= lr * step


@njit
def _adamw_nb(p, g, m, v, lr, wd, beta1, beta2, eps, bc1, bc2):
    for i in range(p.shape[0]):
        gi = g[i]
        m[i] = beta1 * m[i] + (1.0 - beta1) * gi
        v[i] = beta2 * v[i] + (1.0 - beta2) * (gi * gi)
        step = (m[i] / bc1) / (math.sqrt(v[i] / bc2) + eps) + wd * p[i]
        p[i] = p[i] - lr * step


def adamw_inplace_nb(p, g, m, v, lr, wd, beta1, beta2, eps, bc1, bc2) -> None:
    _adamw_nb(
        p.reshape(-1), np.ascontiguousarray(g, dtype=np.float64).reshape(-1),
        m.reshape(-1), v.reshape(-1),
        float(lr), float(wd), float(beta1), float(beta2), float(eps), float(bc1), float(bc2),
    )


sumsq = sumsq_np

if NUMBA_ENABLED:
    softmax_xent = softmax_xent_nb
    resize_nearest = resize_nearest_nb
    adamw_inplace = adamw_inplace_nb
else:
    softmax_xent = softmax_xent_np
    resize_nearest = resize_nearest_np
    adamw_inplace = adamw_inplace_np
