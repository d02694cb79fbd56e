"""Dense numerical kernels for the recurrent cells.

Conventions: a vector is a 1-D float ndarray, a matrix a 2-D C-order float
ndarray.  Every function also accepts a 2-D row batch where the last axis is
the vector axis, which the training loop uses to push whole mini-batches
through one call.  Inputs are validated for shape and finiteness; a NaN or
inf here means upstream state is already corrupt, so we fail loudly instead
of letting it spread.

Default precision is float64.  float32 inputs are carried through at
float32, which is what the optional reduced-precision training mode uses.
"""

from __future__ import annotations

import numpy as np

_FLOATS = (np.float32, np.float64)


def _as_float(x, name: str) -> np.ndarray:
    a = np.asarray(x)
    if a.dtype not in _FLOATS:
        a = a.astype(np.float64)
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name}: input contains NaN or inf")
    return a


def sigmoid(x) -> np.ndarray:
    """Elementwise logistic function 1 / (1 + exp(-x)), overflow-safe."""
    a = _as_float(x, "sigmoid")
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ex = np.exp(a[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def tanh_v(x) -> np.ndarray:
    """Elementwise hyperbolic tangent."""
    return np.tanh(_as_float(x, "tanh_v"))


def hadamard(a, b) -> np.ndarray:
    """Elementwise product of two equal-shape arrays."""
    a = _as_float(a, "hadamard")
    b = _as_float(b, "hadamard")
    if a.shape != b.shape:
        raise ValueError(f"hadamard: shape mismatch {a.shape} vs {b.shape}")
    return a * b


def affine(w, x, b) -> np.ndarray:
    """w @ x + b for a vector x, or x @ w.T + b for a row batch x."""
    w = _as_float(w, "affine")
    x = _as_float(x, "affine")
    b = _as_float(b, "affine")
    if w.ndim != 2 or b.ndim != 1 or x.ndim not in (1, 2):
        raise ValueError(
            f"affine: expected matrix, vector-or-batch, vector; got "
            f"{w.shape}, {x.shape}, {b.shape}"
        )
    if x.shape[-1] != w.shape[1] or b.shape[0] != w.shape[0]:
        raise ValueError(
            f"affine: incompatible shapes w={w.shape} x={x.shape} b={b.shape}"
        )
    if x.ndim == 1:
        return w @ x + b
    # row-by-row so each row goes through the same fixed-shape kernel: the
    # result for a given row is then bit-identical no matter the batch size,
    # which keeps batched training paths exactly additive.  A single
    # (B,K)@(K,O) call is faster but its per-row bits depend on B.
    out = np.empty((x.shape[0], w.shape[0]))
    for r in range(x.shape[0]):
        out[r] = w @ x[r]
    out += b
    return out


def matmul_rows(a, m) -> np.ndarray:
    """(B, K) @ (K, O) computed one row at a time.

    Same contract as ``a @ m`` but with batch-size-independent bits per row;
    the backward passes use it wherever a per-row product feeds gradient
    accumulation (see affine for why).
    """
    a = _as_float(a, "matmul_rows")
    m = _as_float(m, "matmul_rows")
    out = np.empty((a.shape[0], m.shape[1]))
    for r in range(a.shape[0]):
        out[r] = a[r] @ m
    return out


def softmax_xent(logits, target: int):
    """Cross-entropy of softmax(logits) against an integer class.

    Returns ``(loss, grad)`` where grad = softmax(logits) - onehot(target).
    Uses the max-subtraction trick so large logits stay finite, and computes
    the loss as logsumexp(shifted) - shifted[target] so that tiny losses
    (confident correct predictions) keep full precision.
    """
    z = _as_float(logits, "softmax_xent")
    if z.ndim != 1:
        raise ValueError(f"softmax_xent: logits must be a vector, got {z.shape}")
    n = z.shape[0]
    if not 0 <= target < n:
        raise IndexError(f"softmax_xent: target {target} out of range [0, {n})")
    m = z.max()
    ex = np.exp(z - m)
    total = ex.sum()
    if z[target] == m:
        # loss -> 0 here; log1p over the non-target mass keeps precision
        others = np.delete(ex, target)
        loss = float(np.log1p(others.sum()))
    else:
        loss = float(np.log(total) - (z[target] - m))
    grad = ex / total
    grad[target] -= 1.0
    return loss, grad


def softmax_xent_rows(logits, targets):
    """Row-wise softmax cross-entropy for a batch.

    ``logits`` is (B, N), ``targets`` (B,) ints.  Returns ``(losses, grads)``
    with losses (B,) and grads (B, N); used by the mini-batch training path.
    """
    z = _as_float(logits, "softmax_xent_rows")
    t = np.asarray(targets)
    if z.ndim != 2 or t.shape != (z.shape[0],):
        raise ValueError(
            f"softmax_xent_rows: bad shapes logits={z.shape} targets={t.shape}"
        )
    if t.size and (t.min() < 0 or t.max() >= z.shape[1]):
        raise IndexError("softmax_xent_rows: target out of range")
    m = z.max(axis=1, keepdims=True)
    ex = np.exp(z - m)
    total = ex.sum(axis=1, keepdims=True)
    rows = np.arange(z.shape[0])
    losses = np.log(total[:, 0]) - (z[rows, t] - m[:, 0])
    grads = ex / total
    grads[rows, t] -= 1.0
    return losses, grads
