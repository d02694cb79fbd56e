"""Shared test utilities: an unrolled linear-readout loss over the raw cells
(used as the finite-difference harness) and a generic central-difference
oracle that perturbs one coordinate at a time."""

import numpy as np

from stpoi import cells


def random_cell_setup(variant, n_i, n_c, steps, rng, ablation=None):
    """Random params and a random input sequence with positive intervals."""
    p = cells.init_params(variant, n_i, n_c, rng)
    seq = [
        cells.StepInput(
            x=rng.uniform(-0.8, 0.8, size=n_i),
            dt=float(rng.uniform(0.5, 3.0)),
            dd=float(rng.uniform(0.5, 3.0)),
        )
        for _ in range(steps)
    ]
    readouts = [rng.uniform(-1.0, 1.0, size=n_c) for _ in range(steps)]
    return p, seq, readouts


def unrolled_readout_loss(variant, p, seq, readouts, ablation=None):
    """Forward the cell over seq; loss = sum_t readouts[t] . h_t."""
    state = cells.zero_state(p.n_c)
    loss = 0.0
    caches = []
    for step, r in zip(seq, readouts):
        state, cache = cells.cell_forward(variant, p, step, state, ablation)
        loss += float(r @ state.h)
        caches.append(cache)
    return loss, caches


def unrolled_readout_grads(variant, p, seq, readouts, ablation=None):
    """Analytic gradients of unrolled_readout_loss via cell_backward."""
    loss, caches = unrolled_readout_loss(variant, p, seq, readouts, ablation)
    grads = {name: np.zeros(a.shape) for name, a in p.tensors().items()}
    dh = np.zeros(p.n_c)
    dc = np.zeros(p.n_c)
    dxs, ddts, ddds = [], [], []
    for cache, r in zip(reversed(caches), reversed(readouts)):
        step_grads, dh, dc, dx, ddt, ddd = cells.cell_backward(
            variant, p, cache, dh + r, dc
        )
        for k in grads:
            grads[k] += step_grads[k]
        dxs.append(dx)
        ddts.append(ddt)
        ddds.append(ddd)
    return loss, grads, dxs[::-1], ddts[::-1], ddds[::-1]


def central_diff(fn, arr, eps=1e-5):
    """Central finite differences of scalar fn() w.r.t. every entry of arr,
    mutating arr in place and restoring it."""
    out = np.zeros(arr.shape)
    flat = arr.reshape(-1)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + eps
        up = fn()
        flat[j] = orig - eps
        down = fn()
        flat[j] = orig
        out.reshape(-1)[j] = (up - down) / (2.0 * eps)
    return out


def rel_err(a, b, floor=1e-3):
    """Max mixed relative/absolute error between arrays."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0
