"""First-order training machinery: Adam with bias correction, the
non-positivity projection that keeps constrained gate weights valid,
global-norm gradient clipping, and a central-difference gradient checker.

All functions operate on flat name -> ndarray dictionaries (the live
tensors of a model) and update them in place.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    """Per-tensor first/second moment accumulators plus the step counter."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_tensors(cls, tensors: dict, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        state = cls(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
        state.m = {k: np.zeros_like(a) for k, a in tensors.items()}
        state.v = {k: np.zeros_like(a) for k, a in tensors.items()}
        return state


def adam_step(tensors: dict, grads: dict, state: AdamState) -> AdamState:
    """One Adam update, in place.  Requires a gradient for every tensor."""
    missing = set(tensors) - set(grads)
    if missing:
        raise KeyError(f"adam_step: missing gradients for {sorted(missing)}")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, p in tensors.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(
                f"adam_step: gradient shape {g.shape} != param shape {p.shape} "
                f"for {name!r}"
            )
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return state


def project(tensors: dict, constrained) -> None:
    """Clamp every entry of the named tensors to <= 0, in place.

    Runs right after each optimizer step so constrained interval weights can
    never spend a forward pass on the wrong side of zero.
    """
    for name in constrained:
        if name not in tensors:
            raise KeyError(f"project: no tensor named {name!r}")
        np.minimum(tensors[name], 0.0, out=tensors[name])


def clip_global_norm(grads: dict, max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most max_norm.

    Returns the pre-clip norm.  ``max_norm <= 0`` disables clipping.
    """
    sq = 0.0
    for g in grads.values():
        sq += float(np.sum(g * g))
    norm = float(np.sqrt(sq))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


@dataclass
class FdReport:
    passed: bool
    max_rel_err: float
    worst: str            # "tensor[flat_index]" of the worst coordinate
    n_checked: int

    def __str__(self):
        verdict = "ok" if self.passed else "FAIL"
        return (
            f"gradient check {verdict}: max rel err {self.max_rel_err:.3e} "
            f"at {self.worst} over {self.n_checked} coordinates"
        )


def fd_check(loss_fn, tensors: dict, analytic: dict, eps: float = 1e-5,
             tol: float = 1e-4, floor: float = 1e-3) -> FdReport:
    """Compare analytic gradients against central finite differences.

    ``loss_fn()`` must return the scalar loss computed from the live
    ``tensors``, which are perturbed one coordinate at a time and restored.
    The error metric is |a - n| / max(|a|, |n|, floor): relative where the
    gradient has real magnitude, absolute below ``floor`` so that
    differencing noise on near-zero coordinates cannot fail the check.
    """
    worst = ("", 0.0)
    checked = 0
    for name, arr in tensors.items():
        if name not in analytic:
            raise KeyError(f"fd_check: no analytic gradient for {name!r}")
        flat = arr.reshape(-1)
        a_flat = np.asarray(analytic[name]).reshape(-1)
        if a_flat.shape != flat.shape:
            raise ValueError(f"fd_check: gradient shape mismatch for {name!r}")
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            up = loss_fn()
            flat[j] = orig - eps
            down = loss_fn()
            flat[j] = orig
            numeric = (up - down) / (2.0 * eps)
            err = abs(a_flat[j] - numeric) / max(abs(a_flat[j]), abs(numeric), floor)
            if err > worst[1]:
                worst = (f"{name}[{j}]", err)
            checked += 1
    return FdReport(
        passed=worst[1] <= tol, max_rel_err=worst[1], worst=worst[0] or "n/a",
        n_checked=checked,
    )
