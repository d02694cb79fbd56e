"""Gated recurrent cells for check-in sequences.

Three variants share one parameter layout and one backward routine family:

``lstm``
    The plain cell.  With z = [h_prev, x]:

        i = sigmoid(w_i z + b_i)        f = sigmoid(w_f z + b_f)
        g = tanh(w_c z + b_c)           o = sigmoid(w_o z + b_o)
        c = f * c_prev + i * g          h = o * tanh(c)

``st-lstm``
    Adds four interval gates driven by the elapsed time dt (hours) and
    travelled distance dd (km) of the incoming transition.  Each gate is

        gate = sigmoid(w_x x + sigmoid(u * w_u) + b)

    with u the scalar interval and w_u a length-n_c weight vector (the inner
    sigmoid is applied to the scalar-times-vector product).  Gates t1/d1
    filter the candidate on a short-term path that only feeds the output;
    t2/d2 filter what enters the recurrent carry:

        c_hat = f * c_prev + i * t1 * d1 * g     (feeds h only)
        c     = f * c_prev + i * t2 * d2 * g     (carried to the next step)
        o     = sigmoid(w_o z + dt * w_to + dd * w_do + b_o)
        h     = o * tanh(c_hat)

``st-clstm``
    The coupled variant: the forget gate is removed and the input gate's
    complement takes its place, so the cell has no w_f/b_f tensors at all:

        c_hat = (1 - i*t1*d1) * c_prev + i*t1*d1 * g
        c     = (1 - i)       * c_prev + i * t2*d2 * g

Keeping t1/d1 monotonically non-increasing in the interval requires their
interval weight vectors to stay non-positive; the optimizer's projection
step maintains that (see optim.project and constrained_names below).

All forwards accept a single step (1-D x, scalar dt/dd) or a row batch
(2-D x, 1-D dt/dd); caches remember which so backward returns matching
shapes.  Batch rows are independent sequences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import numkit

VARIANTS = ("lstm", "st-lstm", "st-clstm")

# ablation presets: which interval gates get pinned to the all-ones vector
_ABLATION_PRESETS = {
    "none": (),
    "time-only": ("d1", "d2"),
    "distance-only": ("t1", "t2"),
    "short-only": ("t2", "d2"),
    "long-only": ("t1", "d1"),
}


@dataclass
class GateAblation:
    """Switches that pin individual interval gates to ones.

    A pinned gate is the constant ones vector in the forward pass and its
    parameters receive exactly zero gradient in the backward pass.
    """

    fix_t1: bool = False
    fix_t2: bool = False
    fix_d1: bool = False
    fix_d2: bool = False

    @classmethod
    def from_name(cls, name: str) -> "GateAblation":
        if name not in _ABLATION_PRESETS:
            raise ValueError(
                f"unknown ablation {name!r}; expected one of {sorted(_ABLATION_PRESETS)}"
            )
        fixed = _ABLATION_PRESETS[name]
        return cls(**{f"fix_{g}": g in fixed for g in ("t1", "t2", "d1", "d2")})

    def to_dict(self) -> dict:
        return {
            "fix_t1": self.fix_t1,
            "fix_t2": self.fix_t2,
            "fix_d1": self.fix_d1,
            "fix_d2": self.fix_d2,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GateAblation":
        return cls(**d)


@dataclass
class StepInput:
    """One transition: embedded POI vector plus the interval to the next visit."""

    x: np.ndarray
    dt: float | np.ndarray = 0.0
    dd: float | np.ndarray = 0.0


@dataclass
class CellState:
    """Recurrent state.  c is the carry; c_hat is the per-step short-term
    memory that only feeds h and is not consumed by the next step."""

    c: np.ndarray
    h: np.ndarray
    c_hat: np.ndarray


@dataclass
class LstmParams:
    w_i: np.ndarray
    w_f: np.ndarray
    w_c: np.ndarray
    w_o: np.ndarray
    b_i: np.ndarray
    b_f: np.ndarray
    b_c: np.ndarray
    b_o: np.ndarray

    @property
    def n_c(self) -> int:
        return self.w_i.shape[0]

    @property
    def n_i(self) -> int:
        return self.w_i.shape[1] - self.w_i.shape[0]

    def tensors(self) -> dict:
        return {
            "w_i": self.w_i, "b_i": self.b_i,
            "w_f": self.w_f, "b_f": self.b_f,
            "w_c": self.w_c, "b_c": self.b_c,
            "w_o": self.w_o, "b_o": self.b_o,
        }


@dataclass
class StLstmParams:
    """Parameters of the spatio-temporal variants.

    w_f/b_f are None for the coupled variant (st-clstm), which has no
    forget gate by construction.
    """

    w_i: np.ndarray
    w_c: np.ndarray
    w_o: np.ndarray
    b_i: np.ndarray
    b_c: np.ndarray
    b_o: np.ndarray
    # interval gates: per-gate input matrix, interval weight vector, bias
    w_xt1: np.ndarray
    w_t1: np.ndarray
    b_t1: np.ndarray
    w_xt2: np.ndarray
    w_t2: np.ndarray
    b_t2: np.ndarray
    w_xd1: np.ndarray
    w_d1: np.ndarray
    b_d1: np.ndarray
    w_xd2: np.ndarray
    w_d2: np.ndarray
    b_d2: np.ndarray
    # direct interval terms of the output gate
    w_to: np.ndarray
    w_do: np.ndarray
    w_f: Optional[np.ndarray] = None
    b_f: Optional[np.ndarray] = None

    @property
    def n_c(self) -> int:
        return self.w_i.shape[0]

    @property
    def n_i(self) -> int:
        return self.w_i.shape[1] - self.w_i.shape[0]

    def tensors(self) -> dict:
        out = {"w_i": self.w_i, "b_i": self.b_i}
        if self.w_f is not None:
            out["w_f"] = self.w_f
            out["b_f"] = self.b_f
        out.update({
            "w_c": self.w_c, "b_c": self.b_c,
            "w_o": self.w_o, "b_o": self.b_o,
            "w_xt1": self.w_xt1, "w_t1": self.w_t1, "b_t1": self.b_t1,
            "w_xt2": self.w_xt2, "w_t2": self.w_t2, "b_t2": self.b_t2,
            "w_xd1": self.w_xd1, "w_d1": self.w_d1, "b_d1": self.b_d1,
            "w_xd2": self.w_xd2, "w_d2": self.w_d2, "b_d2": self.b_d2,
            "w_to": self.w_to, "w_do": self.w_do,
        })
        return out


@dataclass
class StepCache:
    """Everything the backward pass needs from one forward step."""

    variant: str
    single: bool
    ablation: GateAblation
    x: np.ndarray
    dt: np.ndarray
    dd: np.ndarray
    z: np.ndarray
    i: np.ndarray
    g: np.ndarray
    o: np.ndarray
    c_prev: np.ndarray
    c: np.ndarray
    c_hat: np.ndarray
    tanh_c_hat: np.ndarray
    f: Optional[np.ndarray] = None
    gates: dict = field(default_factory=dict)   # name -> (value, inner) for t1,t2,d1,d2


def _tensor_shapes(variant: str, n_i: int, n_c: int) -> dict:
    """Ordered name -> shape map of every tensor the variant owns."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    zw = (n_c, n_c + n_i)
    shapes = {"w_i": zw, "b_i": (n_c,)}
    if variant != "st-clstm":
        shapes.update({"w_f": zw, "b_f": (n_c,)})
    shapes.update({"w_c": zw, "b_c": (n_c,), "w_o": zw, "b_o": (n_c,)})
    if variant != "lstm":
        for gate, _ in _GATE_SPECS:
            shapes.update({
                f"w_x{gate}": (n_c, n_i),
                f"w_{gate}": (n_c,),
                f"b_{gate}": (n_c,),
            })
        shapes.update({"w_to": (n_c,), "w_do": (n_c,)})
    return shapes


# gate name -> which interval drives it ("dt" or "dd")
_GATE_SPECS = (("t1", "dt"), ("t2", "dt"), ("d1", "dd"), ("d2", "dd"))


def constrained_names(variant: str, constraint_target: str = "interval"):
    """Tensor names whose entries must stay <= 0 for gate monotonicity.

    ``interval`` constrains the interval weight vectors of the short-term
    gates (the default, and the choice that actually makes t1/d1
    non-increasing in dt/dd).  ``input`` additionally constrains their
    input matrices.
    """
    if variant == "lstm":
        return ()
    if constraint_target == "interval":
        return ("w_t1", "w_d1")
    if constraint_target == "input":
        return ("w_t1", "w_d1", "w_xt1", "w_xd1")
    raise ValueError(
        f"unknown constraint_target {constraint_target!r}; expected 'interval' or 'input'"
    )


def init_params(variant, n_i, n_c, rng, constraint_target="interval"):
    """Draw fresh parameters: weights ~ U(-1/sqrt(n_c), 1/sqrt(n_c)),
    biases zero, constrained tensors clamped to <= 0 after the draw."""
    scale = 1.0 / math.sqrt(n_c)
    arrays = {}
    for name, shape in _tensor_shapes(variant, n_i, n_c).items():
        if name.startswith("b_"):
            arrays[name] = np.zeros(shape)
        else:
            arrays[name] = rng.uniform(-scale, scale, size=shape)
    for name in constrained_names(variant, constraint_target):
        np.minimum(arrays[name], 0.0, out=arrays[name])
    if variant == "lstm":
        return LstmParams(**arrays)
    return StLstmParams(**arrays)


def count_params(variant: str, n_i: int, n_c: int, n_o: int = 0) -> int:
    """Exact scalar parameter count by enumerating the variant's tensors.

    ``n_o > 0`` adds a dense softmax readout (n_o x n_c weight plus n_o
    bias).  The embedding table is not included.
    """
    total = sum(
        int(np.prod(shape)) for shape in _tensor_shapes(variant, n_i, n_c).values()
    )
    if n_o:
        total += n_o * n_c + n_o
    return total


def formula_param_count(variant: str, n_i: int, n_c: int, n_o: int = 0):
    """Closed-form parameter estimates quoted for the lstm and st-lstm
    variants.  They do not reconcile with the enumerated counts (different
    bookkeeping of recurrent/input blocks and biases); both figures are
    reported side by side and never forced to agree.  Returns None for
    st-clstm, which has no quoted formula."""
    if variant == "lstm":
        return n_c * n_c * 4 + n_i * n_c * 4 + n_c * n_o + n_c * 3
    if variant == "st-lstm":
        return n_c * n_c * 5 + n_i * n_c * 8 + n_c * n_o + n_c * 9
    if variant == "st-clstm":
        return None
    raise ValueError(f"unknown variant {variant!r}")


def zero_state(n_c: int, batch: Optional[int] = None, dtype=np.float64) -> CellState:
    shape = (n_c,) if batch is None else (batch, n_c)
    return CellState(
        c=np.zeros(shape, dtype), h=np.zeros(shape, dtype), c_hat=np.zeros(shape, dtype)
    )


def _promote(p, x, dt, dd, prev, needs_intervals):
    """Normalize inputs to batch form; returns arrays plus the single flag."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    if x.ndim not in (1, 2) or x.shape[-1] != p.n_i:
        raise ValueError(f"cell forward: x has shape {x.shape}, expected (*, {p.n_i})")
    xb = x[None, :] if single else x
    b = xb.shape[0]
    c_prev = np.asarray(prev.c, dtype=float)
    h_prev = np.asarray(prev.h, dtype=float)
    if single:
        c_prev, h_prev = c_prev[None, :], h_prev[None, :]
    if c_prev.shape != (b, p.n_c) or h_prev.shape != (b, p.n_c):
        raise ValueError(
            f"cell forward: state shapes {prev.c.shape}/{prev.h.shape} do not match "
            f"batch {b} x n_c {p.n_c}"
        )
    if not (np.all(np.isfinite(c_prev)) and np.all(np.isfinite(h_prev))):
        raise ValueError("cell forward: previous state contains NaN or inf")
    dtb = ddb = None
    if needs_intervals:
        dtb = np.atleast_1d(np.asarray(dt, dtype=float))
        ddb = np.atleast_1d(np.asarray(dd, dtype=float))
        if dtb.shape != (b,) or ddb.shape != (b,):
            raise ValueError(
                f"cell forward: dt/dd shapes {dtb.shape}/{ddb.shape} do not match batch {b}"
            )
        if not (np.all(np.isfinite(dtb)) and np.all(np.isfinite(ddb))):
            raise ValueError("cell forward: dt/dd contain NaN or inf")
        if np.any(dtb < 0) or np.any(ddb < 0):
            raise ValueError("cell forward: dt and dd must be non-negative")
    return xb, dtb, ddb, c_prev, h_prev, single


def _maybe_single_state(c, h, c_hat, single) -> CellState:
    if single:
        return CellState(c=c[0], h=h[0], c_hat=c_hat[0])
    return CellState(c=c, h=h, c_hat=c_hat)


def lstm_forward(p: LstmParams, x, prev: CellState):
    """One plain LSTM step; returns (CellState, StepCache)."""
    xb, _, _, c_prev, h_prev, single = _promote(p, x, None, None, prev, False)
    z = np.concatenate([h_prev, xb], axis=1)
    i = numkit.sigmoid(numkit.affine(p.w_i, z, p.b_i))
    f = numkit.sigmoid(numkit.affine(p.w_f, z, p.b_f))
    g = numkit.tanh_v(numkit.affine(p.w_c, z, p.b_c))
    o = numkit.sigmoid(numkit.affine(p.w_o, z, p.b_o))
    c = f * c_prev + i * g
    tc = np.tanh(c)
    h = o * tc
    cache = StepCache(
        variant="lstm", single=single, ablation=GateAblation(),
        x=xb, dt=np.zeros(xb.shape[0]), dd=np.zeros(xb.shape[0]),
        z=z, i=i, f=f, g=g, o=o, c_prev=c_prev, c=c, c_hat=c, tanh_c_hat=tc,
    )
    return _maybe_single_state(c, h, c, single), cache


def _interval_gate(p, gate, xb, u):
    """gate = sigmoid(w_x x + sigmoid(u * w_u) + b); returns (value, inner)."""
    w_x = getattr(p, f"w_x{gate}")
    w_u = getattr(p, f"w_{gate}")
    b = getattr(p, f"b_{gate}")
    inner = numkit.sigmoid(u[:, None] * w_u[None, :])
    value = numkit.sigmoid(numkit.affine(w_x, xb, b) + inner)
    return value, inner


def _st_common(p, xb, dtb, ddb, h_prev, ablation):
    """Shared pieces of both spatio-temporal forwards."""
    z = np.concatenate([h_prev, xb], axis=1)
    i = numkit.sigmoid(numkit.affine(p.w_i, z, p.b_i))
    g = numkit.tanh_v(numkit.affine(p.w_c, z, p.b_c))
    ones = np.ones((xb.shape[0], p.n_c))
    gates = {}
    for gate, which in _GATE_SPECS:
        if getattr(ablation, f"fix_{gate}"):
            gates[gate] = (ones, None)
        else:
            u = dtb if which == "dt" else ddb
            gates[gate] = _interval_gate(p, gate, xb, u)
    a_o = numkit.affine(p.w_o, z, p.b_o) + dtb[:, None] * p.w_to + ddb[:, None] * p.w_do
    o = numkit.sigmoid(a_o)
    return z, i, g, gates, o


def stlstm_forward(p: StLstmParams, step: StepInput, prev: CellState,
                   ablation: Optional[GateAblation] = None):
    """One st-lstm step; returns (CellState, StepCache)."""
    if p.w_f is None:
        raise ValueError("stlstm_forward: params lack a forget gate (coupled variant?)")
    ablation = ablation or GateAblation()
    xb, dtb, ddb, c_prev, h_prev, single = _promote(
        p, step.x, step.dt, step.dd, prev, True
    )
    z, i, g, gates, o = _st_common(p, xb, dtb, ddb, h_prev, ablation)
    f = numkit.sigmoid(numkit.affine(p.w_f, z, p.b_f))
    t1, d1 = gates["t1"][0], gates["d1"][0]
    t2, d2 = gates["t2"][0], gates["d2"][0]
    c_hat = f * c_prev + i * t1 * d1 * g
    c = f * c_prev + i * t2 * d2 * g
    tch = np.tanh(c_hat)
    h = o * tch
    cache = StepCache(
        variant="st-lstm", single=single, ablation=ablation,
        x=xb, dt=dtb, dd=ddb, z=z, i=i, f=f, g=g, o=o,
        c_prev=c_prev, c=c, c_hat=c_hat, tanh_c_hat=tch, gates=gates,
    )
    return _maybe_single_state(c, h, c_hat, single), cache


def stclstm_forward(p: StLstmParams, step: StepInput, prev: CellState,
                    ablation: Optional[GateAblation] = None):
    """One coupled st-clstm step; returns (CellState, StepCache)."""
    if p.w_f is not None:
        raise ValueError("stclstm_forward: params carry a forget gate, wrong variant")
    ablation = ablation or GateAblation()
    xb, dtb, ddb, c_prev, h_prev, single = _promote(
        p, step.x, step.dt, step.dd, prev, True
    )
    z, i, g, gates, o = _st_common(p, xb, dtb, ddb, h_prev, ablation)
    t1, d1 = gates["t1"][0], gates["d1"][0]
    t2, d2 = gates["t2"][0], gates["d2"][0]
    p1 = i * t1 * d1
    c_hat = (1.0 - p1) * c_prev + p1 * g
    c = (1.0 - i) * c_prev + i * t2 * d2 * g
    tch = np.tanh(c_hat)
    h = o * tch
    cache = StepCache(
        variant="st-clstm", single=single, ablation=ablation,
        x=xb, dt=dtb, dd=ddb, z=z, i=i, f=None, g=g, o=o,
        c_prev=c_prev, c=c, c_hat=c_hat, tanh_c_hat=tch, gates=gates,
    )
    return _maybe_single_state(c, h, c_hat, single), cache


def cell_forward(variant, p, step: StepInput, prev: CellState,
                 ablation: Optional[GateAblation] = None):
    """Variant dispatcher used by the sequence model."""
    if variant == "lstm":
        return lstm_forward(p, step.x, prev)
    if variant == "st-lstm":
        return stlstm_forward(p, step, prev, ablation)
    if variant == "st-clstm":
        return stclstm_forward(p, step, prev, ablation)
    raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")


def _gate_backward(p, gate, dgate, cache, grads, dx, du_dt, du_dd, which):
    """Backward through one interval gate; accumulates into grads/dx and
    returns nothing.  Skipped entirely for pinned gates."""
    value, inner = cache.gates[gate]
    dpre = dgate * value * (1.0 - value)
    grads[f"w_x{gate}"] += dpre.T @ cache.x
    grads[f"b_{gate}"] += dpre.sum(axis=0)
    dx += numkit.matmul_rows(dpre, getattr(p, f"w_x{gate}"))
    dinner = dpre * inner * (1.0 - inner)
    u = cache.dt if which == "dt" else cache.dd
    grads[f"w_{gate}"] += (u[:, None] * dinner).sum(axis=0)
    du = dinner @ getattr(p, f"w_{gate}")
    if which == "dt":
        du_dt += du
    else:
        du_dd += du


def cell_backward(variant: str, p, cache: StepCache, grad_h, grad_c):
    """Backpropagate one step.

    ``grad_h``/``grad_c`` are the loss gradients at this step's h output and
    carried c.  Returns ``(grads, grad_h_prev, grad_c_prev, grad_x, grad_dt,
    grad_dd)`` where grads maps every tensor name of the variant to its
    gradient (exactly zero for pinned gates).  Shapes mirror the forward:
    scalars/vectors for a single step, batches otherwise.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    if cache.variant != variant:
        raise ValueError(
            f"cell_backward: cache was built by {cache.variant!r}, not {variant!r}"
        )
    gh = np.asarray(grad_h, dtype=float)
    gc = np.asarray(grad_c, dtype=float)
    if cache.single:
        gh, gc = gh[None, :], gc[None, :]
    if gh.shape != cache.i.shape or gc.shape != cache.i.shape:
        raise ValueError(
            f"cell_backward: upstream gradient shapes {gh.shape}/{gc.shape} do not "
            f"match step batch/width {cache.i.shape}"
        )

    n_c = p.n_c
    grads = {name: np.zeros(arr.shape) for name, arr in p.tensors().items()}
    i, g, o = cache.i, cache.g, cache.o
    tch = cache.tanh_c_hat

    do = gh * tch
    da_o = do * o * (1.0 - o)
    dch = gh * o * (1.0 - tch * tch)
    dc = gc

    if variant == "lstm":
        dct = dch + dc              # c and c_hat are the same array here
        f = cache.f
        df = dct * cache.c_prev
        di = dct * g
        dg = dct * i
        dc_prev = dct * f
        da_f = df * f * (1.0 - f)
        grads["w_f"] += da_f.T @ cache.z
        grads["b_f"] += da_f.sum(axis=0)
        dx = np.zeros_like(cache.x)
        du_dt = np.zeros(cache.x.shape[0])
        du_dd = np.zeros(cache.x.shape[0])
    else:
        t1 = cache.gates["t1"][0]
        t2 = cache.gates["t2"][0]
        d1 = cache.gates["d1"][0]
        d2 = cache.gates["d2"][0]
        dx = np.zeros_like(cache.x)
        du_dt = da_o @ p.w_to
        du_dd = da_o @ p.w_do
        grads["w_to"] += (cache.dt[:, None] * da_o).sum(axis=0)
        grads["w_do"] += (cache.dd[:, None] * da_o).sum(axis=0)
        if variant == "st-lstm":
            f = cache.f
            dct = dch + dc
            df = dct * cache.c_prev
            di = dch * t1 * d1 * g + dc * t2 * d2 * g
            dg = dch * i * t1 * d1 + dc * i * t2 * d2
            dt1 = dch * i * d1 * g
            dd1 = dch * i * t1 * g
            dt2 = dc * i * d2 * g
            dd2 = dc * i * t2 * g
            dc_prev = dct * f
            da_f = df * f * (1.0 - f)
            grads["w_f"] += da_f.T @ cache.z
            grads["b_f"] += da_f.sum(axis=0)
        else:
            p1 = i * t1 * d1
            dp1 = dch * (g - cache.c_prev)
            dg = dch * p1 + dc * i * t2 * d2
            dc_prev = dch * (1.0 - p1) + dc * (1.0 - i)
            di = dp1 * t1 * d1 + dc * (t2 * d2 * g - cache.c_prev)
            dt1 = dp1 * i * d1
            dd1 = dp1 * i * t1
            dt2 = dc * i * d2 * g
            dd2 = dc * i * t2 * g
            da_f = None
        for gate, dgate, which in (
            ("t1", dt1, "dt"), ("t2", dt2, "dt"), ("d1", dd1, "dd"), ("d2", dd2, "dd"),
        ):
            if not getattr(cache.ablation, f"fix_{gate}"):
                _gate_backward(p, gate, dgate, cache, grads, dx, du_dt, du_dd, which)

    da_i = di * i * (1.0 - i)
    da_g = dg * (1.0 - g * g)
    grads["w_i"] += da_i.T @ cache.z
    grads["b_i"] += da_i.sum(axis=0)
    grads["w_c"] += da_g.T @ cache.z
    grads["b_c"] += da_g.sum(axis=0)
    grads["w_o"] += da_o.T @ cache.z
    grads["b_o"] += da_o.sum(axis=0)

    dz = (numkit.matmul_rows(da_i, p.w_i) + numkit.matmul_rows(da_g, p.w_c)
          + numkit.matmul_rows(da_o, p.w_o))
    if da_f is not None:
        dz += numkit.matmul_rows(da_f, p.w_f)
    dh_prev = dz[:, :n_c]
    dx += dz[:, n_c:]

    if cache.single:
        return grads, dh_prev[0], dc_prev[0], dx[0], float(du_dt[0]), float(du_dd[0])
    return grads, dh_prev, dc_prev, dx, du_dt, du_dd
