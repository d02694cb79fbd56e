"""Next-POI network: embedding lookup, recurrent cell, softmax readout.

A user's history enters as transition triples (poi id, hours to the next
visit, km to the next visit).  Each step embeds the POI, runs one cell step,
and projects the hidden state onto logits over the whole vocabulary.  Loss is
the mean per-step cross-entropy against the next POI; gradients come from
hand-rolled backpropagation through the unrolled sequence.

Mini-batches are lists of independent user sequences.  They are padded to the
longest member with the loss masked on padding; padded positions provably
contribute exactly zero gradient, so the batched path and the per-sequence
path agree.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from . import container
from .cells import (
    CellState,
    GateAblation,
    LstmParams,
    StepInput,
    StLstmParams,
    VARIANTS,
    cell_backward,
    cell_forward,
    count_params,
    formula_param_count,
    init_params,
    zero_state,
)
from .numkit import affine, matmul_rows, softmax_xent_rows

CHECKPOINT_KIND = "stpoi-checkpoint"


@dataclass
class ModelConfig:
    variant: str
    vocab: int
    n_i: int = 128
    n_c: int = 128
    ablation: GateAblation = field(default_factory=GateAblation)
    bptt_cap: Optional[int] = None
    constraint_target: str = "interval"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(
                f"unknown variant {self.variant!r}; expected one of {VARIANTS}"
            )
        if self.vocab < 1 or self.n_i < 1 or self.n_c < 1:
            raise ValueError("vocab, n_i and n_c must all be positive")
        if self.bptt_cap is not None and self.bptt_cap < 1:
            raise ValueError("bptt_cap must be None or >= 1")

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "vocab": self.vocab,
            "n_i": self.n_i,
            "n_c": self.n_c,
            "ablation": self.ablation.to_dict(),
            "bptt_cap": self.bptt_cap,
            "constraint_target": self.constraint_target,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["ablation"] = GateAblation.from_dict(d["ablation"])
        return cls(**d)


@dataclass
class ModelParams:
    embedding: np.ndarray                       # (vocab, n_i)
    cell: Union[LstmParams, StLstmParams]
    w_out: np.ndarray                           # (vocab, n_c)
    b_out: np.ndarray                           # (vocab,)

    def tensors(self) -> dict:
        out = {"embedding": self.embedding}
        out.update(self.cell.tensors())
        out["w_out"] = self.w_out
        out["b_out"] = self.b_out
        return out


def init_model(cfg: ModelConfig, rng: np.random.Generator) -> ModelParams:
    """Fresh parameters: every weight U(-1/sqrt(n_c), 1/sqrt(n_c)), biases
    zero.  Draw order is fixed so a seeded generator gives identical models."""
    scale = 1.0 / np.sqrt(cfg.n_c)
    embedding = rng.uniform(-scale, scale, size=(cfg.vocab, cfg.n_i))
    cell = init_params(cfg.variant, cfg.n_i, cfg.n_c, rng, cfg.constraint_target)
    w_out = rng.uniform(-scale, scale, size=(cfg.vocab, cfg.n_c))
    b_out = np.zeros(cfg.vocab)
    return ModelParams(embedding, cell, w_out, b_out)


def model_param_count(cfg: ModelConfig) -> dict:
    """Scalar-count report: the enumerated live total alongside the quoted
    closed-form figure (which uses different bookkeeping and is reported,
    not reconciled)."""
    cell_and_readout = count_params(cfg.variant, cfg.n_i, cfg.n_c, n_o=cfg.vocab)
    embedding = cfg.vocab * cfg.n_i
    return {
        "enumerated_cell_and_readout": cell_and_readout,
        "embedding": embedding,
        "enumerated_total": cell_and_readout + embedding,
        "formula_cell_and_readout": formula_param_count(
            cfg.variant, cfg.n_i, cfg.n_c, n_o=cfg.vocab
        ),
    }


def _check_ids(pois, vocab, who):
    pois = np.asarray(pois)
    if pois.size == 0:
        raise ValueError(f"{who}: sequence must have length >= 1")
    if pois.min() < 0 or pois.max() >= vocab:
        raise IndexError(f"{who}: POI id out of vocabulary (size {vocab})")
    return pois


def step(params: ModelParams, cfg: ModelConfig, state: CellState,
         poi: int, dt: float, dd: float):
    """Advance one transition and return ``(logits, new_state)``.

    The streaming form of the forward pass: evaluation walks a user's
    history one triple at a time without keeping caches.
    """
    if not 0 <= poi < cfg.vocab:
        raise IndexError(f"step: POI id {poi} out of vocabulary ({cfg.vocab})")
    x = params.embedding[poi]
    new_state, _ = cell_forward(cfg.variant, params.cell, StepInput(x, dt, dd),
                                state, cfg.ablation)
    logits = params.w_out @ new_state.h + params.b_out
    return logits, new_state


def forward_sequence(params: ModelParams, cfg: ModelConfig, pois, dts, dds):
    """Unroll one sequence from the zero state.

    Returns ``(logits, final_state, caches)`` with logits (T, vocab); caches
    hold what the backward pass needs and can be discarded by callers that
    only predict.
    """
    pois = _check_ids(pois, cfg.vocab, "forward_sequence")
    dts = np.asarray(dts, dtype=float)
    dds = np.asarray(dds, dtype=float)
    if dts.shape != pois.shape or dds.shape != pois.shape:
        raise ValueError("forward_sequence: pois, dts, dds must share a length")
    state = zero_state(cfg.n_c)
    caches = []
    hs = np.empty((len(pois), cfg.n_c))
    for t in range(len(pois)):
        x = params.embedding[pois[t]]
        state, cache = cell_forward(cfg.variant, params.cell,
                                    StepInput(x, dts[t], dds[t]), state,
                                    cfg.ablation)
        caches.append(cache)
        hs[t] = state.h
    logits = affine(params.w_out, hs, params.b_out)
    return logits, state, caches


def zero_grads(params: ModelParams) -> dict:
    return {name: np.zeros(arr.shape) for name, arr in params.tensors().items()}


def batch_loss_and_grads(params: ModelParams, cfg: ModelConfig, seqs):
    """Mean per-step loss and its gradients over a mini-batch.

    ``seqs`` is a list of ``(pois, dts, dds, targets)`` tuples, one user
    sequence each; targets are the next POI per step.  Sequences are padded
    to the longest and masked, the normalizer is the total number of real
    steps across the batch.  Gradient flow from step t to t-1 is severed at
    multiples of ``cfg.bptt_cap`` when a cap is set, so a loss reaches at
    most ``bptt_cap`` steps backwards.
    """
    if not seqs:
        raise ValueError("batch_loss_and_grads: empty batch")
    lengths = []
    for pois, dts, dds, targets in seqs:
        pois = _check_ids(pois, cfg.vocab, "batch_loss_and_grads")
        _check_ids(targets, cfg.vocab, "batch_loss_and_grads")
        if not len(pois) == len(dts) == len(dds) == len(targets):
            raise ValueError("batch_loss_and_grads: ragged sequence tuple")
        lengths.append(len(pois))
    B, T = len(seqs), max(lengths)
    pois = np.zeros((B, T), dtype=np.int64)
    targets = np.zeros((B, T), dtype=np.int64)
    dts = np.zeros((B, T))
    dds = np.zeros((B, T))
    mask = np.zeros((B, T))
    for b, (p, dt, dd, tg) in enumerate(seqs):
        n = lengths[b]
        pois[b, :n] = p
        dts[b, :n] = dt
        dds[b, :n] = dd
        targets[b, :n] = tg
        mask[b, :n] = 1.0

    state = zero_state(cfg.n_c, batch=B)
    caches = []
    hs = []
    dlogits = []
    total_loss = 0.0
    for t in range(T):
        x = params.embedding[pois[:, t]]
        state, cache = cell_forward(cfg.variant, params.cell,
                                    StepInput(x, dts[:, t], dds[:, t]), state,
                                    cfg.ablation)
        logits = affine(params.w_out, state.h, params.b_out)
        losses, dlog = softmax_xent_rows(logits, targets[:, t])
        total_loss += float(losses @ mask[:, t])
        dlogits.append(dlog * mask[:, t][:, None])
        caches.append(cache)
        hs.append(state.h)

    n_steps = float(mask.sum())
    grads = zero_grads(params)
    dh_next = np.zeros((B, cfg.n_c))
    dc_next = np.zeros((B, cfg.n_c))
    cap = cfg.bptt_cap
    for t in reversed(range(T)):
        dlog = dlogits[t]
        grads["w_out"] += dlog.T @ hs[t]
        grads["b_out"] += dlog.sum(axis=0)
        dh = matmul_rows(dlog, params.w_out) + dh_next
        cell_grads, dh_prev, dc_prev, dx, _, _ = cell_backward(
            cfg.variant, params.cell, caches[t], dh, dc_next
        )
        for name, g in cell_grads.items():
            grads[name] += g
        # reduce duplicate rows within the step before touching the
        # accumulator: each embedding row then receives one delta per step,
        # which keeps a duplicated batch exactly twice the single run
        uniq, inv = np.unique(pois[:, t], return_inverse=True)
        sums = np.zeros((len(uniq), cfg.n_i))
        np.add.at(sums, inv, dx)
        grads["embedding"][uniq] += sums
        if cap is not None and t % cap == 0:
            dh_next = np.zeros((B, cfg.n_c))
            dc_next = np.zeros((B, cfg.n_c))
        else:
            dh_next, dc_next = dh_prev, dc_prev

    loss = total_loss / n_steps
    for name in grads:
        grads[name] /= n_steps
    return loss, grads


def loss_and_grads(params: ModelParams, cfg: ModelConfig, pois, dts, dds, targets):
    """Single-sequence convenience wrapper around the batched path."""
    return batch_loss_and_grads(params, cfg, [(pois, dts, dds, targets)])


def predict_topk(params: ModelParams, cfg: ModelConfig, pois, dts, dds,
                 k: int, exclude=()):
    """Rank the next POI after a non-empty history.

    Candidates are ordered by final-step logit descending, ties by ascending
    id.  ``exclude`` removes candidate ids (already-visited mode); k must
    not exceed what remains.
    """
    logits, _, _ = forward_sequence(params, cfg, pois, dts, dds)
    return rank_topk(logits[-1], k, exclude)


def rank_topk(logits, k: int, exclude=()):
    """Top-k ids from one logit vector; logit descending, ties ascending id."""
    logits = np.asarray(logits, dtype=float)
    keep = np.ones(logits.shape[0], dtype=bool)
    for poi in exclude:
        keep[poi] = False
    ids = np.flatnonzero(keep)
    if k > len(ids):
        raise ValueError(f"rank_topk: k={k} exceeds {len(ids)} candidates")
    # lexsort uses the last key as primary; ids ascending settles ties
    order = np.lexsort((ids, -logits[ids]))
    return ids[order[:k]]


def save_checkpoint(path, params: ModelParams, cfg: ModelConfig, adam=None):
    """Persist model (and optionally optimizer state) for exact resume."""
    meta = {"kind": CHECKPOINT_KIND, "config": cfg.to_dict()}
    arrays = {f"param.{k}": v for k, v in params.tensors().items()}
    if adam is not None:
        meta["adam"] = {"lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2,
                        "eps": adam.eps, "t": adam.t}
        arrays.update({f"adam.m.{k}": v for k, v in adam.m.items()})
        arrays.update({f"adam.v.{k}": v for k, v in adam.v.items()})
    container.save(path, meta, arrays)


def load_checkpoint(path):
    """Load a checkpoint, returning ``(params, cfg, adam_or_None)``."""
    from .optim import AdamState

    meta, arrays = container.load(path)
    if meta.get("kind") != CHECKPOINT_KIND:
        raise ValueError(f"{path}: not a model checkpoint")
    cfg = ModelConfig.from_dict(meta["config"])
    tensors = {k[len("param."):]: v for k, v in arrays.items()
               if k.startswith("param.")}
    embedding = tensors.pop("embedding")
    w_out = tensors.pop("w_out")
    b_out = tensors.pop("b_out")
    cell_cls = LstmParams if cfg.variant == "lstm" else StLstmParams
    params = ModelParams(embedding, cell_cls(**tensors), w_out, b_out)
    if params.embedding.shape != (cfg.vocab, cfg.n_i):
        raise ValueError(f"{path}: tensor shapes disagree with recorded config")
    adam = None
    if "adam" in meta:
        a = meta["adam"]
        adam = AdamState(lr=a["lr"], beta1=a["beta1"], beta2=a["beta2"],
                         eps=a["eps"], t=a["t"],
                         m={k[len("adam.m."):]: v for k, v in arrays.items()
                            if k.startswith("adam.m.")},
                         v={k[len("adam.v."):]: v for k, v in arrays.items()
                            if k.startswith("adam.v.")})
    return params, cfg, adam
