"""Ranking metrics and cohort evaluation.

Every test transition of every user is one instance: the model state is
warmed on the user's training inputs, then rolled through the test inputs
with ground-truth history (teacher forcing), ranking the true next POI at
each position.  Rank is 1-based: 1 + the number of strictly higher logits +
the number of equal logits at lower ids, matching the deterministic
tie-break of the top-k predictor.

The ``cold`` cohort keeps users with fewer than ``cold_threshold`` training
records.  MAP uses one relevant item per instance, so it reduces to the mean
reciprocal rank.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .cells import zero_state
from .model import ModelConfig, ModelParams, step

ACC_KS = (1, 5, 10, 15, 20)
COHORTS = ("all", "cold")


class EmptyCohortError(ValueError):
    """No instances to aggregate; metrics would be undefined."""


@dataclass
class RankingResult:
    user: str
    step: int
    rank: int        # 1-based rank of the true next POI


@dataclass
class MetricsReport:
    cohort: str
    n_instances: int
    acc: dict        # K -> fraction of instances with rank <= K
    mean_ap: float

    def to_dict(self) -> dict:
        return {
            "cohort": self.cohort,
            "n_instances": self.n_instances,
            "acc": {str(k): v for k, v in self.acc.items()},
            "map": self.mean_ap,
        }

    def lines(self) -> list:
        out = [f"cohort {self.cohort}", f"n_instances {self.n_instances}"]
        for k, v in sorted(self.acc.items()):
            out.append(f"acc@{k} {v:.6f}")
        out.append(f"map {self.mean_ap:.6f}")
        return out


def acc_at_k(results: Iterable[RankingResult], k: int) -> float:
    ranks = [r.rank for r in results]
    if not ranks:
        raise EmptyCohortError("acc_at_k: no instances")
    return sum(1 for r in ranks if r <= k) / len(ranks)


def mean_ap(results: Iterable[RankingResult]) -> float:
    ranks = [r.rank for r in results]
    if not ranks:
        raise EmptyCohortError("mean_ap: no instances")
    return sum(1.0 / r for r in ranks) / len(ranks)


def rank_of(logits, target: int, exclude=()) -> int:
    """1-based rank of ``target`` under logit-descending, id-ascending order.

    ``exclude`` removes candidate ids from the ranking; the target itself is
    never excluded.
    """
    logits = np.asarray(logits, dtype=float)
    keep = np.ones(logits.shape[0], dtype=bool)
    for poi in exclude:
        keep[poi] = False
    keep[target] = True
    lt = logits[target]
    higher = int(np.sum(keep & (logits > lt)))
    tied_before = int(np.sum(keep[:target] & (logits[:target] == lt)))
    return 1 + higher + tied_before


def collect_ranks(params: ModelParams, cfg: ModelConfig, corpus, *,
                  cohort: str = "all", cold_threshold: int = 5,
                  exclude_visited: bool = False) -> list:
    """One RankingResult per test transition of every cohort user."""
    if cohort not in COHORTS:
        raise ValueError(f"unknown cohort {cohort!r}; expected one of {COHORTS}")
    if cfg.vocab != corpus.n_pois:
        raise ValueError(
            f"vocabulary size mismatch: model has {cfg.vocab}, corpus has "
            f"{corpus.n_pois}"
        )
    results = []
    for u in corpus.users:
        if cohort == "cold" and u.n_train >= cold_threshold:
            continue
        state = zero_state(cfg.n_c)
        visited = set()
        train_in, train_dt, train_dd, _ = u.train_steps()
        for t in range(len(train_in)):
            _, state = step(params, cfg, state, int(train_in[t]),
                            train_dt[t], train_dd[t])
            visited.add(int(train_in[t]))
        test_in, test_dt, test_dd, test_tg = u.test_steps()
        for t in range(len(test_in)):
            logits, state = step(params, cfg, state, int(test_in[t]),
                                 test_dt[t], test_dd[t])
            visited.add(int(test_in[t]))
            exclude = visited if exclude_visited else ()
            results.append(RankingResult(
                user=u.user, step=t,
                rank=rank_of(logits, int(test_tg[t]), exclude),
            ))
    return results


def summarize(results, cohort: str, ks=ACC_KS) -> MetricsReport:
    if not results:
        raise EmptyCohortError(
            f"cohort {cohort!r} is empty; no users matched and no instances "
            "were scored"
        )
    return MetricsReport(
        cohort=cohort,
        n_instances=len(results),
        acc={k: acc_at_k(results, k) for k in ks},
        mean_ap=mean_ap(results),
    )


def evaluate(params: ModelParams, cfg: ModelConfig, corpus, *,
             cohort: str = "all", cold_threshold: int = 5,
             exclude_visited: bool = False, ks=ACC_KS) -> MetricsReport:
    results = collect_ranks(params, cfg, corpus, cohort=cohort,
                            cold_threshold=cold_threshold,
                            exclude_visited=exclude_visited)
    return summarize(results, cohort, ks)
