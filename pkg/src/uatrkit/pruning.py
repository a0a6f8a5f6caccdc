"""Adaptive in-batch data pruning and early stopping.

Each training sample gets a pruning score: the softmax of a linear
projection of its pooled embedding. After the warmup epochs, every
unordered pair of samples in a batch is compared through their scores
(by default the relative entropy, i.e. the cross-entropy minus the
entropy of the first score); when the value falls below the threshold one
member of the pair, chosen at random, is removed from training for good.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
DEFAULT_TAU = 10
DEFAULT_EPSILON = 1e-5
DEFAULT_PATIENCE = 10


@dataclass
class PruneScore:
    s: np.ndarray
    segment_id: object

    def __post_init__(self):
        self.s = np.asarray(self.s, dtype=np.float64)


def _softmax(v):
    v = np.asarray(v, dtype=np.float64)
    e = np.exp(v - v.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def prune_score(emb, weight, bias, segment_id=None) -> PruneScore:
    """Project an embedding with the pruning layer and softmax-normalize it."""
    emb = np.asarray(emb, dtype=np.float64)
    weight = np.asarray(weight, dtype=np.float64)
    if emb.ndim != 1 or weight.ndim != 2 or weight.shape[0] != emb.shape[0] or np.shape(bias) != (weight.shape[1],):
        raise ValueError(f"pruning layer {weight.shape} does not accept an embedding of shape {emb.shape}")
    return PruneScore(_softmax(emb @ weight + bias), segment_id)


def scores_from_logits(s_raw, segment_ids) -> list[PruneScore]:
    """Batch form: rows of pruning-layer outputs to ``PruneScore`` objects."""
    probs = _softmax(s_raw)
    return [PruneScore(p, sid) for p, sid in zip(probs, segment_ids)]


def pairwise_ce(s_i, s_j) -> float:
    """``H(s_i, s_j) = -sum_k s_i[k] * log(max(s_j[k], 1e-12))``."""
    s_i = np.asarray(getattr(s_i, "s", s_i), dtype=np.float64)
    s_j = np.asarray(getattr(s_j, "s", s_j), dtype=np.float64)
    return float(-(s_i * np.log(np.maximum(s_j, PROB_FLOOR))).sum())


def pairwise_kl(s_i, s_j) -> float:
    """``KL(s_i || s_j)``: the cross-entropy minus the entropy of ``s_i``; zero for identical scores."""
    s_i = np.asarray(getattr(s_i, "s", s_i), dtype=np.float64)
    s_j = np.asarray(getattr(s_j, "s", s_j), dtype=np.float64)
    return float((s_i * (np.log(np.maximum(s_i, PROB_FLOOR)) - np.log(np.maximum(s_j, PROB_FLOOR)))).sum())


MEASURES = ("ce", "ce_min", "kl")


def pair_measure(a, b, measure="kl") -> float:
    """Closeness of two scores; ``ce`` is ``H(a, b)``, ``ce_min`` the smaller of both orders."""
    if measure == "ce":
        return pairwise_ce(a, b)
    if measure == "ce_min":
        return min(pairwise_ce(a, b), pairwise_ce(b, a))
    if measure == "kl":
        return pairwise_kl(a, b)
    raise ValueError(f"unknown pair measure {measure!r}")


@dataclass
class PruneEvent:
    epoch: int
    kept_id: object
    pruned_id: object
    ce: float


@dataclass
class PruneState:
    """Active/pruned bookkeeping for one training run.

    ``measure`` selects the pair comparison (see ``pair_measure``); the
    default is ``KL(s_i || s_j)`` with ``i`` before ``j`` in batch order.
    ``"ce"`` gives the plain cross-entropy ``H(s_i, s_j)``, which can only
    fall below a small threshold when ``s_i`` itself is nearly one-hot.
    """

    active_ids: set
    tau: int = DEFAULT_TAU
    epsilon: float = DEFAULT_EPSILON
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    measure: str = "kl"
    pruned: dict = field(default_factory=dict)
    events: list = field(default_factory=list)
    comparisons: list = field(default_factory=list)
    record_comparisons: bool = False

    @classmethod
    def start(cls, ids, tau=DEFAULT_TAU, epsilon=DEFAULT_EPSILON, seed=0, **kw):
        return cls(active_ids=set(ids), tau=tau, epsilon=epsilon, rng=np.random.default_rng(seed), **kw)

    @property
    def pruned_ids(self) -> set:
        return set(self.pruned)

    def is_active(self, sid) -> bool:
        return sid in self.active_ids


def prune_batch(state: PruneState, scores: list[PruneScore], epoch: int) -> list:
    """Compare all in-batch score pairs and permanently prune one member of each close pair.

    Does nothing while ``epoch <= state.tau``. Pairs are visited as
    ``(i, j)`` with ``i < j``; a sample pruned earlier in the same pass is
    skipped for the remaining pairs.
    """
    if epoch <= state.tau:
        return []
    removed = []
    gone = set()
    n = len(scores)
    for i in range(n):
        a = scores[i]
        if a.segment_id in gone or a.segment_id not in state.active_ids:
            continue
        for j in range(i + 1, n):
            b = scores[j]
            if b.segment_id in gone or b.segment_id not in state.active_ids:
                continue
            ce = pair_measure(a, b, state.measure)
            below = ce < state.epsilon
            if state.record_comparisons:
                state.comparisons.append((epoch, a.segment_id, b.segment_id, ce, below))
            if not below:
                continue
            if state.rng.random() < 0.5:
                kept, lost = a, b
            else:
                kept, lost = b, a
            gone.add(lost.segment_id)
            state.active_ids.discard(lost.segment_id)
            state.pruned[lost.segment_id] = (epoch, kept.segment_id, ce)
            state.events.append(PruneEvent(epoch, kept.segment_id, lost.segment_id, ce))
            removed.append(lost.segment_id)
            if lost is a:
                break
    return removed


PRUNE_LOG_FIELDS = ("epoch", "kept_id", "pruned_id", "ce", "kept_dup_group", "pruned_dup_group")


def write_prune_log(path, events, dup_groups=None) -> None:
    """One tab-separated row per prune event; ``dup_groups`` maps segment id to group."""
    dup_groups = dup_groups or {}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(PRUNE_LOG_FIELDS)
        for e in events:
            kg = dup_groups.get(e.kept_id)
            pg = dup_groups.get(e.pruned_id)
            w.writerow((e.epoch, e.kept_id, e.pruned_id, repr(float(e.ce)),
                        "" if kg is None else kg, "" if pg is None else pg))


def read_prune_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh, delimiter="\t"))
    for r in rows:
        r["epoch"] = int(r["epoch"])
        r["ce"] = float(r["ce"])
        for k in ("kept_dup_group", "pruned_dup_group"):
            r[k] = int(r[k]) if r[k] != "" else None
    return rows


@dataclass
class EarlyStop:
    patience: int = DEFAULT_PATIENCE
    best_val_loss: float = math.inf
    epochs_since_improve: int = 0


def early_stop_update(es: EarlyStop, val_loss: float) -> str:
    """Return ``"stop"`` once the validation loss has not strictly improved for ``patience`` epochs."""
    if not math.isfinite(val_loss):
        log.warning("non-finite validation loss %r counted as no improvement", val_loss)
        es.epochs_since_improve += 1
    elif val_loss < es.best_val_loss:
        es.best_val_loss = val_loss
        es.epochs_since_improve = 0
    else:
        es.epochs_since_improve += 1
    return "stop" if es.epochs_since_improve >= es.patience else "continue"
