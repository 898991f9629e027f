"""Full-ranking top-K evaluation (Recall@K, NDCG@K) with history masking."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np

from .data import InteractionMatrix, SplitBundle
from .errors import DataError, UsageError

log = logging.getLogger(__name__)

MASK_POLICY_TEST = "condition=train+val;mask=train+val"
MASK_POLICY_VAL = "condition=train;mask=train"


def rank_items(scores, mask=None, k: int = 10) -> np.ndarray:
    """Top-``k`` item indices by descending score, masked items removed.

    Ties go to the smaller item index. If fewer than ``k`` items are
    unmasked, all of them are returned (with a warning).
    """
    if k < 1:
        raise UsageError(f"K must be >= 1, got {k}")
    s = np.asarray(scores, dtype=np.float64)
    if not np.isfinite(s).all():
        raise DataError("scores must be finite")
    s = s.copy()
    if mask is not None and len(mask):
        s[np.asarray(list(mask) if isinstance(mask, (set, frozenset)) else mask, dtype=np.int64)] = -np.inf
    n_free = int(np.isfinite(s).sum())
    if k > n_free:
        log.warning("K=%d exceeds the %d unmasked items; returning all of them", k, n_free)
        k = n_free
    order = np.argsort(-s, kind="stable")
    return order[:k]


def topk_matrix(scores: np.ndarray, mask_rows: Optional[np.ndarray], k: int) -> np.ndarray:
    """Vectorised :func:`rank_items` over rows. ``mask_rows`` is a boolean
    array of the same shape; masked slots are returned as -1 when a row has
    fewer than ``k`` unmasked items."""
    s = np.array(scores, dtype=np.float64, copy=True)
    if not np.isfinite(s).all():
        raise DataError("scores must be finite")
    if mask_rows is not None:
        s[mask_rows] = -np.inf
    k = min(k, s.shape[1])
    # stable sort on negated scores keeps ascending index among ties
    order = np.argsort(-s, axis=1, kind="stable")[:, :k]
    hit_masked = np.take_along_axis(s, order, axis=1) == -np.inf
    order[hit_masked] = -1
    return order


def recall_at_k(topk, test_set) -> float:
    test = set(test_set)
    if not test:
        raise UsageError("recall undefined for an empty test set")
    return len(test.intersection(int(i) for i in topk)) / len(test)


def ndcg_at_k(topk, test_set, k: Optional[int] = None) -> float:
    test = set(test_set)
    if not test:
        raise UsageError("NDCG undefined for an empty test set")
    topk = list(topk)
    k = len(topk) if k is None else k
    dcg = sum(1.0 / math.log2(r + 2) for r, i in enumerate(topk[:k]) if int(i) in test)
    idcg = sum(1.0 / math.log2(r + 2) for r in range(min(k, len(test))))
    return dcg / idcg


@dataclass
class EvalReport:
    ks: List[int]
    recall: Dict[int, float]
    ndcg: Dict[int, float]
    n_users: int
    n_excluded: int
    policy: str
    per_user: List[dict] = field(default_factory=list)

    def headline(self) -> List[float]:
        """R@k for each k, then N@k for each k (R@10 R@20 N@10 N@20)."""
        return [self.recall[k] for k in self.ks] + [self.ndcg[k] for k in self.ks]

    def as_kv(self) -> Dict[str, object]:
        out: Dict[str, object] = {}
        for k in self.ks:
            out[f"recall@{k}"] = self.recall[k]
        for k in self.ks:
            out[f"ndcg@{k}"] = self.ndcg[k]
        out["users_evaluated"] = self.n_users
        out["users_excluded"] = self.n_excluded
        out["masking_policy"] = self.policy
        return out

    def write(self, path, per_user_csv=None) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for key, v in self.as_kv().items():
                fh.write(f"{key}={v:.10f}\n" if isinstance(v, float) else f"{key}={v}\n")
        if per_user_csv is not None:
            with open(per_user_csv, "w", encoding="utf-8", newline="\n") as fh:
                cols = [f"r@{k}" for k in self.ks] + [f"n@{k}" for k in self.ks]
                fh.write("user," + ",".join(cols) + ",hits\n")
                for rec in self.per_user:
                    vals = ",".join(f"{rec[c]:.10f}" for c in cols)
                    hits = " ".join(str(r) for r in rec["hit_ranks"])
                    fh.write(f"{rec['user']},{vals},{hits}\n")


ScoreSource = Union[np.ndarray, Callable[[np.ndarray, np.ndarray], np.ndarray]]


def evaluate_split(scores: ScoreSource, history: InteractionMatrix, target: InteractionMatrix,
                   ks: Sequence[int] = (10, 20), policy: str = "", batch_size: int = 1024,
                   keep_per_user: bool = True) -> EvalReport:
    """Scores users against ``target`` with ``history`` masked.

    ``scores`` is either a dense (n_users, n_items) array or a callable
    ``f(user_ids, history_rows) -> scores`` evaluated in batches. Users
    without target items or without history are excluded from the means.
    """
    ks = sorted(int(k) for k in ks)
    if history.n_items != target.n_items or history.n_users != target.n_users:
        raise DataError("history and target matrices have different shapes")
    if isinstance(scores, np.ndarray) and scores.shape != (history.n_users, history.n_items):
        raise DataError(f"score matrix shape {scores.shape} does not match "
                        f"({history.n_users} users, {history.n_items} items)")
    has_t = target.degree() > 0
    has_h = history.degree() > 0
    eligible = np.flatnonzero(has_t & has_h)
    excluded = int((has_t & ~has_h).sum())
    hist_csr = history.csr()
    kmax = ks[-1]
    disc = 1.0 / np.log2(np.arange(2, kmax + 2))
    sums_r = {k: 0.0 for k in ks}
    sums_n = {k: 0.0 for k in ks}
    per_user = []
    for lo in range(0, len(eligible), batch_size):
        users = eligible[lo:lo + batch_size]
        hrows = hist_csr[users]
        if callable(scores):
            s = np.asarray(scores(users, hrows.toarray()), dtype=np.float64)
            if s.shape != (len(users), history.n_items):
                raise DataError(f"score callable returned shape {s.shape}, expected "
                                f"({len(users)}, {history.n_items})")
        else:
            s = scores[users]
        mask = hrows.toarray() != 0
        top = topk_matrix(s, mask, kmax)
        for row, u in enumerate(users.tolist()):
            tset = target.row(u)
            hits = np.isin(top[row], tset)
            n_test = len(tset)
            rec = {"user": u, "hit_ranks": (np.flatnonzero(hits) + 1).tolist()}
            for k in ks:
                h = hits[:k]
                r = h.sum() / n_test
                idcg = disc[:min(k, n_test)].sum()
                n = (disc[:len(h)][h]).sum() / idcg
                sums_r[k] += r
                sums_n[k] += n
                rec[f"r@{k}"] = float(r)
                rec[f"n@{k}"] = float(n)
            if keep_per_user:
                per_user.append(rec)
    m = max(len(eligible), 1)
    return EvalReport(ks, {k: sums_r[k] / m for k in ks}, {k: sums_n[k] / m for k in ks},
                      len(eligible), excluded, policy, per_user)


def evaluate(scores: ScoreSource, bundle: SplitBundle, ks: Sequence[int] = (10, 20),
             split: str = "test", history: Optional[InteractionMatrix] = None, **kw) -> EvalReport:
    """Evaluate against the bundle's test (train+val masked) or validation
    (train masked) split. ``history`` overrides the conditioning matrix, e.g.
    with temporally reweighted rows; its support must match the default."""
    if split == "test":
        default = bundle.train.merge(bundle.val)
        policy = MASK_POLICY_TEST
        target = bundle.test
    elif split == "val":
        default = bundle.train
        policy = MASK_POLICY_VAL
        target = bundle.val
    else:
        raise UsageError(f"unknown split {split!r}")
    return evaluate_split(scores, history if history is not None else default, target, ks, policy, **kw)
