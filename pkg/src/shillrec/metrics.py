"""Rating, top-K and robustness metrics plus the evaluation report."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)


class MetricError(ValueError):
    pass


@dataclass
class RatingPredictions:
    predicted: np.ndarray
    actual: np.ndarray
    users: np.ndarray | None = None
    items: np.ndarray | None = None

    def __post_init__(self):
        self.predicted = np.asarray(self.predicted, dtype=float)
        self.actual = np.asarray(self.actual, dtype=float)
        if self.predicted.shape != self.actual.shape:
            raise MetricError("predicted/actual length mismatch")


@dataclass
class TopKGroundTruth:
    """Recommended lists R(u) and relevant sets T(u) for a set of users."""

    recommended: dict
    relevant: dict
    k: int

    def __post_init__(self):
        self.recommended = {u: [int(i) for i in list(r)[:self.k]]
                            for u, r in self.recommended.items()}
        self.relevant = {u: {int(i) for i in self.relevant.get(u, ())} for u in self.recommended}

    @property
    def users(self) -> list:
        return sorted(self.recommended)


def target_truth(recommended: dict, targets, users, k: int) -> TopKGroundTruth:
    """Ground truth where every evaluated user's relevant set is the attack targets."""
    targets = {int(t) for t in targets}
    users = [int(u) for u in users]
    return TopKGroundTruth({u: recommended[u] for u in users}, {u: targets for u in users}, k)


def _require(preds: RatingPredictions):
    if len(preds.predicted) == 0:
        raise MetricError("no predictions to evaluate")


def mae(preds: RatingPredictions) -> float:
    """Mean absolute error over evaluated (user, item) pairs."""
    _require(preds)
    return float(np.sum(np.abs(preds.predicted - preds.actual)) / len(preds.predicted))


def rmse(preds: RatingPredictions) -> float:
    _require(preds)
    return float(np.sqrt(np.sum((preds.predicted - preds.actual) ** 2) / len(preds.predicted)))


def _hits(gt: TopKGroundTruth, u) -> int:
    rel = gt.relevant[u]
    return sum(1 for i in gt.recommended[u] if i in rel)


def precision_at_k(gt: TopKGroundTruth) -> float:
    users = gt.users
    num = sum(_hits(gt, u) for u in users)
    den = sum(len(gt.recommended[u]) for u in users)
    return num / den if den else 0.0


def recall_at_k(gt: TopKGroundTruth) -> float:
    users = gt.users
    num = sum(_hits(gt, u) for u in users)
    den = sum(len(gt.relevant[u]) for u in users)
    return num / den if den else 0.0


def f1(gt: TopKGroundTruth) -> float:
    p, r = precision_at_k(gt), recall_at_k(gt)
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def hit_rate(gt: TopKGroundTruth, variant: str = "test_hit", targets=None,
             genuine_users=None) -> float:
    """Share of users with at least one relevant item in their list.

    ``variant="target_item"`` swaps T(u) for the attack targets and restricts
    the population to ``genuine_users`` (all listed users when omitted).
    """
    if variant == "target_item":
        if targets is None:
            raise MetricError("target_item hit rate needs the target set")
        users = gt.users if genuine_users is None else sorted(int(u) for u in genuine_users)
        gt = target_truth(gt.recommended, targets, users, gt.k)
    elif variant != "test_hit":
        raise MetricError(f"unknown hit-rate variant {variant!r}")
    users = gt.users
    if not users:
        return 0.0
    return sum(1 for u in users if _hits(gt, u) > 0) / len(users)


def _discounts(n: int) -> np.ndarray:
    return 1.0 / np.log2(np.arange(2, n + 2))


def ndcg_at_k(gt: TopKGroundTruth) -> float:
    """Binary-relevance NDCG averaged over users with a non-empty T(u)."""
    vals = []
    skipped = 0
    for u in gt.users:
        rel = gt.relevant[u]
        if not rel:
            skipped += 1
            continue
        rec = gt.recommended[u]
        gains = np.array([1.0 if i in rel else 0.0 for i in rec])
        dcg = float(np.sum(gains * _discounts(len(rec)))) if len(rec) else 0.0
        n_ideal = min(gt.k, len(rel))
        idcg = float(np.sum((2.0 ** 1 - 1) * _discounts(n_ideal)))
        vals.append(dcg / idcg)
    if skipped:
        log.debug("ndcg: %d users with empty relevant set excluded", skipped)
    return float(np.mean(vals)) if vals else 0.0


def mrr(gt: TopKGroundTruth) -> float:
    """Mean reciprocal rank of the first relevant item; users without a hit add 0."""
    users = gt.users
    if not users:
        return 0.0
    total = 0.0
    for u in users:
        rel = gt.relevant[u]
        for pos, i in enumerate(gt.recommended[u], start=1):
            if i in rel:
                total += 1.0 / pos
                break
    return total / len(users)


def average_precision_at_k(recommended, relevant, k: int) -> float:
    """AP@K with denominator K."""
    hits = 0
    acc = 0.0
    for n, i in enumerate(list(recommended)[:k], start=1):
        if i in relevant:
            hits += 1
            acc += hits / n
    return acc / k


def map_at_k(gt: TopKGroundTruth) -> float:
    users = gt.users
    if not users:
        return 0.0
    return sum(average_precision_at_k(gt.recommended[u], gt.relevant[u], gt.k)
               for u in users) / len(users)


def failure_rate(gt: TopKGroundTruth) -> float:
    """Percentage of users whose list contains no relevant item."""
    users = gt.users
    if not users:
        return 0.0
    n_fail = sum(1 for u in users if _hits(gt, u) == 0)
    return 100.0 * n_fail / len(users)


def prediction_shift(pre, post, target_items=None, users=None) -> float:
    """Mean of post-attack minus pre-attack predictions over (genuine user, target) pairs.

    Either ``pre``/``post`` are aligned prediction arrays, or they are rating
    models and the pairs are ``users`` x ``target_items`` (clipped predictions).
    """
    if target_items is not None:
        from .recommender import predict_ratings

        if users is None:
            raise MetricError("prediction shift over models needs the genuine users")
        uu, tt = np.meshgrid(np.asarray(users), np.asarray(target_items), indexing="ij")
        pre = predict_ratings(pre, uu.ravel(), tt.ravel())
        post = predict_ratings(post, uu.ravel(), tt.ravel())
    pre = np.asarray(pre, dtype=float)
    post = np.asarray(post, dtype=float)
    if pre.shape != post.shape or pre.size == 0:
        raise MetricError("prediction shift needs aligned, non-empty predictions")
    return float(np.mean(post - pre))


def rank_improvement(hr_origin: float, hr_attack: float, hr_defense: float) -> float | None:
    """1 - (HR_defense - HR_origin) / (HR_attack - HR_origin); None when undefined."""
    if hr_attack == hr_origin:
        return None
    return 1.0 - (hr_defense - hr_origin) / (hr_attack - hr_origin)


def drop_rate(p_iid: float, p_ood: float) -> float:
    if p_iid <= 0:
        raise MetricError("drop rate undefined for non-positive in-distribution performance")
    return (p_iid - p_ood) / p_iid


def topk_metrics(gt: TopKGroundTruth, prefix: str = "") -> dict:
    k = gt.k
    return {
        f"{prefix}Precision@{k}": precision_at_k(gt),
        f"{prefix}Recall@{k}": recall_at_k(gt),
        f"{prefix}F1@{k}": f1(gt),
        f"{prefix}HR@{k}": hit_rate(gt),
        f"{prefix}NDCG@{k}": ndcg_at_k(gt),
        f"{prefix}MRR@{k}": mrr(gt),
        f"{prefix}MAP@{k}": map_at_k(gt),
        f"{prefix}FailureRate@{k}": failure_rate(gt),
    }


# --------------------------------------------------------------------- report

def _canon(value):
    if isinstance(value, dict):
        return {str(k): _canon(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_canon(v) for v in value]
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if not math.isfinite(value):
            return None
        # 12 significant digits keep reports stable against last-bit BLAS noise
        return float(f"{value:.12g}")
    return value


TABLE_COLUMNS = ("NDCG@10", "NDCG@50", "HR@10", "HR@50")


@dataclass
class EvalReport:
    metrics: dict
    meta: dict = field(default_factory=dict)

    def to_json(self) -> str:
        doc = {"meta": _canon(self.meta), "metrics": _canon(self.metrics)}
        return json.dumps(doc, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        doc = json.loads(text)
        return cls(metrics=doc["metrics"], meta=doc["meta"])

    def to_table(self, conditions=None, columns=None) -> str:
        """Aligned text table. Metric keys look like ``<condition>/<metric>``;
        rows are conditions, target-item columns come first in
        TABLE_COLUMNS order, then test rating errors when present."""
        keyed = [k.split("/", 1) for k in self.metrics if "/" in k]
        by_row = {}
        for row, metric in keyed:
            by_row.setdefault(row, set()).add(metric)
        rows = conditions or [r for r in CONDITION_ORDER if r in by_row] + sorted(
            r for r in by_row if r not in CONDITION_ORDER and r not in FOOTER_ROWS)
        present = set().union(*(by_row[r] for r in rows)) if rows else set()
        if columns is None:
            columns = [f"target/{c}" for c in TABLE_COLUMNS if f"target/{c}" in present]
            columns += [c for c in ("test/MAE", "test/RMSE") if c in present]
            columns = columns or [c for c in TABLE_COLUMNS if c in present] or sorted(present)
        table = format_table(self.metrics, rows, columns)
        shown = {f"delta/{c}" for c in columns}
        extra = [f"{k}: {_fmt(v)}" for k, v in sorted(self.metrics.items())
                 if k in shown or k.startswith("robustness/") or k == "attacked/PS"]
        return table + ("\n" + "\n".join(extra) + "\n" if extra else "")


CONDITION_ORDER = ("clean", "attacked", "defended")
FOOTER_ROWS = ("delta", "robustness")   # summarized below the table, not as rows


def _fmt(v) -> str:
    return "n/a" if v is None else f"{float(v):.4f}"


def format_table(metrics: dict, rows, columns) -> str:
    header = ["condition", *columns]
    body = []
    for r in rows:
        line = [r]
        for c in columns:
            v = metrics.get(f"{r}/{c}")
            line.append("-" if v is None else _fmt(v))
        body.append(line)
    widths = [max(len(str(x[n])) for x in [header, *body]) for n in range(len(header))]
    fmt = lambda cells: "  ".join(str(c).rjust(w) if n else str(c).ljust(w)
                                  for n, (c, w) in enumerate(zip(cells, widths)))
    rule = "-" * len(fmt(header))
    return "\n".join([fmt(header), rule, *map(fmt, body)]) + "\n"
