"""Brute-force reference implementations, written from the metric
definitions without sharing code with the package."""

import math


def o_mae(pred, actual):
    return sum(abs(p - a) for p, a in zip(pred, actual)) / len(pred)


def o_rmse(pred, actual):
    return math.sqrt(sum((p - a) ** 2 for p, a in zip(pred, actual)) / len(pred))


def o_precision(rec, rel):
    hits = sum(len(set(rec[u]) & rel[u]) for u in rec)
    total = sum(len(rec[u]) for u in rec)
    return hits / total if total else 0.0


def o_recall(rec, rel):
    hits = sum(len(set(rec[u]) & rel[u]) for u in rec)
    total = sum(len(rel[u]) for u in rec)
    return hits / total if total else 0.0


def o_f1(rec, rel):
    p, r = o_precision(rec, rel), o_recall(rec, rel)
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def o_hit_rate(rec, rel):
    if not rec:
        return 0.0
    return sum(1 for u in rec if any(i in rel[u] for i in rec[u])) / len(rec)


def o_ndcg(rec, rel, k):
    vals = []
    for u in rec:
        if not rel[u]:
            continue
        dcg = 0.0
        for pos in range(len(rec[u])):
            if rec[u][pos] in rel[u]:
                dcg += 1.0 / math.log2(pos + 2)
        ideal = sorted([1] * len(rel[u]) + [0] * k, reverse=True)[:k]
        idcg = sum((2 ** g - 1) / math.log2(pos + 2) for pos, g in enumerate(ideal))
        vals.append(dcg / idcg)
    return sum(vals) / len(vals) if vals else 0.0


def o_mrr(rec, rel):
    if not rec:
        return 0.0
    tot = 0.0
    for u in rec:
        ranks = [pos + 1 for pos, i in enumerate(rec[u]) if i in rel[u]]
        tot += 1.0 / min(ranks) if ranks else 0.0
    return tot / len(rec)


def o_map(rec, rel, k):
    if not rec:
        return 0.0
    tot = 0.0
    for u in rec:
        s = 0.0
        for n in range(1, min(k, len(rec[u])) + 1):
            if rec[u][n - 1] in rel[u]:
                prec_n = sum(1 for i in rec[u][:n] if i in rel[u]) / n
                s += prec_n
        tot += s / k
    return tot / len(rec)


def o_failure_rate(rec, rel):
    if not rec:
        return 0.0
    return 100.0 * sum(1 for u in rec if not any(i in rel[u] for i in rec[u])) / len(rec)


def o_prediction_shift(pre, post):
    return sum(b - a for a, b in zip(pre, post)) / len(pre)


def o_rank_improvement(o, a, d):
    return 1 - (d - o) / (a - o)


def o_drop_rate(pi, pn):
    return (pi - pn) / pi
