"""Top-K accuracy and beyond-accuracy metrics under leave-one-out evaluation.

Slates are ``{user: ranked item array}``; the test map is ``{user: held-out
item}``. Per-user values are averaged with :func:`math.fsum` in ascending
user order so results do not depend on dict ordering.
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np

from advrec.errors import DomainError
from advrec.mf import random_slates, topk_slates

CSV_FIELDS = ("dataset", "model", "strategy", "epsilon", "alpha", "iterations", "seed",
              "k", "pr", "re", "ndcg", "efd", "se", "icov", "rho")


def _users(slates, test):
    if not test:
        raise DomainError("empty test set")
    missing = [u for u in test if u not in slates]
    if missing:
        raise DomainError(f"no slate for {len(missing)} test users (e.g. {missing[0]})")
    return sorted(test)


def _hit_rank(items, target):
    """1-based rank of ``target`` in ``items`` or None."""
    where = np.flatnonzero(np.asarray(items) == target)
    return int(where[0]) + 1 if len(where) else None


def precision_at_k(slates, test, k):
    users = _users(slates, test)
    return math.fsum((1.0 if _hit_rank(slates[u][:k], test[u]) else 0.0) / k
                     for u in users) / len(users)


def recall_at_k(slates, test, k):
    # one held-out item per user, so recall is the hit rate
    users = _users(slates, test)
    return math.fsum(1.0 if _hit_rank(slates[u][:k], test[u]) else 0.0
                     for u in users) / len(users)


def ndcg_at_k(slates, test, k):
    users = _users(slates, test)
    total = []
    for u in users:
        r = _hit_rank(slates[u][:k], test[u])
        total.append(1.0 / math.log2(r + 1) if r else 0.0)
    return math.fsum(total) / len(users)


def item_popularity(train):
    """Number of distinct training users per item."""
    return train.item_degrees


def efd_at_k(slates, test, train, k):
    """Expected free discovery: hit-weighted ``-log2 p(i)`` averaged over K slots.

    ``p(i) = max(pop(i), 1) / |U|`` with ``pop`` the training popularity.
    """
    users = _users(slates, test)
    pop = item_popularity(train)
    n = train.num_users
    total = []
    for u in users:
        r = _hit_rank(slates[u][:k], test[u])
        if r:
            p = max(int(pop[test[u]]), 1) / n
            total.append(-math.log2(p) / k)
        else:
            total.append(0.0)
    return math.fsum(total) / len(users)


def shannon_entropy_at_k(slates, k):
    if not slates:
        raise DomainError("no slates")
    counts = Counter()
    for u in sorted(slates):
        counts.update(int(i) for i in slates[u][:k])
    slots = len(slates) * k
    return -math.fsum((c / slots) * math.log2(c / slots) for _, c in sorted(counts.items()))


def item_coverage_at_k(slates, k):
    seen = set()
    for items in slates.values():
        seen.update(int(i) for i in items[:k])
    return len(seen)


def rho(ndcg_init, ndcg_after):
    """Relative nDCG degradation in percent."""
    if not ndcg_init > 0:
        raise DomainError("rho is undefined when the initial nDCG is 0")
    return (ndcg_init - ndcg_after) / ndcg_init * 100.0


@dataclass(frozen=True)
class LineFit:
    slope: float
    intercept: float
    points: int
    endpoint_slope: float


def fit_line(points) -> LineFit:
    """Least-squares line through ``(x, y)`` points.

    ``endpoint_slope`` is the two-point slope between the points with the
    smallest and largest x.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    x, y = pts[:, 0], pts[:, 1]
    if len(np.unique(x)) < 2:
        raise DomainError("line fit needs at least two distinct x values")
    xm, ym = x.mean(), y.mean()
    slope = float(np.sum((x - xm) * (y - ym)) / np.sum((x - xm) ** 2))
    lo, hi = int(np.argmin(x)), int(np.argmax(x))
    return LineFit(slope=slope, intercept=float(ym - slope * xm), points=len(x),
                   endpoint_slope=float((y[hi] - y[lo]) / (x[hi] - x[lo])))


def normalized_auc(xs, ys):
    """Trapezoidal area under ``ys(xs)`` divided by the x span."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if len(xs) == 1:
        return float(ys[0])
    span = xs.max() - xs.min()
    if span == 0:
        raise DomainError("zero-width x span")
    area = float(np.sum((xs[1:] - xs[:-1]) * (ys[1:] + ys[:-1]) / 2.0))
    return area / span


@dataclass
class EvalReport:
    k: int
    pr: float
    re: float
    ndcg: float
    efd: float
    se: float
    icov: int
    num_users_evaluated: int
    provenance: dict = field(default_factory=dict)
    rho: float | None = None

    def metrics(self):
        d = asdict(self)
        d.pop("provenance")
        return d

    def csv_row(self):
        prov = self.provenance
        row = {
            "dataset": prov.get("dataset", ""),
            "model": prov.get("model", ""),
            "strategy": prov.get("strategy", "none"),
            "epsilon": prov.get("epsilon", 0.0),
            "alpha": prov.get("alpha", 0.0),
            "iterations": prov.get("iterations", 0),
            "seed": prov.get("seed", 0),
            "k": self.k,
            "pr": self.pr, "re": self.re, "ndcg": self.ndcg, "efd": self.efd,
            "se": self.se, "icov": self.icov,
            "rho": "" if self.rho is None else self.rho,
        }
        return row


def evaluate_slates(slates, train, test, k, provenance=None) -> EvalReport:
    return EvalReport(
        k=k,
        pr=precision_at_k(slates, test, k),
        re=recall_at_k(slates, test, k),
        ndcg=ndcg_at_k(slates, test, k),
        efd=efd_at_k(slates, test, train, k),
        se=shannon_entropy_at_k({u: slates[u] for u in test}, k),
        icov=item_coverage_at_k({u: slates[u] for u in test}, k),
        num_users_evaluated=len(test),
        provenance=dict(provenance or {}),
    )


def evaluate(model, train, test, k=10, provenance=None) -> EvalReport:
    """Evaluate model parameters (or precomputed slates) on a leave-one-out test map."""
    if isinstance(model, dict):
        slates = model
    else:
        slates = topk_slates(model, train, sorted(test), k)
    return evaluate_slates(slates, train, test, k, provenance)


def evaluate_random(train, test, k=10, seed=0, provenance=None) -> EvalReport:
    slates = random_slates(train, sorted(test), k, seed)
    return evaluate_slates(slates, train, test, k, provenance)
