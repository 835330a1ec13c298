"""Ranking metrics and posterior predictive checks."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .data import Dataset, Triplets
from .model import FittedModel
from .recommend import recommend_all

DEFAULT_PERCENTILES = (10, 20, 30, 40, 50, 60, 70, 80, 90, 100)
DEFAULT_CELL_BUDGET = 50_000_000


class ResourceError(RuntimeError):
    pass


def _hits(recommended: Sequence[int], test_items: set, m: int) -> int:
    return sum(1 for item in list(recommended)[:m] if item in test_items)


def normalized_precision_at_m(recommended: Sequence[int], test_items, m: int) -> float | None:
    """Hits in the top ``m`` over ``min(m, |test_items|)``.

    Returns ``None`` when the user has no test items.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    test_items = set(test_items)
    if not test_items:
        return None
    return _hits(recommended, test_items, m) / min(m, len(test_items))


def precision_at_m(recommended: Sequence[int], test_items, m: int) -> float | None:
    if m < 1:
        raise ValueError("m must be >= 1")
    test_items = set(test_items)
    if not test_items:
        return None
    return _hits(recommended, test_items, m) / m


def recall_at_m(recommended: Sequence[int], test_items, m: int) -> float | None:
    if m < 1:
        raise ValueError("m must be >= 1")
    test_items = set(test_items)
    if not test_items:
        return None
    return _hits(recommended, test_items, m) / len(test_items)


class UserMetrics(NamedTuple):
    user: int
    precision: float
    recall: float


def metrics_by_activity(
    per_user: Sequence[UserMetrics],
    activity: np.ndarray,
    percentiles: Iterable[float] = DEFAULT_PERCENTILES,
) -> list[tuple[float, float, float]]:
    """Mean precision/recall over users at or below each activity percentile.

    Buckets are cumulative: the entry for ``p`` covers every evaluated user
    whose training activity is at most the ``p``-th percentile of activity
    among evaluated users. Returns ``(p, mean_precision, mean_recall)``.
    """
    percentiles = [float(p) for p in percentiles]
    if any(not 0 < p <= 100 for p in percentiles):
        raise ValueError("percentiles must lie in (0, 100]")
    if any(b <= a for a, b in zip(percentiles, percentiles[1:])):
        raise ValueError("percentiles must be strictly increasing")
    if not per_user:
        return []
    users = np.array([r.user for r in per_user])
    prec = np.array([r.precision for r in per_user])
    rec = np.array([r.recall for r in per_user])
    act = np.asarray(activity)[users]
    out = []
    for p in percentiles:
        sel = act <= np.percentile(act, p)
        out.append((p, float(prec[sel].mean()), float(rec[sel].mean())))
    return out


@dataclass
class MetricReport:
    m: int
    mean_norm_precision_at_m: float
    mean_recall_at_m: float
    n_users: int
    n_skipped: int
    per_user: list[UserMetrics] | None = None
    by_activity_percentile: list[tuple[float, float, float]] | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.per_user is not None:
            d["per_user"] = [list(r) for r in self.per_user]
        if self.by_activity_percentile is not None:
            d["by_activity_percentile"] = [list(r) for r in self.by_activity_percentile]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def evaluate(
    model: FittedModel,
    train: Dataset,
    test: Triplets,
    m: int = 20,
    percentiles: Iterable[float] | None = DEFAULT_PERCENTILES,
    keep_per_user: bool = True,
) -> MetricReport:
    """Score top-``m`` lists (training items excluded) against held-out items.

    Users without test items are skipped rather than counted as zero.
    """
    test_sets: dict[int, set[int]] = {}
    for u, i in zip(test.users.tolist(), test.items.tolist()):
        test_sets.setdefault(u, set()).add(i)
    users = sorted(test_sets)
    per_user = []
    for rec in recommend_all(model, train, m, users):
        items = [i for i, _ in rec.items]
        truth = test_sets[rec.user]
        per_user.append(
            UserMetrics(
                rec.user,
                normalized_precision_at_m(items, truth, m),
                recall_at_m(items, truth, m),
            )
        )
    n = len(per_user)
    report = MetricReport(
        m=m,
        mean_norm_precision_at_m=float(np.mean([r.precision for r in per_user])) if n else math.nan,
        mean_recall_at_m=float(np.mean([r.recall for r in per_user])) if n else math.nan,
        n_users=n,
        n_skipped=model.n_users - n,
        per_user=per_user if keep_per_user else None,
    )
    if percentiles is not None:
        report.by_activity_percentile = metrics_by_activity(
            per_user, train.user_activity(), percentiles
        )
    return report


# -- posterior predictive check ---------------------------------------------


@dataclass
class PPCReport:
    axis: str
    observed_activity: list[tuple[int, int]]  # (consumed count, number of users)
    replicated_activity: list[tuple[int, int]]
    # (decile, observed quantile, replicated quantile, replicated / observed)
    summary: list[tuple[int, float, float, float]] = field(default_factory=list)
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "axis": self.axis,
            "seed": self.seed,
            "observed_activity": [list(r) for r in self.observed_activity],
            "replicated_activity": [list(r) for r in self.replicated_activity],
            "summary": [
                {"decile": d, "observed": o, "replicated": r, "ratio": ratio}
                for d, o, r, ratio in self.summary
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _histogram(counts: np.ndarray) -> list[tuple[int, int]]:
    values, freq = np.unique(counts, return_counts=True)
    return list(zip(values.tolist(), freq.tolist()))


def _ratio(replicated: float, observed: float) -> float:
    if observed == 0:
        return 1.0 if replicated == 0 else math.inf
    return replicated / observed


def replicate_activity(
    model: FittedModel,
    seed: int,
    axis: str = "user",
    cell_budget: int = DEFAULT_CELL_BUDGET,
    stream: bool = False,
) -> np.ndarray:
    """Number of nonzero cells per row of a matrix drawn from the posterior
    predictive ``Poisson(E[theta_u] . E[beta_i])``.

    Each row (user, or item with ``axis="item"``) has its own random stream
    derived from ``(seed, row)``, so the dense and streamed paths agree
    draw for draw. The dense path holds the full rate matrix and is allowed
    only up to ``cell_budget`` cells.
    """
    if axis == "user":
        rows, cols, code = model.e_theta, model.e_beta, 0
    elif axis == "item":
        rows, cols, code = model.e_beta, model.e_theta, 1
    else:
        raise ValueError(f"axis must be 'user' or 'item', got {axis!r}")
    n_rows = rows.shape[0]
    cells = n_rows * cols.shape[0]
    dense = cells <= cell_budget
    if not dense and not stream:
        raise ResourceError(
            f"{n_rows}x{cols.shape[0]} = {cells} cells exceeds the budget of "
            f"{cell_budget}; enable streaming"
        )
    rates = rows @ cols.T if dense else None
    out = np.empty(n_rows, dtype=np.int64)
    for r in range(n_rows):
        rng = np.random.default_rng([seed, code, r])
        row_rates = rates[r] if dense else cols @ rows[r]
        out[r] = np.count_nonzero(rng.poisson(row_rates))
    return out


def ppc_user_activity(
    model: FittedModel,
    observed: Dataset,
    seed: int = 0,
    axis: str = "user",
    cell_budget: int = DEFAULT_CELL_BUDGET,
    stream: bool = False,
) -> PPCReport:
    """Compare observed and replicated activity (or popularity) marginals."""
    if (model.n_users, model.n_items) != observed.shape:
        raise ValueError("model and observed dataset dimensions differ")
    obs = observed.user_activity() if axis == "user" else observed.item_popularity()
    rep = replicate_activity(model, seed, axis, cell_budget, stream)
    summary = []
    for d in range(10, 101, 10):
        qo = float(np.percentile(obs, d))
        qr = float(np.percentile(rep, d))
        summary.append((d, qo, qr, _ratio(qr, qo)))
    return PPCReport(axis, _histogram(obs), _histogram(rep), summary, seed)


def write_histogram(path, hist: Sequence[tuple[int, int]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("count\tnum_users\n")
        for count, n in hist:
            f.write(f"{count}\t{n}\n")
