"""Scoring and top-M recommendation from a fitted model."""
from __future__ import annotations

from typing import Iterable, Iterator, NamedTuple

import numpy as np

from .data import Dataset
from .model import FittedModel


class RecommendationList(NamedTuple):
    user: int
    items: list[tuple[int, float]]  # (item, score), best first


def _check_user(model: FittedModel, u: int) -> None:
    if not 0 <= u < model.n_users:
        raise IndexError(f"user index {u} out of range [0, {model.n_users})")


def score(model: FittedModel, u: int, i: int) -> float:
    """Posterior expected Poisson rate ``sum_k E[theta_uk] E[beta_ik]``."""
    _check_user(model, u)
    if not 0 <= i < model.n_items:
        raise IndexError(f"item index {i} out of range [0, {model.n_items})")
    return float(np.dot(model.e_theta[u], model.e_beta[i]))


def _best(
    values: np.ndarray, candidates: np.ndarray, n: int
) -> tuple[np.ndarray, np.ndarray]:
    """The ``n`` candidates with the largest values, and those values.

    Ties go to the smaller candidate index."""
    if n < len(values):
        # everything tied with the n-th largest must survive the cut
        cutoff = np.partition(values, len(values) - n)[len(values) - n]
        keep = np.flatnonzero(values >= cutoff)
        values, candidates = values[keep], candidates[keep]
    order = np.lexsort((candidates, -values))[:n]
    return candidates[order], values[order]


def top_m(
    model: FittedModel, u: int, m: int, consumed: Iterable[int] | None = None
) -> RecommendationList:
    """The ``m`` highest-scoring items for user ``u`` outside ``consumed``."""
    if m < 1:
        raise ValueError("m must be >= 1")
    _check_user(model, u)
    scores = model.e_beta @ model.e_theta[u]
    mask = np.ones(model.n_items, dtype=bool)
    if consumed is not None:
        consumed = np.fromiter(consumed, dtype=np.int64)
        mask[consumed] = False
    candidates = np.flatnonzero(mask)
    items, values = _best(scores[candidates], candidates, m)
    return RecommendationList(u, list(zip(items.tolist(), values.tolist())))


def recommend_all(
    model: FittedModel, train: Dataset, m: int, users: Iterable[int] | None = None
) -> Iterator[RecommendationList]:
    """Top-``m`` lists excluding each user's training items."""
    if users is None:
        users = range(model.n_users)
    by_user = train.by_user
    for u in users:
        seen = by_user.indices[by_user.indptr[u] : by_user.indptr[u + 1]]
        yield top_m(model, u, m, seen)


def top_items_per_component(model: FittedModel, k: int, n: int) -> list[tuple[int, float]]:
    """Items with the largest expected weight on component ``k``."""
    if not 0 <= k < model.k:
        raise IndexError(f"component {k} out of range [0, {model.k})")
    if n < 1:
        raise ValueError("n must be >= 1")
    column = model.e_beta[:, k]
    items, values = _best(column, np.arange(model.n_items), n)
    return list(zip(items.tolist(), values.tolist()))


def write_recommendations(path, lists: Iterable[RecommendationList], train: Dataset) -> int:
    """Write ``user<TAB>rank<TAB>item<TAB>score`` rows with external ids.

    Returns the number of rows written.
    """
    rows = 0
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for rec in lists:
            uid = train.user_ids[rec.user]
            for rank, (item, s) in enumerate(rec.items, start=1):
                f.write(f"{uid}\t{rank}\t{train.item_ids[item]}\t{s:.17g}\n")
                rows += 1
    return rows
