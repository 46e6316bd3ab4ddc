"""
User-preference filtering: retain interactions in proportion to the user's category distribution
"""
import logging
import math

from collections import defaultdict
from dataclasses import dataclass
from fractions import Fraction
from typing import Dict, List, Mapping, Set

import numpy as np

from ..corpus import CategoryMap
from . import EmptyHistoryError, FilteredHistory, Strategy

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class QuotaAllocation:
    per_category: Mapping[str, int]
    "retained interactions per category label"
    total: int
    "the budget capped at the history length"


def apportion(amount: int, weights: Mapping[str, Fraction]) -> Dict[str, int]:
    """
    Split `amount` units proportionally to `weights`: floor of each exact share, then one unit each to the
    categories with the largest fractional parts, ties by ascending label
    """
    total = sum(weights.values(), Fraction(0))
    if amount == 0 or total == 0:
        return {label: 0 for label in weights}
    exact = {label: weight * amount / total for label, weight in weights.items()}
    shares = {label: math.floor(value) for label, value in exact.items()}
    residue = amount - sum(shares.values())
    by_remainder = sorted(weights, key=lambda label: (-(exact[label] - shares[label]), label))
    for label in by_remainder[:residue]:
        shares[label] += 1
    return shares


def category_weights(history: FilteredHistory, categories: CategoryMap) -> Dict[str, Fraction]:
    """
    :return: per-category weight: each interaction contributes 1/n to each of its n categories
    """
    weights: Dict[str, Fraction] = defaultdict(Fraction)
    for interaction in history.kept:
        labels = categories.categories_of(interaction.item_id)
        for label in labels:
            weights[label] += Fraction(1, len(labels))
    return dict(weights)


def allocate_quotas(history: FilteredHistory, categories: CategoryMap, k: int) -> QuotaAllocation:
    """
    Each category gets the floor of its weighted share of k, the residue going to the largest fractional parts; quotas
    are capped at each category's population and any overflow re-apportioned over the categories with room left

    :raises EmptyHistoryError: if the history is empty
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if not history.kept:
        raise EmptyHistoryError(history.user_id)
    weights = category_weights(history, categories)
    population: Dict[str, int] = defaultdict(int)
    for interaction in history.kept:
        for label in categories.categories_of(interaction.item_id):
            population[label] += 1
    total = min(k, len(history.kept))
    quotas = apportion(total, weights)
    while True:
        overflow = sum(max(0, quotas[label] - population[label]) for label in quotas)
        if overflow == 0:
            break
        for label in quotas:
            quotas[label] = min(quotas[label], population[label])
        open_weights = {label: weights[label] for label in quotas if quotas[label] < population[label]}
        for label, extra in apportion(overflow, open_weights).items():
            quotas[label] += extra
    return QuotaAllocation(dict(sorted(quotas.items())), total)


def preference_filter(history: FilteredHistory, categories: CategoryMap, k: int, seed: int) -> FilteredHistory:
    """
    Draw each category's quota of interactions uniformly without replacement (categories in label order).  An interaction
    drawn for one category is not eligible for later ones; any shortfall left by multi-label overlap is filled
    uniformly from the interactions not yet drawn, so exactly min(k, |history|) are kept.

    :raises EmptyHistoryError: if the history is empty
    """
    allocation = allocate_quotas(history, categories, k)
    if k >= len(history):
        return history.select(range(len(history)), Strategy.PREFERENCE, k)
    rng = np.random.default_rng(seed)
    taken: Set[int] = set()
    for label, quota in allocation.per_category.items():
        if quota == 0:
            continue
        pool = [p for p, interaction in enumerate(history.kept)
                if p not in taken and label in categories.categories_of(interaction.item_id)]
        taken.update(_draw(rng, pool, quota))
    shortfall = allocation.total - len(taken)
    if shortfall > 0:
        log.debug("user %d: topping up %d interactions after multi-label overlap", history.user_id, shortfall)
        taken.update(_draw(rng, [p for p in range(len(history)) if p not in taken], shortfall))
    return history.select(sorted(taken), Strategy.PREFERENCE, k)


def _draw(rng: np.random.Generator, pool: List[int], count: int) -> List[int]:
    count = min(count, len(pool))
    if count == 0:
        return []
    return [pool[int(index)] for index in rng.choice(len(pool), size=count, replace=False)]
