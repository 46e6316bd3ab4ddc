"""
Diversity and coverage filtering: a knapsack over per-category retention percentages, scored by a pre-computed
performance matrix, decides how much of each category survives.
"""
import json
import logging
import math
import os

from dataclasses import dataclass
from fractions import Fraction
from functools import reduce
from typing import Dict, List, Mapping, Optional, Sequence, Set, Tuple

import numpy as np

from ..corpus import CategoryMap
from . import EmptyHistoryError, FilteredHistory, GridMismatchError, Strategy

log = logging.getLogger(__name__)

DEFAULT_GRID: Tuple[int, ...] = tuple(range(0, 101, 10))


@dataclass(frozen=True)
class PerfMatrix:
    """
    M[c][p]: hit rate measured when retaining p% of category c
    """
    grid: Tuple[int, ...]
    "retention percentages, ascending"
    categories: Tuple[str, ...]
    values: Tuple[Tuple[float, ...], ...]
    "one row per category, one column per grid point"

    def __post_init__(self) -> None:
        if not self.grid or list(self.grid) != sorted(set(self.grid)) or self.grid[0] < 0 or self.grid[-1] > 100:
            raise ValueError(f"grid must be ascending distinct percentages in [0, 100], got {self.grid}")
        if len(self.values) != len(self.categories) or len(set(self.categories)) != len(self.categories):
            raise ValueError("one row per distinct category is required")
        for label, row in zip(self.categories, self.values):
            if len(row) != len(self.grid):
                raise ValueError(f"row {label!r} does not cover the grid")
            if not all(math.isfinite(v) and 0.0 <= v <= 1.0 for v in row):
                raise ValueError(f"row {label!r} holds values outside [0, 1]")

    def value(self, category: str, percent: int) -> float:
        return self.values[self.categories.index(category)][self.grid.index(percent)]

    def restrict(self, categories: Sequence[str]) -> "PerfMatrix":
        """:return: matrix with only the given categories, in the given order"""
        return PerfMatrix(self.grid, tuple(categories), tuple(self.values[self.categories.index(c)] for c in categories))

    def to_json(self) -> Dict[str, object]:
        return {"grid": list(self.grid), "categories": list(self.categories), "values": [list(r) for r in self.values]}

    def save(self, path: str) -> None:
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as out:
            json.dump(self.to_json(), out, indent=2)
            out.write("\n")

    @classmethod
    def load(cls, path: str) -> "PerfMatrix":
        with open(path, "r", encoding="utf-8") as stream:
            content = json.load(stream)
        return cls(tuple(int(p) for p in content["grid"]), tuple(str(c) for c in content["categories"]),
                   tuple(tuple(float(v) for v in row) for row in content["values"]))


@dataclass(frozen=True)
class KnapsackSolution:
    allocation: Mapping[str, int]
    "retention percentage per category, in matrix order"
    objective: float
    "Σ_c M[c][x_c]"
    total: int
    "Σ_c x_c"
    exact: bool
    "False when Σ_c x_c = k' was infeasible and the largest feasible smaller total was used"


def solve_knapsack(m: PerfMatrix, k_prime: int, grid: Optional[Sequence[int]] = None) -> KnapsackSolution:
    """
    Maximize Σ_c M[c][x_c] subject to Σ_c x_c = k' with every x_c on the grid.  The table is filled per category
    over budgets measured in grid steps; among optimal allocations the lexicographically smallest (in category
    order) is returned.  When no allocation sums to k' exactly, the best one with the largest feasible total below
    k' is returned and flagged.

    :param m: performance matrix
    :param k_prime: total retention percentage
    :param grid: percentages each x_c may take (default: the matrix grid)

    :raises GridMismatchError: if k' is not a multiple of the grid step or nothing at or below it is feasible
    """
    points = sorted(set(m.grid if grid is None else grid))
    missing = [p for p in points if p not in m.grid]
    if missing:
        raise GridMismatchError(f"grid points {missing} are not columns of the performance matrix")
    step = reduce(math.gcd, points, 0)
    if k_prime < 0 or (step == 0 and k_prime != 0) or (step and k_prime % step):
        raise GridMismatchError(f"k' = {k_prime} is not on the lattice of grid step {step}")
    step = step or 1
    units = [p // step for p in points]
    target = k_prime // step
    rows = [[m.values[c][m.grid.index(p)] for p in points] for c in range(len(m.categories))]

    n = len(rows)
    # best[i][j]: optimum over categories i.. with their units summing to exactly j
    best = np.full((n + 1, target + 1), -np.inf)
    best[n][0] = 0.0
    for i in range(n - 1, -1, -1):
        for j in range(target + 1):
            for index, u in enumerate(units):
                if u <= j and best[i + 1][j - u] > -np.inf:
                    candidate = rows[i][index] + best[i + 1][j - u]
                    if candidate > best[i][j]:
                        best[i][j] = candidate
    reachable = [j for j in range(target, -1, -1) if best[0][j] > -np.inf]
    if not reachable:
        raise GridMismatchError(f"no allocation on grid {points} sums to at most {k_prime}")
    budget = reachable[0]

    allocation: Dict[str, int] = {}
    remaining = budget
    for i in range(n):
        for index, u in enumerate(units):
            if u <= remaining and best[i + 1][remaining - u] > -np.inf \
                    and rows[i][index] + best[i + 1][remaining - u] == best[i][remaining]:
                allocation[m.categories[i]] = points[index]
                remaining -= u
                break
    objective = sum(m.value(label, percent) for label, percent in allocation.items())
    if budget != target:
        log.info("k' = %d infeasible on grid %s; using %d", k_prime, points, budget * step)
    return KnapsackSolution(allocation, float(objective), budget * step, budget == target)


def present_categories(history: FilteredHistory, categories: CategoryMap) -> List[str]:
    labels: Set[str] = set()
    for interaction in history.kept:
        labels.update(categories.categories_of(interaction.item_id))
    return sorted(labels)


def retention_budget(history: FilteredHistory, categories: CategoryMap, k: int, grid_step: int = 10) -> int:
    """
    Convert a retained-interaction budget k into a total retention percentage: k/len(history) of 100 for each
    category of the user, summed and rounded half-up to the grid step, or 100 per category when k covers the history
    """
    n = len(history)
    if n == 0:
        return 0
    c_u = len(present_categories(history, categories))
    if k >= n:
        return 100 * c_u
    total = Fraction(100 * k * c_u, n)
    return grid_step * math.floor(total / grid_step + Fraction(1, 2))


def diversity_filter(history: FilteredHistory, categories: CategoryMap, m: PerfMatrix, k_prime: int,
                     seed: int) -> FilteredHistory:
    """
    Solve the knapsack over the categories present in the history, then draw from each category, without
    replacement, the ceiling of its retention percentage of that category's interactions.  Interactions already
    drawn for an earlier category are not drawn again.  Categories missing from the matrix are retained in full.

    :raises EmptyHistoryError: if the history is empty
    :raises GridMismatchError: propagated from `solve_knapsack`
    """
    if not history.kept:
        raise EmptyHistoryError(history.user_id)
    present = present_categories(history, categories)
    scored = [label for label in present if label in m.categories]
    unscored = [label for label in present if label not in m.categories]
    if unscored:
        log.warning("categories %s have no performance-matrix row; retained in full", unscored)
    solution = solve_knapsack(m.restrict(scored), k_prime)
    percentages = dict(solution.allocation)
    percentages.update({label: 100 for label in unscored})

    rng = np.random.default_rng(seed)
    taken: Set[int] = set()
    for label in present:
        members = [p for p, interaction in enumerate(history.kept)
                   if label in categories.categories_of(interaction.item_id)]
        count = (percentages[label] * len(members) + 99) // 100
        pool = [p for p in members if p not in taken]
        count = min(count, len(pool))
        if count:
            taken.update(pool[int(i)] for i in rng.choice(len(pool), size=count, replace=False))
    return history.select(sorted(taken), Strategy.DIVERSITY, None)
