"""
Retrieval-stage unlearning: the forget filter, the truncation baseline and forget-request handling.
The three budgeted strategies live in the `preference`, `diversity` and `attention` submodules.
"""
import json
import logging
import os

from dataclasses import dataclass
from enum import Enum
from typing import AbstractSet, FrozenSet, List, Optional, Sequence, Tuple

import numpy as np

from ..corpus import Dataset, Interaction

log = logging.getLogger(__name__)

__all__ = [
    "Strategy", "FilteredHistory", "ForgetRequest",
    "RetrievalError", "EmptyHistoryError", "EmptyCandidatesError", "GridMismatchError", "UnknownItemError",
    "ForgetRequestError",
    "filter_unlearn", "random_filter", "load_forget_requests", "save_forget_requests", "resolve_forget_pairs",
]

Pair = Tuple[int, int]


class RetrievalError(Exception):
    """Base class for retrieval errors"""


class EmptyHistoryError(RetrievalError):

    def __init__(self, user_id: int) -> None:
        super().__init__(f"user {user_id} has no interactions left to filter")
        self._user_id = user_id

    @property
    def user_id(self) -> int:
        return self._user_id


class EmptyCandidatesError(RetrievalError):

    def __init__(self, user_id: int) -> None:
        super().__init__(f"no candidates for user {user_id}")
        self._user_id = user_id

    @property
    def user_id(self) -> int:
        return self._user_id


class GridMismatchError(RetrievalError):
    """Raised when a retention budget cannot be expressed on the percentage grid"""


class UnknownItemError(RetrievalError):

    def __init__(self, item_id: int) -> None:
        super().__init__(f"item {item_id} is unknown to the backbone")
        self._item_id = item_id

    @property
    def item_id(self) -> int:
        return self._item_id


class ForgetRequestError(RetrievalError):
    """Raised for malformed forget-request files"""


class Strategy(Enum):
    UNLEARN_ONLY = "unlearn_only"
    NONE = "none"
    "random truncation to the budget"
    PREFERENCE = "preference"
    DIVERSITY = "diversity"
    ATTENTION = "attention"

    def __repr__(self) -> str:
        return self.value


@dataclass(frozen=True)
class FilteredHistory:
    """
    The retained, forget-free slice of one user's history, in history order
    """
    user_id: int
    kept: Tuple[Interaction, ...]
    strategy: Strategy = Strategy.UNLEARN_ONLY
    retained_budget: Optional[int] = None
    "the K the strategy was asked to retain, None for unbudgeted filtering"

    def __len__(self) -> int:
        return len(self.kept)

    @property
    def item_ids(self) -> Tuple[int, ...]:
        return tuple(i.item_id for i in self.kept)

    @property
    def pairs(self) -> FrozenSet[Pair]:
        return frozenset(i.pair for i in self.kept)

    def select(self, positions: Sequence[int], strategy: Strategy, budget: Optional[int]) -> "FilteredHistory":
        """
        :return: history restricted to the given positions, original order preserved
        """
        return FilteredHistory(self.user_id, tuple(self.kept[p] for p in sorted(set(positions))), strategy, budget)


def filter_unlearn(user_id: int, history: Sequence[Interaction], forget: AbstractSet[Pair]) -> FilteredHistory:
    """
    Drop every interaction whose (user, item) pair is in the forget set

    :param user_id: owner of the history
    :param history: the user's interactions, in retrieval order
    :param forget: active forget pairs (pairs of other users are ignored)
    """
    kept = tuple(i for i in history if i.pair not in forget)
    if len(kept) != len(history):
        log.debug("user %d: %d of %d interactions removed by unlearning", user_id, len(history) - len(kept), len(history))
    return FilteredHistory(user_id, kept, Strategy.UNLEARN_ONLY)


def random_filter(history: FilteredHistory, k: int, seed: int) -> FilteredHistory:
    """
    Baseline truncation: keep min(k, |history|) interactions drawn uniformly without replacement
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if k >= len(history):
        return history.select(range(len(history)), Strategy.NONE, k)
    rng = np.random.default_rng(seed)
    positions = rng.choice(len(history), size=k, replace=False)
    return history.select([int(p) for p in positions], Strategy.NONE, k)


@dataclass(frozen=True)
class ForgetRequest:
    user_id: int
    items: Optional[FrozenSet[int]] = None
    "items to forget, None for the user's whole history"

    @property
    def forget_all(self) -> bool:
        return self.items is None

    def to_json(self) -> object:
        return {"user": self.user_id, "items": "ALL" if self.items is None else sorted(self.items)}


def load_forget_requests(path: str) -> List[ForgetRequest]:
    """
    Read a JSON array of `{"user": <id>, "items": [<id>, ...] | "ALL"}` objects

    :raises FileNotFoundError: if path does not exist
    :raises ForgetRequestError: if the content does not follow that layout
    """
    if not os.path.isfile(path):
        raise FileNotFoundError(path)
    with open(path, "r", encoding="utf-8") as stream:
        try:
            content = json.load(stream)
        except json.JSONDecodeError as e:
            raise ForgetRequestError(f"{path}: not valid JSON ({e})") from e
    if not isinstance(content, list):
        raise ForgetRequestError(f"{path}: expected a JSON array of requests")
    requests = []
    for index, entry in enumerate(content):
        if not isinstance(entry, dict) or "user" not in entry or "items" not in entry:
            raise ForgetRequestError(f"{path}: request {index} must have 'user' and 'items'")
        user, items = entry["user"], entry["items"]
        if isinstance(user, bool) or not isinstance(user, int):
            raise ForgetRequestError(f"{path}: request {index} has a non-integer user")
        if items == "ALL":
            requests.append(ForgetRequest(user, None))
        elif isinstance(items, list) and all(isinstance(i, int) and not isinstance(i, bool) for i in items):
            requests.append(ForgetRequest(user, frozenset(items)))
        else:
            raise ForgetRequestError(f"{path}: request {index} items must be a list of integers or \"ALL\"")
    log.info("Loaded %d forget requests from %s", len(requests), path)
    return requests


def save_forget_requests(requests: Sequence[ForgetRequest], path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as out:
        json.dump([r.to_json() for r in requests], out, indent=2)
        out.write("\n")


def resolve_forget_pairs(requests: Sequence[ForgetRequest], store: Dataset) -> FrozenSet[Pair]:
    """
    :return: the (user, item) pairs named by the requests, "ALL" expanded against the store
    """
    pairs = set()
    for request in requests:
        if request.items is None:
            pairs.update(i.pair for i in store.of_user(request.user_id))
        else:
            pairs.update((request.user_id, item) for item in request.items)
    return frozenset(pairs)
