"""
Ratings and item-metadata loading, category mappings and deterministic train/val/test/forget splits
"""
import hashlib
import json
import logging
import math
import os

from collections import defaultdict
from dataclasses import dataclass, field
from typing import AbstractSet, Dict, FrozenSet, Iterable, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .parsing import (
    GenreTsvParser,
    ItemRecord,
    MalformedLineError,
    MissingGenreHeaderError,
    MovieLensDatParser,
    MovieLensItemParser,
    RatingsLineParser,
    RecordParser,
    UNKNOWN_CATEGORY,
    UserProfileParser,
    parse_file,
)

log = logging.getLogger(__name__)

__all__ = [
    "Interaction", "Dataset", "CategoryMap", "ItemMetadata", "SplitBundle",
    "CorpusError", "EmptyDatasetError", "InvalidRatiosError", "MalformedLineError", "MissingGenreHeaderError",
    "load_interactions", "load_item_metadata", "load_user_profiles", "make_splits", "user_history",
    "UNKNOWN_CATEGORY",
]

Pair = Tuple[int, int]

SPLIT_NAMES = ("train", "val", "test", "forget")
MANIFEST_FILE = "manifest.json"
# users with fewer remaining interactions than this are kept whole in train
MIN_STRATIFIED_INTERACTIONS = 3
_EPSILON = 1e-9


class CorpusError(Exception):
    """Base class for corpus errors"""


class EmptyDatasetError(CorpusError):

    def __init__(self, source: str) -> None:
        super().__init__(f"no valid interaction records in {source}")


class InvalidRatiosError(CorpusError):

    def __init__(self, ratios: Sequence[float], forget_fraction: float) -> None:
        super().__init__(f"invalid split ratios {tuple(ratios)} / forget fraction {forget_fraction}: ratios must be three "
                         "non-negative fractions summing to 1 and the forget fraction must lie in [0, 1)")
        self._ratios = tuple(ratios)
        self._forget_fraction = forget_fraction

    @property
    def ratios(self) -> Tuple[float, ...]:
        return self._ratios

    @property
    def forget_fraction(self) -> float:
        return self._forget_fraction


@dataclass(frozen=True)
class Interaction:
    """
    One rating event
    """
    user_id: int
    item_id: int
    rating: int
    "explicit rating in 1..5"
    timestamp: int = 0
    "seconds since epoch, 0 when the source has none"

    def __post_init__(self) -> None:
        if not 1 <= self.rating <= 5:
            raise ValueError(f"rating {self.rating} outside 1..5")

    @property
    def pair(self) -> Pair:
        return self.user_id, self.item_id


class Dataset:
    """
    Immutable, ordered collection of interactions with per-user and per-item position indices.
    (user, item) pairs are unique within a dataset.

    :raises ValueError: if a (user, item) pair occurs more than once
    """

    def __init__(self, interactions: Iterable[Interaction] = ()) -> None:
        self._interactions: Tuple[Interaction, ...] = tuple(interactions)
        user_index: Dict[int, List[int]] = defaultdict(list)
        item_index: Dict[int, List[int]] = defaultdict(list)
        pairs = set()
        for position, interaction in enumerate(self._interactions):
            if interaction.pair in pairs:
                raise ValueError(f"duplicate interaction for (user, item) {interaction.pair}")
            pairs.add(interaction.pair)
            user_index[interaction.user_id].append(position)
            item_index[interaction.item_id].append(position)
        self._pairs: FrozenSet[Pair] = frozenset(pairs)
        self._user_index: Dict[int, Tuple[int, ...]] = {u: tuple(p) for u, p in user_index.items()}
        self._item_index: Dict[int, Tuple[int, ...]] = {i: tuple(p) for i, p in item_index.items()}

    @property
    def interactions(self) -> Tuple[Interaction, ...]:
        return self._interactions

    @property
    def user_index(self) -> Mapping[int, Tuple[int, ...]]:
        return self._user_index

    @property
    def item_index(self) -> Mapping[int, Tuple[int, ...]]:
        return self._item_index

    @property
    def users(self) -> List[int]:
        """:return: distinct user ids, ascending"""
        return sorted(self._user_index)

    @property
    def items(self) -> List[int]:
        """:return: distinct item ids, ascending"""
        return sorted(self._item_index)

    @property
    def pairs(self) -> FrozenSet[Pair]:
        return self._pairs

    def __len__(self) -> int:
        return len(self._interactions)

    def __iter__(self) -> Iterator[Interaction]:
        return iter(self._interactions)

    def __contains__(self, pair: object) -> bool:
        return pair in self._pairs

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return self._interactions == other._interactions

    __hash__ = None  # type: ignore

    def __repr__(self) -> str:
        return f"Dataset(interactions={len(self)}, users={len(self._user_index)}, items={len(self._item_index)})"

    def of_user(self, user_id: int) -> List[Interaction]:
        """:return: the user's interactions in dataset order"""
        return [self._interactions[p] for p in self._user_index.get(user_id, ())]

    def union(self, other: "Dataset") -> "Dataset":
        """
        :return: this dataset followed by the interactions of `other` whose pairs are not already present
        """
        return Dataset(self._interactions + tuple(i for i in other if i.pair not in self._pairs))

    def without(self, pairs: AbstractSet[Pair]) -> "Dataset":
        """
        :return: dataset with every interaction whose (user, item) pair is in `pairs` removed
        """
        return Dataset(i for i in self._interactions if i.pair not in pairs)

    def fingerprint(self) -> str:
        """
        :return: sha256 hex digest over the sorted records, independent of record order
        """
        digest = hashlib.sha256()
        for interaction in sorted(self._interactions, key=lambda i: i.pair):
            digest.update(f"{interaction.user_id}\t{interaction.item_id}\t{interaction.rating}\t"
                          f"{interaction.timestamp}\n".encode("ascii"))
        return digest.hexdigest()

    def to_tsv(self, path: str) -> None:
        """
        Write `user<TAB>item<TAB>rating<TAB>timestamp` lines in dataset order
        """
        with open(path, "w", encoding="ascii", newline="\n") as out:
            for interaction in self._interactions:
                out.write(f"{interaction.user_id}\t{interaction.item_id}\t{interaction.rating}\t{interaction.timestamp}\n")


@dataclass(frozen=True)
class CategoryMap:
    """
    Multi-label item → category mapping
    """
    item_to_categories: Mapping[int, FrozenSet[str]]
    "every item maps to a non-empty set of labels"
    all_categories: Tuple[str, ...]
    "every referenced label, ascending"

    def __post_init__(self) -> None:
        known = set(self.all_categories)
        for item_id, labels in self.item_to_categories.items():
            if not labels:
                raise ValueError(f"item {item_id} has no category")
            if not labels <= known:
                raise ValueError(f"item {item_id} references unknown categories {sorted(labels - known)}")

    @classmethod
    def from_items(cls, item_to_categories: Mapping[int, Iterable[str]]) -> "CategoryMap":
        mapping = {item_id: frozenset(labels) for item_id, labels in item_to_categories.items()}
        labels = sorted(set().union(*mapping.values())) if mapping else []
        return cls(mapping, tuple(labels))

    def categories_of(self, item_id: int) -> FrozenSet[str]:
        """
        :return: labels of the item; items without metadata fall back to {"unknown"}
        """
        return self.item_to_categories.get(item_id, frozenset({UNKNOWN_CATEGORY}))


@dataclass(frozen=True)
class ItemMetadata:
    categories: CategoryMap
    titles: Mapping[int, str] = field(default_factory=dict)
    years: Mapping[int, Optional[int]] = field(default_factory=dict)


@dataclass(frozen=True)
class SplitBundle:
    """
    Disjoint train/val/test/forget partition of a source dataset
    """
    train: Dataset
    val: Dataset
    test: Dataset
    forget: Dataset
    seed: int
    "seed of the generator that shuffled the source"
    ratios: Tuple[float, float, float]
    "(train, val, test) fractions of the interactions remaining after forget removal"
    forget_fraction: float
    small_users: Tuple[int, ...] = ()
    "users kept whole in train for having fewer than 3 remaining interactions"

    @property
    def remain(self) -> Dataset:
        """:return: train ∪ val ∪ test"""
        return Dataset(self.train.interactions + self.val.interactions + self.test.interactions)

    def split(self, name: str) -> Dataset:
        if name not in SPLIT_NAMES:
            raise KeyError(name)
        dataset: Dataset = getattr(self, name)
        return dataset

    def manifest(self) -> Dict[str, object]:
        counts = {name: len(self.split(name)) for name in SPLIT_NAMES}
        return {
            "seed": self.seed,
            "ratios": list(self.ratios),
            "forget_fraction": self.forget_fraction,
            "counts": counts,
            "checksums": {name: self.split(name).fingerprint() for name in SPLIT_NAMES},
            "small_users": list(self.small_users),
        }

    def save(self, directory: str) -> str:
        """
        Write one TSV file per split plus the JSON manifest
        :return: path to the manifest
        """
        os.makedirs(directory, exist_ok=True)
        for name in SPLIT_NAMES:
            self.split(name).to_tsv(os.path.join(directory, f"{name}.tsv"))
        manifest_path = os.path.join(directory, MANIFEST_FILE)
        with open(manifest_path, "w", encoding="utf-8", newline="\n") as out:
            json.dump(self.manifest(), out, indent=2, sort_keys=True)
            out.write("\n")
        return manifest_path

    @classmethod
    def load(cls, directory: str) -> "SplitBundle":
        """
        :raises FileNotFoundError: if the manifest or a split file is missing
        :raises CorpusError: if a split no longer matches its recorded checksum
        """
        manifest_path = os.path.join(directory, MANIFEST_FILE)
        if not os.path.isfile(manifest_path):
            raise FileNotFoundError(manifest_path)
        with open(manifest_path, "r", encoding="utf-8") as stream:
            manifest = json.load(stream)
        splits = {name: _read_interactions(os.path.join(directory, f"{name}.tsv"), "tsv") for name in SPLIT_NAMES}
        for name, dataset in splits.items():
            if dataset.fingerprint() != manifest["checksums"][name]:
                raise CorpusError(f"split {name} in {directory} does not match its manifest checksum")
        ratios = tuple(float(r) for r in manifest["ratios"])
        return cls(train=splits["train"], val=splits["val"], test=splits["test"], forget=splits["forget"],
                   seed=int(manifest["seed"]), ratios=(ratios[0], ratios[1], ratios[2]),
                   forget_fraction=float(manifest["forget_fraction"]),
                   small_users=tuple(int(u) for u in manifest.get("small_users", ())))


def _read_interactions(path: str, fmt: str) -> Dataset:
    parser = RatingsLineParser(fmt, source=path)
    parse_file(path, parser, encoding="latin-1" if fmt == "dat" else "utf-8")
    latest: Dict[Pair, Interaction] = {}
    duplicates = 0
    for user, item, rating, timestamp in parser.records:
        if (user, item) in latest:
            duplicates += 1
            del latest[(user, item)]
        latest[(user, item)] = Interaction(user, item, rating, timestamp)
    if duplicates:
        log.warning("%s: %d duplicate (user, item) records replaced by their last occurrence", path, duplicates)
    return Dataset(latest.values())


def load_interactions(path: str, format: str = "tsv") -> Dataset:
    """
    Load a ratings file

    :param path: file of `user, item, rating[, timestamp]` records
    :param format: one of "tsv", "csv" or "dat" (MovieLens-1M "::" layout)
    :return: dataset of all records, a repeated (user, item) pair keeping its last occurrence

    :raises FileNotFoundError: if the file does not exist
    :raises MalformedLineError: on non-integer fields or a rating outside 1..5
    :raises EmptyDatasetError: if the file holds no records
    """
    dataset = _read_interactions(path, format)
    if not len(dataset):
        raise EmptyDatasetError(path)
    log.info("Loaded %d interactions from %d users on %d items (%s)",
             len(dataset), len(dataset.user_index), len(dataset.item_index), path)
    return dataset


def load_item_metadata(path: str, format: str = "movielens_item") -> ItemMetadata:
    """
    Load item titles, release years and categories

    :param path: metadata file
    :param format: "movielens_item" (ML-100K u.item), "genre_tsv" (tab-separated with a "genres" header column)
       or "movielens_dat" (ML-1M movies.dat)

    :raises FileNotFoundError: if the file does not exist
    :raises MalformedLineError: on unparseable rows
    :raises MissingGenreHeaderError: genre_tsv file without a "genres" header column
    """
    parser: RecordParser[ItemRecord]
    encoding = "utf-8"
    if format == "movielens_item":
        parser, encoding = MovieLensItemParser(path), "latin-1"
    elif format == "movielens_dat":
        parser, encoding = MovieLensDatParser(path), "latin-1"
    elif format == "genre_tsv":
        parser = GenreTsvParser(path)
    else:
        raise ValueError(f"unsupported item metadata format {format!r}")
    parse_file(path, parser, encoding=encoding)
    records = {record.item_id: record for record in parser.records}
    categories = CategoryMap.from_items({item_id: r.categories for item_id, r in records.items()})
    titles = {item_id: r.title for item_id, r in records.items() if r.title}
    years = {item_id: r.year for item_id, r in records.items()}
    log.info("Loaded metadata for %d items in %d categories (%s)", len(records), len(categories.all_categories), path)
    return ItemMetadata(categories, titles, years)


def load_user_profiles(path: str, format: str = "movielens_user") -> Dict[int, str]:
    """
    :param path: demographic file (ML-100K u.user or ML-1M users.dat)
    :param format: "movielens_user" or "movielens_users_dat"
    :return: user id → one-sentence profile text
    """
    parser = UserProfileParser(format, source=path)
    parse_file(path, parser, encoding="latin-1")
    return dict(parser.records)


def make_splits(data: Dataset,
                ratios: Tuple[float, float, float] = (0.7, 0.1, 0.2),
                forget_fraction: float = 0.1,
                seed: int = 0) -> SplitBundle:
    """
    Shuffle the interactions with a seeded generator, take the first ⌊forget_fraction·|data|⌋ as the forget set and
    split every user's remaining interactions by `ratios` (floor-rounded validation and test counts, remainder to
    train).  Users left with fewer than 3 interactions go to train whole and are listed in `small_users`.

    :raises InvalidRatiosError: if ratios do not sum to 1 or forget_fraction is outside [0, 1)
    """
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > _EPSILON \
            or not 0.0 <= forget_fraction < 1.0:
        raise InvalidRatiosError(ratios, forget_fraction)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(data))
    shuffled = [data.interactions[int(position)] for position in order]
    n_forget = int(math.floor(forget_fraction * len(data) + _EPSILON))
    forget, remaining = shuffled[:n_forget], shuffled[n_forget:]

    per_user: Dict[int, List[Interaction]] = defaultdict(list)
    for interaction in remaining:
        per_user[interaction.user_id].append(interaction)
    train: List[Interaction] = []
    val: List[Interaction] = []
    test: List[Interaction] = []
    small_users: List[int] = []
    for user_id in sorted(per_user):
        records = per_user[user_id]
        if len(records) < MIN_STRATIFIED_INTERACTIONS:
            small_users.append(user_id)
            train.extend(records)
            continue
        n_val = int(math.floor(len(records) * ratios[1] + _EPSILON))
        n_test = int(math.floor(len(records) * ratios[2] + _EPSILON))
        n_train = len(records) - n_val - n_test
        train.extend(records[:n_train])
        val.extend(records[n_train:n_train + n_val])
        test.extend(records[n_train + n_val:])
    if small_users:
        log.warning("%d users have fewer than %d interactions after forget removal; kept whole in train",
                    len(small_users), MIN_STRATIFIED_INTERACTIONS)
    bundle = SplitBundle(train=Dataset(train), val=Dataset(val), test=Dataset(test), forget=Dataset(forget),
                         seed=seed, ratios=(ratios[0], ratios[1], ratios[2]), forget_fraction=forget_fraction,
                         small_users=tuple(small_users))
    log.info("Split %d interactions: forget=%d train=%d val=%d test=%d",
             len(data), len(bundle.forget), len(bundle.train), len(bundle.val), len(bundle.test))
    return bundle


def user_history(data: Dataset, user_id: int) -> List[Interaction]:
    """
    Retrieve(u; D)
    :return: the user's interactions ordered by timestamp, ties by item id; empty for unknown users
    """
    return sorted(data.of_user(user_id), key=lambda i: (i.timestamp, i.item_id))
