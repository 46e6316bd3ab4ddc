import numpy as np
import pytest

from ragforget.backbone import BackboneModel
from ragforget.corpus import CategoryMap, Dataset, ItemMetadata
from ragforget.promptgen import AuxContext

from . import support

ITEM_CATEGORIES = {
    1: {"Action"}, 2: {"Action"}, 3: {"Comedy"}, 4: {"Comedy"}, 5: {"Action", "Comedy"},
    6: {"Drama"}, 7: {"Drama"}, 8: {"Drama"}, 9: {"Action"}, 10: {"Comedy"},
}
ITEM_TITLES = {item: f"Movie {item}" for item in ITEM_CATEGORIES}


@pytest.fixture()
def store() -> Dataset:
    """users 1-3 over items 1-10; items 9 and 10 are unrated"""
    return support.dataset(
        (1, 1), (1, 2), (1, 3), (1, 4), (1, 5), (1, 6),
        (2, 3), (2, 6), (2, 7), (2, 8),
        (3, 1), (3, 8),
    )


@pytest.fixture()
def category_map() -> CategoryMap:
    return support.categories(ITEM_CATEGORIES)


@pytest.fixture()
def metadata(category_map: CategoryMap) -> ItemMetadata:
    return ItemMetadata(category_map, dict(ITEM_TITLES), {item: 1990 + item for item in ITEM_TITLES})


@pytest.fixture()
def aux(metadata: ItemMetadata) -> AuxContext:
    return AuxContext.from_metadata(metadata)


@pytest.fixture()
def model() -> BackboneModel:
    """seeded 64-dimensional embeddings for users 1-3 and items 1-10"""
    rng = np.random.default_rng(1234)
    users = {user: rng.normal(0.0, 1.0, 64) for user in (1, 2, 3)}
    items = {item: rng.normal(0.0, 1.0, 64) for item in range(1, 11)}
    return support.embedding_model(users, items)
