"""
Frozen collaborative-filtering backbones (BPR matrix factorization and a simplified LightGCN) producing
candidate lists.  Nothing in the unlearning path ever modifies a trained model.
"""
import hashlib
import logging
import math
import os
import struct

from dataclasses import dataclass
from enum import Enum
from typing import AbstractSet, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np
import scipy.sparse as sp

from .corpus import Dataset

log = logging.getLogger(__name__)

__all__ = [
    "BackboneKind", "BackboneConfig", "BackboneModel", "CandidateList",
    "BackboneError", "EmptyTrainingSetError", "UnknownUserError", "CheckpointFormatError",
    "train_bpr", "train_lightgcn", "train_backbone", "score", "top_k_candidates",
    "normalized_adjacency", "propagate",
]

CHECKPOINT_MAGIC = b"RFBB"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<4sHBIIIq")
_LENGTH = struct.Struct("<I")
INIT_STD = 0.1
DEFAULT_LIGHTGCN_BATCH = 1024


class BackboneError(Exception):
    """Base class for backbone errors"""


class EmptyTrainingSetError(BackboneError):

    def __init__(self) -> None:
        super().__init__("cannot train a backbone on an empty dataset")


class UnknownUserError(BackboneError):

    def __init__(self, user_id: int) -> None:
        super().__init__(f"user {user_id} is unknown to the backbone")
        self._user_id = user_id

    @property
    def user_id(self) -> int:
        return self._user_id


class CheckpointFormatError(BackboneError):
    """Raised when a checkpoint file is truncated or not a backbone checkpoint"""


class BackboneKind(Enum):
    BPR = "bpr"
    LIGHTGCN = "lightgcn"

    def __repr__(self) -> str:
        return self.value

    @property
    def code(self) -> int:
        return list(BackboneKind).index(self)


@dataclass(frozen=True)
class BackboneConfig:
    """
    Hyper-parameters of backbone training
    """
    embedding_dim: int = 64
    epochs: int = 30
    learning_rate: float = 0.05
    l2_reg: float = 1e-4
    negatives_per_positive: int = 1
    num_layers: int = 2
    "propagation layers (LightGCN only)"
    seed: int = 0
    batch_size: Optional[int] = None
    """positives per update; None selects 1 (per-interaction SGD) for BPR and zero-layer LightGCN,
    1024 otherwise"""

    def __post_init__(self) -> None:
        if self.embedding_dim < 1:
            raise ValueError("embedding_dim must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.l2_reg < 0:
            raise ValueError("l2_reg must be >= 0")
        if self.negatives_per_positive < 1:
            raise ValueError("negatives_per_positive must be >= 1")
        if self.num_layers < 0:
            raise ValueError("num_layers must be >= 0")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def effective_batch_size(self, num_layers: int) -> int:
        if self.batch_size is not None:
            return self.batch_size
        return 1 if num_layers == 0 else DEFAULT_LIGHTGCN_BATCH


class BackboneModel:
    """
    Trained user and item embeddings.  Matrices are float32 and read-only.

    :param kind: architecture that produced the embeddings
    :param user_embeddings: m x d matrix, row r belongs to user_ids[r]
    :param item_embeddings: n x d matrix, row r belongs to item_ids[r]
    :param user_ids: distinct user ids
    :param item_ids: distinct item ids
    :param seed: seed the model was initialized with
    :param trained_on_fingerprint: fingerprint of the training dataset

    :raises ValueError: on shape mismatches, repeated ids or non-finite entries
    """

    def __init__(self, kind: BackboneKind, user_embeddings: np.ndarray, item_embeddings: np.ndarray,
                 user_ids: Sequence[int], item_ids: Sequence[int], seed: int = 0,
                 trained_on_fingerprint: str = "") -> None:
        users = np.array(user_embeddings, dtype=np.float32, copy=True, order="C")
        items = np.array(item_embeddings, dtype=np.float32, copy=True, order="C")
        if users.ndim != 2 or items.ndim != 2 or users.shape[1] != items.shape[1]:
            raise ValueError(f"incompatible embedding shapes {users.shape} and {items.shape}")
        if users.shape[0] != len(user_ids) or items.shape[0] != len(item_ids):
            raise ValueError("id maps do not match the embedding rows")
        if not (np.isfinite(users).all() and np.isfinite(items).all()):
            raise ValueError("embeddings contain non-finite entries")
        self._user_row = {int(u): row for row, u in enumerate(user_ids)}
        self._item_row = {int(i): row for row, i in enumerate(item_ids)}
        if len(self._user_row) != len(user_ids) or len(self._item_row) != len(item_ids):
            raise ValueError("id maps must be bijective")
        users.setflags(write=False)
        items.setflags(write=False)
        self._kind = kind
        self._users = users
        self._items = items
        self._users64 = users.astype(np.float64)
        self._items64 = items.astype(np.float64)
        self._users64.setflags(write=False)
        self._items64.setflags(write=False)
        self._user_ids: Tuple[int, ...] = tuple(int(u) for u in user_ids)
        self._item_ids: Tuple[int, ...] = tuple(int(i) for i in item_ids)
        self._item_id_array = np.asarray(self._item_ids, dtype=np.int64)
        self._item_id_array.setflags(write=False)
        self._seed = int(seed)
        self._fingerprint = trained_on_fingerprint

    @property
    def kind(self) -> BackboneKind:
        return self._kind

    @property
    def user_embeddings(self) -> np.ndarray:
        return self._users

    @property
    def item_embeddings(self) -> np.ndarray:
        return self._items

    @property
    def user_ids(self) -> Tuple[int, ...]:
        return self._user_ids

    @property
    def item_ids(self) -> Tuple[int, ...]:
        return self._item_ids

    @property
    def item_id_array(self) -> np.ndarray:
        return self._item_id_array

    @property
    def dim(self) -> int:
        return int(self._users.shape[1])

    @property
    def seed(self) -> int:
        return self._seed

    @property
    def trained_on_fingerprint(self) -> str:
        return self._fingerprint

    def user_row(self, user_id: int) -> Optional[int]:
        return self._user_row.get(user_id)

    def item_row(self, item_id: int) -> Optional[int]:
        return self._item_row.get(item_id)

    def has_item(self, item_id: int) -> bool:
        return item_id in self._item_row

    def user_vector(self, user_id: int) -> Optional[np.ndarray]:
        """:return: float64 embedding of the user, or None if unknown"""
        row = self._user_row.get(user_id)
        return None if row is None else self._users64[row]

    def item_vector(self, item_id: int) -> Optional[np.ndarray]:
        """:return: float64 embedding of the item, or None if unknown"""
        row = self._item_row.get(item_id)
        return None if row is None else self._items64[row]

    def item_matrix(self, item_ids: Iterable[int]) -> np.ndarray:
        """
        :return: float64 matrix of the given items' embeddings; unknown items get a zero row
        """
        ids = list(item_ids)
        matrix = np.zeros((len(ids), self.dim), dtype=np.float64)
        for position, item_id in enumerate(ids):
            row = self._item_row.get(item_id)
            if row is not None:
                matrix[position] = self._items64[row]
        return matrix

    def all_scores(self, user_id: int) -> np.ndarray:
        """
        :return: float64 scores of the user against every item, in `item_ids` order
        :raises UnknownUserError: if the user has no embedding
        """
        row = self._user_row.get(user_id)
        if row is None:
            raise UnknownUserError(user_id)
        scores: np.ndarray = self._items64 @ self._users64[row]
        return scores

    def checksum(self) -> str:
        """
        :return: sha256 hex digest over both embedding matrices and id maps
        """
        digest = hashlib.sha256()
        digest.update(self._users.astype("<f4").tobytes())
        digest.update(self._items.astype("<f4").tobytes())
        digest.update(np.asarray(self._user_ids, dtype="<i8").tobytes())
        digest.update(np.asarray(self._item_ids, dtype="<i8").tobytes())
        return digest.hexdigest()

    def save(self, path: str) -> None:
        """
        Write the checkpoint: header {magic, version, kind, m, n, d, seed}, both matrices as row-major little-endian
        float32, id maps as u32-length-prefixed int64 arrays, then the length-prefixed training fingerprint
        """
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        m, d = self._users.shape
        n = self._items.shape[0]
        with open(path, "wb") as out:
            out.write(_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, self._kind.code, m, n, d, self._seed))
            out.write(self._users.astype("<f4").tobytes(order="C"))
            out.write(self._items.astype("<f4").tobytes(order="C"))
            for ids in (self._user_ids, self._item_ids):
                out.write(_LENGTH.pack(len(ids)))
                out.write(np.asarray(ids, dtype="<i8").tobytes())
            fingerprint = self._fingerprint.encode("ascii")
            out.write(_LENGTH.pack(len(fingerprint)))
            out.write(fingerprint)
        log.info("Saved %s backbone (%d users, %d items, d=%d) to %s", self._kind.value, m, n, d, path)

    @classmethod
    def load(cls, path: str) -> "BackboneModel":
        """
        :raises FileNotFoundError: if path does not exist
        :raises CheckpointFormatError: if the file is not a valid checkpoint
        """
        with open(path, "rb") as stream:
            blob = stream.read()
        try:
            magic, version, kind_code, m, n, d, seed = _HEADER.unpack_from(blob, 0)
            if magic != CHECKPOINT_MAGIC or version != CHECKPOINT_VERSION:
                raise CheckpointFormatError(f"{path}: not a version {CHECKPOINT_VERSION} backbone checkpoint")
            offset = _HEADER.size
            users = np.frombuffer(blob, dtype="<f4", count=m * d, offset=offset).reshape(m, d)
            offset += 4 * m * d
            items = np.frombuffer(blob, dtype="<f4", count=n * d, offset=offset).reshape(n, d)
            offset += 4 * n * d
            id_maps: List[np.ndarray] = []
            for _ in range(2):
                (length,) = _LENGTH.unpack_from(blob, offset)
                offset += _LENGTH.size
                id_maps.append(np.frombuffer(blob, dtype="<i8", count=length, offset=offset))
                offset += 8 * length
            (length,) = _LENGTH.unpack_from(blob, offset)
            offset += _LENGTH.size
            fingerprint = blob[offset:offset + length].decode("ascii")
            kind = list(BackboneKind)[kind_code]
        except (struct.error, ValueError, IndexError) as e:
            raise CheckpointFormatError(f"{path}: truncated or corrupt checkpoint ({e})") from e
        return cls(kind, users, items, [int(u) for u in id_maps[0]], [int(i) for i in id_maps[1]], seed, fingerprint)

    def __repr__(self) -> str:
        return f"BackboneModel(kind={self._kind.value}, users={len(self._user_ids)}, items={len(self._item_ids)}, d={self.dim})"


@dataclass(frozen=True)
class CandidateList:
    """
    Top-K items of the backbone for one user, score-descending
    """
    user_id: int
    items: Tuple[int, ...]
    backbone_scores: Tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.items) != len(self.backbone_scores):
            raise ValueError("items and backbone_scores differ in length")
        if len(set(self.items)) != len(self.items):
            raise ValueError("candidate items must be distinct")
        if any(a < b for a, b in zip(self.backbone_scores, self.backbone_scores[1:])):
            raise ValueError("backbone scores must be non-increasing")

    def __len__(self) -> int:
        return len(self.items)

    def score_of(self, item_id: int) -> float:
        return self.backbone_scores[self.items.index(item_id)]


def _sigmoid_neg(x: np.ndarray) -> np.ndarray:
    """σ(-x), evaluated without overflow"""
    result: np.ndarray = 0.5 * (1.0 - np.tanh(0.5 * x))
    return result


def normalized_adjacency(n_users: int, n_items: int, user_rows: np.ndarray, item_rows: np.ndarray) -> sp.csr_matrix:
    """
    Symmetric-normalized bipartite adjacency D^-1/2 A D^-1/2 over (users + items) nodes, users first
    """
    ratings = sp.csr_matrix((np.ones(len(user_rows), dtype=np.float64), (user_rows, item_rows)),
                            shape=(n_users, n_items))
    adjacency = sp.bmat([[None, ratings], [ratings.T, None]], format="csr")
    degree = np.asarray(adjacency.sum(axis=1)).ravel()
    inv_sqrt = np.zeros_like(degree)
    nonzero = degree > 0
    inv_sqrt[nonzero] = 1.0 / np.sqrt(degree[nonzero])
    scaling = sp.diags(inv_sqrt)
    normalized: sp.csr_matrix = (scaling @ adjacency @ scaling).tocsr()
    return normalized


def propagate(adjacency: Optional[sp.csr_matrix], embeddings: np.ndarray, num_layers: int) -> np.ndarray:
    """
    :return: mean of layers 0..num_layers, layer l being adjacency^l @ embeddings
    """
    if num_layers == 0 or adjacency is None:
        return embeddings
    layer = embeddings
    total = embeddings.copy()
    for _ in range(num_layers):
        layer = adjacency @ layer
        total += layer
    result: np.ndarray = total / (num_layers + 1)
    return result


class _TrainingData:
    """row-indexed view of a training dataset"""

    def __init__(self, train: Dataset) -> None:
        if not len(train):
            raise EmptyTrainingSetError()
        self.user_ids = train.users
        self.item_ids = train.items
        user_row = {u: r for r, u in enumerate(self.user_ids)}
        item_row = {i: r for r, i in enumerate(self.item_ids)}
        self.pair_users = np.fromiter((user_row[i.user_id] for i in train), dtype=np.int64, count=len(train))
        self.pair_items = np.fromiter((item_row[i.item_id] for i in train), dtype=np.int64, count=len(train))
        self.seen: List[Set[int]] = [set() for _ in self.user_ids]
        for u, i in zip(self.pair_users.tolist(), self.pair_items.tolist()):
            self.seen[u].add(i)
        self.fingerprint = train.fingerprint()

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    def sample_negative(self, rng: np.random.Generator, user_row: int) -> Optional[int]:
        seen = self.seen[user_row]
        if len(seen) >= self.n_items:
            return None
        while True:
            candidate = int(rng.integers(self.n_items))
            if candidate not in seen:
                return candidate


def _fit(train: Dataset, config: BackboneConfig, kind: BackboneKind, num_layers: int) -> BackboneModel:
    data = _TrainingData(train)
    rng = np.random.default_rng(config.seed)
    d = config.embedding_dim
    user_emb = rng.normal(0.0, INIT_STD, size=(data.n_users, d))
    item_emb = rng.normal(0.0, INIT_STD, size=(data.n_items, d))
    batch_size = config.effective_batch_size(num_layers)
    adjacency = normalized_adjacency(data.n_users, data.n_items, data.pair_users, data.pair_items) \
        if num_layers > 0 else None
    log.info("Training %s backbone: %d users, %d items, %d interactions, d=%d, epochs=%d, layers=%d, batch=%d",
             kind.value, data.n_users, data.n_items, len(train), d, config.epochs, num_layers, batch_size)
    for epoch in range(config.epochs):
        order = rng.permutation(len(data.pair_users))
        if batch_size == 1 and num_layers == 0:
            _sgd_epoch(data, config, rng, order, user_emb, item_emb)
        else:
            ego = np.vstack([user_emb, item_emb])
            _batched_epoch(data, config, rng, order, ego, adjacency, num_layers, batch_size)
            user_emb, item_emb = ego[:data.n_users], ego[data.n_users:]
        log.debug("epoch %d/%d done", epoch + 1, config.epochs)
    final = propagate(adjacency, np.vstack([user_emb, item_emb]), num_layers)
    return BackboneModel(kind, final[:data.n_users], final[data.n_users:], data.user_ids, data.item_ids,
                         config.seed, data.fingerprint)


def _sgd_epoch(data: _TrainingData, config: BackboneConfig, rng: np.random.Generator, order: np.ndarray,
               user_emb: np.ndarray, item_emb: np.ndarray) -> None:
    lr, l2 = config.learning_rate, config.l2_reg
    pair_users, pair_items = data.pair_users, data.pair_items
    for position in order.tolist():
        u = int(pair_users[position])
        i = int(pair_items[position])
        for _ in range(config.negatives_per_positive):
            j = data.sample_negative(rng, u)
            if j is None:
                break
            pu = user_emb[u].copy()
            qi = item_emb[i].copy()
            qj = item_emb[j].copy()
            diff = qi - qj
            g = 0.5 * (1.0 - math.tanh(0.5 * float(pu @ diff)))
            user_emb[u] = pu + lr * (g * diff - 2.0 * l2 * pu)
            item_emb[i] = qi + lr * (g * pu - 2.0 * l2 * qi)
            item_emb[j] = qj + lr * (-g * pu - 2.0 * l2 * qj)


def _batched_epoch(data: _TrainingData, config: BackboneConfig, rng: np.random.Generator, order: np.ndarray,
                   ego: np.ndarray, adjacency: Optional[sp.csr_matrix], num_layers: int, batch_size: int) -> None:
    """
    One epoch of summed-loss mini-batch updates on the ego embeddings (updated in place); gradients flow back
    through the propagation, the normalized adjacency being symmetric
    """
    m = data.n_users
    lr, l2 = config.learning_rate, config.l2_reg
    for start in range(0, len(order), batch_size):
        users: List[int] = []
        positives: List[int] = []
        negatives: List[int] = []
        for position in order[start:start + batch_size].tolist():
            u = int(data.pair_users[position])
            for _ in range(config.negatives_per_positive):
                j = data.sample_negative(rng, u)
                if j is None:
                    break
                users.append(u)
                positives.append(int(data.pair_items[position]))
                negatives.append(j)
        if not users:
            continue
        u_rows = np.asarray(users, dtype=np.int64)
        i_rows = np.asarray(positives, dtype=np.int64) + m
        j_rows = np.asarray(negatives, dtype=np.int64) + m
        final = propagate(adjacency, ego, num_layers)
        pu, qi, qj = final[u_rows], final[i_rows], final[j_rows]
        g = _sigmoid_neg(np.einsum("ij,ij->i", pu, qi - qj))[:, None]
        grad_final = np.zeros_like(ego)
        np.add.at(grad_final, u_rows, -g * (qi - qj))
        np.add.at(grad_final, i_rows, -g * pu)
        np.add.at(grad_final, j_rows, g * pu)
        grad = propagate(adjacency, grad_final, num_layers)
        for rows in (u_rows, i_rows, j_rows):
            np.add.at(grad, rows, 2.0 * l2 * ego[rows])
        ego -= lr * grad


def train_bpr(train: Dataset, config: BackboneConfig) -> BackboneModel:
    """
    Matrix factorization trained on −ln σ(r̂_ui − r̂_uj) + l2·‖θ‖² with sampled unseen negatives

    :raises EmptyTrainingSetError: if train is empty
    """
    return _fit(train, config, BackboneKind.BPR, num_layers=0)


def train_lightgcn(train: Dataset, config: BackboneConfig) -> BackboneModel:
    """
    LightGCN: embeddings propagated over the normalized user-item graph, final embedding the mean of layers
    0..num_layers, trained with the BPR objective.  num_layers=0 reproduces `train_bpr`.

    :raises EmptyTrainingSetError: if train is empty
    """
    return _fit(train, config, BackboneKind.LIGHTGCN, num_layers=config.num_layers)


def train_backbone(kind: BackboneKind, train: Dataset, config: BackboneConfig) -> BackboneModel:
    if kind is BackboneKind.BPR:
        return train_bpr(train, config)
    return train_lightgcn(train, config)


def score(model: BackboneModel, user_id: int, item_id: int) -> float:
    """
    :return: dot product of the user and item embeddings, −inf when either is unknown
    """
    user = model.user_vector(user_id)
    item = model.item_vector(item_id)
    if user is None or item is None:
        return float("-inf")
    return float(user @ item)


def top_k_candidates(model: BackboneModel, user_id: int, k: int = 50,
                     exclude: AbstractSet[int] = frozenset()) -> CandidateList:
    """
    :param model: trained backbone
    :param user_id: user to generate candidates for
    :param k: maximum number of candidates
    :param exclude: items never to propose (typically the user's history)
    :return: the k best-scoring items outside `exclude`, score-descending, ties by ascending item id

    :raises UnknownUserError: if the user has no embedding
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = model.all_scores(user_id)
    item_ids = model.item_id_array
    if exclude:
        keep = ~np.isin(item_ids, np.fromiter(exclude, dtype=np.int64, count=len(exclude)))
        item_ids, scores = item_ids[keep], scores[keep]
    order = np.lexsort((item_ids, -scores))[:k]
    return CandidateList(user_id, tuple(int(i) for i in item_ids[order]), tuple(float(s) for s in scores[order]))

