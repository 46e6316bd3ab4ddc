"""
Attention-based filtering: multi-head scaled dot-product attention between candidate items and the user's
history, built from head slices of the frozen backbone item embeddings.
"""
import logging
import math

from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence, Set

import numpy as np

from ..backbone import BackboneModel, CandidateList
from . import EmptyCandidatesError, EmptyHistoryError, FilteredHistory, Strategy, UnknownItemError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AttentionConfig:
    num_heads: int = 4
    key_dim: int = 16
    "d_k: width of the query/key slice of each head"
    value_dim: int = 16
    "d_v: width of the value slice of each head"
    model_dim: int = 64
    "d_model: output width of W^O"
    projection_seed: int = 0

    def __post_init__(self) -> None:
        for name in ("num_heads", "key_dim", "value_dim", "model_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    def check(self, embedding_dim: int) -> None:
        """
        :raises ValueError: if the heads or the output width do not fit in the backbone embedding
        """
        if self.num_heads * self.key_dim > embedding_dim or self.num_heads * self.value_dim > embedding_dim:
            raise ValueError(f"{self.num_heads} heads of width {self.key_dim}/{self.value_dim} exceed embedding "
                             f"dimension {embedding_dim}")
        if self.model_dim > embedding_dim:
            raise ValueError(f"model_dim {self.model_dim} exceeds embedding dimension {embedding_dim}")


@lru_cache(maxsize=16)
def output_projection(cfg: AttentionConfig) -> np.ndarray:
    """
    :return: seeded (H·d_v) x d_model matrix with orthonormal columns (or rows, when wider than tall)
    """
    rows, cols = cfg.num_heads * cfg.value_dim, cfg.model_dim
    rng = np.random.default_rng(cfg.projection_seed)
    gaussian = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(gaussian)
    q = q * np.where(np.diag(r) < 0, -1.0, 1.0)
    projection = q if rows >= cols else q.T
    projection = np.ascontiguousarray(projection)
    projection.setflags(write=False)
    return projection


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = np.exp(logits - logits.max(axis=-1, keepdims=True))
    result: np.ndarray = shifted / shifted.sum(axis=-1, keepdims=True)
    return result


def attention_matrix(candidates: Sequence[int], history: FilteredHistory, model: BackboneModel,
                     cfg: AttentionConfig) -> np.ndarray:
    """
    α for every (candidate, history interaction) pair.

    Per head h the candidate's h-th d_k slice attends over the history's h-th d_k slices, the attention weights
    mixing the history's h-th d_v slices.  The concatenated head outputs projected by W^O, dotted with the
    candidate embedding's first d_model entries, decompose into one relevance score per interaction;
    α is the softmax of those scores over the history.  History items unknown to the backbone contribute
    zero embeddings.

    :return: len(candidates) x len(history) matrix, rows summing to 1
    :raises EmptyHistoryError: if the history is empty
    :raises UnknownItemError: if a candidate is unknown to the backbone
    """
    if not history.kept:
        raise EmptyHistoryError(history.user_id)
    cfg.check(model.dim)
    for item_id in candidates:
        if not model.has_item(item_id):
            raise UnknownItemError(item_id)
    keys = model.item_matrix(history.item_ids)
    queries = model.item_matrix(candidates)
    projection = output_projection(cfg)
    dk, dv = cfg.key_dim, cfg.value_dim
    scores = np.zeros((len(candidates), len(history.kept)), dtype=np.float64)
    for h in range(cfg.num_heads):
        logits = queries[:, h * dk:(h + 1) * dk] @ keys[:, h * dk:(h + 1) * dk].T / math.sqrt(dk)
        weights = _softmax(logits)
        projected_values = keys[:, h * dv:(h + 1) * dv] @ projection[h * dv:(h + 1) * dv]
        relevance = queries[:, :cfg.model_dim] @ projected_values.T
        scores += weights * relevance
    return _softmax(scores)


def attention_weights(candidate: int, history: FilteredHistory, model: BackboneModel,
                      cfg: AttentionConfig) -> np.ndarray:
    """
    :return: α_{·,c} over the history for one candidate
    """
    weights: np.ndarray = attention_matrix([candidate], history, model, cfg)[0]
    return weights


def attention_filter(history: FilteredHistory, candidates: CandidateList, model: BackboneModel,
                     cfg: AttentionConfig, k: int) -> FilteredHistory:
    """
    Union of every candidate's top-k interactions by α (ties by item id), truncated to k by the interaction's
    maximum weight over candidates, then its mean weight, then item id

    :raises EmptyHistoryError: if the history is empty
    :raises EmptyCandidatesError: if there are no candidates
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if not history.kept:
        raise EmptyHistoryError(history.user_id)
    if not candidates.items:
        raise EmptyCandidatesError(candidates.user_id)
    if k >= len(history):
        return history.select(range(len(history)), Strategy.ATTENTION, k)
    alpha = attention_matrix(candidates.items, history, model, cfg)
    item_ids = np.asarray(history.item_ids, dtype=np.int64)
    union: Set[int] = set()
    for row in alpha:
        union.update(int(p) for p in np.lexsort((item_ids, -row))[:k])
    max_weight = alpha.max(axis=0)
    mean_weight = alpha.mean(axis=0)
    ranked = sorted(union, key=lambda p: (-max_weight[p], -mean_weight[p], item_ids[p]))[:k]
    log.debug("user %d: attention union of %d interactions truncated to %d", history.user_id, len(union), len(ranked))
    return history.select(ranked, Strategy.ATTENTION, k)
