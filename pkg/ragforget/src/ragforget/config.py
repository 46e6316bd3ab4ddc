"""
Run configuration: one JSON file plus command-line overrides, and the root-seed fan-out into named sub-seeds
"""
import dataclasses
import hashlib
import json
import logging
import os

from dataclasses import dataclass, field
from typing import Any, Dict, Mapping, Optional, Tuple, Union

from .backbone import BackboneConfig, BackboneKind
from .generator import BackendKind, GenBackendConfig
from .retrieval import Strategy
from .retrieval.attention import AttentionConfig

log = logging.getLogger(__name__)

SEED_MASK = (1 << 63) - 1


def derive_seed(root: int, *names: Union[str, int]) -> int:
    """
    Independent sub-seed for a named component: the first 8 bytes of sha256("<root>/<name>/..."), masked to
    63 bits so it fits every signed 64-bit consumer

    >>> derive_seed(7, "split") == derive_seed(7, "split")
    True
    """
    payload = "/".join([str(root)] + [str(name) for name in names]).encode("utf-8")
    return int.from_bytes(hashlib.sha256(payload).digest()[:8], "big") & SEED_MASK


@dataclass(frozen=True)
class PipelineSettings:
    """
    Per-user pipeline parameters of an unlearning run
    """
    strategy: Strategy = Strategy.PREFERENCE
    retained_budget: int = 100
    "K: interactions retained by the budgeted strategies"
    num_candidates: int = 50
    "backbone candidates per user"
    grid_step: int = 10
    "rounding step of the diversity retention budget"
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    sampling_seed: int = 0
    "root of the per-user sampling streams"

    def __post_init__(self) -> None:
        if self.retained_budget < 1:
            raise ValueError("retained_budget must be >= 1")
        if self.num_candidates < 1:
            raise ValueError("num_candidates must be >= 1")
        if not 1 <= self.grid_step <= 100:
            raise ValueError("grid_step must be in [1, 100]")

    def user_seed(self, user_id: int) -> int:
        return derive_seed(self.sampling_seed, user_id)


_ENUM_FIELDS = {"backbone": BackboneKind, "strategy": Strategy, "backend": BackendKind}
_TUPLE_FIELDS = {"ratios", "eval_ks", "forget_ks"}


@dataclass(frozen=True)
class RunConfig:
    """
    Complete configuration of a ragforget run.  Field names double as JSON keys of the config file.
    """
    ratings_path: Optional[str] = None
    ratings_format: str = "tsv"
    "tsv, csv or dat"
    items_path: Optional[str] = None
    items_format: str = "movielens_item"
    "movielens_item, movielens_dat or genre_tsv"
    users_path: Optional[str] = None
    "optional demographic file rendered into profile prompts"
    users_format: str = "movielens_user"
    dataset_name: str = "ml-100k"
    "label used in report rows"

    ratios: Tuple[float, float, float] = (0.7, 0.1, 0.2)
    forget_fraction: float = 0.1

    backbone: BackboneKind = BackboneKind.BPR
    embedding_dim: int = 64
    epochs: int = 30
    learning_rate: float = 0.05
    l2_reg: float = 1e-4
    negatives_per_positive: int = 1
    num_layers: int = 2
    batch_size: Optional[int] = None

    strategy: Strategy = Strategy.PREFERENCE
    retained_budget: int = 100
    num_candidates: int = 50
    grid_step: int = 10
    perf_matrix_path: Optional[str] = None
    "cached performance matrix, default <out_dir>/perf_matrix.json"
    num_heads: int = 4
    key_dim: int = 16
    value_dim: int = 16
    model_dim: int = 64

    backend: BackendKind = BackendKind.MOCK_IDENTITY
    endpoint_url: Optional[str] = None
    model_name: str = "llama3.1-8b"
    timeout: float = 60.0
    max_retries: int = 2
    temperature: float = 0.0
    request_parallelism: int = 4

    eval_ks: Tuple[int, ...] = (5, 10, 20)
    forget_ks: Tuple[int, ...] = (1, 3, 5, 10, 20)
    strategy_seeds: int = 5
    "seeds averaged by the strategy comparison"

    seed: int = 0
    out_dir: str = "out"
    jobs: int = 1
    "bound on concurrently served users"

    def __post_init__(self) -> None:
        if self.jobs < 1:
            raise ValueError("jobs must be >= 1")
        if self.strategy_seeds < 1:
            raise ValueError("strategy_seeds must be >= 1")
        if any(k < 1 for k in self.eval_ks + self.forget_ks):
            raise ValueError("evaluation ks must be >= 1")
        # sub-configurations validate themselves
        self.backbone_config()
        self.pipeline_settings()
        self.attention_config().check(self.embedding_dim)
        self.backend_config()

    @property
    def split_seed(self) -> int:
        return derive_seed(self.seed, "split")

    @property
    def init_seed(self) -> int:
        return derive_seed(self.seed, "init")

    @property
    def sampling_seed(self) -> int:
        return derive_seed(self.seed, "sampling")

    @property
    def projection_seed(self) -> int:
        return derive_seed(self.seed, "projection")

    @property
    def perf_seed(self) -> int:
        return derive_seed(self.seed, "perf")

    @property
    def bench_seed(self) -> int:
        return derive_seed(self.seed, "bench")

    @property
    def all_ks(self) -> Tuple[int, ...]:
        return tuple(sorted(set(self.eval_ks) | set(self.forget_ks)))

    @property
    def resolved_perf_matrix_path(self) -> str:
        return self.perf_matrix_path or os.path.join(self.out_dir, "perf_matrix.json")

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(embedding_dim=self.embedding_dim, epochs=self.epochs, learning_rate=self.learning_rate,
                              l2_reg=self.l2_reg, negatives_per_positive=self.negatives_per_positive,
                              num_layers=self.num_layers, seed=self.init_seed, batch_size=self.batch_size)

    def attention_config(self) -> AttentionConfig:
        return AttentionConfig(num_heads=self.num_heads, key_dim=self.key_dim, value_dim=self.value_dim,
                               model_dim=self.model_dim, projection_seed=self.projection_seed)

    def pipeline_settings(self, strategy: Optional[Strategy] = None, sampling_seed: Optional[int] = None) \
            -> PipelineSettings:
        return PipelineSettings(strategy=strategy or self.strategy, retained_budget=self.retained_budget,
                                num_candidates=self.num_candidates, grid_step=self.grid_step,
                                attention=self.attention_config(),
                                sampling_seed=self.sampling_seed if sampling_seed is None else sampling_seed)

    def backend_config(self) -> GenBackendConfig:
        return GenBackendConfig(kind=self.backend, endpoint_url=self.endpoint_url, model_name=self.model_name,
                                timeout=self.timeout, max_retries=self.max_retries, temperature=self.temperature,
                                request_parallelism=self.request_parallelism)

    def check_paths(self) -> None:
        """
        :raises FileNotFoundError: if a configured input file does not exist
        """
        for path in (self.ratings_path, self.items_path, self.users_path, self.perf_matrix_path):
            if path is not None and not os.path.isfile(path):
                raise FileNotFoundError(path)

    def to_json(self) -> Dict[str, Any]:
        content: Dict[str, Any] = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if f.name in _ENUM_FIELDS:
                value = value.value
            elif f.name in _TUPLE_FIELDS:
                value = list(value)
            content[f.name] = value
        return content

    def digest(self) -> str:
        """:return: sha256 of the canonical JSON form, stamped into reports"""
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode("utf-8")).hexdigest()

    @classmethod
    def from_mapping(cls, content: Mapping[str, Any]) -> "RunConfig":
        """
        :raises ValueError: on unknown keys or values that fail validation
        """
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(content) - known)
        if unknown:
            raise ValueError(f"unknown configuration keys {unknown}")
        values: Dict[str, Any] = {}
        for key, value in content.items():
            if key in _ENUM_FIELDS and not isinstance(value, _ENUM_FIELDS[key]):
                value = BackendKind.from_flag(value) if key == "backend" else _ENUM_FIELDS[key](value)
            elif key in _TUPLE_FIELDS:
                value = tuple(value)
            values[key] = value
        return cls(**values)

    @classmethod
    def load(cls, path: Optional[str]) -> "RunConfig":
        """
        :param path: JSON config file, or None for the defaults
        :raises FileNotFoundError: if path does not exist
        """
        if path is None:
            return cls()
        if not os.path.isfile(path):
            raise FileNotFoundError(path)
        with open(path, "r", encoding="utf-8") as stream:
            content = json.load(stream)
        if not isinstance(content, dict):
            raise ValueError(f"{path}: configuration must be a JSON object")
        log.info("Loaded configuration from %s", path)
        return cls.from_mapping(content)

    def with_overrides(self, **overrides: Any) -> "RunConfig":
        """
        :return: copy with every override that is not None applied (flags win over the file)
        """
        merged = self.to_json()
        merged.update({key: value for key, value in overrides.items() if value is not None})
        return RunConfig.from_mapping(merged)
