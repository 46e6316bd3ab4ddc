"""
Ranking metrics, forget/remain comparison, performance-matrix construction, strategy comparison and the
unlearning-time benchmark
"""
import asyncio
import dataclasses
import logging
import math
import os

from dataclasses import dataclass, field
from enum import Enum
from typing import AbstractSet, Any, Dict, FrozenSet, List, Mapping, NamedTuple, Optional, Sequence, Set, Tuple

import numpy as np

from .backbone import BackboneConfig, BackboneKind, BackboneModel, CandidateList, top_k_candidates, train_backbone
from .config import PipelineSettings, derive_seed
from .corpus import CategoryMap, Dataset, user_history
from .generator import ChatCompletionBackend, GenBackendConfig, GenerationJob, ScoreBackend, \
    SimilarityMockBackend, create_backend, generate_many, rerank
from .pipeline import UnlearningOrchestrator
from .promptgen import AuxContext, build_prompt
from .reporting import UnlearningRunResult, format_table
from .retrieval import FilteredHistory, Strategy, filter_unlearn, load_forget_requests, resolve_forget_pairs
from .retrieval.diversity import PerfMatrix
from .timing import WallClock

log = logging.getLogger(__name__)

Pair = Tuple[int, int]
CSV_HEADER = ("method", "dataset", "backbone", "metric", "k", "value")
PERF_MATRIX_K = 10


class EvaluationError(Exception):
    """Base class for evaluation errors"""


class EmptyTargetsError(EvaluationError):
    """Raised when a metric is asked for with no target items"""


class NoEvaluableUsersError(EvaluationError):
    """Raised when no user has both a ranked list and targets"""


class KGridMismatchError(EvaluationError):

    def __init__(self, left: Sequence[int], right: Sequence[int]) -> None:
        super().__init__(f"reports cover different k values: {list(left)} vs {list(right)}")
        self._left = tuple(left)
        self._right = tuple(right)

    @property
    def ks(self) -> Tuple[Tuple[int, ...], Tuple[int, ...]]:
        return self._left, self._right


class MissingCheckpointError(EvaluationError):

    def __init__(self, path: str) -> None:
        super().__init__(f"no backbone checkpoint at {path}")
        self._path = path

    @property
    def path(self) -> str:
        return self._path


class TargetSet(Enum):
    REMAIN_TEST = "remain_test"
    FORGET = "forget"
    VALIDATION = "validation"

    def __repr__(self) -> str:
        return self.value


class MetricPair(NamedTuple):
    hr: float
    ndcg: float


def _check(targets: AbstractSet[int], k: int) -> None:
    if k < 1:
        raise ValueError("k must be >= 1")
    if not targets:
        raise EmptyTargetsError("no target items")


def hit_ratio_at_k(ranked: Sequence[int], targets: AbstractSet[int], k: int) -> float:
    """
    :return: 1.0 if any target is among the first k ranked items, else 0.0
    :raises EmptyTargetsError: if targets is empty
    """
    _check(targets, k)
    return 1.0 if any(item in targets for item in ranked[:k]) else 0.0


def ndcg_at_k(ranked: Sequence[int], targets: AbstractSet[int], k: int) -> float:
    """
    Binary-relevance NDCG: Σ_{hit ranks r ≤ k} 1/log₂(r+1), normalized by the ideal Σ_{i ≤ min(k, |targets|)}

    :raises EmptyTargetsError: if targets is empty
    """
    _check(targets, k)
    dcg = math.fsum(1.0 / math.log2(rank + 1) for rank, item in enumerate(ranked[:k], start=1) if item in targets)
    idcg = math.fsum(1.0 / math.log2(i + 1) for i in range(1, min(k, len(targets)) + 1))
    return dcg / idcg


@dataclass(frozen=True)
class MetricsReport:
    per_k: Mapping[int, MetricPair]
    "k → mean (HR@k, NDCG@k) over evaluated users"
    users_evaluated: int
    target_set: TargetSet
    config_digest: str = ""
    users_skipped: int = 0
    "ranked users without targets"

    @property
    def ks(self) -> Tuple[int, ...]:
        return tuple(sorted(self.per_k))

    def to_json(self) -> Dict[str, Any]:
        return {
            "target_set": self.target_set.value,
            "users_evaluated": self.users_evaluated,
            "users_skipped": self.users_skipped,
            "config_digest": self.config_digest,
            "metrics": {str(k): {"hr": self.per_k[k].hr, "ndcg": self.per_k[k].ndcg} for k in self.ks},
        }

    def format_table(self) -> str:
        return format_table(("k", f"HR ({self.target_set.value})", f"NDCG ({self.target_set.value})"),
                            [(k, self.per_k[k].hr, self.per_k[k].ndcg) for k in self.ks])

    def csv_rows(self, method: str, dataset: str, backbone: str) -> List[Tuple[Any, ...]]:
        rows: List[Tuple[Any, ...]] = []
        for k in self.ks:
            rows.append((method, dataset, backbone, f"{self.target_set.value}/hr", k, self.per_k[k].hr))
            rows.append((method, dataset, backbone, f"{self.target_set.value}/ndcg", k, self.per_k[k].ndcg))
        return rows


def holdout_targets(data: Dataset) -> Dict[int, FrozenSet[int]]:
    """:return: user → held-out items"""
    return {user_id: frozenset(data.interactions[p].item_id for p in positions)
            for user_id, positions in data.user_index.items()}


def evaluate_users(ranked: Mapping[int, Sequence[int]], holdout: Mapping[int, AbstractSet[int]], ks: Sequence[int],
                   target_set: TargetSet = TargetSet.REMAIN_TEST, config_digest: str = "") -> MetricsReport:
    """
    Mean per-user HR@k and NDCG@k over ranked users with at least one target; the others are skipped and counted.
    Sums run in ascending user order.

    :raises NoEvaluableUsersError: if no ranked user has targets
    """
    if not ks or any(k < 1 for k in ks):
        raise ValueError("ks must be non-empty and >= 1")
    evaluable = [user_id for user_id in sorted(ranked) if holdout.get(user_id)]
    skipped = len(ranked) - len(evaluable)
    if not evaluable:
        raise NoEvaluableUsersError(f"none of {len(ranked)} ranked users has {target_set.value} targets")
    if skipped:
        log.info("%d ranked users have no %s targets and are skipped", skipped, target_set.value)
    per_k = {}
    for k in sorted(set(ks)):
        hr = math.fsum(hit_ratio_at_k(ranked[u], holdout[u], k) for u in evaluable) / len(evaluable)
        ndcg = math.fsum(ndcg_at_k(ranked[u], holdout[u], k) for u in evaluable) / len(evaluable)
        per_k[k] = MetricPair(hr, ndcg)
    return MetricsReport(per_k, len(evaluable), target_set, config_digest, skipped)


@dataclass(frozen=True)
class ComparisonRow:
    metric: str
    k: int
    forget: float
    remain: float
    ratio: Optional[float]
    "forget / remain, None when remain is 0"


@dataclass(frozen=True)
class ComparisonTable:
    rows: Tuple[ComparisonRow, ...]

    def to_json(self) -> List[Dict[str, Any]]:
        return [dataclasses.asdict(row) for row in self.rows]

    def format_table(self) -> str:
        return format_table(("metric", "k", "forget", "remain", "forget/remain"),
                            [(r.metric, r.k, r.forget, r.remain, r.ratio) for r in self.rows])

    def csv_rows(self, method: str, dataset: str, backbone: str) -> List[Tuple[Any, ...]]:
        return [(method, dataset, backbone, f"ratio/{r.metric}", r.k, "" if r.ratio is None else r.ratio)
                for r in self.rows]


def compare_forget_remain(forget_report: MetricsReport, remain_report: MetricsReport) -> ComparisonTable:
    """
    :return: forget, remain and forget/remain per metric per k
    :raises KGridMismatchError: if the reports cover different k values
    """
    if forget_report.ks != remain_report.ks:
        raise KGridMismatchError(forget_report.ks, remain_report.ks)
    rows = []
    for metric in ("hr", "ndcg"):
        for k in forget_report.ks:
            forget = getattr(forget_report.per_k[k], metric)
            remain = getattr(remain_report.per_k[k], metric)
            rows.append(ComparisonRow(metric, k, forget, remain, forget / remain if remain > 0 else None))
    return ComparisonTable(tuple(rows))


def backbone_rankings(model: BackboneModel, store: Dataset, users: Sequence[int], forget: AbstractSet[Pair],
                      k: int) -> Dict[int, List[int]]:
    """
    :return: user → the backbone's own top-k outside the user's unlearned history (users unknown to the model
        are left out)
    """
    ranked = {}
    for user_id in sorted(set(users)):
        if model.user_row(user_id) is None:
            continue
        history = filter_unlearn(user_id, user_history(store, user_id), forget)
        ranked[user_id] = list(top_k_candidates(model, user_id, k, exclude=frozenset(history.item_ids)).items)
    return ranked


def forget_targets(forget: AbstractSet[Pair]) -> Dict[int, FrozenSet[int]]:
    per_user: Dict[int, Set[int]] = {}
    for user_id, item_id in forget:
        per_user.setdefault(user_id, set()).add(item_id)
    return {user_id: frozenset(items) for user_id, items in per_user.items()}


def evaluate_run(ranked: Mapping[int, Sequence[int]], test: Dataset, forget: AbstractSet[Pair], ks: Sequence[int],
                 config_digest: str = "") -> Tuple[MetricsReport, Optional[MetricsReport]]:
    """
    :return: remain-test report and, when any ranked user had forgotten items, the forget report
    """
    remain = evaluate_users(ranked, holdout_targets(test), ks, TargetSet.REMAIN_TEST, config_digest)
    targets = forget_targets(forget)
    if not any(user_id in targets for user_id in ranked):
        return remain, None
    forgotten = {user_id: ranked[user_id] for user_id in ranked if user_id in targets}
    return remain, evaluate_users(forgotten, targets, ks, TargetSet.FORGET, config_digest)


def build_perf_matrix(val: Dataset, categories: CategoryMap, backbone: BackboneModel, grid: Sequence[int], seed: int,
                      *, history: Dataset, num_candidates: int = 50, k: int = PERF_MATRIX_K,
                      backend: Optional[ScoreBackend] = None, aux: Optional[AuxContext] = None,
                      parallelism: int = 1) -> PerfMatrix:
    """
    M[c][p]: mean HR@k on the validation targets when each user retains p% of their category-c interactions
    (drawn uniformly, rounded up) and all other interactions.  Candidates stay fixed per user; scoring uses the
    similarity mock unless another backend is given.

    :param val: validation interactions (targets)
    :param categories: item categories, one matrix row per label
    :param backbone: frozen backbone producing the candidates
    :param grid: retention percentages, must include 100
    :param seed: root of the per-cell sampling streams
    :param history: store the users' histories are retrieved from
    :raises ValueError: if the grid is empty or lacks 100
    :raises NoEvaluableUsersError: if no validation user is known to the backbone
    """
    points = tuple(sorted(set(grid)))
    if not points or 100 not in points:
        raise ValueError("grid must be non-empty and include 100")
    targets = holdout_targets(val)
    users = [user_id for user_id in sorted(targets) if backbone.user_row(user_id) is not None]
    if not users:
        raise NoEvaluableUsersError("no validation user is known to the backbone")
    scorer = backend or SimilarityMockBackend(backbone)
    needs_prompt = isinstance(scorer, ChatCompletionBackend)
    context = aux or AuxContext()
    histories: Dict[int, FilteredHistory] = {
        user_id: filter_unlearn(user_id, user_history(history, user_id), frozenset()) for user_id in users}
    candidates: Dict[int, CandidateList] = {
        user_id: top_k_candidates(backbone, user_id, num_candidates, exclude=frozenset(histories[user_id].item_ids))
        for user_id in users}

    def job(user_id: int, kept: FilteredHistory) -> GenerationJob:
        prompt = build_prompt(candidates[user_id], kept, context) if needs_prompt else None
        return GenerationJob(prompt, candidates[user_id], kept)

    async def hits(jobs: List[GenerationJob]) -> Dict[int, float]:
        scores = await generate_many(scorer, jobs, parallelism)
        return {user_id: hit_ratio_at_k(rerank(candidates[user_id], scores[user_id]), targets[user_id], k)
                for user_id in scores}

    async def fill() -> List[Tuple[float, ...]]:
        baseline = await hits([job(user_id, histories[user_id]) for user_id in users])
        rows = []
        for c_index, label in enumerate(categories.all_categories):
            members = {user_id: [p for p, i in enumerate(histories[user_id].kept)
                                 if label in categories.categories_of(i.item_id)] for user_id in users}
            affected = [user_id for user_id in users if members[user_id]]
            row = []
            for percent in points:
                per_user = dict(baseline)
                if percent != 100 and affected:
                    jobs = []
                    for user_id in affected:
                        rng = np.random.default_rng([seed, c_index, percent, user_id])
                        pool = members[user_id]
                        count = (percent * len(pool) + 99) // 100
                        chosen = {pool[int(i)] for i in rng.choice(len(pool), size=count, replace=False)}
                        kept = [p for p in range(len(histories[user_id])) if p not in pool or p in chosen]
                        jobs.append(job(user_id, histories[user_id].select(kept, Strategy.DIVERSITY, None)))
                    per_user.update(await hits(jobs))
                row.append(math.fsum(per_user[user_id] for user_id in users) / len(users))
            rows.append(tuple(row))
            log.debug("performance row %s: %s", label, ["%.4f" % v for v in row])
        return rows

    values = asyncio.run(fill())
    log.info("Built %d x %d performance matrix over %d validation users", len(values), len(points), len(users))
    return PerfMatrix(points, tuple(categories.all_categories), tuple(values))


@dataclass(frozen=True)
class StrategyComparison:
    """
    Mean metrics per retrieval strategy, averaged over seeds
    """
    ks: Tuple[int, ...]
    seeds: Tuple[int, ...]
    per_strategy: Mapping[str, Mapping[int, MetricPair]]

    def to_json(self) -> Dict[str, Any]:
        return {
            "seeds": list(self.seeds),
            "strategies": {name: {str(k): {"hr": pair.hr, "ndcg": pair.ndcg} for k, pair in sorted(per_k.items())}
                           for name, per_k in self.per_strategy.items()},
        }

    def format_table(self) -> str:
        header = ["strategy"] + [f"HR@{k}" for k in self.ks] + [f"NDCG@{k}" for k in self.ks]
        rows = [[name] + [per_k[k].hr for k in self.ks] + [per_k[k].ndcg for k in self.ks]
                for name, per_k in self.per_strategy.items()]
        return format_table(header, rows)

    def csv_rows(self, dataset: str, backbone: str) -> List[Tuple[Any, ...]]:
        rows: List[Tuple[Any, ...]] = []
        for name, per_k in self.per_strategy.items():
            for k in self.ks:
                rows.append((f"strategy:{name}", dataset, backbone, "remain_test/hr", k, per_k[k].hr))
                rows.append((f"strategy:{name}", dataset, backbone, "remain_test/ndcg", k, per_k[k].ndcg))
        return rows


def compare_strategies(model: BackboneModel, store: Dataset, test: Dataset, categories: CategoryMap,
                       backend: GenBackendConfig, settings: PipelineSettings, strategies: Sequence[Strategy],
                       seeds: Sequence[int], ks: Sequence[int], *, forget: AbstractSet[Pair] = frozenset(),
                       aux: Optional[AuxContext] = None, perf_matrix: Optional[PerfMatrix] = None,
                       parallelism: int = 1) -> StrategyComparison:
    """
    Run the pipeline once per (strategy, seed) over every test user and average the remain-test metrics over seeds
    """
    users = sorted(u for u in holdout_targets(test) if model.user_row(u) is not None)
    per_strategy: Dict[str, Dict[int, MetricPair]] = {}
    for strategy in strategies:
        reports = []
        for seed in seeds:
            run_settings = dataclasses.replace(settings, strategy=strategy,
                                               sampling_seed=derive_seed(seed, "sampling"))
            orchestrator = UnlearningOrchestrator(model, store, categories, aux or AuxContext(),
                                                  create_backend(backend, model), run_settings, perf_matrix,
                                                  parallelism=parallelism)
            result = orchestrator.run(users, forget, run_name=f"strategy-{strategy.value}-{seed}")
            reports.append(evaluate_users(result.ranked, holdout_targets(test), ks))
        per_strategy[strategy.value] = {
            k: MetricPair(math.fsum(r.per_k[k].hr for r in reports) / len(reports),
                          math.fsum(r.per_k[k].ndcg for r in reports) / len(reports))
            for k in sorted(set(ks))}
        log.info("strategy %s: HR@%d = %.4f", strategy.value, min(ks), per_strategy[strategy.value][min(ks)].hr)
    return StrategyComparison(tuple(sorted(set(ks))), tuple(seeds), per_strategy)


class TimingMode(Enum):
    RETRAIN = "retrain"
    CRAGRU = "cragru"

    def __repr__(self) -> str:
        return self.value


@dataclass(frozen=True)
class TimingReport:
    method: TimingMode
    wall_seconds: float
    requests_served: int
    backbone_retrained: bool
    cpu_seconds: float = 0.0
    "process CPU time (user + system)"
    users_affected: int = 0

    def __post_init__(self) -> None:
        if self.method is TimingMode.CRAGRU and self.backbone_retrained:
            raise ValueError("retrieval-stage unlearning never retrains the backbone")

    def to_json(self) -> Dict[str, Any]:
        content = dataclasses.asdict(self)
        content["method"] = self.method.value
        return content


def format_timing(reports: Sequence[TimingReport]) -> str:
    """
    :return: aligned timing table, with the retrain/cragru wall-time speedup when both are present
    """
    table = format_table(("method", "wall s", "cpu s", "requests", "users", "retrained"),
                         [(r.method.value, r.wall_seconds, r.cpu_seconds, r.requests_served, r.users_affected,
                           "yes" if r.backbone_retrained else "no") for r in reports])
    by_method = {r.method: r for r in reports}
    if TimingMode.RETRAIN in by_method and TimingMode.CRAGRU in by_method \
            and by_method[TimingMode.CRAGRU].wall_seconds > 0:
        speedup = by_method[TimingMode.RETRAIN].wall_seconds / by_method[TimingMode.CRAGRU].wall_seconds
        table += f"speedup (retrain / cragru): {speedup:.1f}x\n"
    return table


@dataclass(frozen=True)
class BenchContext:
    """
    Everything needed to serve a forget request either way
    """
    training_data: Dataset
    "data the deployed backbone was trained on, also the retrieval store"
    categories: CategoryMap
    backbone_kind: BackboneKind
    backbone_config: BackboneConfig
    settings: PipelineSettings
    backend: GenBackendConfig
    aux: AuxContext = field(default_factory=AuxContext)
    perf_matrix: Optional[PerfMatrix] = None
    profiles: Mapping[int, str] = field(default_factory=dict)
    parallelism: int = 1


class TimingOutcome(NamedTuple):
    report: TimingReport
    model: BackboneModel
    "the retrained backbone (retrain) or the untouched deployed one (cragru)"
    result: Optional[UnlearningRunResult]
    "pipeline outputs of the affected users (cragru only)"
    forget: FrozenSet[Pair]


def time_unlearning(request_path: str, mode: TimingMode, checkpoint_path: str,
                    context: BenchContext) -> TimingOutcome:
    """
    Serve a forget request and time it: retrain mode trains a fresh backbone on the training data minus the
    request; cragru mode runs the unlearning pipeline for the affected users against the frozen checkpoint and
    verifies the checkpoint's embeddings are unchanged afterwards

    :raises MissingCheckpointError: if the checkpoint does not exist
    :raises EvaluationError: if the backbone changed during cragru-mode unlearning
    """
    if not os.path.isfile(checkpoint_path):
        raise MissingCheckpointError(checkpoint_path)
    requests = load_forget_requests(request_path)
    model = BackboneModel.load(checkpoint_path)
    pairs = resolve_forget_pairs(requests, context.training_data)
    users = sorted({request.user_id for request in requests})
    clock = WallClock()
    if mode is TimingMode.RETRAIN:
        remaining = context.training_data.without(pairs)
        with clock.measure(mode.value):
            model = train_backbone(context.backbone_kind, remaining, context.backbone_config)
        result = None
        retrained = True
    else:
        before = model.checksum()
        orchestrator = UnlearningOrchestrator(model, context.training_data, context.categories, context.aux,
                                              create_backend(context.backend, model), context.settings,
                                              context.perf_matrix, context.profiles, context.parallelism)
        with clock.measure(mode.value):
            result = orchestrator.run(users, pairs, run_name="bench")
        if model.checksum() != before:
            raise EvaluationError("backbone embeddings changed during unlearning")
        retrained = False
    lap = clock.lap(mode.value)
    assert lap is not None, "Internal error: measurement did not complete"
    report = TimingReport(mode, lap.wall_seconds, len(requests), retrained, lap.cpu_seconds, len(users))
    log.info("%s unlearning of %d requests took %.3fs", mode.value, len(requests), lap.wall_seconds)
    return TimingOutcome(report, model, result, pairs)
