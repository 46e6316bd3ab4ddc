"""
End-to-end retrieval-augmented unlearning: for every affected user, retrieve the history, drop forgotten
interactions, apply the retention strategy, prompt the generator and re-rank the backbone candidates.
The backbone is only ever read.
"""
import asyncio
import logging
import time
import traceback

from typing import AbstractSet, Dict, FrozenSet, List, Mapping, Optional, Sequence, Tuple, Union

from .backbone import BackboneError, BackboneModel, CandidateList, top_k_candidates
from .config import PipelineSettings
from .corpus import CategoryMap, Dataset, user_history
from .generator import GenerationError, GenerationJob, ScoreBackend, ScoreMap, rerank
from .promptgen import AuxContext, PromptError, build_prompt, scan_prompt_leakage
from .reporting import UnlearningListener, UnlearningRunResult, UserOutcome
from .retrieval import FilteredHistory, RetrievalError, Strategy, filter_unlearn, random_filter
from .retrieval.attention import attention_filter
from .retrieval.diversity import PerfMatrix, diversity_filter, retention_budget
from .retrieval.preference import preference_filter

log = logging.getLogger(__name__)

Pair = Tuple[int, int]


def trace(e: Exception) -> str:
    return str(e) + "\n\n" + traceback.format_exc()


def apply_strategy(history: FilteredHistory, candidates: CandidateList, settings: PipelineSettings,
                   categories: CategoryMap, model: BackboneModel,
                   perf_matrix: Optional[PerfMatrix] = None) -> FilteredHistory:
    """
    Run the configured retention strategy on an unlearned history.  An empty history (everything forgotten) is
    passed through untouched.

    :raises ValueError: if diversity filtering is configured without a performance matrix
    """
    if not history.kept or settings.strategy is Strategy.UNLEARN_ONLY:
        return history
    budget = settings.retained_budget
    seed = settings.user_seed(history.user_id)
    if settings.strategy is Strategy.NONE:
        return random_filter(history, budget, seed)
    if settings.strategy is Strategy.PREFERENCE:
        return preference_filter(history, categories, budget, seed)
    if settings.strategy is Strategy.DIVERSITY:
        if perf_matrix is None:
            raise ValueError("diversity filtering needs a performance matrix")
        k_prime = retention_budget(history, categories, budget, settings.grid_step)
        return diversity_filter(history, categories, perf_matrix, k_prime, seed)
    return attention_filter(history, candidates, model, settings.attention, budget)


# noinspection PyShadowingNames
class UnlearningOrchestrator:
    """
    Serves recommendation requests while forget requests are active, without touching the backbone.

    For each user: Retrieve the history from the store, drop the active forget pairs, take the backbone's top
    candidates outside the remaining history, apply the retention strategy, build the prompt, score it with the
    generation backend and re-rank.  Every prompt is scanned for forgotten items before it is reported.
    Progress is reported to registered `UnlearningListener`s.

    :param model: frozen backbone
    :param store: live interaction store that histories are retrieved from
    :param categories: item categories
    :param aux: item titles/years for prompts (the profile text is filled per user from `profiles`)
    :param backend: generation backend
    :param settings: strategy, budgets and seeds
    :param perf_matrix: performance matrix (required by the diversity strategy)
    :param profiles: optional user id → profile text
    :param parallelism: bound on users scored concurrently

    >>> orchestrator = UnlearningOrchestrator(model, store, categories, AuxContext(), IdentityMockBackend())
    ... result = orchestrator.run(users=[42], forget=frozenset({(42, 7)}))
    ... result.ranked[42]
    """

    def __init__(self, model: BackboneModel, store: Dataset, categories: CategoryMap, aux: AuxContext,
                 backend: ScoreBackend, settings: Optional[PipelineSettings] = None,
                 perf_matrix: Optional[PerfMatrix] = None, profiles: Optional[Mapping[int, str]] = None,
                 parallelism: int = 1) -> None:
        settings = settings or PipelineSettings()
        if settings.strategy is Strategy.DIVERSITY and perf_matrix is None:
            raise ValueError("diversity filtering needs a performance matrix")
        if parallelism < 1:
            raise ValueError("parallelism must be >= 1")
        self._model = model
        self._store = store
        self._categories = categories
        self._aux = aux
        self._backend = backend
        self._settings = settings
        self._perf_matrix = perf_matrix
        self._profiles = dict(profiles or {})
        self._parallelism = parallelism
        self._listeners: List[UnlearningListener] = []

    @property
    def settings(self) -> PipelineSettings:
        return self._settings

    def add_listener(self, listener: UnlearningListener) -> None:
        self._listeners.append(listener)

    def add_listeners(self, listeners: Sequence[UnlearningListener]) -> None:
        for listener in listeners:
            self.add_listener(listener)

    def prepare(self, user_id: int, forget: AbstractSet[Pair]) -> GenerationJob:
        """
        All steps up to (not including) generation for one user

        :raises UnknownUserError: if the backbone has no embedding for the user
        :raises RetrievalError: from the strategy filters
        """
        history = filter_unlearn(user_id, user_history(self._store, user_id), forget)
        candidates = top_k_candidates(self._model, user_id, self._settings.num_candidates,
                                      exclude=frozenset(history.item_ids))
        if not history.kept:
            log.info("user %d has no history left after unlearning; prompting without one", user_id)
        retained = apply_strategy(history, candidates, self._settings, self._categories, self._model,
                                  self._perf_matrix)
        prompt = build_prompt(candidates, retained, self._aux.for_user(self._profiles.get(user_id)))
        return GenerationJob(prompt, candidates, retained)

    def _forgotten_items(self, user_id: int, forget: AbstractSet[Pair]) -> FrozenSet[int]:
        return frozenset(item for user, item in forget if user == user_id)

    async def serve(self, users: Sequence[int], forget: AbstractSet[Pair] = frozenset(),
                    run_name: str = "unlearn") -> UnlearningRunResult:
        """
        Serve every user once, scoring up to `parallelism` users concurrently; outcomes are reported in ascending
        user order regardless of completion order

        :param users: users to serve (duplicates ignored)
        :param forget: active forget pairs
        :param run_name: name reported to listeners
        :return: collected outcomes of the run
        """
        result = UnlearningRunResult()
        listeners = [result] + self._listeners
        ordered = sorted(set(users))
        start = time.perf_counter()
        for listener in listeners:
            listener.run_started(run_name, len(ordered))

        jobs: Dict[int, GenerationJob] = {}
        for user_id in ordered:
            try:
                jobs[user_id] = self.prepare(user_id, forget)
            except (BackboneError, RetrievalError, PromptError, ValueError) as e:
                log.error("user %d could not be prepared: %s", user_id, e)
                for listener in listeners:
                    listener.user_failed(user_id, trace(e))

        semaphore = asyncio.Semaphore(self._parallelism)

        async def score(job: GenerationJob) -> Tuple[GenerationJob, Union[ScoreMap, GenerationError]]:
            async with semaphore:
                try:
                    return job, await self._backend.score(job)
                except GenerationError as e:
                    return job, e

        scored = await asyncio.gather(*(score(job) for job in jobs.values()))
        for job, scores in sorted(scored, key=lambda pair: pair[0].candidates.user_id):
            user_id = job.candidates.user_id
            try:
                if isinstance(scores, GenerationError):
                    raise scores
                ranked = rerank(job.candidates, scores)
            except GenerationError as e:
                log.error("user %d could not be scored: %s", user_id, e)
                for listener in listeners:
                    listener.user_failed(user_id, str(e))
                continue
            assert job.prompt is not None, "Internal error: prepared job without a prompt"
            leakage = scan_prompt_leakage(job.prompt, self._forgotten_items(user_id, forget), self._aux)
            if not leakage.clean:
                for listener in listeners:
                    listener.leakage_detected(leakage)
            outcome = UserOutcome(user_id=user_id, ranked=tuple(ranked), candidates=job.candidates,
                                  history=job.history, prompt=job.prompt, scores=scores, leakage=leakage)
            for listener in listeners:
                listener.user_completed(outcome)

        duration = time.perf_counter() - start
        for listener in listeners:
            listener.run_ended(duration)
        log.info("%s: served %d of %d users in %.2fs", run_name, len(result.outcomes), len(ordered), duration)
        return result

    def run(self, users: Sequence[int], forget: AbstractSet[Pair] = frozenset(),
            run_name: str = "unlearn") -> UnlearningRunResult:
        """
        Blocking form of `serve`, run on a fresh event loop; the backend is closed afterwards
        """
        async def run_and_close() -> UnlearningRunResult:
            try:
                return await self.serve(users, forget, run_name)
            finally:
                await self._backend.aclose()

        return asyncio.run(run_and_close())
