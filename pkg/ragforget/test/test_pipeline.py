import json
import os
from typing import List

import pytest

from ragforget.backbone import top_k_candidates
from ragforget.config import PipelineSettings
from ragforget.generator import BackendUnreachableError, GenerationJob, IdentityMockBackend, ScoreBackend, \
    ScoreMap, SimilarityMockBackend
from ragforget.pipeline import UnlearningOrchestrator, apply_strategy
from ragforget.promptgen import LeakageReport
from ragforget.reporting import ArtifactWriter, UnlearningListener, UserOutcome
from ragforget.retrieval import ForgetRequest, Strategy, resolve_forget_pairs
from ragforget.retrieval.diversity import DEFAULT_GRID, PerfMatrix

from . import support


class RecordingListener(UnlearningListener):

    def __init__(self) -> None:
        self.events: List[str] = []

    def run_started(self, run_name: str, user_count: int) -> None:
        self.events.append(f"started {run_name} {user_count}")

    def user_completed(self, outcome: UserOutcome) -> None:
        self.events.append(f"completed {outcome.user_id}")

    def user_failed(self, user_id: int, error_message: str) -> None:
        self.events.append(f"failed {user_id}")

    def leakage_detected(self, report: LeakageReport) -> None:
        self.events.append(f"leak {report.user_id}")

    def run_ended(self, duration: float = -1.0) -> None:
        self.events.append("ended")


class FailingBackend(ScoreBackend):

    def __init__(self, failing_user: int) -> None:
        self._failing_user = failing_user

    async def score(self, job: GenerationJob) -> ScoreMap:
        if job.candidates.user_id == self._failing_user:
            raise BackendUnreachableError("endpoint down")
        return await IdentityMockBackend().score(job)


@pytest.fixture()
def settings() -> PipelineSettings:
    return PipelineSettings(strategy=Strategy.PREFERENCE, retained_budget=3, num_candidates=4, sampling_seed=11)


@pytest.fixture()
def orchestrator(model, store, category_map, aux, settings) -> UnlearningOrchestrator:
    return UnlearningOrchestrator(model, store, category_map, aux, IdentityMockBackend(), settings)


class TestApplyStrategy:

    @pytest.mark.parametrize("strategy", list(Strategy))
    def test_every_strategy_respects_budget(self, strategy, model, category_map):
        history = support.history(1, [1, 2, 3, 4, 5, 6])
        candidates = top_k_candidates(model, 1, 4, exclude=frozenset(history.item_ids))
        matrix = PerfMatrix(DEFAULT_GRID, category_map.all_categories,
                            tuple(tuple(p / 100 for p in DEFAULT_GRID) for _ in category_map.all_categories))
        settings = PipelineSettings(strategy=strategy, retained_budget=3, num_candidates=4)
        kept = apply_strategy(history, candidates, settings, category_map, model, matrix)
        assert set(kept.item_ids) <= set(history.item_ids)
        if strategy is Strategy.UNLEARN_ONLY:
            assert kept == history
        elif strategy is not Strategy.DIVERSITY:
            assert len(kept) == 3
            assert kept.strategy is strategy

    def test_empty_history_passes_through(self, model, category_map):
        history = support.history(1, [])
        candidates = support.candidate_list(1, [7])
        assert apply_strategy(history, candidates, PipelineSettings(), category_map, model) is history

    def test_diversity_needs_matrix(self, model, category_map):
        with pytest.raises(ValueError):
            apply_strategy(support.history(1, [1]), support.candidate_list(1, [7]),
                           PipelineSettings(strategy=Strategy.DIVERSITY), category_map, model)


class TestUnlearningOrchestrator:

    def test_identity_oracle_reproduces_backbone(self, orchestrator, model):
        result = orchestrator.run([1, 2, 3])
        assert result.is_complete
        assert not result.failures
        for user_id, outcome in result.outcomes.items():
            assert list(outcome.ranked) == list(outcome.candidates.items)
            assert len(outcome.ranked) == 4

    def test_forgotten_items_never_prompted(self, orchestrator, store):
        forget = frozenset({(1, 2), (1, 5), (2, 7)})
        result = orchestrator.run([1, 2], forget)
        assert result.leaked_item_count == 0
        assert not result.leaks
        assert not {2, 5} & set(result.outcomes[1].prompt.history_ids)
        assert 7 not in result.outcomes[2].prompt.history_ids
        assert '"Movie 7"' not in result.outcomes[2].prompt.history_section

    def test_forget_all(self, orchestrator, store):
        forget = resolve_forget_pairs([ForgetRequest(3, None)], store)
        outcome = orchestrator.run([3], forget).outcomes[3]
        assert outcome.prompt.history_ids == ()
        assert len(outcome.history) == 0
        assert len(outcome.ranked) == 4

    def test_backbone_untouched(self, orchestrator, model):
        before = model.checksum()
        orchestrator.run([1, 2, 3], frozenset({(1, 1)}))
        assert model.checksum() == before

    def test_deterministic(self, model, store, category_map, aux, settings):
        def ranked():
            backend = SimilarityMockBackend(model)
            return UnlearningOrchestrator(model, store, category_map, aux, backend, settings, parallelism=2) \
                .run([1, 2, 3], frozenset({(1, 4)})).ranked

        assert ranked() == ranked()

    def test_unknown_user_fails_alone(self, orchestrator):
        listener = RecordingListener()
        orchestrator.add_listener(listener)
        result = orchestrator.run([3, 42, 1], run_name="mixed")
        assert sorted(result.outcomes) == [1, 3]
        assert list(result.failures) == [42]
        assert listener.events == ["started mixed 3", "failed 42", "completed 1", "completed 3", "ended"]

    def test_backend_failure_reported(self, model, store, category_map, aux, settings):
        orchestrator = UnlearningOrchestrator(model, store, category_map, aux, FailingBackend(2), settings)
        result = orchestrator.run([1, 2])
        assert sorted(result.outcomes) == [1]
        assert "endpoint down" in result.failures[2]

    def test_profiles_select_template(self, model, store, category_map, aux, settings):
        orchestrator = UnlearningOrchestrator(model, store, category_map, aux, IdentityMockBackend(), settings,
                                              profiles={1: "The user is a 24-year-old male"})
        result = orchestrator.run([1, 2])
        assert "### User Profile:" in result.outcomes[1].prompt.text
        assert "### User Profile:" not in result.outcomes[2].prompt.text

    def test_diversity_requires_matrix(self, model, store, category_map, aux):
        with pytest.raises(ValueError):
            UnlearningOrchestrator(model, store, category_map, aux, IdentityMockBackend(),
                                   PipelineSettings(strategy=Strategy.DIVERSITY))

    def test_artifacts(self, tmp_path, orchestrator):
        directory = os.path.join(str(tmp_path), "unlearn")
        orchestrator.add_listeners([ArtifactWriter(directory)])
        result = orchestrator.run([2, 1], frozenset({(1, 2)}))
        with open(os.path.join(directory, "ranked.json")) as stream:
            assert json.load(stream) == {str(user): ranked for user, ranked in result.ranked.items()}
        with open(os.path.join(directory, "leakage.json")) as stream:
            assert json.load(stream) == {"prompts_scanned": 2, "leaked_item_count": 0, "reports": []}
        assert sorted(os.listdir(os.path.join(directory, "prompts"))) == ["u1.prompt.txt", "u2.prompt.txt"]
        assert not os.path.exists(os.path.join(directory, "failures.json"))
