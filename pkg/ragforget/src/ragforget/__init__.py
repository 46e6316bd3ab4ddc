"""
Retrieval-augmented recommendation unlearning.

A frozen collaborative-filtering backbone proposes candidates; a language-model re-ranker receives the user's
history only after forgotten interactions are filtered out and the rest is trimmed by a retention strategy.
Forgetting therefore happens at retrieval time and never touches the backbone.

>>> bundle = make_splits(load_interactions("u.data"), seed=7)
... store = bundle.train.union(bundle.forget)
... metadata = load_item_metadata("u.item")
... model = train_bpr(store, BackboneConfig())
... orchestrator = UnlearningOrchestrator(model, store, metadata.categories, AuxContext.from_metadata(metadata),
...                                       IdentityMockBackend())
... result = orchestrator.run([42], resolve_forget_pairs([ForgetRequest(42)], store))
"""
from .backbone import BackboneConfig, BackboneKind, BackboneModel, CandidateList, score, top_k_candidates, \
    train_backbone, train_bpr, train_lightgcn
from .config import PipelineSettings, RunConfig, derive_seed
from .corpus import CategoryMap, Dataset, Interaction, ItemMetadata, SplitBundle, load_interactions, \
    load_item_metadata, load_user_profiles, make_splits, user_history
from .generator import BackendKind, GenBackendConfig, IdentityMockBackend, ScoreMap, SimilarityMockBackend, \
    ChatCompletionBackend, generate_scores, parse_score_json, rerank
from .pipeline import UnlearningOrchestrator
from .promptgen import AuxContext, Prompt, build_prompt, scan_prompt_leakage
from .reporting import ArtifactWriter, UnlearningListener, UnlearningRunResult
from .retrieval import FilteredHistory, ForgetRequest, Strategy, filter_unlearn, load_forget_requests, \
    resolve_forget_pairs

__version__ = "1.0.0"

__all__ = [
    "BackboneConfig", "BackboneKind", "BackboneModel", "CandidateList", "score", "top_k_candidates",
    "train_backbone", "train_bpr", "train_lightgcn",
    "PipelineSettings", "RunConfig", "derive_seed",
    "CategoryMap", "Dataset", "Interaction", "ItemMetadata", "SplitBundle", "load_interactions",
    "load_item_metadata", "load_user_profiles", "make_splits", "user_history",
    "BackendKind", "GenBackendConfig", "IdentityMockBackend", "ScoreMap", "SimilarityMockBackend",
    "ChatCompletionBackend", "generate_scores", "parse_score_json", "rerank",
    "UnlearningOrchestrator",
    "AuxContext", "Prompt", "build_prompt", "scan_prompt_leakage",
    "ArtifactWriter", "UnlearningListener", "UnlearningRunResult",
    "FilteredHistory", "ForgetRequest", "Strategy", "filter_unlearn", "load_forget_requests", "resolve_forget_pairs",
]
