import json
import os

import pytest

from ragforget.backbone import BackboneKind
from ragforget.config import PipelineSettings, RunConfig, SEED_MASK, derive_seed
from ragforget.generator import BackendKind
from ragforget.retrieval import Strategy


class TestDeriveSeed:

    def test_stable_and_independent(self):
        assert derive_seed(7, "split") == derive_seed(7, "split")
        assert derive_seed(7, "split") != derive_seed(7, "init")
        assert derive_seed(7, "split") != derive_seed(8, "split")
        assert 0 <= derive_seed(7, "split") <= SEED_MASK

    def test_nested_names(self):
        assert derive_seed(7, "sampling", 42) == derive_seed(7, "sampling/42")

    def test_user_seeds(self):
        settings = PipelineSettings(sampling_seed=3)
        assert settings.user_seed(1) == derive_seed(3, 1)
        assert settings.user_seed(1) != settings.user_seed(2)


class TestRunConfig:

    def test_defaults(self):
        config = RunConfig.load(None)
        assert config.strategy is Strategy.PREFERENCE
        assert config.backend is BackendKind.MOCK_IDENTITY
        assert config.all_ks == (1, 3, 5, 10, 20)
        assert config.resolved_perf_matrix_path == os.path.join("out", "perf_matrix.json")
        assert config.backbone_config().seed == derive_seed(0, "init")

    def test_load(self, tmp_path):
        path = os.path.join(str(tmp_path), "run.json")
        with open(path, "w") as out:
            json.dump({"backbone": "lightgcn", "strategy": "attention", "backend": "mock-similarity",
                       "eval_ks": [10], "seed": 5, "ratios": [0.8, 0.1, 0.1]}, out)
        config = RunConfig.load(path)
        assert config.backbone is BackboneKind.LIGHTGCN
        assert config.strategy is Strategy.ATTENTION
        assert config.backend is BackendKind.MOCK_SIMILARITY
        assert config.eval_ks == (10,)
        assert config.ratios == (0.8, 0.1, 0.1)
        assert config.split_seed == derive_seed(5, "split")

    def test_unknown_key(self):
        with pytest.raises(ValueError):
            RunConfig.from_mapping({"learning_rat": 0.1})

    def test_invalid_value(self):
        with pytest.raises(ValueError):
            RunConfig.from_mapping({"strategy": "greedy"})
        with pytest.raises(ValueError):
            RunConfig(jobs=0)
        with pytest.raises(ValueError):
            RunConfig(backend=BackendKind.REMOTE)

    @pytest.mark.parametrize("values", [{"embedding_dim": 32}, {"num_heads": 8}, {"model_dim": 128},
                                        {"embedding_dim": 48, "model_dim": 48}])
    def test_attention_heads_fit_embedding(self, values):
        with pytest.raises(ValueError):
            RunConfig.from_mapping(values)

    def test_attention_heads_follow_embedding(self):
        config = RunConfig(embedding_dim=32, num_heads=2, model_dim=32)
        assert config.attention_config().num_heads * config.key_dim == 32

    def test_not_an_object(self, tmp_path):
        path = os.path.join(str(tmp_path), "run.json")
        with open(path, "w") as out:
            out.write("[]")
        with pytest.raises(ValueError):
            RunConfig.load(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            RunConfig.load(os.path.join(str(tmp_path), "absent.json"))

    def test_overrides_skip_none(self):
        config = RunConfig(retained_budget=20).with_overrides(retained_budget=None, strategy="none", jobs=3)
        assert config.retained_budget == 20
        assert config.strategy is Strategy.NONE
        assert config.jobs == 3

    def test_digest_follows_content(self):
        assert RunConfig().digest() == RunConfig().digest()
        assert RunConfig().digest() != RunConfig(seed=1).digest()

    def test_pipeline_settings(self):
        settings = RunConfig(retained_budget=7, num_heads=2).pipeline_settings(Strategy.NONE, sampling_seed=4)
        assert settings.strategy is Strategy.NONE
        assert settings.retained_budget == 7
        assert settings.attention.num_heads == 2
        assert settings.sampling_seed == 4

    def test_check_paths(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            RunConfig(ratings_path=os.path.join(str(tmp_path), "u.data")).check_paths()
