import json
import os

import pytest

from ragforget.cli import EXIT_ERROR, EXIT_OK, build_parser, load_config, main, perf_grid
from ragforget.generator import BackendKind
from ragforget.retrieval import Strategy

from . import support


@pytest.fixture()
def sources(tmp_path):
    directory = str(tmp_path)
    data = support.two_cluster_dataset(users_per_cluster=10, items_per_cluster=15, per_user=14, seed=3)
    ratings = support.write_lines(os.path.join(directory, "ratings.tsv"),
                                  [f"{i.user_id}\t{i.item_id}\t{i.rating}\t{i.timestamp}" for i in data])
    genres = ["Action", "Comedy", "Drama", "Horror"]
    items = support.write_lines(os.path.join(directory, "items.tsv"),
                                ["item_id\ttitle\tgenres"]
                                + [f"{item}\tMovie {item} ({1980 + item})\t{genres[item % 4]}" for item in range(1, 31)])
    return ratings, items


@pytest.fixture()
def workspace(tmp_path, sources):
    """prepared splits and a trained backbone under <tmp>/out"""
    ratings, items = sources
    out = os.path.join(str(tmp_path), "out")
    assert main(["prepare", "--ratings", ratings, "--items", items, "--items-format", "genre_tsv", "--out", out,
                 "--seed", "1", "-q"]) == EXIT_OK
    assert main(["train", "--out", out, "--epochs", "3", "--dim", "64", "-q"]) == EXIT_OK
    return out


def requests_file(tmp_path, content) -> str:
    return support.write_lines(os.path.join(str(tmp_path), "requests.json"), [json.dumps(content)])


class TestParser:

    def test_flags_override_config(self, tmp_path):
        path = os.path.join(str(tmp_path), "run.json")
        with open(path, "w") as out:
            json.dump({"retained_budget": 20, "strategy": "attention", "seed": 4}, out)
        args = build_parser().parse_args(["unlearn", "--requests", "r.json", "--config", path, "--budget", "5",
                                          "--backend", "mock-similarity"])
        config = load_config(args)
        assert config.retained_budget == 5
        assert config.strategy is Strategy.ATTENTION
        assert config.backend is BackendKind.MOCK_SIMILARITY
        assert config.seed == 4

    def test_command_required(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args([])

    def test_verbosity_exclusive(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args(["train", "-v", "-q"])

    def test_perf_grid(self):
        assert perf_grid(30) == [0, 30, 60, 90, 100]


class TestCommands:

    def test_prepare_writes_splits(self, workspace):
        splits = os.path.join(workspace, "splits")
        assert sorted(os.listdir(splits)) == ["forget.tsv", "manifest.json", "sources.json", "test.tsv", "train.tsv",
                                              "val.tsv"]
        assert os.path.isfile(os.path.join(workspace, "models", "bpr.ckpt"))

    def test_prepare_requires_ratings(self, tmp_path):
        assert main(["prepare", "--out", str(tmp_path), "-q"]) == EXIT_ERROR

    def test_recommend_before_train(self, tmp_path, sources):
        ratings, _ = sources
        out = os.path.join(str(tmp_path), "fresh")
        assert main(["prepare", "--ratings", ratings, "--out", out, "-q"]) == EXIT_OK
        assert main(["recommend", "--out", out, "-q"]) == EXIT_ERROR

    def test_unlearn(self, tmp_path, workspace):
        path = requests_file(tmp_path, [{"user": 1, "items": "ALL"}, {"user": 12, "items": [16, 17, 18]}])
        assert main(["unlearn", "--requests", path, "--out", workspace, "--budget", "3", "--candidates", "5",
                     "-q"]) == EXIT_OK
        with open(os.path.join(workspace, "unlearn", "ranked.json")) as stream:
            ranked = json.load(stream)
        assert sorted(ranked) == ["1", "12"]
        assert all(len(items) == 5 for items in ranked.values())
        with open(os.path.join(workspace, "unlearn", "leakage.json")) as stream:
            assert json.load(stream)["leaked_item_count"] == 0
        with open(os.path.join(workspace, "unlearn", "prompts", "u1.prompt.txt"), encoding="utf-8") as stream:
            assert "rated" not in stream.read()

    def test_empty_request_list(self, tmp_path, workspace):
        assert main(["unlearn", "--requests", requests_file(tmp_path, []), "--out", workspace, "-q"]) == EXIT_OK
        assert not os.path.exists(os.path.join(workspace, "unlearn"))

    def test_malformed_requests(self, tmp_path, workspace):
        path = requests_file(tmp_path, {"user": 1})
        assert main(["unlearn", "--requests", path, "--out", workspace, "-q"]) == EXIT_ERROR

    def test_diversity_needs_perf_matrix(self, tmp_path, workspace):
        path = requests_file(tmp_path, [{"user": 1, "items": "ALL"}])
        assert main(["unlearn", "--requests", path, "--out", workspace, "--strategy", "diversity",
                     "-q"]) == EXIT_ERROR
        assert main(["perf-matrix", "--out", workspace, "--grid-step", "50", "--candidates", "5", "-q"]) == EXIT_OK
        assert os.path.isfile(os.path.join(workspace, "perf_matrix.json"))
        path = requests_file(tmp_path, [{"user": 2, "items": [1, 2]}])
        assert main(["unlearn", "--requests", path, "--out", workspace, "--strategy", "diversity",
                     "--grid-step", "50", "--budget", "3", "--candidates", "5", "-q"]) == EXIT_OK

    def test_eval_reports(self, workspace):
        assert main(["eval", "--out", workspace, "--candidates", "10", "--emit-csv", "-q"]) == EXIT_OK
        reports = os.path.join(workspace, "reports")
        with open(os.path.join(reports, "metrics_remain.json")) as stream:
            remain = json.load(stream)
        assert sorted(remain["metrics"], key=int) == ["1", "3", "5", "10", "20"]
        assert os.path.isfile(os.path.join(reports, "comparison.txt"))
        with open(os.path.join(reports, "metrics.csv")) as stream:
            assert stream.readline().strip() == "method,dataset,backbone,metric,k,value"

    def test_bench(self, workspace):
        assert main(["bench", "--out", workspace, "--mode", "cragru", "--user", "3", "--with-metrics",
                     "--candidates", "5", "-q"]) == EXIT_OK
        with open(os.path.join(workspace, "bench", "timing.json")) as stream:
            timing = json.load(stream)
        assert timing["user"] == 3
        assert [report["method"] for report in timing["reports"]] == ["cragru"]
        assert timing["reports"][0]["backbone_retrained"] is False
        assert os.path.isfile(os.path.join(workspace, "bench", "metrics.csv"))
