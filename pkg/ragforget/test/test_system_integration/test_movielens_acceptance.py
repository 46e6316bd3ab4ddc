"""
End-to-end runs over the MovieLens 100K archive.  Set RAGFORGET_ML100K to the unpacked ml-100k directory
(holding u.data, u.item and u.user) to enable them.
"""
import json
import os

import numpy as np
import pytest

from ragforget.backbone import BackboneModel
from ragforget.cli import EXIT_OK, deployed_data, main
from ragforget.corpus import SplitBundle, load_interactions, load_item_metadata
from ragforget.evaluation import backbone_rankings
from ragforget.retrieval import ForgetRequest, save_forget_requests

from .. import support

ML100K = os.environ.get(support.ML100K_ENV)

pytestmark = pytest.mark.skipif(not ML100K or not os.path.isdir(ML100K),
                                reason=f"{support.ML100K_ENV} does not name an ml-100k directory")

NUM_CANDIDATES = 20


@pytest.fixture(scope="module")
def workspace(tmp_path_factory) -> str:
    out = str(tmp_path_factory.mktemp("ml100k"))
    assert main(["prepare", "--ratings", os.path.join(ML100K, "u.data"), "--items", os.path.join(ML100K, "u.item"),
                 "--items-format", "movielens_item", "--users", os.path.join(ML100K, "u.user"),
                 "--forget", "0.10", "--seed", "7", "--dataset-name", "ml-100k", "--out", out, "-q"]) == EXIT_OK
    assert main(["train", "--out", out, "--seed", "7", "--epochs", "30", "-q"]) == EXIT_OK
    return out


def random_requests(bundle: SplitBundle, count: int, seed: int):
    store = deployed_data(bundle)
    rng = np.random.default_rng(seed)
    users = store.users
    requests = []
    for _ in range(count):
        user = users[int(rng.integers(len(users)))]
        if rng.random() < 0.2:
            requests.append(ForgetRequest(user, None))
            continue
        items = [i.item_id for i in store.of_user(user)]
        size = int(rng.integers(1, len(items) + 1))
        requests.append(ForgetRequest(user, frozenset(int(i) for i in rng.choice(items, size=size, replace=False))))
    return requests


class TestMovieLensAcceptance:

    def test_corpus_shape(self):
        data = load_interactions(os.path.join(ML100K, "u.data"), "tsv")
        assert len(data) == 100000
        metadata = load_item_metadata(os.path.join(ML100K, "u.item"), "movielens_item")
        assert len(metadata.categories.all_categories) == 19

    def test_forget_split_size(self, workspace):
        bundle = SplitBundle.load(os.path.join(workspace, "splits"))
        assert abs(len(bundle.forget) - 10000) <= 100
        assert len(bundle.forget) + len(bundle.remain) == 100000

    def test_identity_oracle(self, workspace):
        assert main(["recommend", "--out", workspace, "--backend", "mock-identity", "--candidates",
                     str(NUM_CANDIDATES), "-q"]) == EXIT_OK
        bundle = SplitBundle.load(os.path.join(workspace, "splits"))
        store = deployed_data(bundle)
        model = BackboneModel.load(os.path.join(workspace, "models", "bpr.ckpt"))
        with open(os.path.join(workspace, "recommend", "ranked.json")) as stream:
            ranked = {int(user): items for user, items in json.load(stream).items()}
        assert ranked == backbone_rankings(model, store, store.users, frozenset(), NUM_CANDIDATES)

    @pytest.mark.parametrize("strategy", ["unlearn_only", "none", "preference", "attention"])
    def test_no_forgotten_item_prompted(self, tmp_path, workspace, strategy):
        bundle = SplitBundle.load(os.path.join(workspace, "splits"))
        path = os.path.join(str(tmp_path), "requests.json")
        save_forget_requests(random_requests(bundle, 1000, seed=11), path)
        assert main(["unlearn", "--requests", path, "--out", workspace, "--strategy", strategy,
                     "--backend", "mock-similarity", "-q"]) == EXIT_OK
        with open(os.path.join(workspace, "unlearn", "leakage.json")) as stream:
            assert json.load(stream)["leaked_item_count"] == 0

    def test_unlearning_outpaces_retraining(self, workspace):
        checkpoint = os.path.join(workspace, "models", "bpr.ckpt")
        before = BackboneModel.load(checkpoint).checksum()
        assert main(["bench", "--out", workspace, "--mode", "both", "--backend", "mock-identity", "-q"]) == EXIT_OK
        with open(os.path.join(workspace, "bench", "timing.json")) as stream:
            reports = {report["method"]: report for report in json.load(stream)["reports"]}
        assert reports["cragru"]["wall_seconds"] * 10 <= reports["retrain"]["wall_seconds"]
        assert BackboneModel.load(checkpoint).checksum() == before
