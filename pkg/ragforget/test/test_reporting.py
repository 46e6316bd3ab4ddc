import os

import pytest

from ragforget.promptgen import LeakageReport
from ragforget.reporting import ArtifactWriter, UnlearningRunResult, format_table, write_csv, write_json


class TestFormatTable:

    def test_alignment(self):
        text = format_table(("metric", "k", "value"), [("hr", 5, 0.25), ("ndcg", 10, None)])
        assert text == ("metric   k   value\n"
                        "------  --  ------\n"
                        "hr       5  0.2500\n"
                        "ndcg    10       -\n")

    def test_header_only(self):
        assert format_table(("a", "bb"), []) == "a  bb\n-  --\n"


class TestWriters:

    def test_json_is_byte_stable(self, tmp_path):
        first = os.path.join(str(tmp_path), "a", "out.json")
        second = os.path.join(str(tmp_path), "b", "out.json")
        write_json(first, {"b": [1, 2], "a": {"y": 1, "x": 2}})
        write_json(second, {"a": {"x": 2, "y": 1}, "b": [1, 2]})
        with open(first, "rb") as left, open(second, "rb") as right:
            assert left.read() == right.read()

    def test_csv(self, tmp_path):
        path = os.path.join(str(tmp_path), "metrics.csv")
        write_csv(path, ("method", "k"), [("cragru", 5)])
        with open(path) as stream:
            assert stream.read() == "method,k\ncragru,5\n"


class TestUnlearningRunResult:

    def test_lifecycle(self):
        result = UnlearningRunResult()
        assert not result.is_complete
        result.run_started("run", 2)
        result.user_failed(4, "boom")
        result.leakage_detected(LeakageReport(3, frozenset({7}), ("Movie 7",)))
        result.run_ended(1.5)
        assert result.is_complete
        assert result.duration == 1.5
        assert result.failures == {4: "boom"}
        assert result.leaked_item_count == 2
        assert result.ranked == {}

    def test_end_before_start(self):
        with pytest.raises(Exception):
            UnlearningRunResult().run_ended()


class TestArtifactWriter:

    def test_failures_and_leaks_written(self, tmp_path):
        writer = ArtifactWriter(str(tmp_path))
        writer.run_started("run", 2)
        writer.user_failed(9, "no embedding")
        writer.leakage_detected(LeakageReport(3, frozenset({7}), ()))
        writer.run_ended()
        assert os.path.isfile(os.path.join(str(tmp_path), "failures.json"))
        with open(os.path.join(str(tmp_path), "leakage.json")) as stream:
            assert '"leaked_item_count": 1' in stream.read()
