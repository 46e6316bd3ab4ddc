import math
import os

import pytest

from ragforget.corpus import Interaction
from ragforget.promptgen import (
    AuxContext,
    TEMPLATE_HISTORY_ONLY,
    TemplateKind,
    build_prompt,
    dump_prompt,
    render_history_line,
    scan_prompt_leakage,
)
from ragforget.retrieval import EmptyCandidatesError, FilteredHistory

from . import support

PROFILE = "The user is a 24-year-old male whose occupation is technician, zip code 85711"


class TestRendering:

    def test_history_line(self, aux):
        assert render_history_line(Interaction(1, 5, 3), aux) == '"Movie 5" (Action|Comedy, 1995) — rated 3/5'

    def test_history_line_without_metadata(self, aux):
        assert render_history_line(Interaction(1, 99, 2), aux) == '"item 99" — rated 2/5'


class TestBuildPrompt:

    def test_history_only_text(self, aux):
        prompt = build_prompt(support.candidate_list(1, [7]), support.history(1, [1]), aux)
        expected = TEMPLATE_HISTORY_ONLY.replace("{history_movies}", '"Movie 1" (Action, 1991) — rated 4/5') \
            .replace("{candidate_list}", '\n7: "Movie 7"')
        assert prompt.text == expected
        assert prompt.template_kind is TemplateKind.HISTORY_ONLY
        assert prompt.text.endswith('### Candidate List: \n7: "Movie 7"\n'
                                    'Predict and output the ratings in the required JSON format.')
        assert prompt.token_estimate == math.ceil(len(prompt.text) / 4)

    def test_profile_template(self, aux):
        prompt = build_prompt(support.candidate_list(1, [7, 9]), support.history(1, [1, 6]), aux.for_user(PROFILE + "."))
        assert prompt.template_kind is TemplateKind.WITH_PROFILE
        assert f"### User Profile:\n{PROFILE}.\n" in prompt.text
        assert 'records include:\n"Movie 1" (Action, 1991) — rated 4/5\n"Movie 6" (Drama, 1996) — rated 4/5\n' \
            in prompt.text
        assert prompt.candidate_section.strip().splitlines()[:2] == ['7: "Movie 7"', '9: "Movie 9"']

    def test_blank_profile_uses_history_template(self, aux):
        prompt = build_prompt(support.candidate_list(1, [7]), support.history(1, [1]), aux.for_user("   "))
        assert prompt.template_kind is TemplateKind.HISTORY_ONLY

    def test_history_in_timestamp_order(self, aux):
        history = FilteredHistory(1, (Interaction(1, 3, 5, 30), Interaction(1, 2, 4, 10), Interaction(1, 1, 4, 30)))
        prompt = build_prompt(support.candidate_list(1, [7]), history, aux)
        assert prompt.history_ids == (2, 1, 3)
        lines = [line for line in prompt.history_section.splitlines() if line.startswith('"')]
        assert [line.split('"')[1] for line in lines] == ["Movie 2", "Movie 1", "Movie 3"]

    def test_candidates_in_backbone_order(self, aux):
        prompt = build_prompt(support.candidate_list(1, [9, 2, 7]), support.history(1, [1]), aux)
        assert prompt.candidate_ids == (9, 2, 7)
        lines = prompt.candidate_section.strip().splitlines()[:-1]
        assert [line.split(":")[0] for line in lines] == ["9", "2", "7"]

    def test_empty_history(self, aux):
        prompt = build_prompt(support.candidate_list(1, [7]), support.history(1, []), aux)
        assert prompt.history_section.strip() == "The user's historical movie interaction records include:"
        assert prompt.history_ids == ()

    def test_no_candidates(self, aux):
        with pytest.raises(EmptyCandidatesError):
            build_prompt(support.candidate_list(1, []), support.history(1, [1]), aux)


class TestLeakageScan:

    def test_clean(self, aux):
        prompt = build_prompt(support.candidate_list(1, [2]), support.history(1, [1, 3]), aux)
        report = scan_prompt_leakage(prompt, {2}, aux)
        assert report.clean

    def test_leaked_item(self, aux):
        prompt = build_prompt(support.candidate_list(1, [7]), support.history(1, [1, 2]), aux)
        report = scan_prompt_leakage(prompt, {2}, aux)
        assert not report.clean
        assert report.leaked_ids == {2}
        assert report.leaked_titles == ("Movie 2",)

    def test_title_prefix_is_not_a_leak(self, aux):
        prompt = build_prompt(support.candidate_list(1, [7]), support.history(1, [1]), aux)
        assert scan_prompt_leakage(prompt, {10}, aux).clean

    def test_shared_title_skipped(self):
        aux = AuxContext(item_titles={1: "Heat", 2: "Heat"})
        prompt = build_prompt(support.candidate_list(1, [7]), support.history(1, [1]), aux)
        assert scan_prompt_leakage(prompt, {2}, aux).clean


class TestDumpPrompt:

    def test_dump(self, tmp_path, aux):
        prompt = build_prompt(support.candidate_list(4, [7]), support.history(4, [1]), aux)
        path = dump_prompt(prompt, os.path.join(str(tmp_path), "prompts"))
        assert os.path.basename(path) == "u4.prompt.txt"
        with open(path, encoding="utf-8") as stream:
            assert stream.read() == prompt.text
