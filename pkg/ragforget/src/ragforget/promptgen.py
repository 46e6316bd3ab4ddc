"""
Prompt construction: fills the recommendation templates with the candidate list, the filtered history and
auxiliary item/user context
"""
import logging
import math
import os
import re

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import AbstractSet, FrozenSet, List, Mapping, Optional, Tuple

from .backbone import CandidateList
from .corpus import Interaction, ItemMetadata, UNKNOWN_CATEGORY
from .retrieval import EmptyCandidatesError, FilteredHistory

log = logging.getLogger(__name__)

__all__ = [
    "AuxContext", "Prompt", "TemplateKind", "LeakageReport", "PromptError", "LeakageDetectedError",
    "TEMPLATE_WITH_PROFILE", "TEMPLATE_HISTORY_ONLY",
    "build_prompt", "render_history_line", "render_candidate_line", "scan_prompt_leakage", "dump_prompt",
]

TEMPLATE_WITH_PROFILE = "\n".join([
    "I want you to predict the user‘s rating for each movie in the candidate list on a scale from 1 to 100, "
    "based on the user’s profile and movie interaction history. Follow these instructions carefully:",
    "1. Use the given user profile and historical movie interaction records to predict how much the user would "
    "like each movie in the candidate list. The higher the score, the more likely the user will enjoy the movie.",
    "2. The output must be in valid JSON format, where each movie ID is paired with its predicted score.  "
    "The format should be:",
    '{ "movie_id1": score1, ',
    '"movie_id2" : score2,',
    "...}",
    "3. Ensure that all movie IDs in the candidate list are included exactly once in the output.",
    "4. Do not include any additional text, explanation, or comments outside the JSON object.",
    "### User Profile:",
    "{user_profile_text}.",
    "### Movie Interaction History:",
    "The user's historical movie interaction records include:{history_movies}",
    "### Candidate List:",
    "{candidate_list}",
    "Predict and output the ratings in the required JSON format.",
])

TEMPLATE_HISTORY_ONLY = "\n".join([
    "I want you to predict the user‘s rating for each movie in the candidate list on a scale from 1 to 100,  "
    "based on the user’s interaction history. Follow these instructions carefully:",
    "1. Use the given user‘s historical movie interaction records to predict how much the user would like "
    "each movie in the candidate list. The higher the score, the more likely the user will enjoy the movie.",
    "2. The output must be in valid JSON format, where each movie ID is paired with its predicted score. ",
    "The format should be:",
    '{ "movie_id1" : score1,',
    '  "movie_id2" : score2,',
    "...}",
    "3. Ensure that all movie IDs in the candidate list are included exactly once in the output.",
    "4. Do not include any additional text, explanation, or comments outside the JSON object.",
    "### Movie Interaction History:",
    "The user's historical movie interaction records include:",
    "{history_movies}",
    "### Candidate List: {candidate_list}",
    "Predict and output the ratings in the required JSON format.",
])

HISTORY_HEADER = "### Movie Interaction History:"
CANDIDATE_HEADER = "### Candidate List:"
_PLACEHOLDER = re.compile(r"\{(user_profile_text|history_movies|candidate_list)\}")
_CHARS_PER_TOKEN = 4


class PromptError(Exception):
    """Base class for prompt errors"""


class LeakageDetectedError(PromptError):

    def __init__(self, user_id: int, item_ids: AbstractSet[int]) -> None:
        super().__init__(f"forgotten items {sorted(item_ids)} of user {user_id} appear in the prompt history")
        self._user_id = user_id
        self._item_ids = frozenset(item_ids)

    @property
    def user_id(self) -> int:
        return self._user_id

    @property
    def item_ids(self) -> FrozenSet[int]:
        return self._item_ids


class TemplateKind(Enum):
    WITH_PROFILE = "with_profile"
    HISTORY_ONLY = "history_only"

    def __repr__(self) -> str:
        return self.value


@dataclass(frozen=True)
class AuxContext:
    """
    Auxiliary prompt information: an optional user profile plus item titles, categories and years
    """
    user_profile_text: Optional[str] = None
    item_titles: Mapping[int, str] = field(default_factory=dict)
    item_categories: Mapping[int, FrozenSet[str]] = field(default_factory=dict)
    item_year: Mapping[int, Optional[int]] = field(default_factory=dict)

    @classmethod
    def from_metadata(cls, metadata: ItemMetadata, user_profile_text: Optional[str] = None) -> "AuxContext":
        return cls(user_profile_text, metadata.titles, metadata.categories.item_to_categories, metadata.years)

    def for_user(self, user_profile_text: Optional[str]) -> "AuxContext":
        return replace(self, user_profile_text=user_profile_text)

    def title_of(self, item_id: int) -> str:
        return self.item_titles.get(item_id) or f"item {item_id}"


@dataclass(frozen=True)
class Prompt:
    user_id: int
    text: str
    candidate_ids: Tuple[int, ...]
    template_kind: TemplateKind
    token_estimate: int
    "⌈len(text) / 4⌉"
    history_ids: Tuple[int, ...] = ()
    "items rendered in the history section"

    @property
    def history_section(self) -> str:
        start = self.text.index(HISTORY_HEADER) + len(HISTORY_HEADER)
        return self.text[start:self.text.index(CANDIDATE_HEADER, start)]

    @property
    def candidate_section(self) -> str:
        return self.text[self.text.index(CANDIDATE_HEADER) + len(CANDIDATE_HEADER):]


@dataclass(frozen=True)
class LeakageReport:
    user_id: int
    leaked_ids: FrozenSet[int] = frozenset()
    "forgotten items rendered in the history section"
    leaked_titles: Tuple[str, ...] = ()
    "titles of forgotten items found in the history text"

    @property
    def clean(self) -> bool:
        return not self.leaked_ids and not self.leaked_titles


def render_history_line(interaction: Interaction, aux: AuxContext) -> str:
    """
    `"<title>" (<categories>, <year>) — rated <rating>/5`; absent categories or year are left out
    """
    item_id = interaction.item_id
    labels = sorted(c for c in aux.item_categories.get(item_id, ()) if c != UNKNOWN_CATEGORY)
    year = aux.item_year.get(item_id)
    details = []
    if labels:
        details.append("|".join(labels))
    if year is not None:
        details.append(str(year))
    suffix = f" ({', '.join(details)})" if details else ""
    return f'"{aux.title_of(item_id)}"{suffix} — rated {interaction.rating}/5'


def render_candidate_line(item_id: int, aux: AuxContext) -> str:
    return f'{item_id}: "{aux.title_of(item_id)}"'


def build_prompt(candidates: CandidateList, history: FilteredHistory, aux: AuxContext) -> Prompt:
    """
    Render candidates and retained history into the profile template when a profile text is present, the history-only
    template otherwise.  History lines follow timestamp order, candidate lines follow backbone order.

    :raises EmptyCandidatesError: if there are no candidates
    """
    if not candidates.items:
        raise EmptyCandidatesError(candidates.user_id)
    ordered = sorted(history.kept, key=lambda i: (i.timestamp, i.item_id))
    profile = (aux.user_profile_text or "").strip().rstrip(".")
    kind = TemplateKind.WITH_PROFILE if profile else TemplateKind.HISTORY_ONLY
    template = TEMPLATE_WITH_PROFILE if kind is TemplateKind.WITH_PROFILE else TEMPLATE_HISTORY_ONLY
    values = {
        "user_profile_text": profile,
        "history_movies": "\n".join(render_history_line(i, aux) for i in ordered),
        "candidate_list": "\n".join(render_candidate_line(i, aux) for i in candidates.items),
    }

    def substitute(match: "re.Match[str]") -> str:
        value = values[match.group(1)]
        # list placeholders always start on a line of their own
        if match.group(1) != "user_profile_text" and value and template[match.start() - 1] != "\n":
            return "\n" + value
        return value

    text = _PLACEHOLDER.sub(substitute, template)
    return Prompt(user_id=candidates.user_id, text=text, candidate_ids=candidates.items, template_kind=kind,
                  token_estimate=math.ceil(len(text) / _CHARS_PER_TOKEN),
                  history_ids=tuple(i.item_id for i in ordered))


def scan_prompt_leakage(prompt: Prompt, forgotten: AbstractSet[int], aux: AuxContext) -> LeakageReport:
    """
    Check a prompt's history section for forgotten items: by the ids it was rendered from, and by a scan of the
    text for the quoted titles of forgotten items (titles shared with a retained item are skipped)
    """
    leaked_ids = frozenset(prompt.history_ids) & frozenset(forgotten)
    section = prompt.history_section
    kept_titles = {aux.title_of(i) for i in prompt.history_ids if i not in forgotten}
    leaked_titles: List[str] = []
    for item_id in sorted(forgotten):
        title = aux.title_of(item_id)
        if title not in kept_titles and f'"{title}"' in section:
            leaked_titles.append(title)
    report = LeakageReport(prompt.user_id, leaked_ids, tuple(leaked_titles))
    if not report.clean:
        log.error("prompt of user %d leaks forgotten items %s %s", prompt.user_id, sorted(leaked_ids), leaked_titles)
    return report


def dump_prompt(prompt: Prompt, directory: str) -> str:
    """
    :return: path of the written `u<user_id>.prompt.txt`
    """
    os.makedirs(directory, exist_ok=True)
    path = os.path.join(directory, f"u{prompt.user_id}.prompt.txt")
    with open(path, "w", encoding="utf-8", newline="\n") as out:
        out.write(prompt.text)
    return path
