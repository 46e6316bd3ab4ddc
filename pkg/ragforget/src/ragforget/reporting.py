import csv
import datetime
import json
import logging
import os

from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

from .backbone import CandidateList
from .generator import ScoreMap
from .promptgen import LeakageReport, Prompt, dump_prompt
from .retrieval import FilteredHistory

log = logging.getLogger(__name__)

RANKED_FILE = "ranked.json"
LEAKAGE_FILE = "leakage.json"
FAILURES_FILE = "failures.json"
PROMPT_DIR = "prompts"


@dataclass(frozen=True)
class UserOutcome:
    """
    Everything the pipeline produced for one user
    """
    user_id: int
    ranked: Tuple[int, ...]
    "re-ranked candidate list, best first"
    candidates: CandidateList
    history: FilteredHistory
    "the history the prompt was built from"
    prompt: Prompt
    scores: ScoreMap
    leakage: LeakageReport


class UnlearningListener(ABC):
    """
    Abstraction for reporting the progress of an unlearning run

    Clients implement this to receive per-user outcomes as they are produced.
    """

    @abstractmethod
    def run_started(self, run_name: str, user_count: int) -> None:
        """
        signals a run has started
        :param run_name: name of the run
        :param user_count: number of users the run will serve
        """

    @abstractmethod
    def user_completed(self, outcome: UserOutcome) -> None:
        """
        signals a user received a re-ranked recommendation list
        :param outcome: the user's pipeline outputs
        """

    @abstractmethod
    def user_failed(self, user_id: int, error_message: str) -> None:
        """
        signals a user could not be served
        :param user_id: the user
        :param error_message: description of the failure
        """

    @abstractmethod
    def leakage_detected(self, report: LeakageReport) -> None:
        """
        signals a prompt carried forgotten items in its history section
        :param report: what leaked
        """

    @abstractmethod
    def run_ended(self, duration: float = -1.0) -> None:
        """
        signals the run has ended
        :param duration: elapsed seconds, or -1.0 if unknown
        """


class UnlearningRunResult(UnlearningListener):
    """
    Result of a whole unlearning run: collects outcomes, failures and leakage reports keyed by user
    """

    def __init__(self) -> None:
        self.run_name: str = "not started"
        self.expected_users: int = 0
        self.duration: float = 0.0
        self.start_time: Optional[datetime.datetime] = None
        self.end_time: Optional[datetime.datetime] = None
        self.outcomes: Dict[int, UserOutcome] = {}
        self.failures: Dict[int, str] = {}
        self.leaks: List[LeakageReport] = []

    @property
    def is_complete(self) -> bool:
        """:return: True iff run_ended has been called"""
        return self.end_time is not None

    @property
    def ranked(self) -> Dict[int, List[int]]:
        """:return: user id → re-ranked list, users ascending"""
        return {user_id: list(self.outcomes[user_id].ranked) for user_id in sorted(self.outcomes)}

    @property
    def leaked_item_count(self) -> int:
        return sum(len(report.leaked_ids) + len(report.leaked_titles) for report in self.leaks)

    def run_started(self, run_name: str, user_count: int) -> None:
        self.run_name = run_name
        self.expected_users = user_count
        self.start_time = datetime.datetime.utcnow()
        self.end_time = None

    def user_completed(self, outcome: UserOutcome) -> None:
        self.outcomes[outcome.user_id] = outcome

    def user_failed(self, user_id: int, error_message: str) -> None:
        self.failures[user_id] = error_message

    def leakage_detected(self, report: LeakageReport) -> None:
        self.leaks.append(report)

    def run_ended(self, duration: float = -1.0) -> None:
        if self.start_time is None:
            raise Exception("run_ended called before calling run_started")
        self.end_time = datetime.datetime.utcnow()
        self.duration = duration if duration != -1.0 else (self.end_time - self.start_time).total_seconds()

    def __repr__(self) -> str:
        return f"{self.__class__.__name__}(run={self.run_name}, served={len(self.outcomes)}, " \
               f"failed={len(self.failures)}, leaks={len(self.leaks)})"


class ArtifactWriter(UnlearningListener):
    """
    Writes the audit trail of a run under `directory`: one prompt dump per served user (`prompts/`), the ranked
    lists (`ranked.json`), the leakage scan (`leakage.json`) and failures (`failures.json`, only when any)

    :param directory: output directory, created if needed
    """

    def __init__(self, directory: str) -> None:
        self._directory = directory
        self._ranked: Dict[int, List[int]] = {}
        self._scanned = 0
        self._leaks: List[LeakageReport] = []
        self._failures: Dict[int, str] = {}

    @property
    def directory(self) -> str:
        return self._directory

    def run_started(self, run_name: str, user_count: int) -> None:
        os.makedirs(os.path.join(self._directory, PROMPT_DIR), exist_ok=True)
        self._ranked.clear()
        self._leaks.clear()
        self._failures.clear()
        self._scanned = 0

    def user_completed(self, outcome: UserOutcome) -> None:
        dump_prompt(outcome.prompt, os.path.join(self._directory, PROMPT_DIR))
        self._ranked[outcome.user_id] = list(outcome.ranked)
        self._scanned += 1

    def user_failed(self, user_id: int, error_message: str) -> None:
        self._failures[user_id] = error_message

    def leakage_detected(self, report: LeakageReport) -> None:
        self._leaks.append(report)

    def run_ended(self, duration: float = -1.0) -> None:
        write_json(os.path.join(self._directory, RANKED_FILE),
                   {str(user_id): ranked for user_id, ranked in sorted(self._ranked.items())})
        write_json(os.path.join(self._directory, LEAKAGE_FILE), {
            "prompts_scanned": self._scanned,
            "leaked_item_count": sum(len(r.leaked_ids) + len(r.leaked_titles) for r in self._leaks),
            "reports": [{"user": r.user_id, "items": sorted(r.leaked_ids), "titles": list(r.leaked_titles)}
                        for r in sorted(self._leaks, key=lambda r: r.user_id)],
        })
        if self._failures:
            write_json(os.path.join(self._directory, FAILURES_FILE),
                       {str(user_id): message for user_id, message in sorted(self._failures.items())})
        log.info("Wrote %d ranked lists to %s", len(self._ranked), self._directory)


def write_json(path: str, content: Any) -> None:
    """
    Write content as indented JSON with sorted keys, so identical content gives identical bytes
    """
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as out:
        json.dump(content, out, indent=2, sort_keys=True)
        out.write("\n")


def write_csv(path: str, header: Sequence[str], rows: Sequence[Sequence[Any]]) -> None:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as out:
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def format_cell(value: Any) -> str:
    if value is None:
        return "-"
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


def format_table(header: Sequence[str], rows: Sequence[Sequence[Any]]) -> str:
    """
    :return: aligned plain-text table, numbers right-aligned, floats to 4 decimals
    """
    cells = [[format_cell(v) for v in row] for row in rows]
    widths = [max([len(h)] + [len(row[c]) for row in cells]) for c, h in enumerate(header)]
    numeric = [all(isinstance(row[c], (int, float)) or row[c] is None for row in rows) and bool(rows)
               for c in range(len(header))]

    def line(values: Sequence[str]) -> str:
        return "  ".join(v.rjust(w) if num else v.ljust(w) for v, w, num in zip(values, widths, numeric)).rstrip()

    rule = "  ".join("-" * w for w in widths)
    return "\n".join([line(list(header)), rule] + [line(row) for row in cells]) + "\n"
