import logging
import time

from abc import ABC, abstractmethod
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Dict, Iterator, Optional

import psutil

log = logging.getLogger(__name__)


class StopWatch(ABC):
    """
    Interface for marking start and end positions (for example, of an unlearning run)
    """

    @abstractmethod
    def mark_start(self, name: str) -> None:
        """
        mark start of some activity
        :param name:  name of activity
        """

    @abstractmethod
    def mark_end(self, name: str) -> None:
        """
        mark end of activity
        :param name: name of activity
        """


@dataclass(frozen=True)
class Lap:
    wall_seconds: float
    cpu_seconds: float
    "user + system CPU time of this process"


class WallClock(StopWatch):
    """
    Records wall-clock and process CPU time between matching mark_start/mark_end calls, per activity name
    """

    def __init__(self) -> None:
        self._process = psutil.Process()
        self._started: Dict[str, Lap] = {}
        self._laps: Dict[str, Lap] = {}

    def _now(self) -> Lap:
        cpu = self._process.cpu_times()
        return Lap(time.perf_counter(), cpu.user + cpu.system)

    def mark_start(self, name: str) -> None:
        self._started[name] = self._now()

    def mark_end(self, name: str) -> None:
        """
        :raises KeyError: if the activity was never started
        """
        start = self._started.pop(name)
        end = self._now()
        self._laps[name] = Lap(end.wall_seconds - start.wall_seconds, end.cpu_seconds - start.cpu_seconds)
        log.debug("%s took %.3fs wall, %.3fs cpu", name, self._laps[name].wall_seconds, self._laps[name].cpu_seconds)

    def lap(self, name: str) -> Optional[Lap]:
        """
        :return: the completed measurement of an activity, or None if it has not ended
        """
        return self._laps.get(name)

    @contextmanager
    def measure(self, name: str) -> Iterator["WallClock"]:
        self.mark_start(name)
        try:
            yield self
        finally:
            self.mark_end(name)
