import time

import pytest

from ragforget.timing import WallClock


class TestWallClock(object):

    def test_mark_start_end(self):
        clock = WallClock()
        clock.mark_start("task")
        time.sleep(0.05)
        clock.mark_end("task")
        lap = clock.lap("task")
        assert lap is not None
        assert lap.wall_seconds >= 0.04
        assert lap.cpu_seconds >= 0.0

    def test_end_without_start(self):
        with pytest.raises(KeyError):
            WallClock().mark_end("task")

    def test_measure(self):
        clock = WallClock()
        assert clock.lap("busy") is None
        with clock.measure("busy"):
            sum(i * i for i in range(100000))
        assert clock.lap("busy").wall_seconds > 0.0

    def test_measure_records_on_error(self):
        clock = WallClock()
        with pytest.raises(RuntimeError):
            with clock.measure("task"):
                raise RuntimeError("boom")
        assert clock.lap("task") is not None
