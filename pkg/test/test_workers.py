import threading
import time
from unittest import TestCase

from spacedecode.workers import run_jobs


class TestJobFanOut(TestCase):

    def test_results_in_job_order(self):
        def job(i):
            def run():
                time.sleep(0.001 * (5 - i % 5))
                return i * i
            return run

        assert run_jobs([job(i) for i in range(12)], workers=4) == [i * i for i in range(12)]

    def test_inline_for_one_worker(self):
        names = []
        jobs = [lambda: names.append(threading.current_thread().name) for _ in range(3)]
        run_jobs(jobs, workers=1)
        assert set(names) == {threading.current_thread().name}

    def test_threads_used(self):
        names = set()
        lock = threading.Lock()

        def job():
            time.sleep(0.01)
            with lock:
                names.add(threading.get_ident())

        run_jobs([job] * 6, workers=3)
        assert len(names) > 1

    def test_lowest_failing_job_reraised(self):
        def fail(message):
            def run():
                raise ValueError(message)
            return run

        with self.assertRaises(ValueError) as err:
            run_jobs([fail("first"), lambda: 1, fail("second")], workers=1)
        assert str(err.exception) == "first"
        with self.assertRaises(ValueError) as err:
            run_jobs([lambda: 0, fail("first")] + [fail("later")] * 4, workers=2)
        assert str(err.exception) == "first"

    def test_empty(self):
        assert run_jobs([], workers=4) == []
