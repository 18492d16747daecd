# coding: utf-8
"""
Thread fan-out for independent jobs (sampling streams, benchmark sessions).

Jobs are handed to minion threads through a queue; results come back through a second queue tagged
with the job index and are merged in index order, so the outcome never depends on thread scheduling.
"""

from queue import Empty, Queue
from threading import Event, Thread
from typing import Callable, List, Sequence, TypeVar

from .loggers import logger

__all__ = ["run_jobs", "job_minion"]

T = TypeVar("T")


def job_minion(thread_num: int, exit_event: Event, job_queue: Queue, results_queue: Queue) -> None:
    logger.debug(f"Job thread {thread_num} starting")
    exception = None
    try:
        while not exit_event.is_set():
            try:
                index, job = job_queue.get_nowait()
            except Empty:
                break
            try:
                results_queue.put((index, job(), None))
            except Exception as err:
                logger.exception(f"Error in job {index}: {err}")
                exception = err
                results_queue.put((index, None, err))
                exit_event.set()
            finally:
                job_queue.task_done()
    finally:
        if exception is None:
            logger.debug(f"Job thread {thread_num} exiting")
        else:
            logger.debug(f"Job thread {thread_num} exiting due to error {exception}")


def run_jobs(jobs: Sequence[Callable[[], T]], workers: int = 1) -> List[T]:
    """
    Run every job and return the results in job order.

    :param jobs: zero-argument callables; each must own its random stream
    :param workers: thread count; 1 (or a single job) runs inline
    :raises Exception: the error of the lowest-indexed failing job, after all threads have stopped
    """
    if workers <= 1 or len(jobs) <= 1:
        return [job() for job in jobs]

    exit_event = Event()
    job_queue: Queue = Queue()
    results_queue: Queue = Queue()
    for index, job in enumerate(jobs):
        job_queue.put((index, job))

    threads = []
    for i in range(min(workers, len(jobs))):
        thread = Thread(target=job_minion, args=(i, exit_event, job_queue, results_queue), daemon=True)
        thread.start()
        threads.append(thread)
    for thread in threads:
        thread.join()

    collected = {}
    errors = {}
    while not results_queue.empty():
        index, result, error = results_queue.get()
        if error is not None:
            errors[index] = error
        else:
            collected[index] = result
    if errors:
        raise errors[min(errors)]
    return [collected[i] for i in range(len(jobs))]
