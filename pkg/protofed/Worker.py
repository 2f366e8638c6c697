import logging
from collections import deque
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Callable, Iterable, Optional

from .RunSettings import WorkerSettings
from .protofed_aux import ProtoFedException

logger = logging.getLogger(__name__)


@dataclass
class WorkerResult:
    key: Any
    value: Any


class Worker(object):
    """Runs independent client tasks on a thread pool and hands results back
    in submission order, whatever order they finish in."""

    def __init__(self, args: WorkerSettings):
        args.validate()
        self._workers = args.workers
        self._pool = None
        self._queue = deque()
        if self._workers > 1:
            self._pool = ThreadPoolExecutor(max_workers=self._workers,
                                            thread_name_prefix="protofed-client")

    @property
    def workers(self) -> int:
        return self._workers

    def ingest(self, key: Any, task: Callable[[], Any]) -> None:
        """Queues ``task``; with one worker it runs immediately."""
        if self._pool is None:
            future = Future()
            try:
                future.set_result(task())
            except BaseException as e:
                future.set_exception(e)
        else:
            future = self._pool.submit(task)
        self._queue.append((key, future))

    def has_next_result(self) -> bool:
        return bool(self._queue)

    @property
    def queue_used(self) -> int:
        return len(self._queue)

    def get_next_result(self, timeout: Optional[float] = None) -> WorkerResult:
        """Blocks for the oldest queued task; its exception is re-raised."""
        if not self._queue:
            raise ProtoFedException("worker has no queued results")
        key, future = self._queue.popleft()
        return WorkerResult(key, future.result(timeout=timeout))

    def drain(self, timeout: Optional[float] = None) -> list:
        """Collects every queued result in submission order. The first task
        exception is re-raised and the rest of the queue is dropped."""
        results = []
        try:
            while self.has_next_result():
                results.append(self.get_next_result(timeout))
        finally:
            self.drop_all_queued()
        return results

    def map(self, tasks: Iterable[tuple[Any, Callable[[], Any]]]) -> list:
        for key, task in tasks:
            self.ingest(key, task)
        return self.drain()

    def drop_all_queued(self) -> None:
        while self._queue:
            _, future = self._queue.popleft()
            future.cancel()

    def shutdown(self) -> None:
        self.drop_all_queued()
        if self._pool is not None:
            self._pool.shutdown(wait=True)
            self._pool = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.shutdown()

    def __deepcopy__(self, memo):
        '''This functions is not permitted due to the class owning a thread pool.'''
        raise TypeError('Deep copying is not supported for Worker')

    def __copy__(self):
        '''This functions is not permitted due to the class owning a thread pool.'''
        raise TypeError('Shallow copying is not supported for Worker')
