"""
Tests for protofed.Worker module.

The worker runs one task per client and must hand results back in
submission order, whatever order the threads finish in.
"""

import copy
import time

import pytest

import protofed
from protofed.protofed_aux import ProtoFedException


def _sleepy(value, delay):
    def task():
        time.sleep(delay)
        return value
    return task


def test_worker_creation():
    """Test Worker can be created with default settings."""
    with protofed.Worker(protofed.WorkerSettings()) as worker:
        assert worker.workers == 1
        assert not worker.has_next_result()


def test_invalid_worker_count():
    with pytest.raises(protofed.ConfigurationError):
        protofed.Worker(protofed.WorkerSettings(workers=0))


@pytest.mark.parametrize("workers", [1, 3])
def test_results_keep_submission_order(workers):
    """Test that slower early tasks still come back first."""
    tasks = [(i, _sleepy(i * 10, 0.05 * (3 - i))) for i in range(3)]
    with protofed.Worker(protofed.WorkerSettings(workers)) as worker:
        results = worker.map(tasks)
    assert [r.key for r in results] == [0, 1, 2]
    assert [r.value for r in results] == [0, 10, 20]


def test_queue_bookkeeping():
    with protofed.Worker(protofed.WorkerSettings(2)) as worker:
        worker.ingest("a", _sleepy(1, 0.0))
        worker.ingest("b", _sleepy(2, 0.0))
        assert worker.queue_used == 2
        first = worker.get_next_result()
        assert (first.key, first.value) == ("a", 1)
        assert worker.queue_used == 1
        worker.drop_all_queued()
        assert not worker.has_next_result()
        with pytest.raises(ProtoFedException):
            worker.get_next_result()


def test_task_exception_propagates():
    def failing():
        raise protofed.NumericError("client 2 diverged")

    with protofed.Worker(protofed.WorkerSettings(2)) as worker:
        with pytest.raises(protofed.NumericError):
            worker.map([(1, _sleepy(1, 0.0)), (2, failing)])
        assert worker.queue_used == 0


def test_worker_cannot_be_copied():
    with protofed.Worker(protofed.WorkerSettings(2)) as worker:
        with pytest.raises(TypeError):
            copy.copy(worker)
        with pytest.raises(TypeError):
            copy.deepcopy(worker)


def test_drain_stops_at_first_failure():
    def failing():
        raise protofed.NumericError("client 1 diverged")

    with protofed.Worker(protofed.WorkerSettings(1)) as worker:
        worker.ingest(1, failing)
        worker.ingest(2, _sleepy(2, 0.0))
        with pytest.raises(protofed.NumericError):
            worker.drain()
        assert not worker.has_next_result()
        worker.ingest(3, _sleepy(3, 0.0))
        assert [r.value for r in worker.drain()] == [3]
