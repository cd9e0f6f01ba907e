"""Message-passing transports.

The solver talks to other workers only through the small :class:`Transport`
contract: ordered point-to-point byte messages plus a few collectives. Two
backends implement it:

* :class:`InProcessTransport` -- worker threads in one process exchanging
  messages through per-pair FIFO queues. This is the reference backend used by
  the tests.
* :class:`MpiTransport` -- one process per rank over ``mpi4py`` (optional).
"""
from __future__ import annotations

import pickle
import queue
import threading
import time
from typing import Any, Callable, Protocol, Sequence


class TransportError(RuntimeError):
    pass


class Transport(Protocol):
    rank: int
    world_size: int

    def send(self, dest: int, payload: bytes) -> None: ...

    def recv(self, source: int) -> bytes: ...

    def all_gather(self, obj: Any) -> list: ...

    def bcast(self, obj: Any, root: int = 0) -> Any: ...

    def gather(self, obj: Any, root: int = 0) -> list | None: ...

    def barrier(self) -> None: ...


class SerialTransport:
    """Single-worker transport; collectives are identities."""

    rank = 0
    world_size = 1

    def send(self, dest, payload):
        raise TransportError("a single worker has no peers")

    def recv(self, source):
        raise TransportError("a single worker has no peers")

    def all_gather(self, obj):
        return [obj]

    def bcast(self, obj, root=0):
        return obj

    def gather(self, obj, root=0):
        return [obj]

    def barrier(self):
        pass


class InProcessHub:
    """Shared mailboxes and collective slots for ``world_size`` threads."""

    def __init__(self, world_size: int, timeout: float = 300.0):
        if world_size < 1:
            raise ValueError("world_size must be >= 1")
        self.world_size = world_size
        self.timeout = timeout
        self._boxes = {(s, d): queue.Queue() for s in range(world_size)
                       for d in range(world_size) if s != d}
        self._slots: list[bytes | None] = [None] * world_size
        self._barrier = threading.Barrier(world_size, timeout=timeout)
        self._aborted = threading.Event()

    def transport(self, rank: int) -> "InProcessTransport":
        return InProcessTransport(self, rank)

    def abort(self) -> None:
        self._aborted.set()
        self._barrier.abort()


class InProcessTransport:
    def __init__(self, hub: InProcessHub, rank: int):
        if not 0 <= rank < hub.world_size:
            raise ValueError(f"rank {rank} outside world of {hub.world_size}")
        self.hub = hub
        self.rank = rank
        self.world_size = hub.world_size

    def _peer(self, r: int) -> None:
        if r == self.rank or not 0 <= r < self.world_size:
            raise TransportError(f"rank {self.rank}: invalid peer {r}")

    def send(self, dest: int, payload: bytes) -> None:
        self._peer(dest)
        self.hub._boxes[(self.rank, dest)].put(bytes(payload))

    def recv(self, source: int) -> bytes:
        self._peer(source)
        box = self.hub._boxes[(source, self.rank)]
        deadline = time.monotonic() + self.hub.timeout
        while not self.hub._aborted.is_set():
            try:
                return box.get(timeout=min(0.05, max(deadline - time.monotonic(), 0.0)))
            except queue.Empty:
                if time.monotonic() >= deadline:
                    raise TransportError(
                        f"rank {self.rank}: timed out waiting for rank {source}") from None
        raise TransportError(f"rank {self.rank}: aborted while waiting for rank {source}")

    def _wait(self) -> None:
        try:
            self.hub._barrier.wait()
        except threading.BrokenBarrierError:
            raise TransportError(f"rank {self.rank}: collective aborted") from None

    def all_gather(self, obj: Any) -> list:
        self.hub._slots[self.rank] = pickle.dumps(obj, protocol=pickle.HIGHEST_PROTOCOL)
        self._wait()
        out = [pickle.loads(s) for s in self.hub._slots]
        self._wait()
        return out

    def bcast(self, obj: Any, root: int = 0) -> Any:
        if self.rank == root:
            self.hub._slots[root] = pickle.dumps(obj, protocol=pickle.HIGHEST_PROTOCOL)
        self._wait()
        out = pickle.loads(self.hub._slots[root])
        self._wait()
        return out

    def gather(self, obj: Any, root: int = 0) -> list | None:
        out = self.all_gather(obj)
        return out if self.rank == root else None

    def barrier(self) -> None:
        self._wait()


class WorkerError(RuntimeError):
    def __init__(self, rank: int, exc: BaseException):
        super().__init__(f"worker {rank} failed: {type(exc).__name__}: {exc}")
        self.rank = rank
        self.original = exc


def run_workers(fn: Callable[..., Any], world_size: int, args: Sequence = (),
                timeout: float = 300.0) -> list:
    """Run ``fn(transport, *args)`` on ``world_size`` in-process workers.

    Returns the per-rank results. The first failing worker aborts the
    collectives of the others and its exception is re-raised as
    :class:`WorkerError`.
    """
    if world_size == 1:
        try:
            return [fn(SerialTransport(), *args)]
        except Exception as exc:
            raise WorkerError(0, exc) from exc
    hub = InProcessHub(world_size, timeout)
    results: list[Any] = [None] * world_size
    errors: list[tuple[int, BaseException]] = []
    lock = threading.Lock()

    def target(rank: int) -> None:
        try:
            results[rank] = fn(hub.transport(rank), *args)
        except BaseException as exc:  # re-raised in the caller
            with lock:
                errors.append((rank, exc))
            hub.abort()

    threads = [threading.Thread(target=target, args=(r,), name=f"potm-worker-{r}")
               for r in range(world_size)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        # prefer the root cause over secondary "collective aborted" failures
        errors.sort(key=lambda e: (isinstance(e[1], TransportError), e[0]))
        rank, exc = errors[0]
        raise WorkerError(rank, exc) from exc
    return results


class MpiTransport:
    """Transport over an ``mpi4py`` communicator (one process per rank).

    Sends are non-blocking so that every rank can post all of its sends before
    receiving; outstanding requests are completed before each collective.
    """

    def __init__(self, comm=None):
        from mpi4py import MPI

        self._MPI = MPI
        self.comm = comm if comm is not None else MPI.COMM_WORLD
        self.rank = self.comm.Get_rank()
        self.world_size = self.comm.Get_size()
        self._pending = []

    def _flush(self):
        if self._pending:
            self._MPI.Request.waitall(self._pending)
            self._pending = []

    def send(self, dest: int, payload: bytes) -> None:
        self._pending.append(self.comm.isend(bytes(payload), dest=dest, tag=7))

    def recv(self, source: int) -> bytes:
        return self.comm.recv(source=source, tag=7)

    def all_gather(self, obj):
        self._flush()
        return self.comm.allgather(obj)

    def bcast(self, obj, root=0):
        self._flush()
        return self.comm.bcast(obj, root=root)

    def gather(self, obj, root=0):
        self._flush()
        return self.comm.gather(obj, root=root)

    def barrier(self):
        self._flush()
        self.comm.Barrier()
