"""Prioritized single-worker storage scheduler.

One thread performs every p-bucket file operation, draining a priority
queue: staging reads first, then late-event writes, then destaging. A
running destage is checkpointed at block granularity and preempted whenever
a higher-priority request arrives, then resumed where it left off; blocks
not yet written stay in the submitting window's m-bucket, so preemption
never loses data.

Block (de)serialization is CPU work and runs on a small thread pool;
encoded bytes are written in block order regardless of pool size, so output
files are bitwise independent of the worker count.
"""

from __future__ import annotations

import enum
import heapq
import itertools
import threading
import time
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

from .state import Block, StorageReadError, WindowFiles, decode_block, encode_block


class QueueClosedError(RuntimeError):
    """Submit after shutdown."""


class CodecPool:
    """Bounded pool of serialization workers with the same priority order as
    the storage queue: stage decodes run before late-write encodes, which run
    before destage encodes. FIFO within a priority class."""

    def __init__(self, workers: int, name: str = "lateflow-codec"):
        if workers < 1:
            raise ValueError("workers must be >= 1")
        self._heap: list[tuple[int, int, Future, Callable, tuple]] = []
        self._lock = threading.Lock()
        self._ready = threading.Condition(self._lock)
        self._seq = itertools.count()
        self._shutdown = False
        self._threads = [
            threading.Thread(target=self._run, name=f"{name}-{i}", daemon=True)
            for i in range(workers)
        ]
        for t in self._threads:
            t.start()

    def submit(self, priority: int, fn: Callable, *args) -> Future:
        future: Future = Future()
        with self._lock:
            if self._shutdown:
                raise QueueClosedError("codec pool is shut down")
            heapq.heappush(self._heap, (priority, next(self._seq), future, fn, args))
            self._ready.notify()
        return future

    def _run(self) -> None:
        while True:
            with self._lock:
                while not self._heap and not self._shutdown:
                    self._ready.wait()
                if self._shutdown and not self._heap:
                    return
                _, _, future, fn, args = heapq.heappop(self._heap)
            if not future.set_running_or_notify_cancel():
                continue
            try:
                future.set_result(fn(*args))
            except BaseException as exc:
                future.set_exception(exc)

    def shutdown(self) -> None:
        with self._lock:
            self._shutdown = True
            self._ready.notify_all()


class RequestKind(enum.IntEnum):
    """Priority order: lower value runs first."""

    STAGE = 0
    LATE_WRITE = 1
    DESTAGE = 2


@dataclass
class IORequest:
    kind: RequestKind
    window_id: str
    files: WindowFiles
    blocks: list[Block] = field(default_factory=list)          # LATE_WRITE / DESTAGE payload
    read: tuple[int, int, int, int] | None = None              # STAGE: (position, offset, length, count)
    cache_on_completion: bool = True                           # STAGE: engine should retain the block
    encoded: list[Future] = field(default_factory=list)        # LATE_WRITE: pre-submitted encodes

    @property
    def interruptible(self) -> bool:
        return self.kind is RequestKind.DESTAGE


@dataclass
class Completion:
    """Posted to the completion sink after each unit of work.

    ``final`` marks the last completion of a request. For writes, ``offset``
    ``length`` and ``count`` locate the block that just hit the file; for
    stage reads ``block`` carries the decoded events.
    """

    ticket: "Ticket"
    kind: RequestKind
    window_id: str
    final: bool
    position: int | None = None
    block: Block | None = None
    source_block: Block | None = None
    offset: int = 0
    length: int = 0
    count: int = 0
    cancelled: bool = False
    error: BaseException | None = None


class Ticket:
    """Waitable handle for a submitted request."""

    def __init__(self, request: IORequest, seq: int):
        self.request = request
        self.seq = seq
        self.done = threading.Event()
        self.error: BaseException | None = None
        self.cancelled = False
        self.blocks_written = 0
        self._result_block: Block | None = None
        self._result_ready = threading.Event()

    def set_block(self, block: Block) -> None:
        self._result_block = block
        self._result_ready.set()

    def wait_block(self, timeout: float | None = None) -> Block:
        """Blocking read of a stage request's decoded block."""
        if not self._result_ready.wait(timeout):
            raise StorageReadError(f"stage of {self.request.window_id} timed out")
        if self.error is not None:
            raise self.error
        assert self._result_block is not None
        return self._result_block

    def wait(self, timeout: float | None = None) -> bool:
        return self.done.wait(timeout)


def serialize_blocks(blocks: list[Block], worker_count: int) -> list[bytes]:
    """Encode blocks in parallel, results in original block order."""
    if worker_count < 1:
        raise ValueError("worker_count must be >= 1")
    if not blocks:
        return []
    with ThreadPoolExecutor(max_workers=worker_count) as pool:
        return list(pool.map(encode_block, blocks))


def deserialize_blocks(chunks: list[bytes], worker_count: int) -> list[Block]:
    """Decode chunks in parallel, results in original order; propagates
    CorruptBlockError from any chunk."""
    if worker_count < 1:
        raise ValueError("worker_count must be >= 1")
    if not chunks:
        return []
    with ThreadPoolExecutor(max_workers=worker_count) as pool:
        return list(pool.map(decode_block, chunks))


@dataclass
class _DestageProgress:
    ticket: Ticket
    futures: dict[int, Future] = field(default_factory=dict)
    next_write: int = 0
    next_encode: int = 0


class IOScheduler:
    """Owns the request queue, the storage worker, and the codec pool."""

    def __init__(
        self,
        serialization_workers: int = 1,
        inject_io_latency_ms: float = 0.0,
        inject_serialize_latency_ms: float = 0.0,
        completion_sink: Callable[[Completion], None] | None = None,
    ):
        if serialization_workers < 1:
            raise ValueError("serialization_workers must be >= 1")
        self.serialization_workers = serialization_workers
        self.inject_io_latency_ms = inject_io_latency_ms
        self.inject_serialize_latency_ms = inject_serialize_latency_ms
        self._sink = completion_sink or (lambda completion: None)
        self._heap: list[tuple[int, int, Ticket]] = []
        self._lock = threading.Lock()
        self._work_ready = threading.Condition(self._lock)
        self._seq = itertools.count()
        self._current: _DestageProgress | None = None
        self._executing: Ticket | None = None
        self._closed = False
        self._pool = CodecPool(serialization_workers)
        self._thread: threading.Thread | None = None
        self.destage_backlog_bytes = 0
        self.destage_backlog_blocks = 0

    # -- submission ----------------------------------------------------------

    def submit(self, request: IORequest) -> Ticket:
        empty_destage = None
        with self._lock:
            if self._closed:
                raise QueueClosedError("scheduler is shut down")
            ticket = Ticket(request, next(self._seq))
            if request.kind is RequestKind.DESTAGE and not request.blocks:
                ticket.done.set()
                empty_destage = Completion(ticket, request.kind, request.window_id, final=True)
            else:
                if request.kind is RequestKind.DESTAGE:
                    self.destage_backlog_bytes += sum(b.byte_size for b in request.blocks)
                    self.destage_backlog_blocks += len(request.blocks)
                elif request.kind is RequestKind.LATE_WRITE:
                    # Serialize late batches as they arrive so the pool runs
                    # encodes of independent requests concurrently.
                    request.encoded = [self._pool.submit(1, self._encode_task, b)
                                       for b in request.blocks]
                heapq.heappush(self._heap, (int(request.kind), ticket.seq, ticket))
                self._work_ready.notify()
        if empty_destage is not None:
            self._emit(empty_destage)
        return ticket

    def cancel(self, ticket: Ticket) -> None:
        """Mark a request cancelled. A queued request resolves immediately;
        a running destage stops at the next block boundary. The final
        completion reports ``cancelled=True``."""
        finish_now = False
        with self._lock:
            ticket.cancelled = True
            running = (
                (self._current is not None and self._current.ticket is ticket)
                or self._executing is ticket
            )
            if not ticket.done.is_set() and not running:
                finish_now = True
                if ticket.request.kind is RequestKind.DESTAGE:
                    self.destage_backlog_bytes -= sum(
                        b.byte_size for b in ticket.request.blocks[ticket.blocks_written:])
                    self.destage_backlog_blocks -= (
                        len(ticket.request.blocks) - ticket.blocks_written)
            self._work_ready.notify()
        if finish_now:
            ticket.done.set()
            ticket._result_ready.set()
            self._emit(Completion(ticket, ticket.request.kind, ticket.request.window_id,
                                  final=True, cancelled=True))

    # -- worker --------------------------------------------------------------

    def start(self) -> None:
        if self._thread is not None:
            return
        self._thread = threading.Thread(target=self._run, name="lateflow-io", daemon=True)
        self._thread.start()

    def close(self, drain: bool = True, timeout: float | None = 30.0) -> None:
        with self._lock:
            self._closed = True
            if not drain:
                for _, _, ticket in self._heap:
                    ticket.cancelled = True
                if self._current is not None:
                    self._current.ticket.cancelled = True
            self._work_ready.notify_all()
        if self._thread is not None:
            self._thread.join(timeout)
            self._thread = None
        self._pool.shutdown()

    def _run(self) -> None:
        while True:
            if not self.step():
                with self._lock:
                    if self._closed and not self._heap and self._current is None:
                        return
                    self._work_ready.wait(timeout=0.5)

    # -- execution ------------------------------------------------------------

    def step(self) -> bool:
        """Execute one unit of work (a whole stage/late-write request, or one
        destage block). Returns False when there is nothing runnable.
        Synchronous test harnesses call this directly instead of start()."""
        with self._lock:
            ticket: Ticket | None = None
            resume = False
            # Tickets cancelled while queued were already resolved; skip them.
            while self._heap and self._heap[0][2].done.is_set():
                heapq.heappop(self._heap)
            if self._heap and (self._current is None or int(self._heap[0][0]) < int(RequestKind.DESTAGE)):
                _, _, ticket = heapq.heappop(self._heap)
            elif self._current is not None:
                resume = True
            elif self._heap:
                _, _, ticket = heapq.heappop(self._heap)
            else:
                return False
            if ticket is not None and not ticket.cancelled \
                    and ticket.request.kind is RequestKind.DESTAGE:
                # Claim under the lock so a concurrent cancel() sees it as
                # running, never as silently discardable.
                self._current = _DestageProgress(ticket)
                resume = True
                ticket = None
            if ticket is not None:
                self._executing = ticket

        if resume:
            self._destage_step(self._current)
            return True
        assert ticket is not None
        request = ticket.request
        try:
            if ticket.cancelled:
                self._finish_cancelled(ticket)
            elif request.kind is RequestKind.STAGE:
                self._do_stage(ticket)
            else:
                self._do_late_write(ticket)
        finally:
            with self._lock:
                self._executing = None
        return True

    def _io_sleep(self) -> None:
        if self.inject_io_latency_ms:
            time.sleep(self.inject_io_latency_ms / 1000.0)

    def _encode_task(self, block: Block) -> bytes:
        if self.inject_serialize_latency_ms:
            time.sleep(self.inject_serialize_latency_ms / 1000.0)
        return encode_block(block)

    def _do_stage(self, ticket: Ticket) -> None:
        request = ticket.request
        assert request.read is not None
        position, offset, length, count = request.read
        try:
            self._io_sleep()
            data = request.files.read_block(offset, length)
        except Exception as exc:
            ticket.error = exc
            ticket._result_ready.set()
            ticket.done.set()
            self._emit(Completion(ticket, request.kind, request.window_id,
                                  final=True, position=position, error=exc))
            return

        def _deliver(fut: Future) -> None:
            exc = fut.exception()
            if exc is not None:
                ticket.error = exc
                ticket._result_ready.set()
                ticket.done.set()
                self._emit(Completion(ticket, request.kind, request.window_id,
                                      final=True, position=position, error=exc))
                return
            block = fut.result()
            ticket.set_block(block)
            ticket.done.set()
            self._emit(Completion(ticket, request.kind, request.window_id, final=True,
                                  position=position, block=block, count=count))

        self._pool.submit(0, decode_block, data).add_done_callback(_deliver)

    def _do_late_write(self, ticket: Ticket) -> None:
        request = ticket.request
        for i, block in enumerate(request.blocks):
            try:
                encoded = (request.encoded[i] if i < len(request.encoded)
                           else self._pool.submit(1, self._encode_task, block))
                data = encoded.result()
                self._io_sleep()
                offset, length = request.files.append_block(data, len(block.events))
            except Exception as exc:
                ticket.error = exc
                ticket.done.set()
                self._emit(Completion(ticket, request.kind, request.window_id,
                                      final=True, error=exc))
                return
            self._emit(Completion(ticket, request.kind, request.window_id,
                                  final=block is request.blocks[-1], source_block=block,
                                  offset=offset, length=length, count=len(block.events)))
        ticket.done.set()

    def _destage_step(self, progress: _DestageProgress) -> None:
        ticket = progress.ticket
        request = ticket.request
        blocks = request.blocks
        if ticket.cancelled:
            self._retire_destage(progress, cancelled=True)
            return
        # Keep up to serialization_workers encodes in flight ahead of the write.
        while (
            progress.next_encode < len(blocks)
            and len(progress.futures) < self.serialization_workers
        ):
            idx = progress.next_encode
            progress.futures[idx] = self._pool.submit(2, self._encode_task, blocks[idx])
            progress.next_encode += 1
        idx = progress.next_write
        block = blocks[idx]
        try:
            data = progress.futures.pop(idx).result()
            self._io_sleep()
            offset, length = request.files.append_block(data, len(block.events))
        except Exception as exc:
            ticket.error = exc
            self._retire_destage(progress, error=exc)
            return
        progress.next_write += 1
        ticket.blocks_written += 1
        with self._lock:
            self.destage_backlog_bytes -= block.byte_size
            self.destage_backlog_blocks -= 1
        final = progress.next_write >= len(blocks)
        self._emit(Completion(ticket, request.kind, request.window_id, final=final,
                              source_block=block, offset=offset, length=length,
                              count=len(block.events)))
        if final:
            ticket.done.set()
            self._current = None

    def _retire_destage(self, progress: _DestageProgress, cancelled: bool = False,
                        error: BaseException | None = None) -> None:
        ticket = progress.ticket
        remaining = ticket.request.blocks[progress.next_write:]
        with self._lock:
            self.destage_backlog_bytes -= sum(b.byte_size for b in remaining)
            self.destage_backlog_blocks -= len(remaining)
        self._current = None
        ticket.done.set()
        self._emit(Completion(ticket, ticket.request.kind, ticket.request.window_id,
                              final=True, cancelled=cancelled, error=error))

    def _finish_cancelled(self, ticket: Ticket) -> None:
        request = ticket.request
        if request.kind is RequestKind.DESTAGE:
            with self._lock:
                self.destage_backlog_bytes -= sum(b.byte_size for b in request.blocks)
                self.destage_backlog_blocks -= len(request.blocks)
        ticket.done.set()
        ticket._result_ready.set()
        self._emit(Completion(ticket, request.kind, request.window_id,
                              final=True, cancelled=True))

    def _emit(self, completion: Completion) -> None:
        self._sink(completion)
