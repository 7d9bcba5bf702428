"""Tiered per-window state: a bounded in-memory bucket and a file-backed bucket.

Each window's events live in an m-bucket (blocks in memory, bounded by an
event capacity) and a p-bucket (an append-only file of newline-delimited
JSON records plus a sidecar index of block boundaries). Data moves between
the tiers in whole blocks; every block handed to the I/O worker remains
visible to iteration until its write is confirmed, so the multiset of
stored events is conserved under any interleaving of append, destage,
stage, and iterate.

File layout under the state root::

    <root>/<operator>/<window_id>.events   one JSON record per event
    <root>/<operator>/<window_id>.index    lines of "offset length count"

Record format: ``{"k": <json string>, "ts": <int>, "p": "<base64>"}``.
"""

from __future__ import annotations

import base64
import enum
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator

from .core import Event, WindowInstance

DEFAULT_BLOCK_CAPACITY = 10_000
DEFAULT_MBUCKET_CAPACITY = 500_000

# Accounting overhead per event beyond key and payload bytes (timestamp,
# list slot, object headers). Used for all tracked-bytes metrics.
EVENT_FIXED_BYTES = 24


class PurgedWindowError(RuntimeError):
    """Operation attempted on a purged window: a trigger/cleanup bug upstream."""


class StorageReadError(RuntimeError):
    """A p-bucket block could not be read back."""


class CorruptBlockError(ValueError):
    """A p-bucket record failed to decode; carries the record index."""

    def __init__(self, record_index: int, reason: str):
        super().__init__(f"corrupt record {record_index}: {reason}")
        self.record_index = record_index


class Tier(enum.Enum):
    MEMORY = "memory"
    PERSISTENT = "persistent"


class Phase(enum.Enum):
    ACTIVE = "active"
    DESTAGED = "destaged"
    PRESTAGING = "prestaging"
    STAGED = "staged"
    PURGED = "purged"


def event_bytes(event: Event) -> int:
    return event.payload_size + len(event.key) + EVENT_FIXED_BYTES


# ---------------------------------------------------------------------------
# Block codec


def encode_event(event: Event) -> str:
    payload_b64 = base64.b64encode(event.payload).decode("ascii")
    return f'{{"k":{json.dumps(event.key)},"ts":{event.event_time},"p":"{payload_b64}"}}\n'


_FAST_PREFIX = '{"k":"'
_TS_DELIM = '","ts":'
_P_DELIM = ',"p":"'


def _decode_record(line: str) -> Event:
    # Fast path for records this module wrote itself; json.dumps escapes any
    # interior quote, so the bare delimiters below only occur at field
    # boundaries. Anything unusual falls through to json.loads.
    if line.startswith(_FAST_PREFIX):
        key_end = line.find(_TS_DELIM, 5)
        if key_end >= 0:
            key = line[6:key_end]
            if "\\" not in key:
                p_start = line.find(_P_DELIM, key_end)
                if p_start >= 0 and line.endswith('"}'):
                    ts = int(line[key_end + len(_TS_DELIM):p_start])
                    payload = base64.b64decode(line[p_start + len(_P_DELIM):-2])
                    return Event(key=key, event_time=ts, payload=payload)
    obj = json.loads(line)
    return Event(key=obj["k"], event_time=obj["ts"], payload=base64.b64decode(obj["p"]))


@dataclass
class Block:
    """Ordered slice of a window's events; the unit of serialization."""

    events: list[Event] = field(default_factory=list)
    capacity: int = DEFAULT_BLOCK_CAPACITY
    byte_size: int = 0

    def __post_init__(self) -> None:
        if len(self.events) > self.capacity:
            raise ValueError("block over capacity")
        if not self.byte_size:
            self.byte_size = sum(event_bytes(e) for e in self.events)

    @property
    def full(self) -> bool:
        return len(self.events) >= self.capacity

    def append(self, event: Event) -> None:
        if self.full:
            raise ValueError("block full")
        self.events.append(event)
        self.byte_size += event_bytes(event)


def encode_block(block: Block) -> bytes:
    """Encode a block as newline-delimited JSON records (empty block -> b'')."""
    return "".join(encode_event(e) for e in block.events).encode("utf-8")


def decode_block(data: bytes, capacity: int = DEFAULT_BLOCK_CAPACITY) -> Block:
    """Inverse of :func:`encode_block`; raises CorruptBlockError with the
    index of the first bad record."""
    events = []
    if data:
        for i, line in enumerate(data.decode("utf-8").splitlines()):
            if not line:
                continue
            try:
                events.append(_decode_record(line))
            except CorruptBlockError:
                raise
            except Exception as exc:
                raise CorruptBlockError(i, repr(exc)) from exc
    return Block(events=events, capacity=max(capacity, len(events)))


# ---------------------------------------------------------------------------
# Files


def sanitize_component(name: str) -> str:
    if name and all(c.isalnum() or c in "._-" for c in name):
        return name
    return name.encode("utf-8").hex()


@dataclass
class WindowFiles:
    """Paths and synchronous file operations for one window's p-bucket.

    All calls that touch the filesystem are made by the single I/O worker,
    or by tests driving it synchronously.
    """

    events_path: Path
    index_path: Path

    @classmethod
    def for_window(cls, root: str | Path, operator: str, window_id: str) -> "WindowFiles":
        base = Path(root) / sanitize_component(operator)
        return cls(base / f"{window_id}.events", base / f"{window_id}.index")

    def append_block(self, data: bytes, count: int) -> tuple[int, int]:
        """Append encoded records plus an index line; returns (offset, length)."""
        self.events_path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.events_path, "ab") as f:
            offset = f.tell()
            f.write(data)
        with open(self.index_path, "a") as f:
            f.write(f"{offset} {len(data)} {count}\n")
        return offset, len(data)

    def read_block(self, offset: int, length: int) -> bytes:
        try:
            with open(self.events_path, "rb") as f:
                f.seek(offset)
                data = f.read(length)
        except OSError as exc:
            raise StorageReadError(f"{self.events_path}@{offset}: {exc}") from exc
        if len(data) != length:
            raise StorageReadError(f"{self.events_path}@{offset}: short read")
        return data

    def load_index(self) -> list[tuple[int, int, int]]:
        if not self.index_path.exists():
            return []
        entries = []
        for line in self.index_path.read_text().splitlines():
            if line.strip():
                offset, length, count = line.split()
                entries.append((int(offset), int(length), int(count)))
        return entries

    def delete(self) -> None:
        for path in (self.events_path, self.index_path):
            try:
                os.remove(path)
            except FileNotFoundError:
                pass


# ---------------------------------------------------------------------------
# Buckets


@dataclass
class MBucket:
    """Bounded in-memory block list; always an arrival-order prefix of the
    window's events (destaging ships the suffix, retention keeps the head)."""

    capacity_events: int = DEFAULT_MBUCKET_CAPACITY
    block_capacity: int = DEFAULT_BLOCK_CAPACITY
    blocks: list[Block] = field(default_factory=list)
    current_events: int = 0
    byte_size: int = 0

    @property
    def has_room(self) -> bool:
        return self.current_events < self.capacity_events

    def append(self, event: Event) -> None:
        if not self.blocks or self.blocks[-1].full:
            self.blocks.append(Block(capacity=self.block_capacity))
        self.blocks[-1].append(event)
        self.current_events += 1
        self.byte_size += event_bytes(event)

    def split_off_suffix(self, keep_events: int) -> list[Block]:
        """Remove and return everything after the first ``keep_events``
        events, repacked on the block boundary."""
        if keep_events >= self.current_events:
            return []
        shipped: list[Block] = []
        seen = 0
        retained: list[Block] = []
        for block in self.blocks:
            if seen + len(block.events) <= keep_events:
                retained.append(block)
            elif seen >= keep_events:
                shipped.append(block)
            else:
                cut = keep_events - seen
                head = Block(events=block.events[:cut], capacity=block.capacity)
                tail = Block(events=block.events[cut:], capacity=block.capacity)
                retained.append(head)
                shipped.append(tail)
            seen += len(block.events)
        self.blocks = retained
        moved = sum(len(b.events) for b in shipped)
        moved_bytes = sum(b.byte_size for b in shipped)
        self.current_events -= moved
        self.byte_size -= moved_bytes
        return shipped

    def absorb_blocks(self, blocks: list[Block]) -> None:
        """Return blocks (e.g. from a cancelled destage) to the tail."""
        for block in blocks:
            self.blocks.append(block)
            self.current_events += len(block.events)
            self.byte_size += block.byte_size


@dataclass
class PBucket:
    """Index of blocks written to the window's p-bucket file."""

    files: WindowFiles
    entries: list[tuple[int, int, int]] = field(default_factory=list)  # offset, length, count
    total_events: int = 0

    def add_entry(self, offset: int, length: int, count: int) -> None:
        if self.entries and offset < self.entries[-1][0] + self.entries[-1][1]:
            raise ValueError("p-bucket index offsets must be non-overlapping and increasing")
        self.entries.append((offset, length, count))
        self.total_events += count


# ---------------------------------------------------------------------------
# Window state handle

BlockFetcher = Callable[["WindowStateHandle", int], Block]


class WindowStateHandle:
    """Per-window state split across the memory and persistent tiers.

    Owned by exactly one operator task; all mutations happen on the control
    task, while the I/O worker only reads blocks it was handed and posts
    completions back.
    """

    def __init__(
        self,
        window: WindowInstance,
        files: WindowFiles,
        mbucket_capacity: int = DEFAULT_MBUCKET_CAPACITY,
        block_capacity: int = DEFAULT_BLOCK_CAPACITY,
    ):
        self.window = window
        self.phase = Phase.ACTIVE
        self.m = MBucket(capacity_events=mbucket_capacity, block_capacity=block_capacity)
        self.p = PBucket(files=files)
        self.block_capacity = block_capacity
        self.sealed = False  # no further memory-tier appends once a destage begins
        self.inflight_destage: list[Block] = []   # handed to the worker, unwritten
        self.inflight_late: list[Block] = []      # late/overflow batches being written
        self.outbox: list[Event] = []             # persistent-tier events awaiting a batch
        self.outbox_bytes = 0
        self.staged: dict[int, Block] = {}        # p-bucket position -> cached block
        self.staged_bytes = 0
        self.appended_total = 0
        # Policy metadata, maintained by the engine's control task.
        self.last_activity_ms = 0
        self.ingestion_rate = 0.0

    # -- accounting ---------------------------------------------------------

    @property
    def tracked_bytes(self) -> int:
        return (
            self.m.byte_size
            + sum(b.byte_size for b in self.inflight_destage)
            + sum(b.byte_size for b in self.inflight_late)
            + self.outbox_bytes
            + self.staged_bytes
        )

    @property
    def total_events(self) -> int:
        return (
            self.m.current_events
            + sum(len(b.events) for b in self.inflight_destage)
            + sum(len(b.events) for b in self.inflight_late)
            + len(self.outbox)
            + self.p.total_events
        )

    # -- append -------------------------------------------------------------

    def append(self, event: Event) -> Tier:
        """Route an event to the memory tier while the window is active and
        has room, otherwise to the persistent tier (via the outbox)."""
        if self.phase is Phase.PURGED:
            raise PurgedWindowError(f"append to purged window {self.window.window_id}")
        self.appended_total += 1
        if self.phase is Phase.ACTIVE and not self.sealed and self.m.has_room:
            self.m.append(event)
            return Tier.MEMORY
        self.outbox.append(event)
        self.outbox_bytes += event_bytes(event)
        return Tier.PERSISTENT

    def take_outbox_batch(self, max_events: int | None = None) -> Block | None:
        """Move up to one block of outbox events into the in-flight late list."""
        if not self.outbox:
            return None
        limit = min(max_events or self.block_capacity, self.block_capacity)
        events, self.outbox = self.outbox[:limit], self.outbox[limit:]
        block = Block(events=events, capacity=max(limit, len(events)))
        self.outbox_bytes -= block.byte_size
        self.inflight_late.append(block)
        return block

    def on_late_block_written(self, block: Block, offset: int, length: int) -> None:
        self.inflight_late.remove(block)
        self.p.add_entry(offset, length, len(block.events))

    # -- destage ------------------------------------------------------------

    def begin_destage(self, keep_fraction: float) -> list[Block]:
        """Plan a destage: retain the earliest ``ceil(keep_fraction * n)``
        events, move the suffix to the in-flight list, and return it for
        the I/O worker. An empty plan on an empty bucket completes the
        destage immediately."""
        if self.phase not in (Phase.ACTIVE, Phase.STAGED):
            raise ValueError(f"destage from phase {self.phase}")
        if not 0.0 <= keep_fraction <= 1.0:
            raise ValueError("keep_fraction must be in [0, 1]")
        keep = math.ceil(keep_fraction * self.m.current_events)
        shipped = self.m.split_off_suffix(keep)
        self.inflight_destage.extend(shipped)
        if not shipped and self.m.current_events == 0 and not self.inflight_destage:
            self.phase = Phase.DESTAGED
        return shipped

    def on_destage_block_written(self, offset: int, length: int, count: int) -> None:
        block = self.inflight_destage.pop(0)
        if len(block.events) != count:
            raise ValueError("destage completion out of order")
        self.p.add_entry(offset, length, count)

    def finish_destage(self) -> None:
        if self.inflight_destage:
            raise ValueError("destage still in flight")
        if self.phase is not Phase.PURGED:
            self.phase = Phase.DESTAGED

    def cancel_destage(self) -> int:
        """Return unwritten in-flight blocks to the m-bucket (stage preempting
        a queued destage of the same window). Returns the event count restored."""
        restored = self.inflight_destage
        self.inflight_destage = []
        self.m.absorb_blocks(restored)
        return sum(len(b.events) for b in restored)

    # -- stage --------------------------------------------------------------

    def unstaged_positions(self) -> list[int]:
        return [i for i in range(len(self.p.entries)) if i not in self.staged]

    def begin_stage(self) -> list[tuple[int, int, int, int]]:
        """Plan a stage: (position, offset, length, count) for every p-bucket
        block not already cached, in index order. Empty plan -> Staged now."""
        if self.phase not in (Phase.DESTAGED, Phase.PRESTAGING, Phase.STAGED):
            raise ValueError(f"stage from phase {self.phase}")
        plan = [(i, *self.p.entries[i]) for i in self.unstaged_positions()]
        if plan:
            self.phase = Phase.PRESTAGING
        elif self.phase is not Phase.STAGED:
            self.phase = Phase.STAGED
        return plan

    def on_block_staged(self, position: int, block: Block) -> None:
        if position in self.staged:
            return
        self.staged[position] = block
        self.staged_bytes += block.byte_size
        if self.phase is Phase.PRESTAGING and not self.unstaged_positions():
            self.phase = Phase.STAGED

    def release_staged(self) -> int:
        """Drop the staged cache after a re-execution (memory is freed; the
        p-bucket file remains authoritative)."""
        freed = self.staged_bytes
        self.staged.clear()
        self.staged_bytes = 0
        if self.phase in (Phase.STAGED, Phase.PRESTAGING):
            self.phase = Phase.DESTAGED
        return freed

    # -- iterate ------------------------------------------------------------

    def iterate(self, fetch: BlockFetcher | None = None) -> Iterator[Event]:
        """Yield all events exactly once: memory tier first (m-bucket, then
        any in-flight destage blocks), then the persistent tier in stored
        order (cached blocks served from memory, the rest fetched on demand),
        then persistent-tier events not yet written.

        ``fetch(handle, position)`` must return the decoded block at that
        p-bucket index position; it is only called for uncached blocks.
        """
        if self.phase is Phase.PURGED:
            raise PurgedWindowError(f"iterate on purged window {self.window.window_id}")
        m_blocks = list(self.m.blocks)
        inflight = list(self.inflight_destage)
        p_len = len(self.p.entries)
        inflight_late = list(self.inflight_late)
        outbox = list(self.outbox)
        for block in m_blocks:
            yield from block.events
        for block in inflight:
            yield from block.events
        for pos in range(p_len):
            block = self.staged.get(pos)
            if block is None:
                if fetch is None:
                    raise StorageReadError(
                        f"window {self.window.window_id}: block {pos} is not in memory "
                        "and no fetcher was provided"
                    )
                block = fetch(self, pos)
            yield from block.events
        for block in inflight_late:
            yield from block.events
        yield from outbox

    # -- purge --------------------------------------------------------------

    def purge(self) -> WindowFiles:
        """Final: drop all in-memory state and return the files to delete."""
        self.phase = Phase.PURGED
        self.m.blocks.clear()
        self.m.current_events = 0
        self.m.byte_size = 0
        self.inflight_destage.clear()
        self.inflight_late.clear()
        self.outbox.clear()
        self.outbox_bytes = 0
        self.staged.clear()
        self.staged_bytes = 0
        return self.p.files


class MemoryWindowState:
    """Baseline backend handle: everything stays in one in-memory list."""

    def __init__(self, window: WindowInstance):
        self.window = window
        self.phase = Phase.ACTIVE
        self.events: list[Event] = []
        self.tracked_bytes = 0
        self.appended_total = 0

    @property
    def total_events(self) -> int:
        return len(self.events)

    def append(self, event: Event) -> Tier:
        if self.phase is Phase.PURGED:
            raise PurgedWindowError(f"append to purged window {self.window.window_id}")
        self.events.append(event)
        self.tracked_bytes += event_bytes(event)
        self.appended_total += 1
        return Tier.MEMORY

    def iterate(self, fetch: BlockFetcher | None = None) -> Iterator[Event]:
        if self.phase is Phase.PURGED:
            raise PurgedWindowError(f"iterate on purged window {self.window.window_id}")
        yield from list(self.events)

    def purge(self) -> None:
        self.phase = Phase.PURGED
        self.events.clear()
        self.tracked_bytes = 0
