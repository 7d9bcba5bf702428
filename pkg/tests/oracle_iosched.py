"""Reference simulator for the storage scheduler, shared by the unit tests
and the acceptance suite.

``SimScheduler`` is an independent re-implementation of the scheduling
contract (priority classes, FIFO within a class, destage preemption at
block boundaries) over plain lists; replaying the same submit/step trace
through the real scheduler must produce the identical completion log.
"""

import time

from lateflow.core import Event
from lateflow.iosched import IORequest, IOScheduler, RequestKind
from lateflow.state import Block, WindowFiles, encode_block


def ev(i):
    return Event(key="k", event_time=i, payload=bytes([i % 256]))


def make_block(n, start=0):
    return Block(events=[ev(start + i) for i in range(n)], capacity=max(n, 1))


def seed_window_file(tmp_path, name="oracle-w"):
    """A window file with three pre-written blocks, for stage reads."""
    files = WindowFiles.for_window(tmp_path, "op", name)
    entries = []
    for i in range(3):
        data = encode_block(make_block(2, start=10 * i))
        entries.append((*files.append_block(data, 2), 2))
    return files, entries


def stage_req(files, entries, pos=0, window="w1"):
    offset, length, count = entries[pos]
    return IORequest(RequestKind.STAGE, window, files, read=(pos, offset, length, count))


def run_step_await(sched, log):
    """Run one unit of work and wait for its completion record."""
    before = len(log)
    ran = sched.step()
    if ran:
        deadline = time.monotonic() + 5.0
        while len(log) == before:
            if time.monotonic() > deadline:
                raise TimeoutError("no completion observed")
            time.sleep(0.0005)
    return ran


class SimScheduler:
    def __init__(self):
        self.queue = []  # [kind, seq, req_id, units_left]
        self.current = None
        self.seq = 0
        self.log = []

    def submit(self, kind, req_id, units):
        self.queue.append([kind, self.seq, req_id, units])
        self.seq += 1

    def step(self):
        runnable = sorted(q for q in self.queue if q[0] < 2)
        if runnable:
            entry = runnable[0]
            self.queue.remove(entry)
            self.log.append((entry[0], entry[2], True))
            return True
        if self.current is None:
            destages = sorted(q for q in self.queue if q[0] == 2)
            if not destages:
                return False
            self.current = destages[0]
            self.queue.remove(self.current)
        self.current[3] -= 1
        done = self.current[3] == 0
        self.log.append((2, self.current[2], done))
        if done:
            self.current = None
        return True


def random_trace(rng, n_ops):
    ops = []
    req_id = 0
    for _ in range(n_ops):
        if rng.random() < 0.45:
            kind = rng.choice([RequestKind.STAGE, RequestKind.LATE_WRITE, RequestKind.DESTAGE])
            units = rng.randrange(1, 5) if kind is RequestKind.DESTAGE else 1
            ops.append(("submit", kind, f"r{req_id}", units))
            req_id += 1
        else:
            ops.append(("step",))
    ops.extend([("step",)] * 32)  # drain
    return ops


def replay_real(ops, files, entries):
    """Run a trace through the real scheduler; returns (log, arrivals) where
    the log holds (kind, request_id, final) per executed unit and arrivals
    maps request_id -> index in the log at submission time."""
    log = []
    sched = IOScheduler(completion_sink=log.append)
    arrivals = {}
    try:
        for op in ops:
            if op[0] == "submit":
                _, kind, req_id, units = op
                arrivals[req_id] = len(log)
                if kind is RequestKind.STAGE:
                    req = stage_req(files, entries, pos=0, window=req_id)
                elif kind is RequestKind.LATE_WRITE:
                    req = IORequest(kind, req_id, files, blocks=[make_block(1)])
                else:
                    req = IORequest(kind, req_id, files,
                                    blocks=[make_block(1, start=i) for i in range(units)])
                sched.submit(req)
            else:
                if sched._heap or sched._current:
                    run_step_await(sched, log)
                else:
                    sched.step()
    finally:
        sched.close(drain=False, timeout=5.0)
    return [(int(c.kind), c.window_id, c.final) for c in log], arrivals


def run_sim(ops):
    sim = SimScheduler()
    for op in ops:
        if op[0] == "submit":
            sim.submit(int(op[1]), op[2], op[3])
        else:
            sim.step()
    return sim.log
