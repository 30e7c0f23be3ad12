"""Deterministic discrete-event network simulator.

A single global event queue ordered by (time, sequence-counter) drives
everything: message arrivals, per-process compute completions, and timers.
The sequence counter is assigned at scheduling time, so two runs with the
same configuration and seed replay the exact same event order, byte for
byte. Processes register a handler and interact only through ``send`` and
``schedule``; message bodies are opaque bytes.

Times are simulated milliseconds (floats). Per-ordered-pair channels are
FIFO because link latency is a single constant per run; delivery order is
additionally checked with channel sequence numbers.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

__all__ = [
    "SimEvent",
    "Simulator",
    "DelayModel",
    "StragglerPolicy",
    "TimeTravelError",
    "BudgetExceededError",
    "compute_delay",
    "MESSAGE",
    "COMPUTE",
    "TIMER",
]

MESSAGE = "message"
COMPUTE = "compute"
TIMER = "timer"


class TimeTravelError(RuntimeError):
    """An event was scheduled before the current simulated time."""


class BudgetExceededError(RuntimeError):
    """The event-count budget was exhausted (livelock guard)."""


@dataclass(frozen=True)
class SimEvent:
    """One timestamped simulator event.

    ``payload`` is a (src, body, channel_seq) triple for messages, and an
    arbitrary token (usually a callable) for compute/timer events.
    """

    time: float
    seq: int
    target: int
    kind: str
    payload: object = None


@dataclass(frozen=True)
class StragglerPolicy:
    """Per-iteration delay injection: pick victims, add a fixed extra delay.

    Victim choice is a pure function of (selection_seed, iteration).
    """

    victims_per_iteration: int
    extra_delay_ms: float
    selection_seed: int = 0

    def victims(self, iteration: int, P: int) -> frozenset[int]:
        if self.victims_per_iteration <= 0:
            return frozenset()
        if self.victims_per_iteration > P:
            raise ValueError("victims_per_iteration exceeds process count")
        rng = np.random.default_rng([self.selection_seed, iteration])
        picks = rng.choice(P, size=self.victims_per_iteration, replace=False)
        return frozenset(int(v) for v in picks)


@dataclass(frozen=True)
class DelayModel:
    """Compute and network timing for one run. All delays are >= 0 ms.

    The uniform background jitter is a simple stand-in for ambient
    variability; targeted slowdowns belong in the straggler policy.
    """

    base_compute_ms: float = 1.0
    jitter_max_ms: float = 0.0
    link_latency_ms: float = 1.0
    straggler: Optional[StragglerPolicy] = None

    def __post_init__(self) -> None:
        if min(self.base_compute_ms, self.jitter_max_ms, self.link_latency_ms) < 0:
            raise ValueError("delays must be non-negative")


def compute_delay(proc: int, iteration: int, model: DelayModel, rng_seed: int, P: int) -> float:
    """Compute time of one iteration at one process, in ms.

    base + uniform jitter on [0, jitter_max] + straggler extra delay if
    this process is one of the iteration's victims. Pure in its inputs.
    """
    if not 0 <= proc < P:
        raise ValueError(f"rank {proc} out of range for P={P}")
    delay = model.base_compute_ms
    if model.jitter_max_ms > 0:
        rng = np.random.default_rng([rng_seed, iteration, proc])
        delay += float(rng.uniform(0.0, model.jitter_max_ms))
    if model.straggler is not None and proc in model.straggler.victims(iteration, P):
        delay += model.straggler.extra_delay_ms
    return delay


class Simulator:
    """Single-threaded event loop over ``num_procs`` simulated processes."""

    def __init__(
        self,
        num_procs: int,
        link_latency_ms: float = 1.0,
        event_budget: int = 20_000_000,
        trace: bool = False,
    ):
        if num_procs < 1:
            raise ValueError("need at least one process")
        self.num_procs = num_procs
        self.link_latency_ms = link_latency_ms
        self.event_budget = event_budget
        self.now = 0.0
        self._queue: list[tuple[float, int, SimEvent]] = []
        self._seq = 0
        self._handlers: dict[int, Callable[[SimEvent], None]] = {}
        self._processed = 0
        self._chan_send_seq: dict[tuple[int, int], int] = {}
        self._chan_recv_seq: dict[tuple[int, int], int] = {}
        self.msgs_total = 0
        self.bytes_total = 0
        self.trace: Optional[list[tuple[float, int, int, str]]] = [] if trace else None

    def register(self, rank: int, handler: Callable[[SimEvent], None]) -> None:
        self._check_rank(rank)
        self._handlers[rank] = handler

    def _check_rank(self, rank: int) -> None:
        if not 0 <= rank < self.num_procs:
            raise ValueError(f"rank {rank} out of range for P={self.num_procs}")

    def schedule(self, time: float, target: int, kind: str, payload: object = None) -> SimEvent:
        """Enqueue an event; equal timestamps keep scheduling order."""
        if time < self.now:
            raise TimeTravelError(f"event at t={time} scheduled from now={self.now}")
        self._check_rank(target)
        ev = SimEvent(time=time, seq=self._seq, target=target, kind=kind, payload=payload)
        self._seq += 1
        heapq.heappush(self._queue, (time, ev.seq, ev))
        return ev

    def call_at(self, time: float, target: int, fn: Callable[[], None], kind: str = TIMER) -> SimEvent:
        return self.schedule(time, target, kind, fn)

    def send(self, src: int, dst: int, body: bytes) -> SimEvent:
        """Deliver ``body`` to dst after the link latency. FIFO per (src, dst)."""
        self._check_rank(src)
        self._check_rank(dst)
        chan = (src, dst)
        cseq = self._chan_send_seq.get(chan, 0)
        self._chan_send_seq[chan] = cseq + 1
        self.msgs_total += 1
        self.bytes_total += len(body)
        return self.schedule(self.now + self.link_latency_ms, dst, MESSAGE, (src, body, cseq))

    def run_until_idle(self) -> float:
        """Process all queued events in order; returns the final time."""
        while self._queue:
            self._processed += 1
            if self._processed > self.event_budget:
                raise BudgetExceededError(f"exceeded event budget {self.event_budget}")
            _, _, ev = heapq.heappop(self._queue)
            self.now = ev.time
            if self.trace is not None:
                self.trace.append((ev.time, ev.seq, ev.target, ev.kind))
            if ev.kind == MESSAGE:
                src, body, cseq = ev.payload
                chan = (src, ev.target)
                expect = self._chan_recv_seq.get(chan, 0)
                assert cseq == expect, f"channel {chan} delivered out of order"
                self._chan_recv_seq[chan] = expect + 1
            handler = self._handlers.get(ev.target)
            if handler is not None:
                handler(ev)
        return self.now

    def dump_trace(self, fp) -> None:
        """Write one tab-separated line per processed event: time, seq, target, kind."""
        if self.trace is None:
            raise ValueError("simulator was created with trace=False")
        for time, seq, target, kind in self.trace:
            fp.write(f"{time!r}\t{seq}\t{target}\t{kind}\n")
