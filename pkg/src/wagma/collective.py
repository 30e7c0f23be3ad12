"""Wait-avoiding group allreduce and the blocking global allreduce.

Each simulated process is modeled as a compute context (the training loop)
plus an always-responsive communication context (the message handlers
below). The communication context serves activations and phase exchanges
from a snapshot of the process's send buffer, which is how a straggler
passively contributes its most recent model without blocking peers.

Group allreduce protocol, per version t:

- The first process to reach the call becomes the activator and broadcasts
  activation messages along the binomial tree rooted at itself; the tree
  spans all P processes even though data exchange stays within groups.
- On first activation (or on joining), a process snapshots its send buffer
  into the accumulator and runs the in-group recursive-doubling schedule:
  phase r exchanges partial sums with ``rank XOR masks[r]``.
- Version numbers make execution exactly-once: re-activations and joins
  for an already-executed version are no-ops / answered from the completed
  result. A process that joins after its instance finished gets
  ``AlreadyDone`` and the caller applies the late-contribution rule.

Reduction order is fixed (received + local, phase by phase), so results
are bit-identical across processes and across runs.

Wire format (little-endian): kind byte in {ACT=1, PHASE=2, SYNC=3},
version u64, phase u16, payload word count u32, payload f64 words.
Activation messages carry the activator rank as their single payload word
and the tree hop in the phase field.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional

import numpy as np

from .netsim import Simulator
from .topology import GroupingParams, MASK_RULE_EXAMPLE, phase_masks

__all__ = [
    "ACT",
    "PHASE",
    "SYNC",
    "encode_message",
    "decode_message",
    "ProtocolFault",
    "VersionRegressionError",
    "SendBuffer",
    "JoinStatus",
    "JoinResult",
    "GroupAllreduce",
    "SyncAllreduce",
]

ACT = 0x01
PHASE = 0x02
SYNC = 0x03

_HEADER = struct.Struct("<BQHI")


class ProtocolFault(RuntimeError):
    """A message inconsistent with the protocol state (surfaced, not ignored)."""


class VersionRegressionError(ProtocolFault):
    """A process tried to join a collective version at or below one it already joined."""


def encode_message(kind: int, version: int, phase: int, payload: np.ndarray) -> bytes:
    vec = np.ascontiguousarray(payload, dtype="<f8")
    return _HEADER.pack(kind, version, phase, vec.size) + vec.tobytes()


def decode_message(body: bytes) -> tuple[int, int, int, np.ndarray]:
    kind, version, phase, count = _HEADER.unpack_from(body)
    payload = np.frombuffer(body, dtype="<f8", count=count, offset=_HEADER.size)
    return kind, version, phase, payload


@dataclass
class SendBuffer:
    """The model snapshot peers may pull at any time.

    Installs replace the payload reference atomically (readers never see a
    torn mix of two payloads) and the stamp never decreases.
    """

    payload: np.ndarray
    stamped_iteration: int = -1

    def install(self, vec: np.ndarray, iteration: int) -> None:
        if iteration < self.stamped_iteration:
            raise ProtocolFault(
                f"send buffer stamp would regress: {self.stamped_iteration} -> {iteration}"
            )
        self.payload = np.array(vec, dtype=np.float64, copy=True)
        self.stamped_iteration = iteration


class JoinStatus(Enum):
    ACTIVE = "active"
    ALREADY_DONE = "already_done"


@dataclass
class JoinResult:
    status: JoinStatus
    accumulator: Optional[np.ndarray] = None


class _State(Enum):
    INACTIVE = "inactive"
    ACTIVATED = "activated"
    EXCHANGING = "exchanging"
    COMPLETE = "complete"


@dataclass
class _Instance:
    """Per-version protocol state; transitions are monotone."""

    version: int
    masks: tuple[int, ...]
    accumulator: np.ndarray
    timely: bool
    contrib_stamp: int
    phase: int = 0
    state: _State = _State.ACTIVATED


class GroupAllreduce:
    """Per-process endpoint of the wait-avoiding group allreduce.

    ``on_complete(version, accumulator, timely, contrib_stamp)`` fires at
    every completion, including passive ones; it may fire synchronously
    from inside ``join_or_check`` when there are no exchange phases.

    With ``activation_enabled=False`` the activation component is removed:
    every process starts its exchange only at its own join, which yields
    the synchronous (blocking) group allreduce.
    """

    def __init__(
        self,
        sim: Simulator,
        rank: int,
        P: int,
        S: int,
        on_complete: Callable[[int, np.ndarray, bool, int], None],
        initial_model: np.ndarray,
        mask_rule: str = MASK_RULE_EXAMPLE,
        activation_enabled: bool = True,
        staleness_bound: Optional[int] = None,
        contribution_log: Optional[list] = None,
    ):
        self.sim = sim
        self.rank = rank
        self.P = P
        self.S = S
        self.on_complete = on_complete
        self.mask_rule = mask_rule
        self.activation_enabled = activation_enabled
        self.staleness_bound = staleness_bound
        self.contribution_log = contribution_log
        self.send_buffer = SendBuffer(np.array(initial_model, dtype=np.float64, copy=True))
        self.tree_depth = P.bit_length() - 1

        self.last_joined = -1
        self.last_completed = -1
        self.completion_tag = -1
        self.executed: set[int] = set()
        self.execution_count: dict[int, int] = {}
        self.current: Optional[_Instance] = None
        self.completed: dict[int, tuple[np.ndarray, bool, int]] = {}
        self.queued_acts: dict[int, int] = {}
        self.pending_phase: dict[int, dict[int, np.ndarray]] = {}

        self.acts_sent = 0
        self.activations_originated = 0
        self.phases_sent = 0
        self._corrupt_outgoing: Optional[Callable[[int, int, np.ndarray], np.ndarray]] = None

    # -- compute-context entry points ------------------------------------

    def install_fresh(self, vec: np.ndarray, iteration: int) -> None:
        self.send_buffer.install(vec, iteration)

    def join_or_check(self, version: int, fresh: np.ndarray) -> JoinResult:
        """Join the version-``version`` instance with the fresh local model.

        Installs ``fresh`` into the send buffer in all cases. Returns
        ``ALREADY_DONE`` with the finished accumulator if this process
        already participated passively; otherwise ``ACTIVE``, with the
        result delivered through ``on_complete``.
        """
        if version <= self.last_joined:
            raise VersionRegressionError(
                f"rank {self.rank}: join for version {version} after joining {self.last_joined}"
            )
        self.last_joined = version
        self.install_fresh(fresh, version)

        if version in self.completed:
            acc, _, _ = self.completed.pop(version)
            return JoinResult(JoinStatus.ALREADY_DONE, acc)
        if self.current is not None and self.current.version == version:
            # Passive exchange in flight; the fresh model arrived too late
            # to be read into this version's accumulator.
            return JoinResult(JoinStatus.ACTIVE)
        if version not in self.queued_acts and self.activation_enabled:
            self._broadcast_activation(version)
        if self.current is None:
            self.queued_acts.pop(version, None)
            self._activate(version)
        else:
            # Busy with another version; run this one as soon as possible.
            self.queued_acts.setdefault(version, -1)
        return JoinResult(JoinStatus.ACTIVE)

    # -- message handling -------------------------------------------------

    def handle_message(self, src: int, body: bytes) -> None:
        kind, version, phase, payload = decode_message(body)
        if kind == ACT:
            self._on_activation(version, hop=phase, root=int(payload[0]))
        elif kind == PHASE:
            self._on_phase(src, version, phase, payload)
        else:
            raise ProtocolFault(f"group endpoint got unexpected kind {kind:#x}")

    def _on_activation(self, version: int, hop: int, root: int) -> None:
        if version in self.executed or version in self.queued_acts:
            return  # duplicate or already-run version: drop, no forwarding
        self._forward_activation(version, hop, root)
        self.queued_acts[version] = hop
        self._maybe_start_queued()

    def _on_phase(self, src: int, version: int, phase: int, payload: np.ndarray) -> None:
        inst = self.current
        if inst is None or inst.version != version:
            if version in self.executed:
                raise ProtocolFault(
                    f"rank {self.rank}: phase message for finished version {version}"
                )
            slot = self.pending_phase.setdefault(version, {})
            if phase in slot:
                raise ProtocolFault(f"duplicate phase {phase} buffered for version {version}")
            slot[phase] = payload
            return
        if phase < inst.phase or phase in self.pending_phase.get(version, {}):
            raise ProtocolFault(
                f"rank {self.rank}: duplicate phase {phase} for version {version}"
            )
        self.pending_phase.setdefault(version, {})[phase] = payload
        self._drain(inst)

    # -- internals ---------------------------------------------------------

    def _broadcast_activation(self, version: int) -> None:
        self.activations_originated += 1
        root_word = np.array([float(self.rank)])
        for j in range(self.tree_depth):
            self.sim.send(self.rank, self.rank ^ (1 << j), encode_message(ACT, version, j, root_word))
            self.acts_sent += 1

    def _forward_activation(self, version: int, hop: int, root: int) -> None:
        root_word = np.array([float(root)])
        for j in range(hop + 1, self.tree_depth):
            self.sim.send(self.rank, self.rank ^ (1 << j), encode_message(ACT, version, j, root_word))
            self.acts_sent += 1

    def _maybe_start_queued(self) -> None:
        while self.current is None and self.queued_acts:
            version = min(self.queued_acts)
            self.queued_acts.pop(version)
            if version not in self.executed:
                self._activate(version)

    def _activate(self, version: int) -> None:
        assert self.current is None
        assert version not in self.executed, "exchange schedule must run at most once"
        self.executed.add(version)
        self.execution_count[version] = self.execution_count.get(version, 0) + 1
        masks = phase_masks(GroupingParams(self.P, self.S, version), self.mask_rule).masks
        stamp = self.send_buffer.stamped_iteration
        if self.staleness_bound is not None and stamp <= version - self.staleness_bound:
            raise ProtocolFault(
                f"rank {self.rank}: stale contribution {stamp} for version {version} "
                f"violates staleness bound {self.staleness_bound}"
            )
        if self.contribution_log is not None:
            self.contribution_log.append((self.rank, version, stamp))
        inst = _Instance(
            version=version,
            masks=masks,
            accumulator=self.send_buffer.payload.copy(),
            timely=(stamp == version),
            contrib_stamp=stamp,
        )
        self.current = inst
        inst.state = _State.EXCHANGING
        self._enter_phase(inst)
        if self.current is inst:
            self._drain(inst)

    def _enter_phase(self, inst: _Instance) -> None:
        if inst.phase >= len(inst.masks):
            self._complete(inst)
            return
        payload = inst.accumulator
        if self._corrupt_outgoing is not None:
            payload = self._corrupt_outgoing(inst.version, inst.phase, payload)
        dst = self.rank ^ inst.masks[inst.phase]
        self.sim.send(self.rank, dst, encode_message(PHASE, inst.version, inst.phase, payload))
        self.phases_sent += 1

    def _drain(self, inst: _Instance) -> None:
        slot = self.pending_phase.get(inst.version)
        while slot and inst.phase in slot:
            incoming = slot.pop(inst.phase)
            inst.accumulator = incoming + inst.accumulator
            inst.phase += 1
            self._enter_phase(inst)
            if self.current is not inst:
                return

    def _complete(self, inst: _Instance) -> None:
        inst.state = _State.COMPLETE
        leftovers = self.pending_phase.pop(inst.version, {})
        if leftovers:
            raise ProtocolFault(
                f"rank {self.rank}: surplus phase messages {sorted(leftovers)} "
                f"for version {inst.version}"
            )
        self.current = None
        self.last_completed = max(self.last_completed, inst.version)
        self.completion_tag = inst.version
        if inst.version > self.last_joined:
            self.completed[inst.version] = (inst.accumulator, inst.timely, inst.contrib_stamp)
        self.on_complete(inst.version, inst.accumulator, inst.timely, inst.contrib_stamp)
        self._maybe_start_queued()


class SyncAllreduce:
    """Blocking full-butterfly allreduce over all P processes.

    Every process must join with the same iteration index; each receives
    the bit-identical sum of all P contributions once the reduction
    completes. ``on_complete(iteration, total)`` may fire synchronously
    from ``join`` when P == 1.
    """

    def __init__(
        self,
        sim: Simulator,
        rank: int,
        P: int,
        on_complete: Callable[[int, np.ndarray], None],
    ):
        self.sim = sim
        self.rank = rank
        self.P = P
        self.on_complete = on_complete
        self.masks = tuple(1 << j for j in range(P.bit_length() - 1))
        self.last_completed = -1
        self.current: Optional[_Instance] = None
        self.pending: dict[int, dict[int, np.ndarray]] = {}
        self.syncs_sent = 0

    def join(self, iteration: int, vec: np.ndarray) -> None:
        if self.current is not None:
            raise ProtocolFault(f"rank {self.rank}: overlapping sync joins")
        if iteration <= self.last_completed:
            raise ProtocolFault(
                f"rank {self.rank}: sync for iteration {iteration} after {self.last_completed}"
            )
        missed = [t for t in self.pending if t < iteration]
        if missed:
            raise ProtocolFault(
                f"rank {self.rank}: peers synced at iterations {sorted(missed)}, "
                f"this process joined at {iteration} (mismatched sync points)"
            )
        inst = _Instance(
            version=iteration,
            masks=self.masks,
            accumulator=np.array(vec, dtype=np.float64, copy=True),
            timely=True,
            contrib_stamp=iteration,
            state=_State.EXCHANGING,
        )
        self.current = inst
        self._enter_phase(inst)
        if self.current is inst:
            self._drain(inst)

    def handle_message(self, src: int, body: bytes) -> None:
        kind, iteration, phase, payload = decode_message(body)
        if kind != SYNC:
            raise ProtocolFault(f"sync endpoint got unexpected kind {kind:#x}")
        inst = self.current
        if inst is None or inst.version != iteration:
            if iteration <= self.last_completed:
                raise ProtocolFault(
                    f"rank {self.rank}: sync message for finished iteration {iteration}"
                )
            slot = self.pending.setdefault(iteration, {})
            if phase in slot:
                raise ProtocolFault(f"duplicate sync phase {phase} for iteration {iteration}")
            slot[phase] = payload
            return
        if phase < inst.phase or phase in self.pending.get(iteration, {}):
            raise ProtocolFault(f"duplicate sync phase {phase} for iteration {iteration}")
        self.pending.setdefault(iteration, {})[phase] = payload
        self._drain(inst)

    def _enter_phase(self, inst: _Instance) -> None:
        if inst.phase >= len(inst.masks):
            self._complete(inst)
            return
        dst = self.rank ^ inst.masks[inst.phase]
        self.sim.send(self.rank, dst, encode_message(SYNC, inst.version, inst.phase, inst.accumulator))
        self.syncs_sent += 1

    def _drain(self, inst: _Instance) -> None:
        slot = self.pending.get(inst.version)
        while slot and inst.phase in slot:
            incoming = slot.pop(inst.phase)
            inst.accumulator = incoming + inst.accumulator
            inst.phase += 1
            self._enter_phase(inst)
            if self.current is not inst:
                return

    def _complete(self, inst: _Instance) -> None:
        inst.state = _State.COMPLETE
        leftovers = self.pending.pop(inst.version, {})
        if leftovers:
            raise ProtocolFault(
                f"rank {self.rank}: surplus sync messages for iteration {inst.version}"
            )
        self.current = None
        self.last_completed = inst.version
        self.on_complete(inst.version, inst.accumulator)
