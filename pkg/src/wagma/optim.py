"""Group model averaging SGD, baselines, and convergence diagnostics.

The main optimizer runs, per worker and iteration t: a local gradient step
producing the updated model W', then one of

- group averaging (default): join the wait-avoiding group allreduce for
  version t; divide the group sum by S if this worker's fresh model made it
  in, or average the sum with the late W' (dividing by S+1) otherwise;
- a blocking group allreduce (``beta`` flag): same arithmetic, activation
  component removed;
- nothing (both flags off): plain local SGD between sync points.

Every ``tau`` iterations all workers instead run a blocking global
allreduce and replace their replicas with the identical global average,
which bounds the staleness of anything averaged in between.

Baselines: per-iteration global gradient averaging, local SGD with
periodic model averaging, synchronous ring neighbor averaging, and
asynchronous seeded pairwise averaging.

Diagnostics track the replica mean, the replica-spread potential
sum_i ||W_i - mean||^2, the full-batch gradient norm at the mean, and the
maximum staleness used by any averaging event.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .collective import (
    ACT,
    PHASE,
    SYNC,
    GroupAllreduce,
    JoinStatus,
    ProtocolFault,
    SyncAllreduce,
    decode_message,
    encode_message,
)
from .netsim import COMPUTE, MESSAGE, DelayModel, Simulator, compute_delay
from .problems import Problem, draw_batch, partition_indices
from .topology import GroupingParams, MASK_RULE_EXAMPLE

__all__ = [
    "MODES",
    "EtaSchedule",
    "OptimizerConfig",
    "WorkerState",
    "Diagnostics",
    "MetricsRecord",
    "CSV_HEADER",
    "TrainingResult",
    "ConfigError",
    "DivergenceError",
    "local_step",
    "compute_diagnostics",
    "gamma_bound",
    "run_training",
    "is_sync_iteration",
]

MODES = ("wagma", "allreduce", "local_sgd", "dpsgd", "adpsgd")

# framing shared with the collective wire format; kinds used by baselines
RING = 0x10
PAIR_REQ = 0x11
PAIR_REP = 0x12

CSV_HEADER = "iteration,sim_time_ms,loss_mu,grad_norm_sq_mu,gamma,max_staleness,msgs_total,bytes_total"


class ConfigError(ValueError):
    """Invalid run configuration."""


class DivergenceError(RuntimeError):
    """Non-finite gradient or loss encountered during training."""


@dataclass(frozen=True)
class EtaSchedule:
    """Learning-rate schedule: constant, step decay, or P/sqrt(T)."""

    kind: str = "constant"
    value: float = 0.1
    decay_factor: float = 0.5
    decay_every: int = 0

    def rate(self, t: int, P: int, T: int) -> float:
        if self.kind == "constant":
            return self.value
        if self.kind == "step":
            if self.decay_every <= 0:
                raise ConfigError("step schedule needs decay_every >= 1")
            return self.value * self.decay_factor ** (t // self.decay_every)
        if self.kind == "theorem":
            return P / np.sqrt(T)
        raise ConfigError(f"unknown eta schedule kind {self.kind!r}")


@dataclass
class OptimizerConfig:
    """The four averaging parameters plus local-update settings.

    ``tau=None`` means no global synchronization at all. ``alpha`` selects
    the wait-avoiding group allreduce, ``beta`` the blocking one; both off
    degrades to local SGD with period tau.
    """

    T: int
    S: int = 1
    tau: Optional[int] = None
    alpha: bool = True
    beta: bool = False
    eta: EtaSchedule = field(default_factory=EtaSchedule)
    b: int = 1
    update_rule: str = "sgd"
    momentum: float = 0.9

    def validate(self, P: int) -> None:
        if self.alpha and self.beta:
            raise ConfigError("alpha and beta can not both be set")
        if self.T < 1:
            raise ConfigError("T must be >= 1")
        if self.tau is not None and self.tau < 1:
            raise ConfigError("tau must be >= 1 or None")
        if self.b < 1:
            raise ConfigError("batch size must be >= 1")
        if self.update_rule not in ("sgd", "momentum"):
            raise ConfigError(f"unknown update rule {self.update_rule!r}")
        try:
            GroupingParams(P, self.S, 0)  # power-of-two and S <= P checks
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.eta.kind == "constant" and self.eta.value <= 0:
            raise ConfigError("eta must be positive")
        if self.eta.kind == "theorem" and self.tau is not None:
            horizon = P ** 4 * self.tau ** 4
            if self.T < horizon:
                warnings.warn(
                    f"theorem schedule expects T >= P^4 tau^4 = {horizon}, got T={self.T}",
                    stacklevel=2,
                )


def is_sync_iteration(t: int, tau: Optional[int]) -> bool:
    return tau is not None and (t + 1) % tau == 0


@dataclass
class WorkerState:
    """One process's replica and staleness bookkeeping."""

    rank: int
    W: np.ndarray
    W_prime: np.ndarray
    iter: int = 0
    q: int = -1  # iteration of the last group interaction
    r: int = -1  # iteration of the last global sync
    m: Optional[np.ndarray] = None  # momentum buffer


def local_step(state: WorkerState, problem: Problem, partition: np.ndarray,
               cfg: OptimizerConfig, seed: int, P: int) -> np.ndarray:
    """One local gradient step: W' = W + Delta, Delta from the update rule."""
    t = state.iter
    idx = draw_batch(partition, cfg.b, seed, state.rank, t)
    grad = problem.batch_gradient(state.W, idx)
    if not np.all(np.isfinite(grad)):
        raise DivergenceError(f"non-finite gradient at rank {state.rank}, iteration {t}")
    if cfg.update_rule == "momentum":
        if state.m is None:
            state.m = np.zeros_like(state.W)
        state.m = cfg.momentum * state.m + grad
        direction = state.m
    else:
        direction = grad
    state.W_prime = state.W - cfg.eta.rate(t, P, cfg.T) * direction
    return state.W_prime


@dataclass
class Diagnostics:
    """Replica-agreement measurements at one observation point."""

    mu: np.ndarray
    gamma: float
    grad_norm_sq_mu: float
    loss_mu: float
    max_staleness_used: int = 0
    M_hat: Optional[float] = None


def compute_diagnostics(weights: list[np.ndarray], problem: Problem) -> Diagnostics:
    """Exact replica mean, spread potential, and full-batch gradient norm."""
    stack = np.stack(weights)
    mu = stack.mean(axis=0)
    gamma = float(np.sum((stack - mu) ** 2))
    grad = problem.gradient(mu)
    return Diagnostics(
        mu=mu,
        gamma=gamma,
        grad_norm_sq_mu=float(np.dot(grad, grad)),
        loss_mu=problem.loss(mu),
    )


def gamma_bound(P: int, eta: float, M_hat: float, tau: int) -> float:
    """Replica-spread bound 16 P eta^2 M^2 tau^2 the potential is checked against."""
    return 16.0 * P * eta ** 2 * M_hat ** 2 * tau ** 2


@dataclass(frozen=True)
class MetricsRecord:
    iteration: int
    sim_time_ms: float
    loss_mu: float
    grad_norm_sq_mu: float
    gamma: float
    max_staleness: int
    msgs_total: int
    bytes_total: int

    def csv_row(self) -> str:
        return (
            f"{self.iteration},{self.sim_time_ms!r},{self.loss_mu!r},"
            f"{self.grad_norm_sq_mu!r},{self.gamma!r},{self.max_staleness},"
            f"{self.msgs_total},{self.bytes_total}"
        )


@dataclass
class TrainingResult:
    records: list[MetricsRecord]
    final_weights: list[np.ndarray]
    final_time_ms: float
    msgs_total: int
    bytes_total: int
    sync_replica_checks: list[tuple[int, bool]]
    max_gamma: float
    max_staleness: int

    @property
    def final(self) -> MetricsRecord:
        return self.records[-1]


class _Recorder:
    """Collects per-iteration snapshots and emits one metrics row when the
    last worker finishes that iteration. Snapshots are observation-only and
    never touch message timing."""

    def __init__(self, P: int, problem: Problem, sim: Simulator,
                 sync_predicate: Callable[[int], bool]):
        self.P = P
        self.problem = problem
        self.sim = sim
        self.is_sync = sync_predicate
        self._snapshots: dict[int, dict[int, np.ndarray]] = {}
        self._stale: dict[int, int] = {}
        self.records: list[MetricsRecord] = []
        self.sync_replica_checks: list[tuple[int, bool]] = []
        self.max_gamma = 0.0
        self.max_staleness = 0

    def note_contribution(self, rank: int, version: int, stamp: int) -> None:
        age = version - stamp
        if age > self._stale.get(version, 0):
            self._stale[version] = age
        if age > self.max_staleness:
            self.max_staleness = age

    def worker_done(self, rank: int, t: int, W: np.ndarray) -> None:
        slot = self._snapshots.setdefault(t, {})
        slot[rank] = W.copy()
        if len(slot) == self.P:
            self._emit(t, slot)

    def _emit(self, t: int, slot: dict[int, np.ndarray]) -> None:
        weights = [slot[r] for r in range(self.P)]
        diag = compute_diagnostics(weights, self.problem)
        if not np.isfinite(diag.loss_mu):
            raise DivergenceError(f"non-finite loss at iteration {t}")
        if self.is_sync(t):
            identical = all(np.array_equal(w, weights[0]) for w in weights[1:])
            self.sync_replica_checks.append((t, identical))
            if diag.gamma > 1e-12 * max(1.0, float(np.dot(diag.mu, diag.mu))):
                raise ProtocolFault(f"replica spread {diag.gamma} nonzero after sync at t={t}")
        self.max_gamma = max(self.max_gamma, diag.gamma)
        self.records.append(
            MetricsRecord(
                iteration=t,
                sim_time_ms=self.sim.now,
                loss_mu=diag.loss_mu,
                grad_norm_sq_mu=diag.grad_norm_sq_mu,
                gamma=diag.gamma,
                max_staleness=self._stale.pop(t, 0),
                msgs_total=self.sim.msgs_total,
                bytes_total=self.sim.bytes_total,
            )
        )
        del self._snapshots[t]


class _ContributionSink(list):
    """List that also forwards contribution records to the recorder."""

    def __init__(self, recorder: _Recorder):
        super().__init__()
        self._recorder = recorder

    def append(self, item) -> None:
        super().append(item)
        self._recorder.note_contribution(*item)


class _WorkerBase:
    """Event-driven worker skeleton: compute, communicate, advance."""

    def __init__(self, run: "_Run", rank: int):
        self.run = run
        self.rank = rank
        w0 = run.problem.initial_point()
        self.state = WorkerState(rank=rank, W=w0.copy(), W_prime=w0.copy())
        self.partition = run.partitions[rank]
        run.sim.register(rank, self._on_event)

    # -- lifecycle ---------------------------------------------------------

    def start(self) -> None:
        self._schedule_compute()

    def _schedule_compute(self) -> None:
        run = self.run
        delay = compute_delay(self.rank, self.state.iter, run.delay, run.seed, run.P)
        run.sim.schedule(run.sim.now + delay, self.rank, COMPUTE, self._on_compute_done)

    def _finish_iteration(self, new_W: np.ndarray) -> None:
        t = self.state.iter
        self.state.W = new_W
        self.run.recorder.worker_done(self.rank, t, new_W)
        self.state.iter = t + 1
        if self.state.iter < self.run.opt.T:
            self._schedule_compute()

    # -- events ------------------------------------------------------------

    def _on_event(self, ev) -> None:
        if ev.kind == MESSAGE:
            src, body, _ = ev.payload
            self._on_message(src, body)
        elif callable(ev.payload):
            ev.payload()

    def _on_message(self, src: int, body: bytes) -> None:
        raise NotImplementedError

    def _on_compute_done(self) -> None:
        raise NotImplementedError

    def _local_step(self) -> np.ndarray:
        run = self.run
        return local_step(self.state, run.problem, self.partition, run.opt, run.seed, run.P)


class _GroupAveragingWorker(_WorkerBase):
    """The four-parameter optimizer: group averaging / blocking group
    averaging / pure local steps, with a global sync every tau iterations."""

    def __init__(self, run: "_Run", rank: int):
        super().__init__(run, rank)
        opt = run.opt
        self.use_group = opt.alpha or opt.beta
        if self.use_group:
            self.group = GroupAllreduce(
                run.sim, rank, run.P, opt.S,
                on_complete=self._on_group_complete,
                initial_model=self.state.W,
                mask_rule=run.mask_rule,
                activation_enabled=opt.alpha,
                staleness_bound=opt.tau,
                contribution_log=run.contribution_sink,
            )
        self.sync = SyncAllreduce(run.sim, rank, run.P, on_complete=self._on_sync_complete)
        self._awaited: Optional[int] = None
        self._in_join = False
        self._pending: Optional[tuple[np.ndarray, bool]] = None

    def _on_message(self, src: int, body: bytes) -> None:
        kind = body[0]
        if kind in (ACT, PHASE) and self.use_group:
            self.group.handle_message(src, body)
        elif kind == SYNC:
            self.sync.handle_message(src, body)
        else:
            raise ProtocolFault(f"unexpected message kind {kind:#x}")

    def _on_compute_done(self) -> None:
        t = self.state.iter
        w_prime = self._local_step()
        if is_sync_iteration(t, self.run.opt.tau):
            if self.use_group:
                # keep the pull window fresh across the sync so nothing
                # averaged later is older than tau - 1 iterations
                self.group.install_fresh(w_prime, t)
            self.sync.join(t, w_prime)
        elif self.use_group:
            self._awaited = t
            self._pending = None
            self._in_join = True
            res = self.group.join_or_check(t, w_prime)
            self._in_join = False
            if res.status is JoinStatus.ALREADY_DONE:
                self._awaited = None
                self._finish_group_round(t, res.accumulator, timely=False)
            elif self._pending is not None:
                acc, timely = self._pending
                self._pending = None
                self._awaited = None
                self._finish_group_round(t, acc, timely)
            # else parked until _on_group_complete fires
        else:
            self._finish_iteration(w_prime.copy())

    def _on_group_complete(self, version: int, acc: np.ndarray, timely: bool, stamp: int) -> None:
        if self._awaited != version:
            return  # passive completion; consumed at this worker's own join
        if self._in_join:
            self._pending = (acc, timely)
            return
        self._awaited = None
        self._finish_group_round(version, acc, timely)

    def _finish_group_round(self, t: int, acc: np.ndarray, timely: bool) -> None:
        S = self.run.opt.S
        if timely:
            new_W = acc / S
        else:
            new_W = (acc + self.state.W_prime) / (S + 1)
            self.run.recorder.note_contribution(self.rank, t, t)  # fresh late self-term
        self.state.q = t
        self._finish_iteration(new_W)

    def _on_sync_complete(self, iteration: int, total: np.ndarray) -> None:
        self.state.r = iteration
        self.state.q = iteration
        self._finish_iteration(total / self.run.P)


class _LocalSGDWorker(_WorkerBase):
    """Local steps with a blocking global model average every tau iterations."""

    def __init__(self, run: "_Run", rank: int):
        super().__init__(run, rank)
        self.sync = SyncAllreduce(run.sim, rank, run.P, on_complete=self._on_sync_complete)

    def _on_message(self, src: int, body: bytes) -> None:
        self.sync.handle_message(src, body)

    def _on_compute_done(self) -> None:
        t = self.state.iter
        w_prime = self._local_step()
        if is_sync_iteration(t, self.run.opt.tau):
            self.sync.join(t, w_prime)
        else:
            self._finish_iteration(w_prime.copy())

    def _on_sync_complete(self, iteration: int, total: np.ndarray) -> None:
        self.state.r = iteration
        self.state.q = iteration
        self._finish_iteration(total / self.run.P)


class _AllreduceWorker(_WorkerBase):
    """Standard data-parallel training: global gradient average each step."""

    def __init__(self, run: "_Run", rank: int):
        super().__init__(run, rank)
        self.sync = SyncAllreduce(run.sim, rank, run.P, on_complete=self._on_sync_complete)

    def _on_message(self, src: int, body: bytes) -> None:
        self.sync.handle_message(src, body)

    def _on_compute_done(self) -> None:
        t = self.state.iter
        run = self.run
        idx = draw_batch(self.partition, run.opt.b, run.seed, self.rank, t)
        grad = run.problem.batch_gradient(self.state.W, idx)
        if not np.all(np.isfinite(grad)):
            raise DivergenceError(f"non-finite gradient at rank {self.rank}, iteration {t}")
        self.sync.join(t, grad)

    def _on_sync_complete(self, iteration: int, total: np.ndarray) -> None:
        run = self.run
        avg = total / run.P
        if run.opt.update_rule == "momentum":
            if self.state.m is None:
                self.state.m = np.zeros_like(self.state.W)
            self.state.m = run.opt.momentum * self.state.m + avg
            direction = self.state.m
        else:
            direction = avg
        eta_t = run.opt.eta.rate(iteration, run.P, run.opt.T)
        self.state.r = iteration
        self.state.q = iteration
        self._finish_iteration(self.state.W - eta_t * direction)


class _DPSGDWorker(_WorkerBase):
    """Synchronous ring averaging: replica <- mean of {left, self, right}.

    Neighbors are deduplicated, so P=1 degrades to plain local steps and
    P=2 to pairwise averaging. The sum runs in rank order for determinism.
    """

    def __init__(self, run: "_Run", rank: int):
        super().__init__(run, rank)
        P = run.P
        self.neighbors = sorted({(rank - 1) % P, (rank + 1) % P} - {rank})
        self._inbox: dict[int, dict[int, np.ndarray]] = {}
        self._ready: Optional[int] = None

    def _on_message(self, src: int, body: bytes) -> None:
        kind, t, _, payload = decode_message(body)
        if kind != RING:
            raise ProtocolFault(f"ring worker got kind {kind:#x}")
        slot = self._inbox.setdefault(t, {})
        if src in slot:
            raise ProtocolFault(f"duplicate ring message from {src} at t={t}")
        slot[src] = payload.copy()
        self._try_average()

    def _on_compute_done(self) -> None:
        t = self.state.iter
        w_prime = self._local_step()
        if not self.neighbors:
            self._finish_iteration(w_prime.copy())
            return
        body = encode_message(RING, t, 0, w_prime)
        for nb in self.neighbors:
            self.run.sim.send(self.rank, nb, body)
        self._ready = t
        self._try_average()

    def _try_average(self) -> None:
        t = self._ready
        if t is None:
            return
        slot = self._inbox.get(t, {})
        if len(slot) < len(self.neighbors):
            return
        ranks = sorted(slot.keys() | {self.rank})
        total = np.zeros_like(self.state.W_prime)
        for rk in ranks:
            total = total + (self.state.W_prime if rk == self.rank else slot[rk])
        self._ready = None
        del self._inbox[t]
        self.state.q = t
        self._finish_iteration(total / len(ranks))


class _ADPSGDWorker(_WorkerBase):
    """Asynchronous pairwise averaging with a seeded partner per step.

    The partner's communication context answers immediately with the
    average of the incoming model and its own current replica, adopting
    that average itself; there is no global clock.
    """

    def _on_message(self, src: int, body: bytes) -> None:
        kind, t, _, payload = decode_message(body)
        if kind == PAIR_REQ:
            avg = (payload + self.state.W) / 2.0
            self.state.W = avg
            self.run.sim.send(self.rank, src, encode_message(PAIR_REP, t, 0, avg))
        elif kind == PAIR_REP:
            self.state.q = t
            self._finish_iteration(payload.copy())
        else:
            raise ProtocolFault(f"pairwise worker got kind {kind:#x}")

    def _on_compute_done(self) -> None:
        t = self.state.iter
        w_prime = self._local_step()
        if self.run.P == 1:
            self._finish_iteration(w_prime.copy())
            return
        rng = np.random.default_rng([self.run.seed, 0xAD, self.rank, t])
        partner = int(rng.integers(0, self.run.P - 1))
        if partner >= self.rank:
            partner += 1
        self.run.sim.send(self.rank, partner, encode_message(PAIR_REQ, t, 0, w_prime))


_WORKERS = {
    "wagma": _GroupAveragingWorker,
    "local_sgd": _LocalSGDWorker,
    "allreduce": _AllreduceWorker,
    "dpsgd": _DPSGDWorker,
    "adpsgd": _ADPSGDWorker,
}


class _Run:
    """Shared context for one training simulation."""

    def __init__(self, P: int, mode: str, opt: OptimizerConfig, problem: Problem,
                 delay: DelayModel, seed: int, mask_rule: str, event_budget: int,
                 trace: bool):
        if mode not in MODES:
            raise ConfigError(f"unknown mode {mode!r}")
        opt.validate(P)
        if problem.n_samples < P * opt.b:
            raise ConfigError(
                f"dataset of {problem.n_samples} samples cannot feed P*b = {P * opt.b}"
            )
        self.P = P
        self.mode = mode
        self.opt = opt
        self.problem = problem
        self.delay = delay
        self.seed = seed
        self.mask_rule = mask_rule
        self.sim = Simulator(P, link_latency_ms=delay.link_latency_ms,
                             event_budget=event_budget, trace=trace)
        self.partitions = partition_indices(problem.n_samples, P, seed)

        if mode == "allreduce":
            sync_predicate = lambda t: True
        elif mode in ("dpsgd", "adpsgd"):
            sync_predicate = lambda t: False
        else:
            sync_predicate = lambda t: is_sync_iteration(t, opt.tau)
        self.recorder = _Recorder(P, problem, self.sim, sync_predicate)
        self.contribution_sink = _ContributionSink(self.recorder)


def run_training(P: int, mode: str, opt: OptimizerConfig, problem: Problem,
                 delay: DelayModel, seed: int, mask_rule: str = MASK_RULE_EXAMPLE,
                 event_budget: int = 20_000_000, trace: bool = False) -> TrainingResult:
    """Drive T iterations for all P workers over the simulated network.

    Deterministic given (arguments, seed): repeated calls produce identical
    metrics and final weights. Emits one metrics record per iteration.
    """
    run = _Run(P, mode, opt, problem, delay, seed, mask_rule, event_budget, trace)
    workers = [_WORKERS[mode](run, rank) for rank in range(P)]
    for w in workers:
        w.start()
    final_time = run.sim.run_until_idle()
    unfinished = [w.rank for w in workers if w.state.iter < opt.T]
    if unfinished:
        raise ProtocolFault(f"workers {unfinished} stalled before iteration T")
    return TrainingResult(
        records=run.recorder.records,
        final_weights=[w.state.W.copy() for w in workers],
        final_time_ms=final_time,
        msgs_total=run.sim.msgs_total,
        bytes_total=run.sim.bytes_total,
        sync_replica_checks=run.recorder.sync_replica_checks,
        max_gamma=run.recorder.max_gamma,
        max_staleness=run.recorder.max_staleness,
    )
