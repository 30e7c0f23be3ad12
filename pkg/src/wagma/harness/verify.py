"""Invariant verification suite behind ``wagma verify``.

Each check is self-contained and reports pass/fail with a one-line detail.
Reference computations here (union-find partitions, breadth-first mixing)
are deliberately independent of the implementations they check. Gradient
oracles run before any training-based check.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..collective import GroupAllreduce
from ..netsim import MESSAGE, DelayModel, Simulator, StragglerPolicy
from ..optim import EtaSchedule, OptimizerConfig, gamma_bound, run_training
from ..problems import estimate_M, finite_diff_check, make_logistic, make_quadratic, make_tiny_mlp
from ..topology import (
    GroupingParams,
    MASK_RULE_LITERAL,
    compute_groups,
    mixing_reachable,
    phase_masks,
)

VERIFY_NET = DelayModel(base_compute_ms=5.0, jitter_max_ms=0.0, link_latency_ms=0.5)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def _check(name: str, fn: Callable[[], str]) -> CheckResult:
    try:
        return CheckResult(name, True, fn())
    except Exception as exc:  # report, don't crash the suite
        return CheckResult(name, False, f"{type(exc).__name__}: {exc}")


# ---------------------------------------------------------------------------
# independent reference helpers
# ---------------------------------------------------------------------------

def _unionfind_partition(P: int, masks) -> tuple[tuple[int, ...], ...]:
    parent = list(range(P))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for mask in masks:
        for p in range(P):
            ra, rb = find(p), find(p ^ mask)
            if ra != rb:
                parent[rb] = ra
    buckets: dict[int, list[int]] = {}
    for p in range(P):
        buckets.setdefault(find(p), []).append(p)
    return tuple(sorted(tuple(sorted(v)) for v in buckets.values()))


def _bfs_reachable(P: int, partitions) -> bool:
    know = [{p} for p in range(P)]
    for groups in partitions:
        nxt = [set(s) for s in know]
        for grp in groups:
            merged = set()
            for m in grp:
                merged |= know[m]
            for m in grp:
                nxt[m] = merged
        know = nxt
    return all(len(s) == P for s in know)


# ---------------------------------------------------------------------------
# checks
# ---------------------------------------------------------------------------

def check_grouping_examples() -> str:
    got0 = {frozenset(g) for g in compute_groups(GroupingParams(8, 4, 0)).groups}
    got1 = {frozenset(g) for g in compute_groups(GroupingParams(8, 4, 1)).groups}
    assert got0 == {frozenset({0, 1, 2, 3}), frozenset({4, 5, 6, 7})}, got0
    assert got1 == {frozenset({0, 1, 4, 5}), frozenset({2, 3, 6, 7})}, got1
    return "documented groupings for 8 ranks, group size 4, iterations 0 and 1"


def check_mask_rule_divergence() -> str:
    lit0 = {frozenset(g) for g in compute_groups(GroupingParams(8, 4, 0), MASK_RULE_LITERAL).groups}
    assert lit0 == {frozenset({0, 1, 2, 3}), frozenset({4, 5, 6, 7})}
    lit1 = {frozenset(g) for g in compute_groups(GroupingParams(8, 4, 1), MASK_RULE_LITERAL).groups}
    expected1 = {frozenset({0, 1, 4, 5}), frozenset({2, 3, 6, 7})}
    assert lit1 != expected1, "literal rule unexpectedly matched the documented grouping"
    return "interpretation divergence of the shift-carrying mask rule detected at t=1"


def check_partition_oracle(max_p: int = 256) -> str:
    count = 0
    P = 2
    while P <= max_p:
        log_p = int(math.log2(P))
        S = 1
        while S <= P:
            for t in range(4 * log_p):
                params = GroupingParams(P, S, t)
                part = compute_groups(params)
                assert len(part.groups) == P // S
                assert all(len(g) == S for g in part.groups)
                assert sorted(r for g in part.groups for r in g) == list(range(P))
                oracle = _unionfind_partition(P, phase_masks(params).masks)
                assert part.groups == oracle, (P, S, t)
                count += 1
            S *= 2
        P *= 2
    return f"{count} partitions match the union-find closure bit-for-bit"


def check_mixing(max_p: int = 256) -> str:
    count = 0
    P = 2
    while P <= max_p:
        log_p = int(math.log2(P))
        S = 2
        while S <= P:
            log_s = int(math.log2(S))
            for start in range(log_p):
                assert mixing_reachable(GroupingParams(P, S, 0), start, log_p), (P, S, start)
                if log_p % log_s == 0:
                    ratio = log_p // log_s
                    parts = [compute_groups(GroupingParams(P, S, t)).groups
                             for t in range(start, start + ratio)]
                    assert _bfs_reachable(P, parts), (P, S, start)
                    if ratio > 1:
                        assert not mixing_reachable(GroupingParams(P, S, 0), start, ratio - 1)
                count += 1
            S *= 2
        P *= 2
    return f"update propagation closes within log2(P) iterations over {count} settings"


class _CollectiveProbe:
    """Minimal process shell for driving the group allreduce directly."""

    def __init__(self, sim, rank, P, S, init, **kwargs):
        self.results = {}
        self.group = GroupAllreduce(sim, rank, P, S,
                                    on_complete=lambda v, acc, timely, stamp: self.results.__setitem__(v, acc),
                                    initial_model=init, **kwargs)
        sim.register(rank, self._on_event)

    def _on_event(self, ev):
        if ev.kind == MESSAGE:
            src, body, _ = ev.payload
            self.group.handle_message(src, body)
        elif callable(ev.payload):
            ev.payload()


def _random_collective_trial(rng, P, S, versions=2, staggered=False, corrupt=None):
    """One randomized schedule. With ``staggered=False`` all processes join
    a version at the same instant (concurrent activators, everyone timely);
    with ``staggered=True`` per-process join times differ, so slower
    processes legitimately contribute older buffers."""
    sim = Simulator(P, link_latency_ms=float(rng.uniform(0.2, 2.0)))
    log: list = []
    probes = [_CollectiveProbe(sim, r, P, S, np.zeros(2), contribution_log=log) for r in range(P)]
    vectors = {
        (v, r): np.array([float(rng.integers(-50, 50)), float(rng.integers(-50, 50))])
        for v in range(versions) for r in range(P)
    }
    if corrupt is not None:
        probes[corrupt].group._corrupt_outgoing = (
            lambda version, phase, payload: payload + np.array([1e-3, 0.0])
        )
    for v in range(versions):
        common = 25.0 * v + float(rng.uniform(0.0, 4.0))
        for r in rng.permutation(P):
            when = common + (float(rng.uniform(0.0, 6.0)) if staggered else 0.0)
            sim.call_at(
                when, int(r),
                lambda pr=probes[int(r)], vv=v, vec=vectors[(v, int(r))]: pr.group.join_or_check(vv, vec),
            )
    sim.run_until_idle()
    return probes, vectors, log


def _expected_from_stamps(P, S, versions, vectors, log):
    """Group sums implied by the logged snapshot stamps: a buffer stamped s
    holds the fresh vector of version s (or the zero initial model)."""
    stamp_of = {(r, v): s for (r, v, s) in log}
    expected = {}
    for v in range(versions):
        part = compute_groups(GroupingParams(P, S, v))
        for r in range(P):
            total = np.zeros(2)
            for m in part.group_of(r):
                s = stamp_of[(m, v)]
                total = total + (vectors[(s, m)] if s >= 0 else np.zeros(2))
            expected[(r, v)] = total
    return expected


def check_collective_exactly_once(trials: int = 120, seed: int = 2024) -> str:
    rng = np.random.default_rng(seed)
    checked = 0
    for trial in range(trials):
        P = int(rng.choice([4, 8, 16]))
        S = int(rng.choice([s for s in (2, 4, 8) if s <= P]))
        staggered = trial % 2 == 1
        versions = 2
        probes, vectors, log = _random_collective_trial(rng, P, S, versions, staggered)
        expected = _expected_from_stamps(P, S, versions, vectors, log)
        for v in range(versions):
            part = compute_groups(GroupingParams(P, S, v))
            for r, probe in enumerate(probes):
                assert probe.group.execution_count.get(v) == 1, (P, S, v, r)
                acc = probe.results[v]
                if not staggered:
                    fresh_sum = sum(vectors[(v, m)] for m in part.group_of(r))
                    assert np.array_equal(acc, fresh_sum), (P, S, v, r)
                assert np.array_equal(acc, expected[(r, v)]), (P, S, v, r)
                checked += 1
    return f"{checked} (process, version) executions, each exactly once with exact sums"


def check_corruption_detected(seed: int = 77) -> str:
    rng = np.random.default_rng(seed)
    probes, vectors, _ = _random_collective_trial(rng, P=8, S=4, versions=1, corrupt=3)
    part = compute_groups(GroupingParams(8, 4, 0))
    mismatches = 0
    for r, probe in enumerate(probes):
        expected = sum(vectors[(0, m)] for m in part.group_of(r))
        if not np.array_equal(probe.results[0], expected):
            mismatches += 1
    assert mismatches > 0, "sum check failed to notice an injected payload corruption"

    rng = np.random.default_rng(seed)
    probes, vectors, _ = _random_collective_trial(rng, P=8, S=4, versions=1, corrupt=None)
    for r, probe in enumerate(probes):
        expected = sum(vectors[(0, m)] for m in part.group_of(r))
        assert np.array_equal(probe.results[0], expected), "control trial should be exact"
    return f"injected phase-payload corruption caught at {mismatches} processes; control exact"


def check_gradient_oracles() -> str:
    problems = [
        make_quadratic(12, 10.0, seed=1),
        make_logistic(256, 10, margin=1.0, seed=1),
        make_tiny_mlp((5, 7, 2), seed=1),
    ]
    rng = np.random.default_rng(5)
    for prob in problems:
        for _ in range(10):
            point = prob.initial_point() + 0.5 * rng.standard_normal(prob.d)
            report = finite_diff_check(prob, point, step=1e-5, tol=1e-5)
            assert report.passed, (prob.spec["kind"], report.max_rel_error)
    return "three problems pass central-difference checks at 10 points each"


def check_staleness_and_sync() -> str:
    prob = make_quadratic(16, 5.0, seed=3)
    delay = DelayModel(
        base_compute_ms=10.0, jitter_max_ms=0.0, link_latency_ms=1.0,
        straggler=StragglerPolicy(victims_per_iteration=2, extra_delay_ms=80.0, selection_seed=3),
    )
    tau = 4
    cfg = OptimizerConfig(T=4 * tau, S=4, tau=tau, alpha=True, eta=EtaSchedule(value=0.02), b=1)
    res = run_training(8, "wagma", cfg, prob, delay, seed=11)
    assert res.max_staleness <= tau - 1, res.max_staleness
    assert res.sync_replica_checks and all(ok for _, ok in res.sync_replica_checks)
    return (
        f"max staleness {res.max_staleness} <= tau-1={tau - 1}; "
        f"replicas identical at {len(res.sync_replica_checks)} sync points"
    )


def check_gamma_potential() -> str:
    prob = make_quadratic(16, 5.0, seed=4)
    tau, eta, P = 5, 0.05, 8
    cfg = OptimizerConfig(T=4 * tau, S=4, tau=tau, alpha=True, eta=EtaSchedule(value=eta), b=1)
    res = run_training(P, "wagma", cfg, prob, VERIFY_NET, seed=13)
    m_hat = estimate_M(prob, sample_count=400, radius=2.0, seed=5)
    bound = gamma_bound(P, eta, m_hat, tau)
    assert res.max_gamma <= bound, (res.max_gamma, bound)
    return f"max replica spread {res.max_gamma:.3e} within bound {bound:.3e}"


def run_verification() -> list[CheckResult]:
    """All invariant checks, gradient oracles before training-based ones."""
    return [
        _check("topology/worked-examples", check_grouping_examples),
        _check("topology/mask-rule-divergence", check_mask_rule_divergence),
        _check("topology/partition-oracle", check_partition_oracle),
        _check("topology/mixing", check_mixing),
        _check("problems/gradient-oracles", check_gradient_oracles),
        _check("collective/exactly-once-and-sums", check_collective_exactly_once),
        _check("collective/corruption-detected", check_corruption_detected),
        _check("optim/staleness-and-sync", check_staleness_and_sync),
        _check("optim/gamma-potential", check_gamma_potential),
    ]
