"""Grouping schedule tests: worked examples, oracle comparison, mixing."""

import math

import pytest

from wagma.topology import (
    GroupingParams,
    InvalidParamsError,
    MASK_RULE_LITERAL,
    compute_groups,
    mixing_reachable,
    peer,
    phase_masks,
)

from oracles import bfs_all_reachable, unionfind_groups


def groups_as_sets(partition):
    return {frozenset(g) for g in partition.groups}


# ---------------------------------------------------------------------------
# phase_masks
# ---------------------------------------------------------------------------

def test_masks_p8_s4_t0():
    assert phase_masks(GroupingParams(8, 4, 0)).masks == (1, 2)


def test_masks_p8_s4_t1():
    assert phase_masks(GroupingParams(8, 4, 1)).masks == (4, 1)


def test_masks_full_butterfly():
    assert phase_masks(GroupingParams(8, 8, 0)).masks == (1, 2, 4)


def test_masks_singleton_groups():
    assert phase_masks(GroupingParams(16, 1, 7)).masks == ()


def test_masks_distinct_powers_of_two():
    for P in (2, 4, 8, 16, 64):
        for S in (2, 4, 8):
            if S > P:
                continue
            for t in range(12):
                masks = phase_masks(GroupingParams(P, S, t)).masks
                assert len(set(masks)) == len(masks) == int(math.log2(S))
                for m in masks:
                    assert m & (m - 1) == 0 and 0 < m < P


@pytest.mark.parametrize("P,S", [(3, 2), (8, 3), (4, 8), (0, 1)])
def test_masks_invalid_params(P, S):
    with pytest.raises(InvalidParamsError):
        GroupingParams(P, S, 0)


def test_negative_iteration_rejected():
    with pytest.raises(InvalidParamsError):
        GroupingParams(8, 4, -1)


# ---------------------------------------------------------------------------
# compute_groups
# ---------------------------------------------------------------------------

def test_groups_p8_s4_t0_worked_example():
    part = compute_groups(GroupingParams(8, 4, 0))
    assert groups_as_sets(part) == {frozenset({0, 1, 2, 3}), frozenset({4, 5, 6, 7})}


def test_groups_p8_s4_t1_worked_example():
    part = compute_groups(GroupingParams(8, 4, 1))
    assert groups_as_sets(part) == {frozenset({0, 1, 4, 5}), frozenset({2, 3, 6, 7})}


def test_groups_p16_s4_t1_frozen_from_oracle():
    # Masks at (P=16, S=4, t=1) are [4, 8]; union-find closure over those
    # relations yields the four stride-4 groups.
    expected = {
        frozenset({0, 4, 8, 12}),
        frozenset({1, 5, 9, 13}),
        frozenset({2, 6, 10, 14}),
        frozenset({3, 7, 11, 15}),
    }
    masks = phase_masks(GroupingParams(16, 4, 1)).masks
    assert masks == (4, 8)
    assert {frozenset(g) for g in unionfind_groups(16, masks)} == expected
    assert groups_as_sets(compute_groups(GroupingParams(16, 4, 1))) == expected


def test_groups_match_unionfind_oracle_grid():
    for P in (2, 4, 8, 16, 32):
        log_p = int(math.log2(P))
        S = 1
        while S <= P:
            for t in range(4 * log_p + 1):
                params = GroupingParams(P, S, t)
                got = compute_groups(params)
                want = unionfind_groups(P, phase_masks(params).masks)
                assert got.groups == want, (P, S, t)
            S *= 2


def test_groups_partition_invariants():
    for P in (8, 64):
        for S in (1, 2, 8):
            for t in range(10):
                part = compute_groups(GroupingParams(P, S, t))
                assert len(part.groups) == P // S
                assert all(len(g) == S for g in part.groups)
                seen = sorted(r for g in part.groups for r in g)
                assert seen == list(range(P))


def test_group_membership_closed_under_masks():
    for t in range(8):
        params = GroupingParams(32, 8, t)
        part = compute_groups(params)
        for m in phase_masks(params).masks:
            for g in part.groups:
                assert {r ^ m for r in g} == set(g)


def test_group_of_lookup():
    part = compute_groups(GroupingParams(8, 4, 1))
    assert part.group_of(5) == (0, 1, 4, 5)
    assert part.group_of(6) == (2, 3, 6, 7)


def test_partition_periodicity():
    # The sequence of partitions repeats with period dividing log2(P).
    for P, S in [(16, 4), (64, 4), (256, 16), (8, 2)]:
        gp = int(math.log2(S))
        GP = int(math.log2(P))
        period = GP // math.gcd(gp, GP)
        for t in range(6):
            a = compute_groups(GroupingParams(P, S, t))
            b = compute_groups(GroupingParams(P, S, t + period))
            assert a.groups == b.groups


# ---------------------------------------------------------------------------
# peer
# ---------------------------------------------------------------------------

def test_peer_examples():
    assert peer(5, 4, 8) == 1
    assert peer(0, 1, 8) == 1
    assert peer(7, 2, 8) == 5


def test_peer_involutive():
    for rank in range(16):
        for k in range(4):
            mask = 1 << k
            assert peer(peer(rank, mask, 16), mask, 16) == rank


def test_peer_out_of_range():
    with pytest.raises(InvalidParamsError):
        peer(8, 1, 8)
    with pytest.raises(InvalidParamsError):
        peer(0, 3, 8)
    with pytest.raises(InvalidParamsError):
        peer(0, 8, 8)


# ---------------------------------------------------------------------------
# mixing_reachable
# ---------------------------------------------------------------------------

def test_mixing_p8_s4():
    params = GroupingParams(8, 4, 0)
    assert mixing_reachable(params, 0, 2) is True
    assert mixing_reachable(params, 0, 1) is False


def test_mixing_single_global_group():
    for P in (2, 8, 32):
        assert mixing_reachable(GroupingParams(P, P, 0), 3, 1) is True


def test_mixing_matches_bfs_oracle():
    for P, S in [(8, 2), (16, 4), (32, 8), (16, 2)]:
        for start in range(4):
            for k in range(1, int(math.log2(P)) + 1):
                parts = [
                    compute_groups(GroupingParams(P, S, t)).groups
                    for t in range(start, start + k)
                ]
                assert mixing_reachable(GroupingParams(P, S, 0), start, k) == bfs_all_reachable(P, parts)


def test_mixing_within_log_p_iterations():
    # Propagation completes within log2(P) iterations for any start, S >= 2.
    for P in (8, 16, 64):
        log_p = int(math.log2(P))
        S = 2
        while S <= P:
            for start in range(2 * log_p):
                assert mixing_reachable(GroupingParams(P, S, 0), start, log_p)
            S *= 2


def test_mixing_exact_when_phases_divide():
    # If log2(S) divides log2(P), exactly ceil(log2 P / log2 S) iterations
    # are needed: reachable at that count, not reachable one earlier.
    for P, S in [(16, 4), (64, 8), (256, 4), (64, 2)]:
        ratio = int(math.log2(P)) // int(math.log2(S))
        for start in range(int(math.log2(P))):
            assert mixing_reachable(GroupingParams(P, S, 0), start, ratio)
            if ratio > 1:
                assert not mixing_reachable(GroupingParams(P, S, 0), start, ratio - 1)


def test_mixing_k_zero_rejected():
    with pytest.raises(InvalidParamsError):
        mixing_reachable(GroupingParams(8, 4, 0), 0, 0)


# ---------------------------------------------------------------------------
# literal mask rule divergence
# ---------------------------------------------------------------------------

def test_literal_rule_agrees_at_t0():
    part = compute_groups(GroupingParams(8, 4, 0), rule=MASK_RULE_LITERAL)
    assert groups_as_sets(part) == {frozenset({0, 1, 2, 3}), frozenset({4, 5, 6, 7})}


def test_literal_rule_diverges_at_t1():
    # The shift-carrying variant repeats mask 4 at t=1 and fails to produce
    # the documented {0,1,4,5},{2,3,6,7} grouping.
    masks = phase_masks(GroupingParams(8, 4, 1), rule=MASK_RULE_LITERAL).masks
    assert masks == (4, 4)
    part = compute_groups(GroupingParams(8, 4, 1), rule=MASK_RULE_LITERAL)
    assert groups_as_sets(part) != {frozenset({0, 1, 4, 5}), frozenset({2, 3, 6, 7})}
