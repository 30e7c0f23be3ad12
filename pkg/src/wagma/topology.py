"""Butterfly phase schedules and dynamic group partitions.

Ranks form a hypercube of dimension log2(P). Each training iteration t
executes log2(S) consecutive butterfly phases, starting at a phase offset
that rotates with t. The XOR relations of those phases partition the ranks
into P/S groups of size S, and the rotation changes the group composition
every iteration so that local updates spread across all ranks in
logarithmically many iterations.

Two mask-selection rules are provided:

- ``"example"`` (default): phase r of iteration t uses the single-bit mask
  ``1 << ((t * log2(S) + r) % log2(P))``. This reproduces the worked
  grouping sequence for (P=8, S=4): iteration 0 gives {0,1,2,3},{4,5,6,7}
  and iteration 1 gives {0,1,4,5},{2,3,6,7}.
- ``"literal"``: a shift-accumulating variant (the mask is left-shifted by
  the current shift amount each phase, carrying across phases). It agrees
  with ``"example"`` at t=0 but diverges at other iterations and can repeat
  masks; it is kept only so the divergence is checkable.

All functions are pure and safe to call concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass, field

__all__ = [
    "GroupingParams",
    "PhasePlan",
    "GroupPartition",
    "InvalidParamsError",
    "phase_masks",
    "compute_groups",
    "peer",
    "mixing_reachable",
    "MASK_RULE_EXAMPLE",
    "MASK_RULE_LITERAL",
]

MASK_RULE_EXAMPLE = "example"
MASK_RULE_LITERAL = "literal"


class InvalidParamsError(ValueError):
    """Raised for process counts / group sizes / ranks outside the contract."""


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class GroupingParams:
    """Grouping inputs: P ranks, group size S, iteration index t.

    P and S must be powers of two with 1 <= S <= P; t >= 0.
    """

    P: int
    S: int
    t: int = 0

    def __post_init__(self) -> None:
        if not _is_pow2(self.P):
            raise InvalidParamsError(f"P={self.P} is not a power of two")
        if not _is_pow2(self.S):
            raise InvalidParamsError(f"S={self.S} is not a power of two")
        if self.S > self.P:
            raise InvalidParamsError(f"S={self.S} exceeds P={self.P}")
        if self.t < 0:
            raise InvalidParamsError(f"iteration t={self.t} is negative")

    @property
    def global_phases(self) -> int:
        return self.P.bit_length() - 1

    @property
    def group_phases(self) -> int:
        return self.S.bit_length() - 1

    @property
    def shift0(self) -> int:
        """Phase offset of this iteration within the butterfly cycle."""
        if self.global_phases == 0:
            return 0
        return (self.t * self.group_phases) % self.global_phases


@dataclass(frozen=True)
class PhasePlan:
    """Ordered single-bit masks executed by one iteration, phase by phase."""

    P: int
    S: int
    t: int
    masks: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.masks)


@dataclass(frozen=True)
class GroupPartition:
    """Disjoint rank groups active at one iteration.

    ``groups`` is sorted by smallest member; each group is a sorted tuple.
    """

    iteration: int
    groups: tuple[tuple[int, ...], ...]
    rank_to_group: dict[int, int] = field(repr=False, hash=False, compare=False, default_factory=dict)

    def group_of(self, rank: int) -> tuple[int, ...]:
        return self.groups[self.rank_to_group[rank]]


def phase_masks(params: GroupingParams, rule: str = MASK_RULE_EXAMPLE) -> PhasePlan:
    """Compute the log2(S) butterfly masks for iteration t.

    With the default rule, mask r is ``1 << ((t*log2(S) + r) % log2(P))``;
    the masks are distinct single bits below P. The "literal" rule applies
    ``mask <<= shift`` with the shift incrementing mod log2(P) and the mask
    carried across phases, which may repeat bits.
    """
    gp, GP = params.group_phases, params.global_phases
    if rule == MASK_RULE_EXAMPLE:
        masks = tuple(1 << ((params.t * gp + r) % GP) for r in range(gp)) if GP else ()
    elif rule == MASK_RULE_LITERAL:
        masks = []
        mask = 1
        shift = params.shift0
        for _ in range(gp):
            mask = (mask << shift) % params.P  # wrap to stay below P
            if mask == 0:
                mask = 1
            masks.append(mask)
            shift = (shift + 1) % GP if GP else 0
        masks = tuple(masks)
    else:
        raise InvalidParamsError(f"unknown mask rule {rule!r}")
    return PhasePlan(P=params.P, S=params.S, t=params.t, masks=masks)


def peer(rank: int, mask: int, P: int) -> int:
    """Exchange partner of ``rank`` under single-bit ``mask``: rank XOR mask."""
    if not 0 <= rank < P:
        raise InvalidParamsError(f"rank {rank} out of range for P={P}")
    if not (_is_pow2(mask) and mask < P):
        raise InvalidParamsError(f"mask {mask} is not a power of two below P={P}")
    return rank ^ mask


def _xor_span(masks: tuple[int, ...]) -> list[int]:
    """All XOR combinations of the given masks, in ascending order."""
    span = {0}
    for m in masks:
        span |= {s ^ m for s in span}
    return sorted(span)


def compute_groups(params: GroupingParams, rule: str = MASK_RULE_EXAMPLE) -> GroupPartition:
    """Partition ranks into the groups induced by iteration t's masks.

    The group of rank p is its coset under XOR with the span of the
    iteration's masks, i.e. the transitive closure of the pairwise
    relations p <-> p XOR mask over all phases.
    """
    plan = phase_masks(params, rule)
    span = _xor_span(plan.masks)
    groups: list[tuple[int, ...]] = []
    rank_to_group: dict[int, int] = {}
    for p in range(params.P):
        if p in rank_to_group:
            continue
        idx = len(groups)
        members = tuple(sorted(p ^ s for s in span))
        groups.append(members)
        for m in members:
            rank_to_group[m] = idx
    return GroupPartition(iteration=params.t, groups=tuple(groups), rank_to_group=rank_to_group)


def mixing_reachable(params: GroupingParams, start_t: int, k: int, rule: str = MASK_RULE_EXAMPLE) -> bool:
    """True iff k consecutive iterations' groupings connect every rank pair.

    Composes the group-membership graphs of iterations start_t ..
    start_t+k-1 and reports whether information from any rank reaches
    every other rank through that sequence of groupings.
    """
    if k < 1:
        raise InvalidParamsError(f"iteration count k={k} must be >= 1")
    if start_t < 0:
        raise InvalidParamsError(f"start_t={start_t} is negative")
    P = params.P
    reach = [1 << p for p in range(P)]  # bitmask of sources known to rank p
    for t in range(start_t, start_t + k):
        part = compute_groups(GroupingParams(P=P, S=params.S, t=t), rule)
        nxt = list(reach)
        for grp in part.groups:
            merged = 0
            for m in grp:
                merged |= reach[m]
            for m in grp:
                nxt[m] = merged
        reach = nxt
    full = (1 << P) - 1
    return all(r == full for r in reach)
