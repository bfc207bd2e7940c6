"""Optimal transport distance between event sequences.

Two sequences of the same type are compared by a partial one-to-one matching:
aligned events pay the time displacement |t - t*|, every unaligned event of
the prediction pays the delete cost, every unaligned event of the reference
pays the insert cost. The distance is the minimum over matchings, found per
type by an edit-distance DP over time-sorted lists; the total distance is the
sum over types. Events of different types never align.

`brute_force_otd` re-derives the same minimum by exhaustive enumeration of
monotone matchings; it exists purely as a cross-check for the DP.
"""
from __future__ import annotations

import itertools
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .events import Event

_MOVE, _INSERT, _DELETE = 0, 1, 2


@dataclass(frozen=True)
class CostConfig:
    insert_cost: float
    delete_cost: float

    def __post_init__(self):
        if not (self.insert_cost > 0.0 and self.delete_cost > 0.0):
            raise ValueError("edit costs must be positive")

    @property
    def symmetric(self) -> bool:
        return self.insert_cost == self.delete_cost

    @classmethod
    def uniform(cls, c: float) -> "CostConfig":
        return cls(c, c)


@dataclass(frozen=True)
class Alignment:
    """Per-type lists of (t, t*) pairs; one-to-one within each side."""

    pairs: dict[int, list[tuple[float, float]]] = field(default_factory=dict)

    @property
    def size(self) -> int:
        return sum(len(v) for v in self.pairs.values())

    def moved_mass(self) -> float:
        return float(
            sum(abs(t - t_star) for v in self.pairs.values() for t, t_star in v)
        )


def _times_by_type(events: list[Event]) -> dict[int, list[float]]:
    out: dict[int, list[float]] = defaultdict(list)
    for e in events:
        out[e.type_id].append(e.time)
    for v in out.values():
        v.sort()
    return out


def align_times(
    a: list[float], b: list[float], cost: CostConfig
) -> tuple[float, list[tuple[int, int]]]:
    """Edit-DP over two sorted time lists.

    Returns the minimal cost and the aligned index pairs (i into a, j into b).
    Unaligned entries of a pay delete_cost, of b insert_cost; an aligned pair
    pays |a[i] - b[j]|. Ties prefer move, then insert, then delete.
    """
    n, m = len(a), len(b)
    dist = np.zeros((n + 1, m + 1))
    choice = np.zeros((n + 1, m + 1), dtype=np.int8)
    dist[:, 0] = cost.delete_cost * np.arange(n + 1)
    dist[0, :] = cost.insert_cost * np.arange(m + 1)
    choice[1:, 0] = _DELETE
    choice[0, 1:] = _INSERT
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            best = dist[i - 1, j - 1] + abs(a[i - 1] - b[j - 1])
            pick = _MOVE
            ins = dist[i, j - 1] + cost.insert_cost
            if ins < best:
                best, pick = ins, _INSERT
            dele = dist[i - 1, j] + cost.delete_cost
            if dele < best:
                best, pick = dele, _DELETE
            dist[i, j] = best
            choice[i, j] = pick
    pairs: list[tuple[int, int]] = []
    i, j = n, m
    while i > 0 or j > 0:
        pick = choice[i, j]
        if pick == _MOVE:
            i -= 1
            j -= 1
            pairs.append((i, j))
        elif pick == _INSERT:
            j -= 1
        else:
            i -= 1
    pairs.reverse()
    return float(dist[n, m]), pairs


def otd(
    z: list[Event], z_star: list[Event], cost: CostConfig
) -> tuple[float, Alignment]:
    """Total transport distance and an optimal alignment, summed over types."""
    by_a = _times_by_type(z)
    by_b = _times_by_type(z_star)
    total = 0.0
    pairs: dict[int, list[tuple[float, float]]] = {}
    for k in sorted(set(by_a) | set(by_b)):
        a = by_a.get(k, [])
        b = by_b.get(k, [])
        d, idx_pairs = align_times(a, b, cost)
        total += d
        if idx_pairs:
            pairs[k] = [(a[i], b[j]) for i, j in idx_pairs]
    return total, Alignment(pairs)


def distance_given_alignment(
    z: list[Event], z_star: list[Event], alignment: Alignment, cost: CostConfig
) -> float:
    """Cost decomposition: edits on unaligned events plus time moved.

    Validates that each side of each pair is drawn (one-to-one) from the
    corresponding sequence's events of that type.
    """
    by_a = _times_by_type(z)
    by_b = _times_by_type(z_star)
    aligned = 0
    for k, kp in alignment.pairs.items():
        avail_a = list(by_a.get(k, []))
        avail_b = list(by_b.get(k, []))
        for t, t_star in kp:
            if t not in avail_a or t_star not in avail_b:
                raise ValueError("alignment pairs events absent from the sequences")
            avail_a.remove(t)
            avail_b.remove(t_star)
        aligned += len(kp)
    edits = cost.delete_cost * (len(z) - aligned) + cost.insert_cost * (
        len(z_star) - aligned
    )
    return float(edits) + alignment.moved_mass()


_BRUTE_LIMIT = 6


def brute_force_otd(z: list[Event], z_star: list[Event], cost: CostConfig) -> float:
    """Exact distance by enumerating monotone matchings; per-type sizes <= 6."""
    by_a = _times_by_type(z)
    by_b = _times_by_type(z_star)
    total = 0.0
    for k in set(by_a) | set(by_b):
        a = by_a.get(k, [])
        b = by_b.get(k, [])
        if len(a) > _BRUTE_LIMIT or len(b) > _BRUTE_LIMIT:
            raise ValueError("sequence too large for brute-force enumeration")
        best = np.inf
        for r in range(min(len(a), len(b)) + 1):
            base = cost.delete_cost * (len(a) - r) + cost.insert_cost * (len(b) - r)
            for ia in itertools.combinations(range(len(a)), r):
                for ib in itertools.combinations(range(len(b)), r):
                    moved = sum(abs(a[i] - b[j]) for i, j in zip(ia, ib))
                    if base + moved < best:
                        best = base + moved
        total += best
    return float(total)
