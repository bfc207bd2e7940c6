"""Approximate minimum-Bayes-risk decoding of a particle ensemble.

The loss decomposes over event types, so each type is decoded on its own.
The decode starts from the highest-weight particle's events of that type and
iterates four phases: realign (exact DP against every particle), then move,
delete, and insert passes that each accept a change only when the weighted
total distance strictly drops. Candidate times always come from the union of
particle times, which is enough to reach the optimum restricted to that
union. The loop stops once a full sweep no longer decreases the tracked risk.

The state tracks, per particle, an explicit alignment (decode event id to
particle event index) and the distance implied by it; phases update both
incrementally. The tracked distance must remain exactly the decomposition
cost of the tracked alignment, which the tests verify directly.
"""
from __future__ import annotations

import numpy as np

from .events import Event
from .smc import Ensemble
from .transport import CostConfig, align_times

_TOL = 1e-12


class DecodeState:
    """Decode-in-progress for a single event type."""

    def __init__(
        self,
        init_times: list[float],
        particles: list[list[float]],
        weights: np.ndarray,
        cost: CostConfig,
    ):
        self.cost = cost
        self.weights = np.asarray(weights, dtype=float)
        self.particles = [np.asarray(sorted(p), dtype=float) for p in particles]
        self.times: dict[int, float] = {i: t for i, t in enumerate(sorted(init_times))}
        self.next_id = len(self.times)
        # per particle: decode-event id -> index into that particle's times
        self.edges: list[dict[int, int]] = [dict() for _ in particles]
        self.dists = np.zeros(len(particles))
        self.realign()

    # -- bookkeeping ------------------------------------------------------

    def ordered_ids(self) -> list[int]:
        return [i for _, i in sorted((t, i) for i, t in self.times.items())]

    def decode_times(self) -> list[float]:
        return sorted(self.times.values())

    @property
    def risk(self) -> float:
        return float(self.weights @ self.dists)

    def realign(self) -> None:
        """Replace every alignment with the DP optimum against the decode."""
        ids = self.ordered_ids()
        a = [self.times[i] for i in ids]
        for m, p in enumerate(self.particles):
            d, pairs = align_times(a, list(p), self.cost)
            self.edges[m] = {ids[i]: j for i, j in pairs}
            self.dists[m] = d

    def _alignment_cost(self, m: int) -> float:
        """Decomposition cost of the tracked alignment for particle m."""
        edge = self.edges[m]
        moved = sum(abs(self.times[i] - self.particles[m][j]) for i, j in edge.items())
        unmatched_decode = len(self.times) - len(edge)
        unmatched_particle = len(self.particles[m]) - len(edge)
        return (
            self.cost.delete_cost * unmatched_decode
            + self.cost.insert_cost * unmatched_particle
            + moved
        )


# ---------------------------------------------------------------------------
# Phases
# ---------------------------------------------------------------------------

def move_phase(state: DecodeState) -> None:
    """Try to relocate each decode event onto an aligned particle time."""
    for i in state.ordered_ids():
        aligned = [
            (m, state.particles[m][edge[i]])
            for m, edge in enumerate(state.edges)
            if i in edge
        ]
        if not aligned:
            continue
        t_cur = state.times[i]
        cur = sum(state.weights[m] * abs(t_cur - tj) for m, tj in aligned)
        best_t, best = t_cur, cur
        for t_c in sorted({tj for _, tj in aligned}):
            cand = sum(state.weights[m] * abs(t_c - tj) for m, tj in aligned)
            if cand < best:
                best_t, best = t_c, cand
        if best_t != t_cur:
            for m, tj in aligned:
                state.dists[m] += abs(best_t - tj) - abs(t_cur - tj)
            state.times[i] = best_t


def delete_phase(state: DecodeState) -> None:
    """Drop each decode event whose removal strictly lowers the risk."""
    for i in state.ordered_ids():
        t = state.times[i]
        delta = np.empty(len(state.particles))
        for m, edge in enumerate(state.edges):
            if i in edge:
                # aligned partner falls back to an insertion charge
                delta[m] = state.cost.insert_cost - abs(t - state.particles[m][edge[i]])
            else:
                delta[m] = -state.cost.delete_cost
        if float(state.weights @ delta) < 0.0:
            state.dists += delta
            del state.times[i]
            for edge in state.edges:
                edge.pop(i, None)


def insert_phase(state: DecodeState) -> None:
    """Greedily add union times while some addition strictly lowers the risk."""
    while True:
        present = set(state.times.values())
        candidates = sorted(
            {t for p in state.particles for t in p if t not in present}
        )
        best_delta = 0.0
        best = None        # (t_c, per-m risk deltas, per-m chosen partner index)
        for t_c in candidates:
            delta = np.empty(len(state.particles))
            partner: list[int | None] = []
            for m, p in enumerate(state.particles):
                used = set(state.edges[m].values())
                j_near, d_near = None, np.inf
                for j in range(len(p)):
                    if j in used:
                        continue
                    d = abs(p[j] - t_c)
                    if d < d_near:
                        j_near, d_near = j, d
                if j_near is not None and d_near < state.cost.insert_cost + state.cost.delete_cost:
                    delta[m] = d_near - state.cost.insert_cost
                    partner.append(j_near)
                else:
                    delta[m] = state.cost.delete_cost
                    partner.append(None)
            gain = -float(state.weights @ delta)
            if gain > best_delta:
                best_delta = gain
                best = (t_c, delta, partner)
        if best is None:
            return
        t_c, delta, partner = best
        i = state.next_id
        state.next_id += 1
        state.times[i] = t_c
        for m, j in enumerate(partner):
            if j is not None:
                state.edges[m][i] = j
        state.dists += delta


# ---------------------------------------------------------------------------
# Driver
# ---------------------------------------------------------------------------

def decode_type(
    init_times: list[float],
    particles: list[list[float]],
    weights: np.ndarray,
    cost: CostConfig,
) -> DecodeState:
    """Run the phase loop for one type until the risk stops decreasing."""
    state = DecodeState(init_times, particles, weights, cost)
    risk = state.risk
    while True:
        move_phase(state)
        delete_phase(state)
        insert_phase(state)
        state.realign()
        if state.risk >= risk - _TOL:
            return state
        risk = state.risk


def consensus_decode(ensemble: Ensemble, cost: CostConfig) -> list[Event]:
    """Single prediction minimizing weighted transport risk over the ensemble."""
    if not ensemble.particles:
        raise ValueError("empty ensemble")
    if not cost.symmetric:
        raise ValueError("decoding requires equal insert and delete costs")
    w = ensemble.weights
    top = int(np.argmax(w))
    types = sorted({e.type_id for z in ensemble.particles for e in z})
    out: list[Event] = []
    for k in types:
        per_particle = [
            [e.time for e in z if e.type_id == k] for z in ensemble.particles
        ]
        state = decode_type(per_particle[top], per_particle, w, cost)
        out.extend(Event(k, t) for t in state.decode_times())
    out.sort(key=lambda e: (e.time, e.type_id))
    return out
