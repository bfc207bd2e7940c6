"""Event-stream domain types and the NDJSON dataset format.

A sequence lives on the window [0, T). Two synthetic boundary events frame it:
a begin marker of type 0 at t = 0 and an end marker of type ``K + 1`` at
t = T. Real events carry types 1..K and an observed/missing flag; the missing
part is the imputation target.

Times are strictly increasing by default. Generators that close the window
exactly at the last event produce one legal tie (last real event at t = T);
such sequences opt in via ``allow_equal``, which relaxes ordering to
non-decreasing with generation order preserved.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from typing import Iterable, NamedTuple

BOS_TYPE = 0


class Event(NamedTuple):
    type_id: int
    time: float


class InvalidSequence(ValueError):
    """Raised when a sequence violates a structural invariant."""


@dataclass(frozen=True)
class EventSequence:
    horizon: float
    num_types: int
    events: tuple[Event, ...]          # includes both boundary events
    observed: tuple[bool, ...]         # parallel to events; boundaries True
    allow_equal: bool = False

    @property
    def eos_type(self) -> int:
        return self.num_types + 1

    @property
    def interior(self) -> tuple[Event, ...]:
        return self.events[1:-1]

    @property
    def interior_observed(self) -> tuple[bool, ...]:
        return self.observed[1:-1]

    @property
    def num_interior(self) -> int:
        return len(self.events) - 2

    def missing_events(self) -> list[Event]:
        return [e for e, obs in zip(self.interior, self.interior_observed) if not obs]

    def observed_events(self) -> list[Event]:
        return [e for e, obs in zip(self.interior, self.interior_observed) if obs]

    def interior_times(self) -> list[float]:
        return [e.time for e in self.interior]


def from_interior(
    num_types: int,
    horizon: float,
    interior: Iterable[tuple[int, float, bool]],
    allow_equal: bool = False,
) -> EventSequence:
    """Build a full sequence from (type, time, observed) triples, adding boundaries."""
    evs = [Event(BOS_TYPE, 0.0)]
    obs = [True]
    for k, t, o in interior:
        evs.append(Event(int(k), float(t)))
        obs.append(bool(o))
    evs.append(Event(num_types + 1, float(horizon)))
    obs.append(True)
    seq = EventSequence(float(horizon), int(num_types), tuple(evs), tuple(obs), allow_equal)
    validate(seq)
    return seq


def validate(seq: EventSequence, num_types: int | None = None) -> None:
    """Check structural invariants; raises InvalidSequence naming the first violation."""
    k_max = seq.num_types if num_types is None else num_types
    if num_types is not None and num_types != seq.num_types:
        raise InvalidSequence(f"sequence num_types {seq.num_types} != expected {num_types}")
    evs, obs = seq.events, seq.observed
    if len(evs) != len(obs):
        raise InvalidSequence("events and observed mask differ in length")
    if len(evs) < 2:
        raise InvalidSequence("missing boundaries")
    if not (seq.horizon > 0.0) or not _finite(seq.horizon):
        raise InvalidSequence(f"horizon must be positive and finite, got {seq.horizon}")
    first, last = evs[0], evs[-1]
    if first.type_id != BOS_TYPE or first.time != 0.0:
        raise InvalidSequence("missing begin boundary at t=0")
    if last.type_id != k_max + 1 or last.time != seq.horizon:
        raise InvalidSequence("missing end boundary at t=horizon")
    if not (obs[0] and obs[-1]):
        raise InvalidSequence("boundary events must be observed")
    for idx, e in enumerate(evs[1:-1], start=1):
        if not (1 <= e.type_id <= k_max):
            raise InvalidSequence(f"type id out of range at index {idx}")
        if not _finite(e.time):
            raise InvalidSequence(f"non-finite time at index {idx}")
    for idx in range(1, len(evs)):
        prev_t, cur_t = evs[idx - 1].time, evs[idx].time
        if seq.allow_equal:
            if cur_t < prev_t:
                raise InvalidSequence(f"non-monotone at index {idx}")
        elif cur_t <= prev_t:
            raise InvalidSequence(f"non-monotone at index {idx}")


def _finite(x: float) -> bool:
    return x == x and abs(x) != float("inf")


def split(seq: EventSequence) -> tuple[EventSequence, list[Event]]:
    """Partition into the observed sub-sequence x and the missing events z.

    merge(x, z) reproduces ``seq`` up to the observed flags (z re-enters as missing).
    """
    x = EventSequence(
        seq.horizon,
        seq.num_types,
        (seq.events[0],) + tuple(seq.observed_events()) + (seq.events[-1],),
        tuple([True] * (len(seq.observed_events()) + 2)),
        seq.allow_equal,
    )
    return x, seq.missing_events()


def merge(x: EventSequence, z: Iterable[Event]) -> EventSequence:
    """Interleave imputed events z into the observed sequence x.

    z times must fall strictly inside (0, T) and avoid collisions with x in the
    default regime; under ``allow_equal`` a z event may sit at the horizon
    (ordered before the end boundary) and ties are kept x-before-z.
    """
    z = list(z)
    for e in z:
        if not (1 <= e.type_id <= x.num_types):
            raise InvalidSequence(f"imputed event type {e.type_id} out of range")
        if x.allow_equal:
            if not (0.0 < e.time <= x.horizon):
                raise InvalidSequence(f"imputed event time {e.time} outside (0, horizon]")
        else:
            if not (0.0 < e.time < x.horizon):
                raise InvalidSequence(f"imputed event time {e.time} outside (0, horizon)")
    interior: list[tuple[int, float, bool]] = [
        (e.type_id, e.time, True) for e in x.interior
    ] + [(e.type_id, e.time, False) for e in sorted(z, key=lambda e: e.time)]
    # stable by time; x events precede z events at equal times (measure zero)
    interior.sort(key=lambda item: item[1])
    if not x.allow_equal:
        times = [t for _, t, _ in interior]
        for i in range(1, len(times)):
            if times[i] == times[i - 1]:
                raise InvalidSequence(f"time collision at t={times[i]}")
    return from_interior(x.num_types, x.horizon, interior, x.allow_equal)


def as_complete(seq: EventSequence) -> EventSequence:
    """The same events with every interior event marked observed."""
    return replace(seq, observed=tuple([True] * len(seq.events)))


# ---------------------------------------------------------------------------
# NDJSON: one sequence per line, {"T": .., "K": .., "events": [{"k","t","obs"}..]}
# Boundary events are implicit and reconstructed on load.
# ---------------------------------------------------------------------------

def sequence_to_obj(seq: EventSequence) -> dict:
    return {
        "T": seq.horizon,
        "K": seq.num_types,
        "events": [
            {"k": e.type_id, "t": e.time, "obs": obs}
            for e, obs in zip(seq.interior, seq.interior_observed)
        ],
    }


def sequence_from_obj(obj: dict) -> EventSequence:
    try:
        horizon = float(obj["T"])
        num_types = int(obj["K"])
        raw = obj["events"]
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidSequence(f"malformed sequence record: {exc}") from exc
    interior = []
    for rec in raw:
        try:
            interior.append((int(rec["k"]), float(rec["t"]), bool(rec.get("obs", True))))
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidSequence(f"malformed event record: {exc}") from exc
    ties = any(
        b[1] == a[1] for a, b in zip(interior, interior[1:])
    ) or bool(interior and interior[-1][1] == horizon)
    return from_interior(num_types, horizon, interior, allow_equal=ties)


def write_ndjson(path: str, sequences: Iterable[EventSequence]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for seq in sequences:
            fh.write(json.dumps(sequence_to_obj(seq)) + "\n")


def read_ndjson(path: str) -> list[EventSequence]:
    out: list[EventSequence] = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise InvalidSequence(f"line {line_no}: invalid JSON: {exc}") from exc
            try:
                out.append(sequence_from_obj(obj))
            except InvalidSequence as exc:
                raise InvalidSequence(f"line {line_no}: {exc}") from exc
    if out:
        k0 = out[0].num_types
        for i, seq in enumerate(out):
            if seq.num_types != k0:
                raise InvalidSequence(f"line {i}: inconsistent K ({seq.num_types} != {k0})")
    return out
