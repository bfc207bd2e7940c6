"""Missing-at-random censoring over event types.

Each real type k has a censoring probability rho_k: an event of type k is
dropped from the observed stream independently with that probability. The
induced conditional density of a partition factorizes per event as rho_k for a
missing event and (1 - rho_k) for an observed one. Deterministic mechanisms
(rho_k in {0, 1}) make some partitions impossible; their log factor is the
-inf sentinel, which downstream weight arithmetic treats as a zero-weight
particle rather than an error.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .events import Event, EventSequence, validate

NEG_INF = float("-inf")


@dataclass(frozen=True)
class MissingnessMechanism:
    rho: np.ndarray    # (K,) censoring probability per real type

    def __post_init__(self):
        r = np.asarray(self.rho, dtype=float)
        if r.ndim != 1 or np.any(r < 0.0) or np.any(r > 1.0):
            raise ValueError("rho must be a vector of probabilities")
        object.__setattr__(self, "rho", r)

    @property
    def num_types(self) -> int:
        return len(self.rho)

    @property
    def deterministic(self) -> bool:
        return bool(np.all((self.rho == 0.0) | (self.rho == 1.0)))


def mechanism_from_config(cfg: dict, num_types: int) -> MissingnessMechanism:
    """Accepts {"rho": [..]}, {"rho_all": r}, or {"missing_types": [k, ..]}."""
    keys = {"rho", "rho_all", "missing_types"} & set(cfg)
    if len(keys) != 1:
        raise ValueError("mechanism config needs exactly one of rho / rho_all / missing_types")
    if "rho" in cfg:
        rho = np.asarray(cfg["rho"], dtype=float)
        if len(rho) != num_types:
            raise ValueError(f"rho has length {len(rho)}, expected {num_types}")
    elif "rho_all" in cfg:
        rho = np.full(num_types, float(cfg["rho_all"]))
    else:
        rho = np.zeros(num_types)
        for k in cfg["missing_types"]:
            if not 1 <= int(k) <= num_types:
                raise ValueError(f"missing type {k} out of range 1..{num_types}")
            rho[int(k) - 1] = 1.0
    return MissingnessMechanism(rho)


def censor(
    mech: MissingnessMechanism, seq: EventSequence, rng: np.random.Generator
) -> EventSequence:
    """Flip interior events to missing, independently per type probability."""
    validate(seq, mech.num_types)
    if not all(seq.observed):
        raise ValueError("censor expects a fully observed sequence")
    obs = [True]
    for e in seq.interior:
        obs.append(bool(rng.random() >= mech.rho[e.type_id - 1]))
    obs.append(True)
    return EventSequence(
        seq.horizon, seq.num_types, seq.events, tuple(obs), seq.allow_equal
    )


def incremental_factor(mech: MissingnessMechanism, event: Event, is_missing: bool) -> float:
    """Log factor this single event contributes to the partition density."""
    r = float(mech.rho[event.type_id - 1])
    with np.errstate(divide="ignore"):
        return float(np.log(r)) if is_missing else float(np.log1p(-r))


def log_p_miss(mech: MissingnessMechanism, x: EventSequence, z: list[Event]) -> float:
    """Log conditional density of the partition (x observed, z missing)."""
    total = 0.0
    for e in x.interior:
        total += incremental_factor(mech, e, False)
    for e in z:
        total += incremental_factor(mech, e, True)
    return total
