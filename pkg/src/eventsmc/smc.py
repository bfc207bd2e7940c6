"""Sequential Monte Carlo imputation of missing events.

Particles sweep the observed segments left to right. Within the segment
between consecutive observed times, each particle proposes missing events by
thinning against a per-segment dominating rate; a proposal past the segment
end is discarded and the observed event (or the end marker) is consumed
instead. Every particle accumulates an unnormalized log importance weight
equal to

    log p_model(x with z) + log p_miss(z | x with z) - log q(z | x)

assembled incrementally: each drawn event contributes its model intensity,
censoring factor, and (negated) proposal intensity; every gap contributes the
model survival mass and (negated) proposal survival mass, including the gap
closed by a preempting observed event, the final gap up to the horizon, and
the model's no-further-events mass at the horizon. The incremental total
therefore equals the monolithic ratio exactly (shared integral grid), which
the tests pin down.

All integrals, for every particle and both densities, use one shared TimeGrid
so comparisons stay paired. Randomness is split per (segment, particle) from
the master seed; optional multinomial resampling triggers when the effective
sample size drops below half the particle count.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from . import ctlstm
from .ctlstm import CTLSTMState, StackedCell
from .events import BOS_TYPE, Event, EventSequence, validate
from .hawkes import NHPParams, TimeGrid, _readout_bound, intensities_many
from .missingness import MissingnessMechanism, incremental_factor
from .proposal import (
    ProposalParams,
    build_reverse,
    filtering_params,
    mixed_readout,
    proposal_intensities_many,
    reverse_bound_summands,
)
from .seeds import substream
from .tape import value_of


@dataclass
class Particle:
    imputed: list[Event]
    log_weight: float
    state: CTLSTMState          # left-to-right model state through its history
    history: list[Event]        # all events read so far, observed and imputed


@dataclass
class Ensemble:
    particles: list[list[Event]]
    log_weights: np.ndarray     # unnormalized accumulated log weights
    seed: int
    smooth: bool
    grid: TimeGrid | None = None

    @property
    def num_particles(self) -> int:
        return len(self.particles)

    @property
    def weights(self) -> np.ndarray:
        return _normalize(self.log_weights)


def _normalize(log_w: np.ndarray) -> np.ndarray:
    finite = np.isfinite(log_w)
    if not finite.any():
        raise ValueError("all particle weights are zero")
    shifted = np.where(finite, log_w - log_w[finite].max(), -np.inf)
    w = np.exp(shifted)
    return w / w.sum()


def ess(weights: np.ndarray) -> float:
    """Effective sample size (sum w)^2 / sum w^2 of nonnegative weights."""
    w = np.asarray(weights, dtype=float)
    if np.any(w < 0.0):
        raise ValueError("weights must be nonnegative")
    total_sq = float(w.sum()) ** 2
    sq_total = float((w * w).sum())
    if sq_total == 0.0:
        raise ValueError("all weights are zero")
    return total_sq / sq_total


def expectation(ensemble: Ensemble, fn) -> float:
    """Self-normalized estimate of E[fn(z) | x]."""
    w = ensemble.weights
    return float(sum(wi * fn(z) for wi, z in zip(w, ensemble.particles)))


def marginal_log_likelihood(ensemble: Ensemble) -> float:
    """log((1/M) sum of unnormalized weights); meaningful without resampling."""
    lw = ensemble.log_weights
    return float(logsumexp(lw) - np.log(len(lw)))


def resample_multinomial(ensemble: Ensemble, rng: np.random.Generator) -> Ensemble:
    """Draw particles with replacement by weight; weights reset to uniform."""
    w = ensemble.weights
    idx = rng.choice(len(w), size=len(w), p=w)
    return Ensemble(
        [list(ensemble.particles[i]) for i in idx],
        np.zeros(len(w)),
        ensemble.seed,
        ensemble.smooth,
        ensemble.grid,
    )


# ---------------------------------------------------------------------------
# Segment machinery
# ---------------------------------------------------------------------------

class _SegmentContext:
    """Shared per-segment quantities: grid slice, reverse hiddens, bounds."""

    def __init__(self, runner: "_Runner", t_start: float, end_event: Event, is_final: bool):
        self.t_start = t_start
        self.t_end = end_event.time
        self.end_event = end_event
        self.is_final = is_final
        self.runner = runner
        self.grid_ts, self.grid_ws = runner.grid.between(t_start, self.t_end)
        rev_state = runner.traj.state_for(self.t_end) if self.t_end > 0 else None
        if len(self.grid_ts):
            rev_h = runner.traj.hidden_many(self.grid_ts)
            self.rev_pre = rev_h @ runner.vb.T                 # (n, K)
        else:
            self.rev_pre = np.zeros((0, runner.num_types))
        self.rev_state = rev_state
        self.rev_bound = (
            reverse_bound_summands(runner.prop, rev_state, runner.vb)
            if rev_state is not None
            else np.zeros(runner.num_types)
        )

    def q_bound(self, state: CTLSTMState) -> float:
        r = self.runner
        pre = _readout_bound(r.readout, state) + self.rev_bound
        return float(np.sum(r.rho * r.scales * np.logaddexp(0.0, pre / r.scales)))

    def masses(self, state: CTLSTMState, a: float, b: float) -> tuple[float, float]:
        """Grid masses of total model and proposal rates over the gap (a, b]."""
        lo = np.searchsorted(self.grid_ts, a, side="right")
        hi = np.searchsorted(self.grid_ts, b, side="right")
        if hi == lo:
            return 0.0, 0.0
        ts = self.grid_ts[lo:hi]
        ws = self.grid_ws[lo:hi]
        r = self.runner
        hid = ctlstm.decayed_many(state, ts - state.anchor)
        pre_model = hid @ r.readout.T
        lam_p = r.scales[None, :] * np.logaddexp(0.0, pre_model / r.scales[None, :])
        pre_q = pre_model + self.rev_pre[lo:hi]
        lam_q = r.rho[None, :] * r.scales[None, :] * np.logaddexp(0.0, pre_q / r.scales[None, :])
        return float(ws @ lam_p.sum(axis=1)), float(ws @ lam_q.sum(axis=1))

    def rates_at(self, state: CTLSTMState, t: float):
        """Model and proposal rate vectors at time t, plus the decayed pair for stepping."""
        r = self.runner
        pair = ctlstm.decayed(state, t - state.anchor)
        pre_model = r.readout @ value_of(pair[1])
        if self.rev_state is not None:
            _, rev_h = ctlstm.decayed(self.rev_state, self.rev_state.anchor - t)
            pre_q = pre_model + r.vb @ value_of(rev_h)
        else:
            pre_q = pre_model
        lam_p = r.scales * np.logaddexp(0.0, pre_model / r.scales)
        lam_q = r.rho * r.scales * np.logaddexp(0.0, pre_q / r.scales)
        return lam_p, lam_q, pair


class _Runner:
    def __init__(
        self,
        x: EventSequence,
        model: NHPParams,
        mech: MissingnessMechanism,
        prop: ProposalParams,
        grid: TimeGrid,
    ):
        self.model = model
        self.prop = prop
        self.grid = grid
        self.readout = value_of(model.readout)
        self.scales = value_of(model.scales)
        self.mech = mech
        self.rho = mech.rho
        self.num_types = model.num_types
        self.vb = value_of(mixed_readout(prop))
        self.traj = build_reverse(prop, x)
        self.cell = StackedCell(model.lstm)
        self.accept_equal = x.allow_equal
        start = ctlstm.fresh_state(model.hidden_size)
        self.initial_state = ctlstm.advance(self.cell, start, BOS_TYPE, 0.0, 0.0)
        tail = x.events[1:]
        self.segments = [
            _SegmentContext(self, x.events[i].time, tail[i], i == len(tail) - 1)
            for i in range(len(tail))
        ]

    def fresh_particle(self) -> Particle:
        return Particle([], 0.0, self.initial_state, [Event(BOS_TYPE, 0.0)])


def _log_or_neg_inf(x: float) -> float:
    with np.errstate(divide="ignore"):
        return float(np.log(x))


def _draw_segment(particle: Particle, seg: _SegmentContext, rng: np.random.Generator) -> None:
    """Advance one particle across one observed segment, updating its weight."""
    r = seg.runner
    state = particle.state
    t_prev = state.anchor
    t = t_prev
    bound = seg.q_bound(state)
    while True:
        if bound <= 0.0:
            t = np.inf
        else:
            t = t + rng.exponential(1.0 / bound)
            u = rng.random()
        past_end = t > seg.t_end or (t == seg.t_end and not r.accept_equal)
        if past_end:
            p_mass, q_mass = seg.masses(state, t_prev, seg.t_end)
            particle.log_weight += q_mass - p_mass
            if not seg.is_final:
                obs = seg.end_event
                lam_p, _, pair = seg.rates_at(state, obs.time)
                particle.log_weight += _log_or_neg_inf(lam_p[obs.type_id - 1])
                particle.log_weight += incremental_factor(r.mech, obs, is_missing=False)
                state = ctlstm.advance(
                    r.cell, state, obs.type_id, obs.time, 0.0, decayed_pair=pair
                )
                particle.history.append(obs)
                particle.state = state
            return
        lam_p, lam_q, pair = seg.rates_at(state, t)
        total_q = float(lam_q.sum())
        if u * bound <= total_q:
            type_id = 1 + int(np.searchsorted(np.cumsum(lam_q / total_q), rng.random()))
            type_id = min(type_id, r.num_types)
            ev = Event(type_id, float(t))
            p_mass, q_mass = seg.masses(state, t_prev, t)
            particle.log_weight += q_mass - p_mass
            particle.log_weight += _log_or_neg_inf(lam_p[type_id - 1])
            particle.log_weight += incremental_factor(r.mech, ev, is_missing=True)
            particle.log_weight -= _log_or_neg_inf(lam_q[type_id - 1])
            particle.imputed.append(ev)
            particle.history.append(ev)
            state = ctlstm.advance(r.cell, state, type_id, t, 0.0, decayed_pair=pair)
            particle.state = state
            t_prev = t
            bound = seg.q_bound(state)


# ---------------------------------------------------------------------------
# Top-level runs
# ---------------------------------------------------------------------------

def run(
    x: EventSequence,
    model: NHPParams,
    mech: MissingnessMechanism,
    prop: ProposalParams | None = None,
    *,
    num_particles: int,
    smooth: bool = False,
    resample: bool = True,
    seed: int,
    grid_multiplier: int = 1,
) -> Ensemble:
    """Impute the missing part of ``x`` with ``num_particles`` weighted particles."""
    validate(x)
    if x.interior and not all(x.interior_observed):
        raise ValueError("run expects the observed stream only; split the sequence first")
    if num_particles < 1:
        raise ValueError("need at least one particle")
    if mech.num_types != x.num_types:
        raise ValueError("mechanism type count does not match sequence")
    if smooth:
        if prop is None:
            raise ValueError("smoothing requires a trained proposal")
    else:
        prop = filtering_params(model)
    grid = TimeGrid.build(
        x.interior_times(), x.horizon, substream(seed, "grid"), grid_multiplier
    )
    runner = _Runner(x, model, mech, prop, grid)
    particles = [runner.fresh_particle() for _ in range(num_particles)]
    for i, seg in enumerate(runner.segments):
        for m, p in enumerate(particles):
            _draw_segment(p, seg, substream(seed, "segment", i, m))
        if resample and num_particles > 1:
            log_w = np.array([p.log_weight for p in particles])
            if ess(_normalize(log_w)) < num_particles / 2.0:
                particles = _resample_live(particles, substream(seed, "resample", i))
    return Ensemble(
        [list(p.imputed) for p in particles],
        np.array([p.log_weight for p in particles]),
        int(seed),
        bool(smooth),
        grid,
    )


def _resample_live(particles: list[Particle], rng: np.random.Generator) -> list[Particle]:
    log_w = np.array([p.log_weight for p in particles])
    idx = rng.choice(len(particles), size=len(particles), p=_normalize(log_w))
    return [
        Particle(list(particles[i].imputed), 0.0, particles[i].state, list(particles[i].history))
        for i in idx
    ]


def propose_imputation(
    x: EventSequence,
    model: NHPParams,
    mech: MissingnessMechanism,
    prop: ProposalParams,
    grid: TimeGrid,
    rng: np.random.Generator,
) -> list[Event]:
    """Draw one imputation from the proposal alone (weights discarded)."""
    runner = _Runner(x, model, mech, prop, grid)
    p = runner.fresh_particle()
    for seg in runner.segments:
        _draw_segment(p, seg, rng)
    return p.imputed


# ---------------------------------------------------------------------------
# Serialization: {"weights": normalized, "particles": [[{"k","t"}..]..], "seed", "smooth"}
# ---------------------------------------------------------------------------

def ensemble_to_obj(ensemble: Ensemble) -> dict:
    return {
        "weights": [float(w) for w in ensemble.weights],
        "particles": [
            [{"k": e.type_id, "t": e.time} for e in z] for z in ensemble.particles
        ],
        "seed": ensemble.seed,
        "smooth": ensemble.smooth,
    }


def ensemble_from_obj(obj: dict) -> Ensemble:
    w = np.asarray(obj["weights"], dtype=float)
    with np.errstate(divide="ignore"):
        log_w = np.log(w)
    particles = [
        [Event(int(rec["k"]), float(rec["t"])) for rec in z] for z in obj["particles"]
    ]
    return Ensemble(particles, log_w, int(obj["seed"]), bool(obj["smooth"]))


def save_ensemble(path: str, ensemble: Ensemble) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(ensemble_to_obj(ensemble), fh)
        fh.write("\n")


def load_ensemble(path: str) -> Ensemble:
    with open(path, "r", encoding="utf-8") as fh:
        return ensemble_from_obj(json.load(fh))
