"""Imputation proposal intensities, filtering and smoothing.

The proposal rate for a missing event of type k at time t multiplies the
censoring probability into a scaled softplus that reads both directions of
context:

    q_k(t) = rho_k * s_k * log(1 + exp((readout_k . (h(t) + B hbar(t))) / s_k))

h(t) is the model's left-to-right state over everything drawn or observed so
far; hbar(t) is a second, right-to-left CTLSTM (its own parameters, same cell
form) run over the *observed* events only, read from the end marker backwards.
With B = 0 the reverse context drops out and the proposal reduces to the
filtering form rho_k * rate_k(t). rho_k = 0 forces q_k to exactly zero.

The log proposal density of a full imputation z given x mirrors the model
likelihood: log q_k at each z event minus the grid estimate of the integral of
the total proposal rate over [0, T).
"""
from __future__ import annotations

import bisect
from dataclasses import dataclass

import numpy as np

from . import ctlstm, tape
from .ctlstm import CTLSTMParams, CTLSTMState, StackedCell
from .events import BOS_TYPE, Event, EventSequence, merge
from .hawkes import NHPParams, TimeGrid
from .missingness import NEG_INF
from .tape import Var, value_of


@dataclass
class ProposalParams:
    model: NHPParams          # frozen during proposal training
    reverse: CTLSTMParams     # right-to-left cell, hidden size D'
    mix: np.ndarray           # (D, D') maps reverse hidden into the readout space

    @property
    def reverse_hidden_size(self) -> int:
        return int(np.shape(value_of(self.mix))[1])


def filtering_params(model: NHPParams) -> ProposalParams:
    """Degenerate proposal equal to the model intensity times rho."""
    return ProposalParams(
        model,
        ctlstm.zeros_params(1, model.num_types),
        np.zeros((model.hidden_size, 1)),
    )


def random_proposal(
    model: NHPParams,
    reverse_hidden_size: int,
    rng: np.random.Generator,
    scale: float = 0.1,
) -> ProposalParams:
    return ProposalParams(
        model,
        ctlstm.uniform_params(reverse_hidden_size, model.num_types, rng, scale),
        rng.uniform(-scale, scale, (model.hidden_size, reverse_hidden_size)),
    )


class ReverseTrajectory:
    """Right-to-left states over the observed events of one sequence.

    Entry j covers the half-open span (t_{j-1}, t_j] between consecutive
    observed times: the state there has read t_j and everything after it,
    including the end marker, and relaxes as t decreases below its anchor.
    """

    def __init__(self, anchors: list[float], states: list[CTLSTMState]):
        self.anchors = anchors
        self.states = states

    def state_for(self, t: float) -> CTLSTMState:
        j = bisect.bisect_left(self.anchors, t)
        if j == len(self.anchors):
            raise ValueError(f"time {t} beyond the trajectory horizon")
        return self.states[j]

    def hidden_at(self, t: float):
        state = self.state_for(t)
        _, hidden = ctlstm.decayed(state, state.anchor - t)
        return hidden

    def hidden_many(self, ts: np.ndarray) -> np.ndarray:
        """(n, D') reverse hiddens at several times (value path only)."""
        out = np.empty((len(ts), _dim(self.states[0])))
        idx = np.searchsorted(self.anchors, ts, side="left")
        for j in np.unique(idx):
            state = self.states[j]
            sel = idx == j
            out[sel] = ctlstm.decayed_many(state, state.anchor - np.asarray(ts)[sel])
        return out


def _dim(state: CTLSTMState) -> int:
    return np.shape(value_of(state.cell))[0]


def build_reverse(params: ProposalParams, x: EventSequence) -> ReverseTrajectory:
    """Run the reverse cell from the end marker down over observed events."""
    cell = StackedCell(params.reverse)
    state = CTLSTMState(
        x.horizon,
        np.zeros(cell.hidden_size),
        np.zeros(cell.hidden_size),
        np.ones(cell.hidden_size),
        np.full(cell.hidden_size, 0.5),
    )
    state = ctlstm.advance(cell, state, x.eos_type, x.horizon, 0.0)
    anchors = [x.horizon]
    states = [state]
    for e in reversed(x.interior):
        state = ctlstm.advance(cell, state, e.type_id, e.time, state.anchor - e.time)
        anchors.append(e.time)
        states.append(state)
    anchors.reverse()
    states.reverse()
    return ReverseTrajectory(anchors, states)


def mixed_readout(params: ProposalParams):
    """(K, D') readout of the reverse hidden; taped when mix is lifted."""
    return tape.mat_mat(params.model.readout, params.mix)


def proposal_intensities(params: ProposalParams, hidden, rev_hidden, rho, vb=None):
    """All K proposal rates given both hidden states. rho scales gradients too."""
    if vb is None:
        vb = mixed_readout(params)
    pre = tape.add(
        tape.mat_vec(params.model.readout, hidden), tape.mat_vec(vb, rev_hidden)
    )
    s = params.model.scales
    return tape.mul(rho, tape.mul(s, tape.softplus(tape.div(pre, s))))


def proposal_intensity(
    params: ProposalParams, hidden, rev_hidden, type_id: int, rho_k: float
) -> float:
    """Single-type proposal rate; 0 exactly when rho_k = 0."""
    if not (1 <= type_id <= params.model.num_types):
        raise ValueError(f"type {type_id} is not a real event type")
    if rho_k == 0.0:
        return 0.0
    rho = np.zeros(params.model.num_types)
    rho[type_id - 1] = rho_k
    lam = value_of(proposal_intensities(params, value_of(hidden), value_of(rev_hidden), rho))
    return float(lam[type_id - 1])


def proposal_intensities_many(
    params: ProposalParams,
    hiddens: np.ndarray,
    rev_hiddens: np.ndarray,
    rho: np.ndarray,
    vb: np.ndarray | None = None,
) -> np.ndarray:
    """(n, K) proposal rates for paired batches of states (value path)."""
    if vb is None:
        vb = value_of(mixed_readout(params))
    s = value_of(params.model.scales)
    pre = hiddens @ value_of(params.model.readout).T + rev_hiddens @ vb.T
    return rho[None, :] * s[None, :] * np.logaddexp(0.0, pre / s[None, :])


def log_q(
    params: ProposalParams,
    x: EventSequence,
    z: list[Event],
    grid: TimeGrid,
    rho: np.ndarray,
) -> object:
    """Log proposal density of imputation z given observations x.

    Returns -inf when z contains a type with rho_k = 0 (value path); raises if
    asked for a gradient there (lifted parameters).
    """
    lifted = isinstance(params.mix, Var)
    rho = np.asarray(rho, dtype=float)
    for e in z:
        if rho[e.type_id - 1] == 0.0:
            if lifted:
                raise ValueError(f"z contains type {e.type_id} with rho = 0")
            return NEG_INF
    merged = merge(x, z)
    missing = {(e.type_id, e.time) for e in z}
    traj = build_reverse(params, x)
    vb = mixed_readout(params)
    cell = StackedCell(params.model.lstm)
    state = ctlstm.fresh_state(cell.hidden_size)
    state = ctlstm.advance(cell, state, BOS_TYPE, 0.0, 0.0)
    log_terms = 0.0
    integral = 0.0
    prev_t = 0.0
    n = len(merged.events)
    for pos in range(1, n):
        e = merged.events[pos]
        ts, ws = grid.between(prev_t, e.time)
        for t_pt, w_pt in zip(ts, ws):
            _, h = ctlstm.decayed(state, t_pt - state.anchor)
            rev_h = traj.hidden_at(t_pt)
            lam = proposal_intensities(params, h, rev_h, rho, vb)
            integral = tape.add(integral, tape.mul(tape.vsum(lam), float(w_pt)))
        if pos < n - 1:
            pair = ctlstm.decayed(state, e.time - state.anchor)
            if (e.type_id, e.time) in missing:
                rev_h = traj.hidden_at(e.time)
                lam = proposal_intensities(params, pair[1], rev_h, rho, vb)
                log_terms = tape.add(log_terms, tape.log(tape.take(lam, e.type_id - 1)))
            state = ctlstm.advance(cell, state, e.type_id, e.time, 0.0, decayed_pair=pair)
        prev_t = e.time
    return tape.sub(log_terms, integral)


def reverse_bound_summands(
    params: ProposalParams, state: CTLSTMState, vb: np.ndarray
) -> np.ndarray:
    """(K,) upper bounds on the reverse-side readout over the state's decay span."""
    gate = value_of(state.gate_out)
    lo = gate * np.tanh(value_of(state.cell))
    hi = gate * np.tanh(value_of(state.target))
    return np.maximum(vb * lo[None, :], vb * hi[None, :]).sum(axis=1)
