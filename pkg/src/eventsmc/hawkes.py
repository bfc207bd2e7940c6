"""Neural Hawkes process: intensities, likelihood, sampling, thinning bounds.

The per-type intensity is a scaled softplus of a linear readout of the
continuous-time LSTM hidden state,

    rate_k(t) = s_k * log(1 + exp(readout_k . h(t) / s_k)),   s_k > 0,

which is positive for any readout. A net with all-zero weights yields the
constant rate s_k * log 2 per type (homogeneous Poisson), which the tests use
as a closed-form oracle.

The log-likelihood of a complete sequence on [0, T) is the sum of log
intensities at its interior events minus the integral of the total intensity
over the window; boundary events contribute no terms. The integral is
estimated on a TimeGrid shared by every consumer in one run so that competing
estimates stay paired.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ctlstm, tape
from .ctlstm import CTLSTMParams, CTLSTMState, StackedCell
from .events import BOS_TYPE, EventSequence, validate
from .tape import value_of


@dataclass
class NHPParams:
    lstm: CTLSTMParams
    readout: np.ndarray    # (K, D)
    scales: np.ndarray     # (K,), positive

    @property
    def num_types(self) -> int:
        return int(np.shape(value_of(self.readout))[0])

    @property
    def hidden_size(self) -> int:
        return int(np.shape(value_of(self.readout))[1])


def zeros_model(hidden_size: int, num_types: int, scales: float | np.ndarray = 1.0) -> NHPParams:
    s = np.full(num_types, float(scales)) if np.ndim(scales) == 0 else np.asarray(scales, float)
    return NHPParams(
        ctlstm.zeros_params(hidden_size, num_types),
        np.zeros((num_types, hidden_size)),
        s,
    )


def random_model(
    hidden_size: int,
    num_types: int,
    rng: np.random.Generator,
    scale: float = 0.1,
    bias_scale: float = 0.0,
) -> NHPParams:
    return NHPParams(
        ctlstm.uniform_params(hidden_size, num_types, rng, scale, bias_scale),
        rng.uniform(-scale, scale, (num_types, hidden_size)),
        np.ones(num_types),
    )


def intensities(params: NHPParams, hidden) -> object:
    """All K intensities at one hidden state; array or tape value."""
    pre = tape.mat_vec(params.readout, hidden)
    return tape.mul(params.scales, tape.softplus(tape.div(pre, params.scales)))


def intensity(params: NHPParams, hidden, type_id: int) -> float:
    """Single-type intensity; ``type_id`` is a real type in 1..K."""
    if not (1 <= type_id <= params.num_types):
        raise ValueError(f"type {type_id} is not a real event type")
    lam = value_of(intensities(params, value_of(hidden)))
    return float(lam[type_id - 1])


def intensities_many(params: NHPParams, hiddens: np.ndarray) -> np.ndarray:
    """(n, K) intensities for a batch of hidden states (value path)."""
    s = value_of(params.scales)
    pre = hiddens @ value_of(params.readout).T
    return s[None, :] * np.logaddexp(0.0, pre / s[None, :])


# ---------------------------------------------------------------------------
# Monte Carlo grid for the intensity integral
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TimeGrid:
    """Evaluation points on [0, T) with per-point quadrature weights.

    Construction: (n_intervals * multiplier) points uniform on [0, T), plus one
    point in every empty positive-length interval between consecutive anchor
    times, so every such interval holds at least one point. A point in an
    interval of length L holding n points carries weight L / n; summed over a
    partition of the interval these attributions telescope to the exact
    per-interval estimate, so incremental and whole-window accumulations agree.
    """

    times: np.ndarray
    weights: np.ndarray
    horizon: float

    @classmethod
    def build(
        cls,
        anchor_times,
        horizon: float,
        rng: np.random.Generator,
        multiplier: int = 1,
    ) -> "TimeGrid":
        anchors = np.asarray(sorted(set([0.0] + list(anchor_times) + [float(horizon)])))
        n_intervals = len(anchors) - 1
        pts = list(rng.uniform(0.0, horizon, n_intervals * int(multiplier)))
        idx = np.searchsorted(anchors, pts, side="left") - 1
        filled = set(idx.tolist())
        for j in range(n_intervals):
            a, b = anchors[j], anchors[j + 1]
            if j not in filled and b > a:
                pts.append(rng.uniform(a, b))
        pts_arr = np.sort(np.asarray(pts))
        interval_of = np.clip(np.searchsorted(anchors, pts_arr, side="left") - 1, 0, n_intervals - 1)
        counts = np.bincount(interval_of, minlength=n_intervals)
        lengths = np.diff(anchors)
        with np.errstate(divide="ignore", invalid="ignore"):
            per_point = np.where(counts > 0, lengths / np.maximum(counts, 1), 0.0)
        return cls(pts_arr, per_point[interval_of], float(horizon))

    def between(self, a: float, b: float) -> tuple[np.ndarray, np.ndarray]:
        """Points and weights with a < t <= b."""
        lo = np.searchsorted(self.times, a, side="right")
        hi = np.searchsorted(self.times, b, side="right")
        return self.times[lo:hi], self.weights[lo:hi]


# ---------------------------------------------------------------------------
# Likelihood
# ---------------------------------------------------------------------------

def log_likelihood(params: NHPParams, seq: EventSequence, grid: TimeGrid):
    """Log density of a complete sequence; float, or a tape Var when params are lifted.

    Every interior event (observed or not) contributes a log-intensity term and
    advances the state; boundaries only open and close the window.
    """
    validate(seq)
    if seq.horizon != grid.horizon:
        raise ValueError("grid horizon does not match sequence horizon")
    cell = StackedCell(params.lstm)
    state = ctlstm.fresh_state(cell.hidden_size)
    state = ctlstm.advance(cell, state, BOS_TYPE, 0.0, 0.0)
    log_terms = 0.0
    integral = 0.0
    prev_t = 0.0
    for e, pos in zip(seq.events[1:], range(1, len(seq.events))):
        ts, ws = grid.between(prev_t, e.time)
        for t_pt, w_pt in zip(ts, ws):
            _, h = ctlstm.decayed(state, t_pt - state.anchor)
            integral = tape.add(integral, tape.mul(tape.vsum(intensities(params, h)), float(w_pt)))
        if pos < len(seq.events) - 1:  # interior event
            pair = ctlstm.decayed(state, e.time - state.anchor)
            lam = intensities(params, pair[1])
            log_terms = tape.add(log_terms, tape.log(tape.take(lam, e.type_id - 1)))
            state = ctlstm.advance(cell, state, e.type_id, e.time, 0.0, decayed_pair=pair)
        prev_t = e.time
    return tape.sub(log_terms, integral)


# ---------------------------------------------------------------------------
# Thinning sampler and its dominating rate
# ---------------------------------------------------------------------------

def lambda_star(params: NHPParams, state: CTLSTMState) -> float:
    """Upper bound on the total intensity over the whole decay span of ``state``.

    tanh is monotone and each cell dimension travels monotonically between its
    current and target values, so per-dimension maxima over those two extremes
    bound the readout pre-activation; softplus is monotone, so feeding the
    bound through it bounds each rate.
    """
    pre = _readout_bound(value_of(params.readout), state)
    s = value_of(params.scales)
    return float(np.sum(s * np.logaddexp(0.0, pre / s)))


def _readout_bound(readout: np.ndarray, state: CTLSTMState) -> np.ndarray:
    gate = value_of(state.gate_out)
    lo = gate * np.tanh(value_of(state.cell))
    hi = gate * np.tanh(value_of(state.target))
    return np.maximum(readout * lo[None, :], readout * hi[None, :]).sum(axis=1)


def sample_prior(
    params: NHPParams,
    rng: np.random.Generator,
    horizon: float | None = None,
    count: int | None = None,
) -> EventSequence:
    """Draw a complete sequence by thinning.

    Exactly one of ``horizon`` (events on [0, T), end marker at T) or ``count``
    (first ``count`` events; the window closes at the last event's time, which
    therefore sits on the boundary and the sequence carries ``allow_equal``).
    """
    if (horizon is None) == (count is None):
        raise ValueError("specify exactly one of horizon or count")
    k_types = params.num_types
    cell = StackedCell(params.lstm)
    state = ctlstm.fresh_state(cell.hidden_size)
    state = ctlstm.advance(cell, state, BOS_TYPE, 0.0, 0.0)
    events: list[tuple[int, float, bool]] = []
    t = 0.0
    bound = lambda_star(params, state)
    while True:
        if bound <= 0.0:
            if horizon is None:
                raise RuntimeError("intensity bound collapsed to zero before reaching count")
            break
        t += rng.exponential(1.0 / bound)
        u = rng.random()
        if horizon is not None and t > horizon:
            break
        pair = ctlstm.decayed(state, t - state.anchor)
        lam = value_of(intensities(params, pair[1]))
        total = float(lam.sum())
        if u * bound <= total:
            type_id = 1 + int(np.searchsorted(np.cumsum(lam / total), rng.random()))
            type_id = min(type_id, k_types)
            events.append((type_id, t, True))
            state = ctlstm.advance(cell, state, type_id, t, 0.0, decayed_pair=pair)
            bound = lambda_star(params, state)
            if count is not None and len(events) == count:
                break
    from .events import from_interior

    if horizon is not None:
        return from_interior(k_types, horizon, events)
    return from_interior(k_types, events[-1][1], events, allow_equal=True)
