"""Continuous-time LSTM cell.

Between events the cell state relaxes exponentially from its post-event value
``cell`` toward an asymptote ``target`` at a per-dimension rate ``rate``:

    c(t)   = target + (cell - target) * exp(-rate * dt)
    h(t)   = gate_out * tanh(c(t))

Reading an event of type k at time t first decays the state to t, then applies
gated updates driven by the type embedding (a column of each input matrix),
the decayed hidden state, and a bias. Seven gate banks are computed in one
stacked affine map: input, forget, candidate, output, decay-rate
(softplus-activated, so rates stay positive), and a separate input/forget pair
for the asymptote track. The asymptote update reads the previous asymptote,
not the decayed cell.

Embedding tables have K + 2 columns: type 0 is the begin marker, types 1..K
are real, type K + 1 is the end marker.

All functions accept plain arrays or tape variables (see tape.py) and may be
run left-to-right over event history or right-to-left over mirrored time; the
caller supplies the non-negative elapsed span.
"""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import tape
from .tape import value_of

GATE_ORDER = ("i", "f", "z", "o", "d", "ibar", "fbar")


@dataclass
class CTLSTMParams:
    W_i: np.ndarray   # (D, K+2) each W_*; (D, D) each U_*; (D,) each d_*
    U_i: np.ndarray
    d_i: np.ndarray
    W_f: np.ndarray
    U_f: np.ndarray
    d_f: np.ndarray
    W_z: np.ndarray
    U_z: np.ndarray
    d_z: np.ndarray
    W_o: np.ndarray
    U_o: np.ndarray
    d_o: np.ndarray
    W_d: np.ndarray
    U_d: np.ndarray
    d_d: np.ndarray
    Wbar_i: np.ndarray
    Ubar_i: np.ndarray
    dbar_i: np.ndarray
    Wbar_f: np.ndarray
    Ubar_f: np.ndarray
    dbar_f: np.ndarray

    @property
    def hidden_size(self) -> int:
        return int(np.shape(value_of(self.W_i))[0])

    @property
    def num_types(self) -> int:
        return int(np.shape(value_of(self.W_i))[1]) - 2

    def field_arrays(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def zeros_params(hidden_size: int, num_types: int) -> CTLSTMParams:
    d, k = hidden_size, num_types
    vals = {}
    for gate in GATE_ORDER:
        w, u, b = _bank_names(gate)
        vals[w] = np.zeros((d, k + 2))
        vals[u] = np.zeros((d, d))
        vals[b] = np.zeros(d)
    return CTLSTMParams(**vals)


def uniform_params(
    hidden_size: int,
    num_types: int,
    rng: np.random.Generator,
    scale: float = 0.1,
    bias_scale: float = 0.0,
) -> CTLSTMParams:
    d, k = hidden_size, num_types
    vals = {}
    for gate in GATE_ORDER:
        w, u, b = _bank_names(gate)
        vals[w] = rng.uniform(-scale, scale, (d, k + 2))
        vals[u] = rng.uniform(-scale, scale, (d, d))
        vals[b] = (
            rng.uniform(-bias_scale, bias_scale, d) if bias_scale > 0.0 else np.zeros(d)
        )
    return CTLSTMParams(**vals)


def _bank_names(gate: str) -> tuple[str, str, str]:
    if gate.endswith("bar"):
        core = gate[:-3]
        return f"Wbar_{core}", f"Ubar_{core}", f"dbar_{core}"
    return f"W_{gate}", f"U_{gate}", f"d_{gate}"


@dataclass
class CTLSTMState:
    anchor: float      # time at which cell/target/rate/gate_out were set
    cell: object       # (D,) array or Var
    target: object
    rate: object
    gate_out: object


def fresh_state(hidden_size: int) -> CTLSTMState:
    # pre-boundary state: zero cells, unit rate, half-open output gate
    d = hidden_size
    return CTLSTMState(0.0, np.zeros(d), np.zeros(d), np.ones(d), np.full(d, 0.5))


class StackedCell:
    """Per-run view of CTLSTMParams with the seven banks stacked for one affine map."""

    def __init__(self, params: CTLSTMParams):
        ws, us, bs = [], [], []
        for gate in GATE_ORDER:
            w, u, b = _bank_names(gate)
            ws.append(getattr(params, w))
            us.append(getattr(params, u))
            bs.append(getattr(params, b))
        self.W = tape.vstack(ws)
        self.U = tape.vstack(us)
        self.b = tape.concat(bs)
        self.hidden_size = params.hidden_size
        self.num_types = params.num_types


def decayed(state: CTLSTMState, elapsed: float):
    """(cell, hidden) after relaxing for ``elapsed`` time units (clamped at 0)."""
    dt = max(float(elapsed), 0.0)
    shift = tape.exp(tape.mul(state.rate, -dt))
    cell_t = tape.add(state.target, tape.mul(tape.sub(state.cell, state.target), shift))
    hidden_t = tape.mul(state.gate_out, tape.tanh(cell_t))
    return cell_t, hidden_t


def advance(
    cell: StackedCell,
    state: CTLSTMState,
    type_id: int,
    time: float,
    elapsed: float,
    decayed_pair=None,
) -> CTLSTMState:
    """Read one event of ``type_id`` at ``time`` and return the post-event state."""
    cell_t, hidden_t = decayed_pair if decayed_pair is not None else decayed(state, elapsed)
    pre = tape.add(tape.add(tape.take_column(cell.W, type_id), tape.mat_vec(cell.U, hidden_t)), cell.b)
    d = cell.hidden_size
    g_in = tape.sigmoid(tape.slice_vec(pre, 0, d))
    g_forget = tape.sigmoid(tape.slice_vec(pre, d, 2 * d))
    candidate = tape.tanh(tape.slice_vec(pre, 2 * d, 3 * d))
    g_out = tape.sigmoid(tape.slice_vec(pre, 3 * d, 4 * d))
    rate = tape.softplus(tape.slice_vec(pre, 4 * d, 5 * d))
    g_in_bar = tape.sigmoid(tape.slice_vec(pre, 5 * d, 6 * d))
    g_forget_bar = tape.sigmoid(tape.slice_vec(pre, 6 * d, 7 * d))
    new_cell = tape.add(tape.mul(g_forget, cell_t), tape.mul(g_in, candidate))
    new_target = tape.add(tape.mul(g_forget_bar, state.target), tape.mul(g_in_bar, candidate))
    return CTLSTMState(float(time), new_cell, new_target, rate, g_out)


def decayed_many(state: CTLSTMState, elapsed: np.ndarray) -> np.ndarray:
    """Hidden states at several elapsed offsets at once (value path only)."""
    dt = np.maximum(np.asarray(elapsed, dtype=float), 0.0)
    cell = value_of(state.cell)
    target = value_of(state.target)
    rate = value_of(state.rate)
    gate_out = value_of(state.gate_out)
    shift = np.exp(-np.outer(dt, rate))                       # (n, D)
    cells = target[None, :] + (cell - target)[None, :] * shift
    return gate_out[None, :] * np.tanh(cells)
