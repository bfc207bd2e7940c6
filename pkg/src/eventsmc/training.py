"""Gradient-based fitting of the model and the proposal.

Gradients come from the reverse-mode tape: a copy of the parameters is lifted
to tape variables, the objective is evaluated through the ordinary forward
code, and backward() fills per-tensor gradients. The finite-difference tests
pin the implementation down, so nothing here depends on hand-derived
recurrences.

Three objectives:
  * model log-likelihood on complete sequences (ascent);
  * proposal divergence, a convex mix of the inclusive term -log q(z*|x) on
    censored complete data and the exclusive score-function surrogate with
    residual weighting (no baseline), mixed by `kl_mix` (1.0 = inclusive only);
  * the MCEM lower bound for incomplete data: expectation step samples
    filtering particles (the proposal then needs no training of its own),
    maximization step ascends the particle-averaged complete-data
    log-likelihood.

Model parameters stay frozen during proposal training because only the
reverse network and the mixing matrix are ever lifted.

All shuffling, censoring, initialization, and sampling randomness derives
from labeled substreams of one master seed, so runs are reproducible and the
degenerate MCEM case (nothing missing, one particle) follows the exact update
trajectory of plain model training under the same seed.
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field, fields as dc_fields

import numpy as np

from .ctlstm import CTLSTMParams
from .events import EventSequence, merge, split
from .hawkes import NHPParams, TimeGrid, log_likelihood, random_model
from .missingness import MissingnessMechanism, censor, log_p_miss
from .proposal import ProposalParams, filtering_params, log_q, random_proposal
from .seeds import substream
from .smc import propose_imputation, run as smc_run
from .tape import Var, backward, leaf, value_of


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 10
    patience: int = 3
    kl_mix: float = 1.0            # weight on the inclusive term; 1.0 = inclusive only
    exclusive_samples: int = 1
    grid_multiplier: int = 1
    scale_floor: float = 1e-2
    # expectation-maximization settings
    rounds: int = 5
    num_particles: int = 10
    m_step_epochs: int = 1

    def __post_init__(self):
        if not 0.0 <= self.kl_mix <= 1.0:
            raise ValueError("kl_mix must lie in [0, 1]")


@dataclass
class TrainResult:
    params: object                 # best checkpoint under the dev metric
    final_params: object           # parameters after the last update
    log: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Tensor dictionaries and lifting
# ---------------------------------------------------------------------------

def _lstm_tensors(p: CTLSTMParams) -> dict[str, np.ndarray]:
    return {f.name: getattr(p, f.name) for f in dc_fields(p)}


def model_tensors(model: NHPParams) -> dict[str, np.ndarray]:
    out = _lstm_tensors(model.lstm)
    out["v"] = model.readout
    out["s"] = model.scales
    return out


def model_from_tensors(t: dict[str, np.ndarray]) -> NHPParams:
    lstm = CTLSTMParams(**{f.name: t[f.name] for f in dc_fields(CTLSTMParams)})
    return NHPParams(lstm, t["v"], t["s"])


def proposal_tensors(prop: ProposalParams) -> dict[str, np.ndarray]:
    """Only the trainable part: the reverse network and the mixing matrix."""
    out = _lstm_tensors(prop.reverse)
    out["B"] = prop.mix
    return out


def proposal_from_tensors(model: NHPParams, t: dict[str, np.ndarray]) -> ProposalParams:
    reverse = CTLSTMParams(**{f.name: t[f.name] for f in dc_fields(CTLSTMParams)})
    return ProposalParams(model, reverse, t["B"])


def _lift(tensors: dict[str, np.ndarray]) -> dict[str, Var]:
    return {k: leaf(np.array(v, dtype=float)) for k, v in tensors.items()}


def _extract_grads(lifted: dict[str, Var]) -> dict[str, np.ndarray]:
    out = {}
    for name, var in lifted.items():
        g = var.grad if var.grad is not None else np.zeros_like(var.value)
        g = np.asarray(g, dtype=float)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in {name}")
        out[name] = g
    return out


def _values(tensors: dict) -> dict[str, np.ndarray]:
    return {k: np.array(value_of(v), dtype=float) for k, v in tensors.items()}


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

class Adam:
    """Per-tensor Adam descent with a positivity floor on the scale vector."""

    def __init__(self, tensors: dict[str, np.ndarray], config: TrainConfig):
        self.config = config
        self.m = {k: np.zeros_like(v) for k, v in tensors.items()}
        self.v = {k: np.zeros_like(v) for k, v in tensors.items()}
        self.t = 0

    def step(
        self, tensors: dict[str, np.ndarray], grads: dict[str, np.ndarray]
    ) -> dict[str, np.ndarray]:
        """One descent step on the loss whose gradients are given."""
        c = self.config
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        out = {}
        for name, x in tensors.items():
            g = grads[name]
            self.m[name] = c.beta1 * self.m[name] + (1.0 - c.beta1) * g
            self.v[name] = c.beta2 * self.v[name] + (1.0 - c.beta2) * g * g
            step = c.learning_rate * (self.m[name] / bc1) / (
                np.sqrt(self.v[name] / bc2) + c.eps
            )
            new = x - step
            if name == "s":
                new = np.maximum(new, c.scale_floor)  # keep scales positive
            out[name] = new
        return out


# ---------------------------------------------------------------------------
# Gradient evaluations
# ---------------------------------------------------------------------------

def grad_log_likelihood(
    model: NHPParams, seq: EventSequence, grid: TimeGrid
) -> tuple[float, dict[str, np.ndarray]]:
    """Log-likelihood value and its gradient for every model tensor."""
    lifted = _lift(model_tensors(model))
    ll = log_likelihood(model_from_tensors(lifted), seq, grid)
    backward(ll)
    return float(value_of(ll)), _extract_grads(lifted)


def grad_inclusive(
    prop: ProposalParams,
    x: EventSequence,
    z_star: list,
    grid: TimeGrid,
    mech: MissingnessMechanism,
) -> tuple[float, dict[str, np.ndarray]]:
    """-log q(z*|x) and its gradient for the trainable proposal tensors."""
    lifted = _lift(proposal_tensors(prop))
    loss = -log_q(proposal_from_tensors(prop.model, lifted), x, z_star, grid, mech.rho)
    backward(loss)
    return float(value_of(loss)), _extract_grads(lifted)


def grad_exclusive(
    prop: ProposalParams,
    mech: MissingnessMechanism,
    x: EventSequence,
    num_samples: int,
    grid: TimeGrid,
    rng: np.random.Generator,
) -> dict[str, np.ndarray]:
    """Score-function surrogate gradient with residual (log q - b) weighting."""
    model = prop.model
    total: dict[str, np.ndarray] | None = None
    for _ in range(num_samples):
        z = propose_imputation(x, model, mech, prop, grid, rng)
        complete = merge(x, z)
        b = log_likelihood(model, complete, grid) + log_p_miss(mech, x, z)
        lifted = _lift(proposal_tensors(prop))
        lq = log_q(proposal_from_tensors(model, lifted), x, z, grid, mech.rho)
        backward(lq)
        residual = float(value_of(lq)) - b
        g = _extract_grads(lifted)
        if total is None:
            total = {k: residual * v for k, v in g.items()}
        else:
            for k, v in g.items():
                total[k] += residual * v
    assert total is not None
    return {k: v / num_samples for k, v in total.items()}


# ---------------------------------------------------------------------------
# Model training
# ---------------------------------------------------------------------------

def _dev_grids(dev: list[EventSequence], seed: int, multiplier: int) -> list[TimeGrid]:
    return [
        TimeGrid.build(
            s.interior_times(), s.horizon, substream(seed, "devgrid", i), multiplier
        )
        for i, s in enumerate(dev)
    ]


def _mean_ll(model: NHPParams, dev: list[EventSequence], grids: list[TimeGrid]) -> float:
    return float(
        np.mean([log_likelihood(model, s, g) for s, g in zip(dev, grids)])
    )


def train_model(
    train: list[EventSequence],
    dev: list[EventSequence],
    config: TrainConfig,
    seed: int,
    hidden_size: int = 32,
    init: NHPParams | None = None,
) -> TrainResult:
    """Fit a model to complete sequences by per-sequence Adam ascent."""
    if not train:
        raise ValueError("empty dataset")
    num_types = train[0].num_types
    if init is None:
        init = random_model(hidden_size, num_types, substream(seed, "init"))
    tensors = _values(model_tensors(init))
    adam = Adam(tensors, config)
    dev_grids = _dev_grids(dev, seed, config.grid_multiplier)
    best_tensors = copy.deepcopy(tensors)
    best_dev = -np.inf
    best_epoch = -1
    dev_log: list[float] = []
    stall = 0
    for epoch in range(config.epochs):
        order = substream(seed, "order", epoch).permutation(len(train))
        for idx in order:
            seq = train[idx]
            grid = TimeGrid.build(
                seq.interior_times(),
                seq.horizon,
                substream(seed, "grid", epoch, int(idx)),
                config.grid_multiplier,
            )
            _, grads = grad_log_likelihood(model_from_tensors(tensors), seq, grid)
            loss_grads = {k: -g for k, g in grads.items()}
            tensors = adam.step(tensors, loss_grads)
        if not dev:
            continue
        dev_ll = _mean_ll(model_from_tensors(tensors), dev, dev_grids)
        dev_log.append(dev_ll)
        if dev_ll > best_dev:
            best_dev = dev_ll
            best_tensors = copy.deepcopy(tensors)
            best_epoch = epoch
            stall = 0
        else:
            stall += 1
            if stall >= config.patience:
                break
    if not dev:
        best_tensors = tensors
        best_epoch = config.epochs - 1
    return TrainResult(
        model_from_tensors(best_tensors),
        model_from_tensors(tensors),
        {"dev": dev_log, "best_epoch": best_epoch, "metric": "mean dev log-likelihood"},
    )


# ---------------------------------------------------------------------------
# Proposal training
# ---------------------------------------------------------------------------

def _censor_once(
    data: list[EventSequence], mech: MissingnessMechanism, seed: int, label: str
) -> list[tuple[EventSequence, list]]:
    pairs = []
    for idx, seq in enumerate(data):
        hidden = censor(mech, seq, substream(seed, label, idx))
        pairs.append(split(hidden))
    return pairs


def _dev_divergence(
    prop: ProposalParams,
    mech: MissingnessMechanism,
    pairs: list[tuple[EventSequence, list]],
    grids: list[TimeGrid],
    config: TrainConfig,
    seed: int,
    epoch: int,
) -> float:
    """Mean combined divergence on the dev split (lower is better)."""
    model = prop.model
    beta = config.kl_mix
    total = 0.0
    for idx, ((x, z_star), grid) in enumerate(zip(pairs, grids)):
        val = 0.0
        if beta > 0.0:
            val += beta * -log_q(prop, x, z_star, grid, mech.rho)
        if beta < 1.0:
            rng = substream(seed, "devexc", epoch, idx)
            z = propose_imputation(x, model, mech, prop, grid, rng)
            b = log_likelihood(model, merge(x, z), grid) + log_p_miss(mech, x, z)
            val += (1.0 - beta) * (log_q(prop, x, z, grid, mech.rho) - b)
        total += val
    return total / len(pairs)


def train_proposal(
    model: NHPParams,
    mech: MissingnessMechanism,
    train: list[EventSequence],
    dev: list[EventSequence],
    config: TrainConfig,
    seed: int,
    reverse_hidden_size: int = 16,
    init: ProposalParams | None = None,
) -> TrainResult:
    """Fit the proposal; the model inside it is read-only throughout."""
    if not train:
        raise ValueError("empty dataset")
    if init is None:
        init = random_proposal(model, reverse_hidden_size, substream(seed, "init"))
    # dev partitions stay fixed so the selection metric is stable; train
    # partitions are redrawn every epoch, since the objective is an
    # expectation over the mechanism's partitions and fresh draws keep the
    # proposal from memorizing one split
    dev_pairs = _censor_once(dev, mech, seed, "censordev")
    dev_grids = _dev_grids(dev, seed, config.grid_multiplier)
    tensors = _values(proposal_tensors(init))
    adam = Adam(tensors, config)
    beta = config.kl_mix
    best_tensors = copy.deepcopy(tensors)
    best_dev = np.inf
    best_epoch = -1
    dev_log: list[float] = []
    stall = 0
    for epoch in range(config.epochs):
        order = substream(seed, "order", epoch).permutation(len(train))
        for idx in order:
            x, z_star = split(
                censor(mech, train[idx], substream(seed, "censor", epoch, int(idx)))
            )
            prop = proposal_from_tensors(model, tensors)
            grid = TimeGrid.build(
                x.interior_times(),
                x.horizon,
                substream(seed, "grid", epoch, int(idx)),
                config.grid_multiplier,
            )
            grads: dict[str, np.ndarray] | None = None
            if beta > 0.0:
                _, g_inc = grad_inclusive(prop, x, z_star, grid, mech)
                grads = {k: beta * v for k, v in g_inc.items()}
            if beta < 1.0:
                rng = substream(seed, "exc", epoch, int(idx))
                g_exc = grad_exclusive(
                    prop, mech, x, config.exclusive_samples, grid, rng
                )
                if grads is None:
                    grads = {k: (1.0 - beta) * v for k, v in g_exc.items()}
                else:
                    for k, v in g_exc.items():
                        grads[k] += (1.0 - beta) * v
            assert grads is not None
            tensors = adam.step(tensors, grads)
        if not dev_pairs:
            continue
        prop = proposal_from_tensors(model, tensors)
        dev_val = _dev_divergence(prop, mech, dev_pairs, dev_grids, config, seed, epoch)
        dev_log.append(dev_val)
        if dev_val < best_dev:
            best_dev = dev_val
            best_tensors = copy.deepcopy(tensors)
            best_epoch = epoch
            stall = 0
        else:
            stall += 1
            if stall >= config.patience:
                break
    if not dev_pairs:
        best_tensors = tensors
        best_epoch = config.epochs - 1
    return TrainResult(
        proposal_from_tensors(model, best_tensors),
        proposal_from_tensors(model, tensors),
        {"dev": dev_log, "best_epoch": best_epoch, "metric": "mean dev divergence"},
    )


# ---------------------------------------------------------------------------
# Monte Carlo expectation-maximization for incomplete data
# ---------------------------------------------------------------------------

def mcem(
    model_init: NHPParams,
    mech: MissingnessMechanism,
    data: list[EventSequence],
    config: TrainConfig,
    seed: int,
) -> TrainResult:
    """Fit the model when only the observed part of each sequence is known.

    Expectation step: filtering particles for every sequence (the filtering
    proposal is derived from the current model, so it needs no training).
    Maximization step: Adam ascent on the particle-averaged complete-data
    log-likelihood, several epochs per round. The bound value is logged
    before and after each maximization on the round's fixed particles.
    """
    if not data:
        raise ValueError("empty dataset")
    tensors = _values(model_tensors(model_init))
    adam = Adam(tensors, config)
    elbo_log: list[tuple[float, float]] = []
    for rnd in range(config.rounds):
        model = model_from_tensors(tensors)
        fixed: list[tuple[EventSequence, list[list], list[float], TimeGrid]] = []
        for idx, x in enumerate(data):
            child_seed = int(substream(seed, "estep", rnd, idx).integers(1 << 63))
            ens = smc_run(
                x,
                model,
                mech,
                None,
                num_particles=config.num_particles,
                smooth=False,
                resample=False,
                seed=child_seed,
                grid_multiplier=config.grid_multiplier,
            )
            q = filtering_params(model)
            lqs = [log_q(q, x, z, ens.grid, mech.rho) for z in ens.particles]
            fixed.append((x, ens.particles, lqs, ens.grid))

        def bound(current: NHPParams) -> float:
            vals = []
            for x, particles, lqs, grid in fixed:
                terms = [
                    log_likelihood(current, merge(x, z), grid)
                    + log_p_miss(mech, x, z)
                    - lq
                    for z, lq in zip(particles, lqs)
                ]
                vals.append(float(np.mean(terms)))
            return float(np.mean(vals))

        pre = bound(model)
        for e in range(config.m_step_epochs):
            epoch = rnd * config.m_step_epochs + e
            order = substream(seed, "order", epoch).permutation(len(data))
            for idx in order:
                x, particles, _, _ = fixed[idx]
                grid = TimeGrid.build(
                    x.interior_times(),
                    x.horizon,
                    substream(seed, "grid", epoch, int(idx)),
                    config.grid_multiplier,
                )
                current = model_from_tensors(tensors)
                acc: dict[str, np.ndarray] | None = None
                for z in particles:
                    _, g = grad_log_likelihood(current, merge(x, z), grid)
                    if acc is None:
                        acc = g
                    else:
                        for k, v in g.items():
                            acc[k] += v
                assert acc is not None
                loss_grads = {
                    k: -v / len(particles) for k, v in acc.items()
                }
                tensors = adam.step(tensors, loss_grads)
        post = bound(model_from_tensors(tensors))
        elbo_log.append((pre, post))
    final = model_from_tensors(tensors)
    return TrainResult(final, final, {"elbo": elbo_log})


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(path: str, params: NHPParams | ProposalParams) -> None:
    if isinstance(params, NHPParams):
        obj = {
            "version": CHECKPOINT_VERSION,
            "kind": "nhp",
            "K": params.num_types,
            "D": params.hidden_size,
            "tensors": {k: np.asarray(v).tolist() for k, v in model_tensors(params).items()},
        }
    elif isinstance(params, ProposalParams):
        obj = {
            "version": CHECKPOINT_VERSION,
            "kind": "proposal",
            "K": params.model.num_types,
            "D": params.model.hidden_size,
            "Dprime": params.reverse_hidden_size,
            "tensors": {
                k: np.asarray(v).tolist() for k, v in proposal_tensors(params).items()
            },
        }
    else:
        raise TypeError("expected model or proposal parameters")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh)
        fh.write("\n")


def _load_obj(path: str, kind: str) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        obj = json.load(fh)
    if obj.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {obj.get('version')!r}")
    if obj.get("kind") != kind:
        raise ValueError(f"checkpoint kind {obj.get('kind')!r}, expected {kind!r}")
    return obj


def _check_shapes(tensors: dict[str, np.ndarray], expected: dict[str, tuple]) -> None:
    for name, shape in expected.items():
        if name not in tensors:
            raise ValueError(f"checkpoint missing tensor {name}")
        if tensors[name].shape != shape:
            raise ValueError(
                f"tensor {name} has shape {tensors[name].shape}, expected {shape}"
            )
    extra = set(tensors) - set(expected)
    if extra:
        raise ValueError(f"unexpected tensors in checkpoint: {sorted(extra)}")


def _lstm_shapes(D: int, K: int) -> dict[str, tuple]:
    shapes: dict[str, tuple] = {}
    for f in dc_fields(CTLSTMParams):
        if f.name.startswith("W"):
            shapes[f.name] = (D, K + 2)
        elif f.name.startswith("U"):
            shapes[f.name] = (D, D)
        else:
            shapes[f.name] = (D,)
    return shapes


def load_model_checkpoint(path: str) -> NHPParams:
    obj = _load_obj(path, "nhp")
    K, D = int(obj["K"]), int(obj["D"])
    tensors = {k: np.asarray(v, dtype=float) for k, v in obj["tensors"].items()}
    expected = _lstm_shapes(D, K)
    expected["v"] = (K, D)
    expected["s"] = (K,)
    _check_shapes(tensors, expected)
    return model_from_tensors(tensors)


def load_proposal_checkpoint(path: str, model: NHPParams) -> ProposalParams:
    obj = _load_obj(path, "proposal")
    K, D, Dp = int(obj["K"]), int(obj["D"]), int(obj["Dprime"])
    if K != model.num_types or D != model.hidden_size:
        raise ValueError("proposal checkpoint does not match the model's sizes")
    tensors = {k: np.asarray(v, dtype=float) for k, v in obj["tensors"].items()}
    expected = _lstm_shapes(Dp, K)
    expected["B"] = (model.hidden_size, Dp)
    _check_shapes(tensors, expected)
    return proposal_from_tensors(model, tensors)
