"""Command-line front end for the imputation pipeline.

Subcommands cover the full loop: synthesize ground-truth data, censor it,
train the model and the proposal, impute with particle ensembles, decode a
consensus prediction, and score everything into CSV tables. Every stochastic
subcommand requires --seed and derives all randomness from it through labeled
substreams, so reruns produce byte-identical outputs.

A JSON file passed as --config supplies defaults for any long flag of the
chosen subcommand (keys may use dashes or underscores); explicit command-line
flags win over the config, which wins over built-in defaults.

Exit status: 0 on success, 2 on any validation or input error.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .events import (
    EventSequence,
    InvalidSequence,
    from_interior,
    read_ndjson,
    split,
    write_ndjson,
)
from .hawkes import TimeGrid, random_model, sample_prior
from .missingness import MissingnessMechanism, censor, mechanism_from_config
from .proposal import filtering_params, log_q
from .seeds import substream
from .smc import load_ensemble, run as smc_run, save_ensemble
from .consensus import consensus_decode
from .training import (
    TrainConfig,
    load_model_checkpoint,
    load_proposal_checkpoint,
    mcem as run_mcem,
    save_checkpoint,
    train_model,
    train_proposal,
)
from .transport import CostConfig, otd


class CLIError(ValueError):
    pass


def _require(value, name: str):
    if value is None:
        raise CLIError(f"--{name} is required")
    return value


def _need(args, *names: str) -> None:
    missing = [n.replace("_", "-") for n in names if getattr(args, n) is None]
    if len(missing) == 1:
        raise CLIError(f"--{missing[0]} is required")
    if missing:
        raise CLIError("missing required flags: " + ", ".join("--" + n for n in missing))


def _child_seed(seed: int, *labels) -> int:
    return int(substream(seed, *labels).integers(1 << 63))


def _float_list(text: str) -> list[float]:
    return [float(p) for p in text.split(",") if p.strip()]


def _int_list(text: str) -> list[int]:
    return [int(p) for p in text.split(",") if p.strip()]


def _mechanism(args, num_types: int) -> MissingnessMechanism:
    cfg = {}
    if getattr(args, "rho", None) is not None:
        cfg["rho"] = _float_list(args.rho)
    if getattr(args, "rho_all", None) is not None:
        cfg["rho_all"] = args.rho_all
    if getattr(args, "missing_types", None) is not None:
        cfg["missing_types"] = _int_list(args.missing_types)
    return mechanism_from_config(cfg, num_types)


def _add_mech_flags(sp) -> None:
    sp.add_argument("--rho", help="comma list of per-type censoring probabilities")
    sp.add_argument("--rho-all", type=float, help="one censoring probability for every type")
    sp.add_argument("--missing-types", help="comma list of types censored with certainty")


def _observed_part(seq: EventSequence) -> EventSequence:
    """The observed stream: drop missing events when the file carries them."""
    if all(seq.interior_observed):
        return seq
    return split(seq)[0]


def _read_dataset(path: str) -> list[EventSequence]:
    seqs = read_ndjson(path)
    if not seqs:
        raise CLIError(f"{path} holds no sequences")
    return seqs


def _train_config(args, **overrides) -> TrainConfig:
    fields = dict(
        learning_rate=getattr(args, "learning_rate", None),
        epochs=getattr(args, "epochs", None),
        patience=getattr(args, "patience", None),
        grid_multiplier=getattr(args, "grid_multiplier", None),
        kl_mix=getattr(args, "kl_mix", None),
        exclusive_samples=getattr(args, "exclusive_samples", None),
        rounds=getattr(args, "rounds", None),
        num_particles=getattr(args, "num_particles", None),
        m_step_epochs=getattr(args, "m_step_epochs", None),
    )
    fields = {k: v for k, v in fields.items() if v is not None}
    fields.update(overrides)
    return TrainConfig(**fields)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_gen_synthetic(args) -> int:
    _need(args, "seed", "out_dir")
    seed = args.seed
    os.makedirs(args.out_dir, exist_ok=True)
    splits = [("train", args.train_size), ("dev", args.dev_size), ("test", args.test_size)]
    for j in range(args.num_models):
        gt = random_model(
            args.hidden_size,
            args.num_types,
            substream(seed, "gt", j),
            scale=1.0,
            bias_scale=1.0,
        )
        model_dir = os.path.join(args.out_dir, f"model_{j:02d}")
        os.makedirs(model_dir, exist_ok=True)
        save_checkpoint(os.path.join(model_dir, "gt.json"), gt)
        for name, size in splits:
            seqs = []
            for i in range(size):
                rng = substream(seed, "data", j, name, i)
                length = int(rng.integers(args.min_length, args.max_length + 1))
                seqs.append(sample_prior(gt, rng, count=length))
            write_ndjson(os.path.join(model_dir, f"{name}.ndjson"), seqs)
        print(f"model_{j:02d}: wrote gt.json and {'/'.join(n for n, _ in splits)}")
    return 0


def cmd_censor(args) -> int:
    _need(args, "seed", "infile", "out")
    seed = args.seed
    seqs = _read_dataset(args.infile)
    mech = _mechanism(args, seqs[0].num_types)
    out = [censor(mech, s, substream(seed, "censor", i)) for i, s in enumerate(seqs)]
    write_ndjson(args.out, out)
    n_missing = sum(len(s.missing_events()) for s in out)
    print(f"censored {len(out)} sequences, {n_missing} events hidden")
    return 0


def cmd_train_model(args) -> int:
    _need(args, "seed", "train", "dev", "out")
    seed = args.seed
    train = _read_dataset(args.train)
    dev = _read_dataset(args.dev)
    res = train_model(train, dev, _train_config(args), seed, hidden_size=args.hidden_size)
    save_checkpoint(args.out, res.params)
    if args.log_out:
        with open(args.log_out, "w", encoding="utf-8") as fh:
            json.dump(res.log, fh)
            fh.write("\n")
    print(f"saved {args.out} (best epoch {res.log['best_epoch']})")
    return 0


def cmd_train_proposal(args) -> int:
    _need(args, "seed", "model", "train", "dev", "out")
    seed = args.seed
    model = load_model_checkpoint(args.model)
    train = _read_dataset(args.train)
    dev = _read_dataset(args.dev)
    for label, seqs in (("train", train), ("dev", dev)):
        if any(not all(s.interior_observed) for s in seqs):
            raise CLIError(
                f"--{label} must be fully observed: the mechanism hides events "
                "during training, so pass complete sequences, not censored ones"
            )
    mech = _mechanism(args, model.num_types)
    res = train_proposal(
        model,
        mech,
        train,
        dev,
        _train_config(args),
        seed,
        reverse_hidden_size=args.reverse_hidden_size,
    )
    save_checkpoint(args.out, res.params)
    if args.log_out:
        with open(args.log_out, "w", encoding="utf-8") as fh:
            json.dump(res.log, fh)
            fh.write("\n")
    print(f"saved {args.out} (best epoch {res.log['best_epoch']})")
    return 0


def cmd_impute(args) -> int:
    _need(args, "seed", "model", "infile", "out_dir")
    seed = args.seed
    model = load_model_checkpoint(args.model)
    prop = load_proposal_checkpoint(args.proposal, model) if args.proposal else None
    if args.smooth and prop is None:
        raise CLIError("--smooth needs --proposal")
    seqs = _read_dataset(args.infile)
    mech = _mechanism(args, model.num_types)
    os.makedirs(args.out_dir, exist_ok=True)
    for i, seq in enumerate(seqs):
        x = _observed_part(seq)
        ens = smc_run(
            x,
            model,
            mech,
            prop,
            num_particles=args.num_particles,
            smooth=args.smooth,
            resample=not args.no_resample,
            seed=_child_seed(seed, "sequence", i),
            grid_multiplier=args.grid_multiplier,
        )
        save_ensemble(os.path.join(args.out_dir, f"ens_{i:05d}.json"), ens)
    print(f"wrote {len(seqs)} ensembles to {args.out_dir}")
    return 0


def cmd_decode(args) -> int:
    _need(args, "ensemble_dir", "infile", "out_dir")
    if not args.cost:
        raise CLIError("--cost is required (repeatable)")
    seqs = _read_dataset(args.infile)
    names = sorted(
        n for n in os.listdir(args.ensemble_dir) if n.startswith("ens_") and n.endswith(".json")
    )
    if len(names) != len(seqs):
        raise CLIError(
            f"{args.ensemble_dir} holds {len(names)} ensembles, expected {len(seqs)}"
        )
    ensembles = [load_ensemble(os.path.join(args.ensemble_dir, n)) for n in names]
    os.makedirs(args.out_dir, exist_ok=True)
    for c in args.cost:
        lines = []
        for seq, ens in zip(seqs, ensembles):
            decoded = consensus_decode(ens, CostConfig.uniform(c))
            lines.append(
                from_interior(
                    seq.num_types,
                    seq.horizon,
                    [(e.type_id, e.time, False) for e in decoded],
                    allow_equal=seq.allow_equal,
                )
            )
        path = os.path.join(args.out_dir, f"decode_C{c:g}.ndjson")
        write_ndjson(path, lines)
        print(f"wrote {path}")
    return 0


def cmd_otd(args) -> int:
    _need(args, "file_a", "file_b")
    a_seqs = _read_dataset(args.file_a)
    b_seqs = _read_dataset(args.file_b)
    if len(a_seqs) != len(b_seqs):
        raise CLIError("the two files hold different numbers of sequences")
    cost = CostConfig.uniform(args.cost)
    pick = (
        (lambda s: s.missing_events()) if args.missing_only else (lambda s: list(s.interior))
    )
    total_d = total_edit = total_moved = 0.0
    print("index,distance,edit_cost,move_cost")
    for i, (sa, sb) in enumerate(zip(a_seqs, b_seqs)):
        za, zb = pick(sa), pick(sb)
        d, alignment = otd(za, zb, cost)
        moved = alignment.moved_mass()
        edit = d - moved
        total_d += d
        total_edit += edit
        total_moved += moved
        print(f"{i},{d},{edit},{moved}")
    print(f"total,{total_d},{total_edit},{total_moved}")
    return 0


def _split_for_eval(seq: EventSequence, mech, seed: int, index: int):
    """Use the file's own partition when present, censor on the fly otherwise."""
    if all(seq.interior_observed):
        seq = censor(mech, seq, substream(seed, "censor", index))
    return split(seq)


def cmd_evaluate_proposal(args) -> int:
    _need(args, "seed", "model", "proposal", "infile", "out")
    seed = args.seed
    model = load_model_checkpoint(args.model)
    prop = load_proposal_checkpoint(args.proposal, model)
    seqs = _read_dataset(args.infile)
    mech = _mechanism(args, model.num_types)
    filt = filtering_params(model)
    rows = []
    for i, seq in enumerate(seqs):
        x, z_star = _split_for_eval(seq, mech, seed, i)
        if not z_star:
            print(f"sequence {i}: no missing events, skipped", file=sys.stderr)
            continue
        grid = TimeGrid.build(
            x.interior_times(), x.horizon, substream(seed, "grid", i), args.grid_multiplier
        )
        per = len(z_star)
        lq_f = log_q(filt, x, z_star, grid, mech.rho) / per
        lq_s = log_q(prop, x, z_star, grid, mech.rho) / per
        rows.append((i, per, lq_f, lq_s))
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write("sequence,num_missing,filtering,smoothing\n")
        for r in rows:
            fh.write(f"{r[0]},{r[1]},{r[2]},{r[3]}\n")
    print(f"wrote {args.out} ({len(rows)} rows)")
    return 0


def cmd_evaluate_decode(args) -> int:
    _need(args, "refs", "decode_dir", "out")
    refs = _read_dataset(args.refs)
    z_stars = [s.missing_events() for s in refs]
    denom = sum(len(z) for z in z_stars)
    if denom == 0:
        raise CLIError("reference file carries no missing events")
    names = sorted(
        n
        for n in os.listdir(args.decode_dir)
        if n.startswith("decode_C") and n.endswith(".ndjson")
    )
    if not names:
        raise CLIError(f"no decode_C*.ndjson files in {args.decode_dir}")
    rows = []
    for name in names:
        c = float(name[len("decode_C"):-len(".ndjson")])
        decs = read_ndjson(os.path.join(args.decode_dir, name))
        if len(decs) != len(refs):
            raise CLIError(f"{name} holds {len(decs)} sequences, expected {len(refs)}")
        edits = moved = 0.0
        for dec, z_star in zip(decs, z_stars):
            z_hat = list(dec.interior)
            _, alignment = otd(z_hat, z_star, CostConfig.uniform(c))
            edits += len(z_hat) + len(z_star) - 2 * alignment.size
            moved += alignment.moved_mass()
        rows.append((c, edits / denom, moved / denom))
    rows.sort()
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write("cost,edit_per_missing,move_per_missing\n")
        for r in rows:
            fh.write(f"{r[0]},{r[1]},{r[2]}\n")
    print(f"wrote {args.out} ({len(rows)} rows)")
    return 0


def cmd_sweep_rho(args) -> int:
    _need(args, "seed", "model", "train", "dev", "test", "out_dir")
    seed = args.seed
    model = load_model_checkpoint(args.model)
    train = _read_dataset(args.train)
    dev = _read_dataset(args.dev)
    test = _read_dataset(args.test)
    rhos = _float_list(args.rhos)
    os.makedirs(args.out_dir, exist_ok=True)
    rows = []
    for r_idx, rho in enumerate(rhos):
        mech = MissingnessMechanism(np.full(model.num_types, rho))
        res = train_proposal(
            model,
            mech,
            train,
            dev,
            _train_config(args),
            _child_seed(seed, "proposal", r_idx),
            reverse_hidden_size=args.reverse_hidden_size,
        )
        save_checkpoint(os.path.join(args.out_dir, f"proposal_rho{rho:g}.json"), res.params)
        filt = filtering_params(model)
        eval_seed = _child_seed(seed, "eval", r_idx)
        vals_f, vals_s = [], []
        for i, seq in enumerate(test):
            x, z_star = _split_for_eval(seq, mech, eval_seed, i)
            if not z_star:
                continue
            grid = TimeGrid.build(
                x.interior_times(),
                x.horizon,
                substream(eval_seed, "grid", i),
                args.grid_multiplier,
            )
            vals_f.append(log_q(filt, x, z_star, grid, mech.rho) / len(z_star))
            vals_s.append(log_q(res.params, x, z_star, grid, mech.rho) / len(z_star))
        rows.append(
            (rho, len(vals_f), float(np.mean(vals_f)), float(np.mean(vals_s)))
        )
    with open(os.path.join(args.out_dir, "sweep.csv"), "w", encoding="utf-8") as fh:
        fh.write("rho,num_sequences,filtering,smoothing\n")
        for r in rows:
            fh.write(f"{r[0]},{r[1]},{r[2]},{r[3]}\n")
    print(f"wrote {os.path.join(args.out_dir, 'sweep.csv')}")
    return 0


def cmd_mcem(args) -> int:
    _need(args, "seed", "infile", "out")
    seed = args.seed
    seqs = _read_dataset(args.infile)
    data = [_observed_part(s) for s in seqs]
    mech = _mechanism(args, data[0].num_types)
    if args.init:
        init = load_model_checkpoint(args.init)
    else:
        init = random_model(args.hidden_size, data[0].num_types, substream(seed, "init"))
    res = run_mcem(init, mech, data, _train_config(args), seed)
    save_checkpoint(args.out, res.params)
    if args.log_out:
        with open(args.log_out, "w", encoding="utf-8") as fh:
            json.dump(res.log, fh)
            fh.write("\n")
    first, last = res.log["elbo"][0], res.log["elbo"][-1]
    print(f"saved {args.out} (bound {first[0]:.4f} -> {last[1]:.4f})")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_train_flags(sp, lr: float = 1e-3) -> None:
    sp.add_argument("--learning-rate", type=float, default=lr)
    sp.add_argument("--epochs", type=int, default=10)
    sp.add_argument("--patience", type=int, default=3)
    sp.add_argument("--grid-multiplier", type=int, default=1)
    sp.add_argument("--log-out", help="optional JSON training-log path")


def build_parser() -> tuple[argparse.ArgumentParser, dict]:
    parser = argparse.ArgumentParser(
        prog="eventsmc",
        description="impute missing events in continuous-time event streams",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    table: dict[str, argparse.ArgumentParser] = {}

    def new(name: str, func, help_text: str):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", help="JSON file with default flag values")
        sp.add_argument("--seed", type=int, help="master random seed")
        sp.set_defaults(func=func)
        table[name] = sp
        return sp

    sp = new("gen-synthetic", cmd_gen_synthetic, "sample ground-truth models and datasets")
    sp.add_argument("--out-dir")
    sp.add_argument("--num-models", type=int, default=1)
    sp.add_argument("--num-types", type=int, default=4)
    sp.add_argument("--hidden-size", type=int, default=8)
    sp.add_argument("--train-size", type=int, default=5000)
    sp.add_argument("--dev-size", type=int, default=500)
    sp.add_argument("--test-size", type=int, default=500)
    sp.add_argument("--min-length", type=int, default=11)
    sp.add_argument("--max-length", type=int, default=20)

    sp = new("censor", cmd_censor, "hide events according to a missingness mechanism")
    sp.add_argument("--infile")
    sp.add_argument("--out")
    _add_mech_flags(sp)

    sp = new("train-model", cmd_train_model, "fit the generative model on complete data")
    sp.add_argument("--train")
    sp.add_argument("--dev")
    sp.add_argument("--out")
    sp.add_argument("--hidden-size", type=int, default=32)
    _add_train_flags(sp)

    sp = new("train-proposal", cmd_train_proposal, "fit the smoothing proposal")
    sp.add_argument("--model")
    sp.add_argument("--train")
    sp.add_argument("--dev")
    sp.add_argument("--out")
    sp.add_argument("--reverse-hidden-size", type=int, default=16)
    sp.add_argument("--kl-mix", type=float, default=1.0)
    sp.add_argument("--exclusive-samples", type=int, default=1)
    _add_mech_flags(sp)
    _add_train_flags(sp)

    sp = new("impute", cmd_impute, "sample weighted imputations for each sequence")
    sp.add_argument("--model")
    sp.add_argument("--proposal")
    sp.add_argument("--infile")
    sp.add_argument("--out-dir")
    sp.add_argument("--num-particles", type=int, default=50)
    sp.add_argument("--smooth", action="store_true")
    sp.add_argument("--no-resample", action="store_true")
    sp.add_argument("--grid-multiplier", type=int, default=1)
    _add_mech_flags(sp)

    sp = new("decode", cmd_decode, "collapse ensembles into consensus predictions")
    sp.add_argument("--ensemble-dir")
    sp.add_argument("--infile", help="sequences the ensembles were built from")
    sp.add_argument("--out-dir")
    sp.add_argument("-C", "--cost", type=float, action="append", help="repeat for several costs")

    sp = new("otd", cmd_otd, "transport distance between paired sequences")
    sp.add_argument("--file-a")
    sp.add_argument("--file-b")
    sp.add_argument("--cost", type=float, default=1.0)
    sp.add_argument("--missing-only", action="store_true")

    sp = new("evaluate-proposal", cmd_evaluate_proposal, "per-sequence proposal quality table")
    sp.add_argument("--model")
    sp.add_argument("--proposal")
    sp.add_argument("--infile", help="censored sequences, or complete ones to censor on the fly")
    sp.add_argument("--out")
    sp.add_argument("--grid-multiplier", type=int, default=1)
    _add_mech_flags(sp)

    sp = new("evaluate-decode", cmd_evaluate_decode, "normalized edit/move table per cost")
    sp.add_argument("--refs")
    sp.add_argument("--decode-dir")
    sp.add_argument("--out")

    sp = new("sweep-rho", cmd_sweep_rho, "retrain the proposal across censoring levels")
    sp.add_argument("--model")
    sp.add_argument("--train")
    sp.add_argument("--dev")
    sp.add_argument("--test")
    sp.add_argument("--out-dir")
    sp.add_argument("--rhos", default="0.1,0.3,0.5,0.7,0.9")
    sp.add_argument("--reverse-hidden-size", type=int, default=16)
    sp.add_argument("--kl-mix", type=float, default=1.0)
    sp.add_argument("--exclusive-samples", type=int, default=1)
    _add_train_flags(sp)

    sp = new("mcem", cmd_mcem, "fit the model from incomplete data")
    sp.add_argument("--infile")
    sp.add_argument("--out")
    sp.add_argument("--init", help="optional starting model checkpoint")
    sp.add_argument("--hidden-size", type=int, default=32)
    sp.add_argument("--rounds", type=int, default=5)
    sp.add_argument("--num-particles", type=int, default=10)
    sp.add_argument("--m-step-epochs", type=int, default=1)
    sp.add_argument("--learning-rate", type=float, default=1e-3)
    sp.add_argument("--grid-multiplier", type=int, default=1)
    sp.add_argument("--log-out")
    _add_mech_flags(sp)

    return parser, table


def main(argv=None) -> int:
    parser, table = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        try:
            with open(args.config, "r", encoding="utf-8") as fh:
                cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            print(f"error: cannot read config: {exc}", file=sys.stderr)
            return 2
        sp = table[args.command]
        known = {a.dest for a in sp._actions}
        defaults = {}
        for key, value in cfg.items():
            dest = key.replace("-", "_")
            if dest not in known:
                print(f"error: config key {key!r} unknown for {args.command}", file=sys.stderr)
                return 2
            defaults[dest] = value
        sp.set_defaults(**defaults)
        args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CLIError, InvalidSequence, ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
