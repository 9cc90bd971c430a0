"""Command-line front end: ``aptdift <group> <command> ...``.

Exit status is 0 on success, 1 on a domain error (a JSON object with
``error`` and, where relevant, ``path`` goes to stderr) and 2 on a usage
error. Every run that writes an output also writes ``<output>.manifest.json``.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import kernels
from .game import GameError, Strategy, dump_game, load_game
from .hsl import HslError, NetModel, hsl_solve
from .ifg import IfgError, dump_ifg, expand_multistage, load_ifg, prune_ifg, version_acyclic
from .simulator import estimate
from .solvers import (DEFAULT_DELTA, DEFAULT_MAX_ITER, NonConvergenceError, SolverError,
                      q_from_values, solve_acyclic, value_iteration)
from .valuenet import Dataset, TrainingError, ValueNet, generate_dataset, train

log = logging.getLogger("aptdift")

SWEEP_BETAS = [5.0 * k for k in range(1, 21)]


class DomainError(Exception):
    def __init__(self, msg, path=None):
        super().__init__(msg)
        self.path = path


# -- argument types ---------------------------------------------------------------

def positive_float(text):
    try:
        x = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text}") from None
    if not (x > 0 and np.isfinite(x)):
        raise argparse.ArgumentTypeError(f"must be a positive number: {text}")
    return x


def positive_int(text):
    try:
        x = int(float(text))
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text}") from None
    if x < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer: {text}")
    return x


def unit_float(text):
    x = float(text)
    if not 0.0 <= x <= 1.0:
        raise argparse.ArgumentTypeError(f"must lie in [0, 1]: {text}")
    return x


def int_list(text):
    try:
        out = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers: {text}") from None
    if not out or min(out) < 1:
        raise argparse.ArgumentTypeError(f"layer widths must be positive: {text}")
    return out


def float_list(text):
    try:
        out = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers: {text}") from None
    if not out or min(out) <= 0:
        raise argparse.ArgumentTypeError(f"values must be positive: {text}")
    return out


# -- I/O helpers ------------------------------------------------------------------

def read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise DomainError(f"file not found: {path}", path) from None
    except json.JSONDecodeError as exc:
        raise DomainError(f"invalid JSON in {path}: {exc}", path) from None
    except OSError as exc:
        raise DomainError(f"cannot read {path}: {exc.strerror}", path) from None


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=False)
        fh.write("\n")


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in r])


def load_game_file(path):
    doc = read_json(path)
    try:
        return load_game(doc)
    except (IfgError, GameError) as exc:
        raise DomainError(f"{path}: {exc}", path) from None


def load_graph_file(path):
    doc = read_json(path)
    try:
        return load_ifg(doc)
    except IfgError as exc:
        raise DomainError(f"{path}: {exc}", path) from None


def load_net_file(path):
    doc = read_json(path)
    try:
        return ValueNet.from_json(doc)
    except (KeyError, ValueError, TypeError) as exc:
        raise DomainError(f"{path}: not a valid network file ({exc})", path) from None


def sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(args, inputs, outputs, started):
    if not outputs:
        return
    config = {k: v for k, v in vars(args).items() if k != "func" and not callable(v)}
    doc = {
        "subcommand": " ".join(args.command_path),
        "config": config,
        "seed": getattr(args, "seed", None),
        "inputs": {p: sha256(p) for p in inputs if p and os.path.exists(p)},
        "outputs": {p: sha256(p) for p in outputs if p and os.path.exists(p)},
        "backend": kernels.BACKEND,
        "wall_clock_seconds": time.time() - started,
    }
    write_json(str(outputs[0]) + ".manifest.json", doc)


def solution_doc(spec, report):
    doc = report.to_json(spec)
    return {"values": doc["values"], "defender": doc["defender"], "attacker": doc["attacker"],
            "iterations": doc["iterations"], "trace_v0": doc["trace_v0"], "deltas": doc["deltas"]}


# -- commands ---------------------------------------------------------------------------

def cmd_ifg_prune(args):
    g = load_graph_file(args.input)
    try:
        out = prune_ifg(g, args.group_prefix or ())
    except IfgError as exc:
        raise DomainError(str(exc), args.input) from None
    write_json(args.output, dump_ifg(out))
    log.info("pruned %d -> %d nodes, %d -> %d edges", g.n, out.n, len(g.edges), len(out.edges))
    return [args.input], [args.output]


def cmd_ifg_version(args):
    g = load_graph_file(args.input)
    try:
        out = version_acyclic(g)
    except IfgError as exc:
        raise DomainError(str(exc), args.input) from None
    write_json(args.output, dump_ifg(out))
    return [args.input], [args.output]


def cmd_ifg_multistage(args):
    g = load_graph_file(args.input)
    if g.stages is None:
        raise DomainError(f"{args.input}: document has no 'stages' field", args.input)
    try:
        out = expand_multistage(g)
    except IfgError as exc:
        raise DomainError(str(exc), args.input) from None
    write_json(args.output, dump_ifg(out))
    return [args.input], [args.output]


def cmd_game_build(args):
    g = load_graph_file(args.input)
    pdoc = read_json(args.params)
    doc = dump_ifg(g)
    doc["fn"] = pdoc.get("fn")
    doc["fp"] = pdoc.get("fp")
    doc["beta"] = args.beta
    doc["hidden"] = bool(args.hidden or pdoc.get("hidden", False))
    try:
        spec = load_game(doc)
    except (IfgError, GameError) as exc:
        raise DomainError(f"{args.params}: {exc}", args.params) from None
    write_json(args.output, dump_game(spec))
    return [args.input, args.params], [args.output]


def _dump_q(spec, values, path):
    out = {}
    for s in spec.decision_states:
        q = q_from_values(spec, s, values)
        out[spec.names[s]] = {"defender_actions": spec.defender_action_names(s),
                              "attacker_actions": spec.attacker_action_names(s),
                              "Q": q.values.tolist()}
    write_json(path, out)


def _solve(args, kind):
    spec = load_game_file(args.input)
    try:
        if kind == "vi":
            report = value_iteration(spec, args.delta, args.max_iter)
        else:
            report = solve_acyclic(spec)
    except NonConvergenceError as exc:
        raise DomainError(str(exc), args.input) from None
    except (GameError, SolverError) as exc:
        raise DomainError(f"{args.input}: {exc}", args.input) from None
    write_json(args.output, solution_doc(spec, report))
    outputs = [args.output]
    if args.plot_data:
        rows = [(k, v, d) for k, (v, d) in enumerate(zip(report.trace_v0, report.deltas or [0.0] * len(report.trace_v0)), 1)]
        write_csv(args.plot_data, ["iteration", "v0", "delta"], rows)
        outputs.append(args.plot_data)
    if args.dump_q:
        _dump_q(spec, report.values, args.dump_q)
        outputs.append(args.dump_q)
    log.info("V(v0) = %.10g after %d sweep(s)", report.values[0], report.iterations)
    return [args.input], outputs


def cmd_solve_vi(args):
    return _solve(args, "vi")


def cmd_solve_acyclic(args):
    return _solve(args, "acyclic")


def _load_strategies(spec, path):
    doc = read_json(path)
    try:
        return (Strategy.from_dict(spec, "apt", doc.get("apt", {})),
                Strategy.from_dict(spec, "dift", doc.get("dift", doc.get("defender", {}))))
    except GameError as exc:
        raise DomainError(f"{path}: {exc}", path) from None


def cmd_simulate(args):
    spec = load_game_file(args.input)
    apt, dift = _load_strategies(spec, args.strategies)
    try:
        start = spec.state(args.start)
        stats = estimate(spec, apt, dift, start, args.rollouts, args.seed, args.threads)
    except GameError as exc:
        raise DomainError(str(exc), args.input) from None
    doc = stats.to_json()
    doc.update({"start": args.start, "seed": args.seed})
    write_json(args.output, doc)
    return [args.input, args.strategies], [args.output]


def cmd_hsl_gen_data(args):
    spec = load_game_file(args.input)
    data = generate_dataset(spec, args.n, args.rollouts, args.mix, args.seed, args.threads)
    data.save(args.output)
    return [args.input], [args.output]


def _load_dataset(path):
    try:
        return Dataset.load(path)
    except FileNotFoundError:
        raise DomainError(f"file not found: {path}", path) from None
    except (OSError, ValueError, KeyError) as exc:
        raise DomainError(f"{path}: not a dataset file ({exc})", path) from None


def cmd_hsl_train(args):
    data = _load_dataset(args.input)
    try:
        net, report = train(data, args.hidden, args.epochs, args.lr, args.batch_size, args.seed,
                            args.momentum)
    except TrainingError as exc:
        raise DomainError(str(exc), args.input) from None
    write_json(args.output, net.to_json())
    outputs = [args.output]
    if args.report:
        write_json(args.report, report.to_json())
        outputs.append(args.report)
    if args.plot_data:
        write_csv(args.plot_data, ["epoch", "loss", "mu_val"], report.history)
        outputs.append(args.plot_data)
    log.info("validation MAE %.4g (%.3g%% of beta)", report.mu_val, 100 * report.mu_val_fraction)
    return [args.input], outputs


def cmd_hsl_solve(args):
    spec = load_game_file(args.input)
    net = load_net_file(args.net)
    try:
        report = hsl_solve(spec, NetModel(net, spec), args.seed)
    except HslError as exc:
        raise DomainError(str(exc), args.input) from None
    doc = solution_doc(spec, report)
    if args.audit:
        stats = estimate(spec, report.attacker, report.defender, 0, args.rollouts, args.seed,
                         args.threads)
        doc["audit"] = {"U_D": stats.u_d, "stderr": stats.stderr, "rollouts": args.rollouts,
                        "v0_lp": float(report.values[0]),
                        "z": (float(report.values[0]) - stats.u_d) / stats.stderr
                        if stats.stderr > 0 else None}
    write_json(args.output, doc)
    return [args.input, args.net], [args.output]


def cmd_sweep_beta(args):
    """Train and solve at each beta; mu is the mean absolute gap to the exact values."""
    spec = load_game_file(args.input)
    if spec.hidden:
        # the exact reference needs the true rates, read from the same file
        reference = spec.with_hidden(False)
    else:
        reference = spec
        spec = spec.with_hidden(True)
    rows = []
    for beta in args.betas:
        exact = solve_acyclic(reference.with_beta(beta)).values
        mus = []
        for t in range(args.trials):
            seed = args.seed + t
            game = spec.with_beta(beta)
            data = generate_dataset(game, args.n, args.rollouts, args.mix, seed, args.threads)
            net, _ = train(data, args.hidden, args.epochs, args.lr, args.batch_size, seed,
                           args.momentum)
            values = hsl_solve(game, NetModel(net, game), seed).values
            mus.append(float(np.mean(np.abs(values - exact))))
        rows.append((beta, float(np.mean(mus)),
                     float(np.std(mus, ddof=1) / np.sqrt(len(mus))) if len(mus) > 1 else 0.0))
        log.info("beta=%g mu=%.4g", beta, rows[-1][1])
    write_csv(args.output, ["beta", "mu", "stderr"], rows)
    return [args.input], [args.output]


# -- parser ---------------------------------------------------------------------------------

def _threads_default():
    return os.cpu_count() or 1


def _add_train_args(p):
    p.add_argument("--hidden", type=int_list, default=[64, 64], help="hidden widths, e.g. 1000,1000")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--lr", type=float, default=0.02)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--batch-size", type=positive_int, default=16)


def build_parser():
    parser = argparse.ArgumentParser(prog="aptdift", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    groups = parser.add_subparsers(dest="group", required=True)

    def command(group_parser, name, func, help_):
        p = group_parser.add_parser(name, help=help_)
        p.set_defaults(func=func)
        return p

    ifg = groups.add_parser("ifg", help="graph preprocessing").add_subparsers(dest="command", required=True)
    p = command(ifg, "prune", cmd_ifg_prune, "keep nodes on entry-to-destination paths")
    p.add_argument("input")
    p.add_argument("--group-prefix", nargs="*", default=[])
    p.add_argument("-o", "--output", required=True)
    p = command(ifg, "version", cmd_ifg_version, "split cyclic nodes into versions")
    p.add_argument("input")
    p.add_argument("-o", "--output", required=True)
    p = command(ifg, "multistage", cmd_ifg_multistage, "chain stage copies of the graph")
    p.add_argument("input")
    p.add_argument("-o", "--output", required=True)

    game = groups.add_parser("game", help="game construction").add_subparsers(dest="command", required=True)
    p = command(game, "build", cmd_game_build, "attach detection rates and payoff")
    p.add_argument("input")
    p.add_argument("--params", required=True)
    p.add_argument("--beta", type=positive_float, default=100.0)
    p.add_argument("--hidden", action="store_true", help="mark the rates as hidden from solvers")
    p.add_argument("-o", "--output", required=True)

    solve = groups.add_parser("solve", help="exact solvers").add_subparsers(dest="command", required=True)
    for name, func in (("vi", cmd_solve_vi), ("acyclic", cmd_solve_acyclic)):
        p = command(solve, name, func, "value iteration" if name == "vi" else "backward induction")
        p.add_argument("input")
        if name == "vi":
            p.add_argument("--delta", type=positive_float, default=DEFAULT_DELTA)
            p.add_argument("--max-iter", type=positive_int, default=DEFAULT_MAX_ITER)
        p.add_argument("--plot-data")
        p.add_argument("--dump-q")
        p.add_argument("-o", "--output", required=True)

    p = groups.add_parser("simulate", help="Monte-Carlo rollouts")
    p.set_defaults(func=cmd_simulate, command=None)
    p.add_argument("input")
    p.add_argument("--strategies", required=True)
    p.add_argument("--start", default="v0")
    p.add_argument("--rollouts", type=positive_int, default=100_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=positive_int, default=_threads_default())
    p.add_argument("-o", "--output", required=True)

    hsl = groups.add_parser("hsl", help="learning-based solver").add_subparsers(dest="command", required=True)
    p = command(hsl, "gen-data", cmd_hsl_gen_data, "simulate a training set")
    p.add_argument("input")
    p.add_argument("-n", type=positive_int, default=100_000)
    p.add_argument("--rollouts", type=positive_int, default=200)
    p.add_argument("--mix", type=unit_float, default=0.4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=positive_int, default=_threads_default())
    p.add_argument("-o", "--output", required=True)
    p = command(hsl, "train", cmd_hsl_train, "fit the value network")
    p.add_argument("input")
    _add_train_args(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report")
    p.add_argument("--plot-data")
    p.add_argument("-o", "--output", required=True)
    p = command(hsl, "solve", cmd_hsl_solve, "solve with a trained network")
    p.add_argument("input")
    p.add_argument("--net", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--audit", action="store_true")
    p.add_argument("--rollouts", type=positive_int, default=100_000)
    p.add_argument("--threads", type=positive_int, default=_threads_default())
    p.add_argument("-o", "--output", required=True)

    sweep = groups.add_parser("sweep", help="parameter sweeps").add_subparsers(dest="command", required=True)
    p = command(sweep, "beta", cmd_sweep_beta, "HSL error against beta")
    p.add_argument("input")
    p.add_argument("--betas", type=float_list, default=SWEEP_BETAS)
    p.add_argument("--trials", type=positive_int, default=10)
    p.add_argument("-n", type=positive_int, default=100_000)
    p.add_argument("--rollouts", type=positive_int, default=200)
    p.add_argument("--mix", type=unit_float, default=0.4)
    _add_train_args(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=positive_int, default=_threads_default())
    p.add_argument("-o", "--output", required=True, help="CSV with columns beta, mu, stderr")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors, 0 on --help
        return int(exc.code or 0)
    args.command_path = [args.group] + ([args.command] if getattr(args, "command", None) else [])
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    started = time.time()
    try:
        inputs, outputs = args.func(args)
        write_manifest(args, inputs, outputs, started)
    except DomainError as exc:
        err = {"error": str(exc)}
        if exc.path is not None:
            err["path"] = str(exc.path)
        print(json.dumps(err), file=sys.stderr)
        return 1
    except OSError as exc:
        print(json.dumps({"error": str(exc), "path": exc.filename}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
