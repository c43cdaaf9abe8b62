"""Command line entry point: ``metano <subcommand> [--config PATH] [--out DIR] [--seed N] [--force]``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from metano import ifno, universality
from metano.autodiff import grad_check
from metano.errors import MetaNOError
from metano.harness import experiment
from metano.harness.config import load_config
from metano.tasks import Family, make_task
from metano.grid import Grid

log = logging.getLogger("metano")

META_ONLY = ("metano", "metano-minus", "metalast")
BASELINES = ("maml", "anil", "single", "pretrain-all", "pretrain-one")


def _config(args, required: bool = True):
    if args.config is None:
        if required:
            raise SystemExit(f"{args.command}: --config is required")
        return None
    overrides = {"seed": args.seed} if args.seed is not None else None
    return load_config(args.config, overrides)


def _out(args) -> Path:
    return Path(args.out or ".")


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    ws = experiment.Workspace(cfg, _out(args), save=True)
    tasks = ws.train_tasks() + ws.test_tasks()
    worst = max(t.max_residual() for t in tasks)
    print(f"wrote {len(tasks)} datasets to {_out(args)} (max residual {worst:.3e})")
    return 0


def cmd_meta_train(args) -> int:
    cfg = _config(args)
    ws = experiment.Workspace(cfg, _out(args), save=True)
    layers = sorted({experiment.META_METHODS[m] for m in cfg.method if m in experiment.META_METHODS}, key=str)
    if not layers:
        raise SystemExit("meta-train: config selects no meta method (metano, metano-minus, metalast)")
    for layer in layers:
        state = ws.meta_state(layer)
        final = state.history[-1] / state.H if state.history else float("nan")
        print(f"meta-trained adapt_layer={layer.value} H={state.H} final mean task loss {final:.4e}")
    return 0


def _run_subset(args, allowed, stem) -> int:
    cfg = _config(args)
    methods = [m for m in cfg.method if m in allowed]
    if not methods:
        raise SystemExit(f"{args.command}: config selects none of {', '.join(allowed)}")
    ws = experiment.Workspace(cfg, _out(args), save=True)
    report = experiment.run_experiment(cfg, ws, methods)
    path = experiment.write_report(report, _out(args), args.force, stem)
    print(f"wrote {path}")
    return 0 if report.ok else 1


def cmd_adapt(args) -> int:
    return _run_subset(args, META_ONLY, "adapt")


def cmd_baseline(args) -> int:
    return _run_subset(args, BASELINES, "baseline")


def cmd_report(args) -> int:
    cfg = _config(args)
    ws = experiment.Workspace(cfg, _out(args), save=True)
    report = experiment.run_experiment(cfg, ws)
    path = experiment.write_report(report, _out(args), args.force)
    for r in report.rows:
        if r[3] == "mean":
            print(f"{r[0]:>14s} N_test={r[2]:<4d} mean_rel_err={r[4]:.4f} +- {r[5]:.4f}")
    print(f"wrote {path}")
    return 0 if report.ok else 1


def cmd_universality(args) -> int:
    cfg = _config(args, required=False)
    M = cfg.M if cfg is not None else 8
    seed = args.seed if args.seed is not None else 0
    net = universality.linear_contraction_net(M)
    rng = np.random.default_rng(seed)
    G = rng.standard_normal(M)
    lines = ["L,max_layer_deviation,final_error,bound,replication,block_constancy"]
    ok = True
    for L in (5, 10, 20):
        params = universality.assemble_metano_params(net, np.ones(M), L)
        rep = universality.verify_equivalence(params, net, G, G)
        ok &= rep.max_deviation <= 1e-10 and rep.final_error <= rep.bound + 1e-10
        ok &= rep.replication_error <= 1e-12 and rep.block_constancy_error <= 1e-12
        lines.append(f"{L},{rep.max_deviation:.3e},{rep.final_error:.3e},{rep.bound:.3e},"
                     f"{rep.replication_error:.3e},{rep.block_constancy_error:.3e}")  # fmt: skip
    task = make_task(Family.REACTION, Grid(1, M), seed)
    G = rng.standard_normal(M)
    newton = universality.newton_map_check(task.b.values[..., 0], G / np.linalg.norm(G), seed=seed)
    lines.append("# learned Newton map: " + " ".join(f"{k}={v:.3e}" for k, v in newton.items()))
    text = "\n".join(lines) + "\n"
    print(text, end="")
    if args.out:
        path = experiment.report_path(args.out, args.force, "universality")
        path.write_text(text)
        print(f"wrote {path}")
    return 0 if ok else 1


def cmd_grad_check(args) -> int:
    cfg = _config(args, required=False)
    seed = args.seed if args.seed is not None else 0
    d_h, M, L, k_max = (cfg.d_h, cfg.M, cfg.L, cfg.k_max) if cfg else (8, 16, 2, 4)
    model = grad_check_model(d_h, M, L, k_max, seed)
    g, u = grad_check_data(model, M, seed)
    tape, _ = ifno.loss_tape(model, g, u)
    res = grad_check(tape, 1e-5)
    print(f"max relative discrepancy {res.max_discrepancy:.3e} over {res.n_checked} entries "
          f"({len(res.skipped)} skipped at ReLU kinks); worst {res.worst}")  # fmt: skip
    return 0 if res.max_discrepancy <= 1e-5 else 1


def grad_check_model(d_h=8, M=16, L=2, k_max=4, seed=0):
    """Random IFNO with biases shifted away from zero so most ReLUs sit off their kinks."""
    model = ifno.init_model(1, 1, d_h, 1, L, k_max, seed=seed)
    rng = np.random.default_rng((seed, 1))
    return model.replace(
        p=rng.uniform(0.5, 1.0, d_h), c=rng.uniform(0.5, 1.0, d_h),
        q1=rng.uniform(0.5, 1.0, model.d_Q), q2=rng.uniform(-0.5, 0.5, 1),
    )  # fmt: skip


def grad_check_data(model, M=16, seed=0, n=4):
    rng = np.random.default_rng((seed, 2))
    g = rng.standard_normal((n, M, 1))
    u = ifno.forward(model, g) + 0.1 * rng.standard_normal((n, M, 1))
    return g, u


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate training and test task datasets"),
    "meta-train": (cmd_meta_train, "meta-train the configured meta methods and save checkpoints"),
    "adapt": (cmd_adapt, "adapt meta-trained states to the test tasks and write a report"),
    "baseline": (cmd_baseline, "run the baseline methods and write a report"),
    "report": (cmd_report, "run the full experiment and write the report"),
    "universality-check": (cmd_universality, "verify the constructive fixed-point embedding"),
    "grad-check": (cmd_grad_check, "compare autodiff gradients with finite differences"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="metano", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, help="key=value experiment config")
        p.add_argument("--out", type=Path, help="output directory")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--force", action="store_true", help="overwrite report.csv instead of a timestamped name")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command][0](args)
    except (MetaNOError, OSError) as exc:
        print(f"metano {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
