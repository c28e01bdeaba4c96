"""Command-line entry point: ``hodl run | gradcheck | ablate-mu | ablate-sn``.

Exit statuses: 0 success, 2 config validation, 3 numeric failure, 4 I/O.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, build_problem
from .hypergrad import check_at_generic_point
from .inner import AGGREGATED, NonFiniteError, SolverConfig
from .outer import OuterTrace, outer_loop
from .problems import gen_hypercleaning, gen_sparse_coding, quadratic_oracle
from .report import emit_inner_residuals, emit_metrics

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4

log = logging.getLogger("hodl")


def load_config(path, seed: int | None = None) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc}") from exc
    cfg = ExperimentConfig.from_json(text)
    return cfg.with_seed(seed) if seed is not None else cfg


def run_config(cfg: ExperimentConfig, timing: bool = True) -> OuterTrace:
    problem = build_problem(cfg.problem)
    try:
        trace = outer_loop(problem, cfg.solver, timing=timing,
                           record_inner_residuals=cfg.report.per_inner_residuals)
    except ValueError as exc:
        # raised by operators/solver checks that only fire once data is built
        raise ConfigError(str(exc)) from exc
    trace.provenance.update({
        "config_sha256": cfg.digest(),
        "seed": cfg.seed,
        "problem": problem.kind,
        "mode": cfg.solver.mode,
        "param_layout": problem.omega_init.layout.describe(),
    })
    return trace


def write_trace(cfg: ExperimentConfig, trace: OuterTrace, out: Path):
    emit_metrics(trace, out)
    if cfg.report.per_inner_residuals:
        emit_inner_residuals(trace, out.with_suffix(".inner.csv"))


def _suffixed(out: Path, tag: str) -> Path:
    return out.with_name(f"{out.stem}_{tag}{out.suffix or '.csv'}")


def cmd_run(args) -> int:
    cfg = load_config(args.config, args.seed)
    out = Path(args.out or cfg.output)
    trace = run_config(cfg, timing=not args.no_timing)
    write_trace(cfg, trace, out)
    last = trace.rows[-1] if trace.rows else None
    if last is not None:
        print(f"{out}: {len(trace.rows)} rows, final phi_K={last.phi_K:.6g}, "
              f"hypergrad norm={last.hypergrad_g_norm:.3g}")
    return EXIT_OK


def cmd_ablate_mu(args) -> int:
    cfg = load_config(args.config, args.seed)
    mus = args.mu if args.mu else cfg.sweep.get("mu_values")
    if not mus:
        raise ConfigError("no mu values: pass --mu or set sweep.mu_values")
    out = Path(args.out or cfg.output)
    for mu in mus:
        if not 0.0 <= mu < 1.0:
            raise ConfigError(f"mu value {mu} outside [0, 1)")
        sub = ExperimentConfig(cfg.problem, cfg.solver.with_(mu=float(mu), mode=AGGREGATED),
                               cfg.output, cfg.report, cfg.sweep)
        trace = run_config(sub, timing=not args.no_timing)
        path = _suffixed(out, f"mu{mu:g}")
        write_trace(sub, trace, path)
        print(f"mu={mu:g}: final phi_K={trace.rows[-1].phi_K:.6g} -> {path}")
    return EXIT_OK


def cmd_ablate_sn(args) -> int:
    cfg = load_config(args.config, args.seed)
    if cfg.problem["kind"] != "sparse_coding" or not cfg.problem.get("with_net"):
        raise ConfigError("ablate-sn needs a sparse_coding problem with with_net=true")
    out = Path(args.out or cfg.output)
    for tag, normalize in (("sn_on", True), ("sn_off", False)):
        sub = ExperimentConfig(dict(cfg.problem, normalize=normalize), cfg.solver, cfg.output,
                               cfg.report, cfg.sweep)
        try:
            trace = run_config(sub, timing=not args.no_timing)
        except NonFiniteError as exc:
            print(f"{tag}: diverged ({exc})")
            continue
        path = _suffixed(out, tag)
        write_trace(sub, trace, path)
        print(f"{tag}: final hypergrad norm={trace.rows[-1].hypergrad_g_norm:.6g} -> {path}")
    return EXIT_OK


def gradcheck_suite(seeds=(0, 1, 2, 3, 4), h: float = 1e-5, tol: float = 1e-4,
                    mode: str = AGGREGATED):
    """Reverse-mode vs finite differences on every shipped problem family.

    Yields (problem, seed, GradCheckResult)."""
    for seed in seeds:
        rng = np.random.default_rng([seed, 7])
        cases = {
            "quadratic": (quadratic_oracle(10, seed=seed), 20),
            "sparse_regularized": (gen_sparse_coding(40, 20, n_samples=5, seed=seed, with_net=True,
                                                     net_layers=1, net_init="random"), 30),
            "sparse_constrained": (gen_sparse_coding(20, 10, n_samples=5, seed=seed,
                                                     variant="constrained"), 30),
            "hypercleaning": (gen_hypercleaning(5, 20, seed=seed), 30),
        }
        for name, (p, K) in cases.items():
            w = p.omega_init
            if name in ("quadratic", "hypercleaning"):
                w = w.replace(w.flat + rng.standard_normal(w.flat.size))
            cfg = SolverConfig(mode=mode, K=K)
            res = check_at_generic_point(p.operator, p.loss, w, p.u_init, cfg, h=h, tol=tol,
                                         seed=seed, omega_box=p.omega_box)
            yield name, seed, res


def cmd_gradcheck(args) -> int:
    seeds = range(args.seed, args.seed + args.n_seeds) if args.seed is not None else range(args.n_seeds)
    ok = True
    print(f"{'problem':<20} {'seed':>4} {'rel_error':>12} {'pass':>5}")
    start = time.perf_counter()
    for name, seed, res in gradcheck_suite(tuple(seeds), args.h, args.tol, args.mode):
        ok &= res.passed
        print(f"{name:<20} {seed:>4} {res.rel_error:>12.3e} {str(res.passed):>5}")
    print(f"elapsed {time.perf_counter() - start:.1f}s")
    return EXIT_OK if ok else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hodl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="experiment JSON file")
        p.add_argument("--out", help="output CSV path (overrides config 'output')")
        p.add_argument("--seed", type=int, help="override the config seed (default 1126)")
        p.add_argument("--no-timing", action="store_true", help="write 0 for wall_ms")

    p = sub.add_parser("run", help="run one experiment")
    common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("ablate-mu", help="sweep the aggregation weight mu")
    common(p)
    p.add_argument("--mu", type=float, nargs="+", help="mu values (overrides sweep.mu_values)")
    p.set_defaults(func=cmd_ablate_mu)

    p = sub.add_parser("ablate-sn", help="spectral normalization on vs off")
    common(p)
    p.set_defaults(func=cmd_ablate_sn)

    p = sub.add_parser("gradcheck", help="hypergradient vs finite differences on all problems")
    p.add_argument("--seed", type=int, help="first seed")
    p.add_argument("--n-seeds", type=int, default=5)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--mode", choices=["aggregated", "simplified"], default=AGGREGATED)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonFiniteError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
