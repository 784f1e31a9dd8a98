"""Command-line front end.

    drfed run <config.yaml> [--seed N ...] [--out DIR] [--no-certify]
                            [--full-state-trace]
    drfed sweep <config.yaml> --param hyper.eta=0.05,0.1 [run flags]
    drfed certify <trace> [--slack-tol X] [--strict-rho] [--f-star X]
    drfed gen-data <config.yaml> -o data.npz

Exit codes: 0 clean, 1 certificate violations, 2 bad config or runtime
rejection (the message carries the validator's reason, e.g. a nonpositive
descent coefficient D(alpha, eta)).
"""

import argparse
import sys
from pathlib import Path

import yaml

from ..asyncsim import StaleVersionError, measure_delay_stats
from ..certify import ConstantsError, check_descent, check_rate, \
    render_report, theory_constants
from ..numerics import DivergenceError
from .config import ConfigError, load_config, parse_config
from .run import _empirical_p_hat, run_experiment
from .synthetic import gen_synthetic
from .trace import Trace


def _run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, action="append",
                   help="override config seeds (repeatable)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--no-certify", action="store_true",
                   help="skip certificate checks and reports")
    p.add_argument("--full-state-trace", action="store_true",
                   help="record per-round state even when not certifying")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="drfed",
        description="randomized Douglas-Rachford federated solvers "
                    "with runtime certificates")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one configured experiment")
    p.add_argument("config")
    _run_flags(p)

    p = sub.add_parser("sweep", help="run a config once per parameter value")
    p.add_argument("config")
    p.add_argument("--param", required=True,
                   help="dotted key and comma list, e.g. hyper.eta=0.05,0.1")
    _run_flags(p)

    p = sub.add_parser("certify", help="re-check certificates on a trace file")
    p.add_argument("trace")
    p.add_argument("--slack-tol", type=float, default=1e-9)
    p.add_argument("--strict-rho", action="store_true")
    p.add_argument("--f-star", type=float, default=None,
                   help="known optimum; enables the rate check")

    p = sub.add_parser("gen-data", help="generate and save a synthetic dataset")
    p.add_argument("config", help="config whose [problem] section is synthetic")
    p.add_argument("-o", "--output", required=True)
    return ap


def _cmd_run(args) -> int:
    result = run_experiment(
        args.config, out_dir=args.out, seeds=args.seed,
        certify=False if args.no_certify else None,
        full_state=True if args.full_state_trace else None, echo=print)
    print(f"wrote {2 * len(result.per_seed) if not args.no_certify else len(result.per_seed)} "
          f"file(s) under {result.out_dir}")
    if any(r.aborted for r in result.per_seed):
        return 2
    return 1 if result.violations else 0


def _cmd_sweep(args) -> int:
    key, _, values = args.param.partition("=")
    path = key.split(".")
    if not values or len(path) < 2:
        raise ConfigError(
            "--param must look like section.key=value1,value2")
    with open(args.config) as fh:
        base = yaml.safe_load(fh)
    worst = 0
    for token in values.split(","):
        value = yaml.safe_load(token)
        raw = yaml.safe_load(yaml.safe_dump(base))  # deep copy
        node = raw
        for part in path[:-1]:
            node = node.setdefault(part, {})
        node[path[-1]] = value
        cfg = parse_config(raw, source=args.config)
        slug = f"{cfg.name}-{path[-1]}{token}"
        out = Path(args.out or cfg.out_dir or f"runs/{cfg.name}") / slug
        print(f"== {key} = {token} ==")
        result = run_experiment(
            cfg, out_dir=out, seeds=args.seed,
            certify=False if args.no_certify else None,
            full_state=True if args.full_state_trace else None, echo=print)
        if any(r.aborted for r in result.per_seed):
            worst = max(worst, 2)
        elif result.violations:
            worst = max(worst, 1)
    return worst


def _cmd_certify(args) -> int:
    trace = Trace.read(args.trace)
    h = trace.header
    is_async = h.get("algorithm") == "asyncfeddr"
    tau = T = None
    p_hat = h.get("p_hat")
    if is_async:
        stats = measure_delay_stats(trace)
        tau, T, p_hat = h["tau"], max(stats.T_obs, 1), stats.p_hat_obs
    if p_hat is None:
        p_hat = _empirical_p_hat(trace, int(h["n"]))
    exact = is_async or h.get("accuracy") == "exact"
    constants = theory_constants(eta=h["eta"], alpha=h["alpha"],
                                 n=int(h["n"]), L=h["L"], p_hat=p_hat,
                                 exact=exact, tau=tau, T=T)
    descent = check_descent(trace, constants, slack_tol=args.slack_tol,
                            strict_rho=args.strict_rho) if exact else None
    rate = None
    if args.f_star is not None:
        rate = check_rate(trace, constants, args.f_star,
                          bound="async" if is_async else "sync")
    print(render_report(h, constants, descent, rate))
    bad = sum(1 for r in (descent or []) if r.violation)
    if rate is not None and not rate.ok:
        bad += 1
    return 1 if bad else 0


def _cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    spec = cfg.problem
    if spec.kind != "synthetic":
        raise ConfigError(f"{args.config}: gen-data needs problem.kind = "
                          f"synthetic, got '{spec.kind}'")
    data = gen_synthetic(spec.n, spec.dim, spec.classes, r=spec.r, s=spec.s,
                         samples=spec.samples, seed=spec.data_seed,
                         iid=spec.iid)
    data.save(args.output)
    sizes = [len(u.train_y) for u in data.users]
    print(f"wrote {args.output}: {data.n} users, dim {data.dim}, "
          f"{data.classes} classes, train sizes {min(sizes)}..{max(sizes)}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handler = {"run": _cmd_run, "sweep": _cmd_sweep,
               "certify": _cmd_certify, "gen-data": _cmd_gen_data}
    try:
        return handler[args.command](args)
    except (ConfigError, ConstantsError, ValueError, OSError,
            DivergenceError, StaleVersionError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
