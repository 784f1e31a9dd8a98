"""Run one configured experiment end to end.

For every seed in the config this builds the problem, runs the algorithm,
writes one trace file, and (unless disabled) writes one certificate report
next to it. Certification forces full-state tracing because the descent
checks need the per-round movement fields; the written trace then carries
the state the certificate was checked against.
"""

import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from ..asyncsim import measure_delay_stats, run_async
from ..baselines import run_baseline
from ..certify import (
    ConstantsError,
    check_descent,
    check_rate,
    render_report,
    theory_constants,
)
from ..feddr import Hyper, SamplingScheme, run_feddr
from ..numerics import Problem, QuadraticLoss, Regularizer, quadratic_fstar
from .config import ConfigError, ExperimentConfig, ProblemSpec, load_config
from .synthetic import SyntheticDataset, gen_synthetic, load_dataset
from .trace import Trace

_TAG_INSTANCE = 61


def build_problem(spec: ProblemSpec) -> Tuple[Problem, Optional[SyntheticDataset]]:
    """Instantiate the problem a config describes. Deterministic in
    spec.data_seed; the run seeds only steer the algorithms."""
    reg = Regularizer(kind=spec.reg, weight=spec.reg_weight)
    if spec.kind == "quadratic":
        rng = np.random.default_rng([spec.data_seed, _TAG_INSTANCE])
        users = tuple(
            QuadraticLoss(rng.normal(0.0, spec.spread, size=spec.dim),
                          scale=spec.scale)
            for _ in range(spec.n))
        return Problem(users=users, reg=reg), None
    if spec.kind == "synthetic":
        data = gen_synthetic(spec.n, spec.dim, spec.classes, r=spec.r,
                             s=spec.s, samples=spec.samples,
                             seed=spec.data_seed, iid=spec.iid)
    else:
        data = load_dataset(spec.path)
    problem = data.problem(reg=reg, model=spec.model, hidden=spec.hidden,
                           lipschitz_hint=spec.lipschitz_hint)
    return problem, data


def resolve_eta(cfg: ExperimentConfig, L: float) -> float:
    if cfg.eta is not None:
        return cfg.eta
    if L <= 0:
        raise ConfigError("eta_over_L needs a positive smoothness constant")
    return cfg.eta_over_L / L


@dataclass
class SeedResult:
    seed: int
    trace_path: Path
    report_path: Optional[Path]
    violations: int
    certified: bool
    aborted: Optional[str]
    final_objective: float


@dataclass
class ExperimentResult:
    out_dir: Path
    per_seed: List[SeedResult]

    @property
    def violations(self) -> int:
        return sum(r.violations for r in self.per_seed)


def _empirical_p_hat(trace: Trace, n: int) -> float:
    counts = np.zeros(n)
    active = [r.active for r in trace.records[1:]]
    for s in active:
        counts[list(s)] += 1
    return float(counts.min() / max(len(active), 1))


def _auto_f_star(problem: Problem) -> Optional[float]:
    try:
        return quadratic_fstar(problem)
    except ValueError:
        return None


def _certificate_block(cfg: ExperimentConfig, problem: Problem,
                       trace: Trace) -> Tuple[str, int]:
    """Build the report text and count violations for one finished trace."""
    header = trace.header
    co = cfg.certify
    skip = None
    if cfg.algorithm in ("fedavg", "fedprox"):
        skip = "averaging baselines carry no descent or rate certificate"
    elif cfg.algorithm == "fedsplit":
        skip = ("alpha = 2 sits outside the admissible region; the "
                "reflection run is for trajectory comparison only")
    elif cfg.accuracy.kind == "heuristic" and cfg.algorithm != "asyncfeddr":
        skip = "heuristic local solver emits no accuracy certificates"
    elif header.get("aborted"):
        skip = f"run aborted: {header['aborted']}"
    if skip is not None:
        return (f"certificate report: {header.get('name')} "
                f"algorithm={header.get('algorithm')} "
                f"seed={header.get('seed')}\n  skipped: {skip}\n"), 0

    eta, alpha, n, L = header["eta"], header["alpha"], problem.n, header["L"]
    exact = cfg.algorithm == "asyncfeddr" or cfg.accuracy.kind == "exact"
    p_hat = header.get("p_hat")
    tau = T = None
    if cfg.algorithm == "asyncfeddr":
        stats = measure_delay_stats(trace)
        tau = header["tau"]
        T = max(stats.T_obs, 1)
        p_hat = stats.p_hat_obs
    if p_hat is None:
        p_hat = _empirical_p_hat(trace, n)
    theta_hat = (cfg.accuracy.theta_hat
                 if cfg.accuracy.kind == "relative" else None)
    try:
        constants = theory_constants(
            eta=eta, alpha=alpha, n=n, L=L, p_hat=p_hat, exact=exact,
            gamma1=co.gamma1, gamma2=co.gamma2, gamma4=co.gamma4,
            tau=tau, T=T, theta_hat=theta_hat)
    except ConstantsError as e:
        return (f"certificate report: {header.get('name')} "
                f"algorithm={header.get('algorithm')} "
                f"seed={header.get('seed')}\n"
                f"  no admissible constants: {e}\n"), 1

    descent = None
    if exact:
        descent = check_descent(trace, constants, slack_tol=co.slack_tol,
                                strict_rho=co.strict_rho)
    rate = None
    if co.rate:
        f_star = co.f_star if co.f_star is not None else _auto_f_star(problem)
        if f_star is not None and f_star <= header["f_x0"]:
            if cfg.algorithm == "asyncfeddr":
                bound = "async"
            elif cfg.accuracy.kind == "relative":
                bound = "relative"
            else:
                bound = "sync"
            rate = check_rate(trace, constants, f_star, bound=bound)

    text = render_report(header, constants, descent, rate)
    violations = sum(1 for r in (descent or []) if r.violation)
    if rate is not None and not rate.ok:
        violations += 1
    return text, violations


def _run_one(cfg: ExperimentConfig, problem: Problem, eta: float, seed: int,
             full_state: bool) -> Trace:
    if cfg.algorithm in ("feddr", "fedsplit"):
        # the admissibility gate guards certificates; fedsplit (alpha = 2)
        # and heuristic-prox runs never carry one, so they may step outside
        return run_feddr(
            problem, Hyper(eta=eta, alpha=cfg.alpha), cfg.rounds, seed=seed,
            sampling=cfg.sampling, schedule=cfg.accuracy,
            full_state=full_state, name=cfg.name,
            validate=(cfg.algorithm != "fedsplit"
                      and cfg.accuracy.kind != "heuristic"))
    if cfg.algorithm == "asyncfeddr":
        return run_async(problem, Hyper(eta=eta, alpha=cfg.alpha),
                         events=cfg.rounds, seed=seed, delay=cfg.delay,
                         full_state=full_state, name=cfg.name)
    return run_baseline(problem, cfg.baseline, cfg.rounds, seed=seed,
                        name=cfg.name)


def run_experiment(config, out_dir=None, seeds=None, certify=None,
                   full_state=None, echo=None) -> ExperimentResult:
    """Execute a config (path or ExperimentConfig). Keyword arguments
    override the corresponding config fields; that is how the CLI flags
    land here."""
    cfg = load_config(config) if not isinstance(config, ExperimentConfig) \
        else config
    say = echo or (lambda *_: None)
    do_certify = cfg.certify_enabled if certify is None else certify
    full_state = (cfg.full_state or do_certify) if full_state is None \
        else full_state
    seeds = tuple(cfg.seeds if seeds is None else seeds)
    if not seeds:
        raise ConfigError("need at least one seed")
    out = Path(out_dir or cfg.out_dir or f"runs/{cfg.name}")
    out.mkdir(parents=True, exist_ok=True)

    problem, _ = build_problem(cfg.problem)
    eta = resolve_eta(cfg, problem.lipschitz())

    results = []
    for seed in seeds:
        trace = _run_one(cfg, problem, eta, seed, full_state)
        trace_path = out / f"{cfg.name}-seed{seed}.trace"
        trace.write(trace_path)
        report_path = None
        violations = 0
        if do_certify:
            text, violations = _certificate_block(cfg, problem, trace)
            report_path = out / f"{cfg.name}-seed{seed}.report.txt"
            report_path.write_text(text)
        final = trace[-1].objective if len(trace) else math.nan
        aborted = trace.header.get("aborted")
        results.append(SeedResult(seed=seed, trace_path=trace_path,
                                  report_path=report_path,
                                  violations=violations,
                                  certified=do_certify, aborted=aborted,
                                  final_objective=final))
        say(f"seed {seed}: F = {final:.6g}"
            + (f", {violations} violation(s)" if violations else "")
            + (f", ABORTED: {aborted}" if aborted else ""))
    return ExperimentResult(out_dir=out, per_seed=results)
