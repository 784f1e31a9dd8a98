"""Synchronous randomized Douglas-Rachford federated solver.

Per round, each sampled user i runs

    y_i  <- y_i + alpha (xbar - x_i)
    x_i  <- prox_{eta f_i}(y_i)          (to scheduled accuracy)
    xhat_i <- 2 x_i - y_i

and ships the change in xhat_i; the server keeps the running average

    xtilde <- xtilde + (1/n) sum_{i in S} (xhat_i - xhat_i_old)
    xbar   <- prox_{eta g}(xtilde)

Unsampled users keep their state. All randomness flows through named
streams keyed on (seed, purpose, round, user), so runs are reproducible
and per-user work is order-independent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from drfed.certify import descent_coefficient, lyapunov_V
from drfed.harness.trace import Trace, TraceRecord, bytes_per_round
from drfed.numerics import (
    Problem,
    ProxResult,
    grad_mapping,
    prox_f_certified,
    prox_f_heuristic,
    prox_f_relative,
    prox_g,
)

# stream tags; one integer namespace per purpose so streams never collide
_TAG_SAMPLE = 17
_TAG_PROX = 23

MAX_RESAMPLES = 10_000


def _stream(seed: int, tag: int, *key: int) -> np.random.Generator:
    return np.random.default_rng([seed, tag, *key])


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class Hyper:
    """Stepsizes and starting point."""

    eta: float
    alpha: float = 1.0
    x0: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.eta <= 0:
            raise ValueError(f"eta must be positive, got {self.eta}")
        if self.alpha <= 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")


@dataclass(frozen=True)
class SamplingScheme:
    """How the active set S_k gets drawn.

    kinds: "full" (everyone), "uniform" (``size`` without replacement),
    "bernoulli" (independent coin per user, empty draws redrawn and
    counted), "scripted" (explicit per-round index lists, cycled).
    """

    kind: str = "full"
    size: Optional[int] = None
    prob: float = 0.5
    script: Optional[Tuple[Tuple[int, ...], ...]] = None

    def __post_init__(self):
        if self.kind not in ("full", "uniform", "bernoulli", "scripted"):
            raise ValueError(f"unknown sampling kind {self.kind!r}")
        if self.kind == "uniform" and (self.size is None or self.size < 1):
            raise ValueError("uniform sampling needs size >= 1")
        if self.kind == "bernoulli" and not (0.0 < self.prob <= 1.0):
            raise ValueError(f"bernoulli prob must be in (0, 1], got {self.prob}")
        if self.kind == "scripted":
            if not self.script:
                raise ValueError("scripted sampling needs a nonempty script")
            object.__setattr__(self, "script",
                               tuple(tuple(s) for s in self.script))
            for s in self.script:
                if len(set(s)) != len(s):
                    raise ValueError(f"script round repeats a user: {s}")

    def probabilities(self, n: int) -> Optional[np.ndarray]:
        """Per-user activation probability p_i, or None when undefined
        a priori (scripted runs measure it post hoc instead)."""
        if self.kind == "full":
            return np.ones(n)
        if self.kind == "uniform":
            if self.size > n:
                raise ValueError(f"sample size {self.size} exceeds n = {n}")
            return np.full(n, self.size / n)
        if self.kind == "bernoulli":
            # conditioning on a nonempty draw lifts every p_i a little;
            # the unconditional value is the safe lower bound
            return np.full(n, self.prob)
        return None

    def p_hat(self, n: int) -> Optional[float]:
        probs = self.probabilities(n)
        return None if probs is None else float(probs.min())


@dataclass(frozen=True)
class AccuracySchedule:
    """How accurately the local prox gets solved.

    kinds: "exact" (closed form, quadratic users only), "absolute"
    (certified gradient bound with eps_{i,k}^2 = M / (2 (k+1)^2) indexed by
    state: the init solve is state 0, round k produces state k+1),
    "relative" (certified against the previous iterate with
    theta_i = theta_hat * p_i), "heuristic" (fixed minibatch SGD budget,
    no certificate).
    """

    kind: str = "exact"
    M: float = 1.0
    theta_hat: float = 0.01
    epochs: int = 1
    lr: float = 0.05
    batch_size: int = 32

    def __post_init__(self):
        if self.kind not in ("exact", "absolute", "relative", "heuristic"):
            raise ValueError(f"unknown accuracy kind {self.kind!r}")
        if self.kind == "absolute" and self.M <= 0:
            raise ValueError("absolute schedule needs M > 0")
        if self.kind == "relative" and self.theta_hat <= 0:
            raise ValueError("relative schedule needs theta_hat > 0")


def accuracy_for_round(schedule: AccuracySchedule, k: int, i: int = 0,
                       p_i: float = 1.0) -> float:
    """Per-user accuracy target for the solve that produces state k+1.

    Pass k = -1 for the init solve (state 0). Absolute mode returns eps
    (so eps^2 = M / (2 (k+2)^2)), relative mode returns theta_i, exact and
    heuristic return 0.0 (unused).
    """
    if k < -1:
        raise ValueError(f"round index must be >= -1, got {k}")
    if schedule.kind == "absolute":
        state = k + 1
        return math.sqrt(schedule.M / (2.0 * (state + 1) ** 2))
    if schedule.kind == "relative":
        return schedule.theta_hat * p_i
    return 0.0


# ---------------------------------------------------------------------------
# state


@dataclass
class UserState:
    y: np.ndarray
    x: np.ndarray
    xhat: np.ndarray
    eps_sq: float = 0.0     # accuracy of the current x (carries when idle)


@dataclass
class ServerState:
    xtilde: np.ndarray
    xbar: np.ndarray
    bytes: int = 0


def validate_stepsizes(alpha: float, eta: float, L: float,
                       gamma4: float = 0.0) -> float:
    """Admissibility gate: descent coefficient D > 0 and eta <= 1/L.

    Returns D. The closed-form stepsize caps are looser/tighter than this
    in different corners and are only reported, never enforced.
    """
    if L < 0:
        raise ValueError("L must be nonnegative")
    if L > 0 and eta > 1.0 / L + 1e-15:
        raise ValueError(
            f"eta = {eta:.6g} exceeds 1/L = {1.0 / L:.6g}; the potential "
            "no longer lower-bounds F and every guarantee lapses")
    D = descent_coefficient(alpha, eta, gamma4, L)
    if D <= 0:
        raise ValueError(
            f"descent coefficient D(alpha={alpha:.6g}, eta={eta:.6g}, "
            f"gamma4={gamma4:.6g}) = {D:.6g} <= 0; shrink alpha or eta")
    return D


# ---------------------------------------------------------------------------
# the three algorithm ops


def sample_users(scheme: SamplingScheme, n: int, k: int,
                 rng: np.random.Generator) -> Tuple[List[int], int]:
    """Draw S_k. Returns (sorted indices, redraw count)."""
    if scheme.kind == "full":
        return list(range(n)), 0
    if scheme.kind == "uniform":
        if scheme.size > n:
            raise ValueError(f"sample size {scheme.size} exceeds n = {n}")
        return sorted(rng.choice(n, size=scheme.size, replace=False).tolist()), 0
    if scheme.kind == "scripted":
        sel = scheme.script[k % len(scheme.script)]
        bad = [i for i in sel if not (0 <= i < n)]
        if bad:
            raise ValueError(f"script references unknown users {bad}")
        return sorted(sel), 0
    # bernoulli: empty rounds do nothing, so redraw until someone shows up
    for redraws in range(MAX_RESAMPLES):
        mask = rng.random(n) < scheme.prob
        if mask.any():
            return np.flatnonzero(mask).tolist(), redraws
    raise RuntimeError(f"no nonempty Bernoulli draw in {MAX_RESAMPLES} tries")


def dr_local_step(model, state: UserState, xbar: np.ndarray, eta: float,
                  alpha: float, schedule: AccuracySchedule, target: float,
                  rng: Optional[np.random.Generator]) -> Tuple[UserState, np.ndarray, ProxResult]:
    """One user's reflected step against the server point ``xbar``.

    Returns (new state, delta xhat, prox certificate). Shared verbatim with
    the event-driven runner so both paths do identical arithmetic.
    """
    y_new = state.y + alpha * (xbar - state.x)
    if schedule.kind == "exact":
        res = prox_f_certified(model, y_new, eta, eps=0.0)
    elif schedule.kind == "absolute":
        res = prox_f_certified(model, y_new, eta, eps=target, start=state.x)
    elif schedule.kind == "relative":
        res = prox_f_relative(model, y_new, eta, theta=target, x_prev=state.x)
    else:
        res = prox_f_heuristic(model, y_new, eta, epochs=schedule.epochs,
                               lr=schedule.lr, batch_size=schedule.batch_size,
                               rng=rng)
    x_new = res.point
    xhat_new = 2.0 * x_new - y_new
    eps_sq = res.cert ** 2 if res.cert is not None else float("nan")
    new = UserState(y=y_new, x=x_new, xhat=xhat_new, eps_sq=eps_sq)
    return new, xhat_new - state.xhat, res


def server_aggregate(server: ServerState, deltas: Sequence[Tuple[int, np.ndarray]],
                     n: int, eta: float, reg) -> ServerState:
    """Fold the round's reflected changes into xtilde, then re-prox.

    The division happens once, on the summed delta: sums are associative
    here because the index order is fixed, which keeps replays bitwise
    reproducible.
    """
    seen = set()
    total = np.zeros_like(server.xtilde)
    for i, d in sorted(deltas, key=lambda t: t[0]):
        if i in seen:
            raise ValueError(f"user {i} contributed twice in one round")
        seen.add(i)
        total = total + d
    xtilde = server.xtilde + total / n
    return ServerState(xtilde=xtilde, xbar=prox_g(reg, xtilde, eta),
                       bytes=server.bytes)


# ---------------------------------------------------------------------------
# init + driver


def init_feddr(problem: Problem, hyper: Hyper, schedule: AccuracySchedule,
               seed: int) -> Tuple[List[UserState], ServerState]:
    """Common starting state: everyone solves the prox at x0 once.

    xtilde starts at the average of the reflected points (not at x0), so
    the server average is consistent with user state from the first round.
    Relative mode has no previous iterate to compare against, so the init
    solve runs the absolute certificate at a tight fixed tolerance.
    """
    if schedule.kind == "exact" and not all(
            getattr(u, "has_exact_prox", False) for u in problem.users):
        raise ValueError("exact accuracy schedule needs closed-form proxes; "
                         "pick absolute, relative or heuristic")
    x0 = hyper.x0 if hyper.x0 is not None else np.zeros(problem.dim)
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (problem.dim,):
        raise ValueError(f"x0 has shape {x0.shape}, problem dim is {problem.dim}")
    users: List[UserState] = []
    for i, model in enumerate(problem.users):
        if schedule.kind == "absolute":
            eps0 = accuracy_for_round(schedule, -1)
            res = prox_f_certified(model, x0, hyper.eta, eps=eps0)
        elif schedule.kind == "relative":
            if getattr(model, "has_exact_prox", False):
                res = prox_f_certified(model, x0, hyper.eta, eps=0.0)
            else:
                res = prox_f_certified(model, x0, hyper.eta, eps=1e-10)
        elif schedule.kind == "heuristic":
            res = prox_f_heuristic(model, x0, hyper.eta, epochs=schedule.epochs,
                                   lr=schedule.lr, batch_size=schedule.batch_size,
                                   rng=_stream(seed, _TAG_PROX, 0, i))
        else:
            res = prox_f_certified(model, x0, hyper.eta, eps=0.0)
        x_i = res.point
        eps_sq = res.cert ** 2 if res.cert is not None else float("nan")
        users.append(UserState(y=x0.copy(), x=x_i, xhat=2.0 * x_i - x0,
                               eps_sq=eps_sq))
    total = np.zeros(problem.dim)
    for u in users:
        total = total + u.xhat
    xtilde = total / problem.n
    server = ServerState(xtilde=xtilde, xbar=prox_g(problem.reg, xtilde, hyper.eta))
    return users, server


def _train_accuracy(problem: Problem, xbar: np.ndarray) -> Optional[float]:
    accs = []
    for u in problem.users:
        fn = getattr(u, "accuracy", None)
        if fn is None:
            return None
        accs.append(fn(xbar))
    return float(np.mean(accs))


def run_feddr(problem: Problem, hyper: Hyper, rounds: int, seed: int = 0,
              sampling: Optional[SamplingScheme] = None,
              schedule: Optional[AccuracySchedule] = None,
              full_state: bool = False, name: str = "feddr",
              check_finite: bool = True, validate: bool = True) -> Trace:
    """Run the synchronous solver and return its trace.

    Record 0 describes the initial state; record k+1 describes the state
    after round k. On a non-finite objective the run stops, the offending
    record is kept and the header carries ``aborted``.

    ``validate=False`` skips the admissibility gate; that is how the
    alpha = 2 reflection (the classical consensus splitting baseline) is
    reachable. Such runs carry no descent or rate guarantee.
    """
    if rounds < 0:
        raise ValueError("rounds must be >= 0")
    if seed < 0:
        raise ValueError("seed must be >= 0")
    sampling = sampling or SamplingScheme()
    schedule = schedule or AccuracySchedule()
    if validate:
        validate_stepsizes(hyper.alpha, hyper.eta, problem.lipschitz())

    probs = sampling.probabilities(problem.n)
    x0 = hyper.x0 if hyper.x0 is not None else np.zeros(problem.dim)
    trace = Trace({
        "name": name, "algorithm": "feddr", "seed": seed,
        "n": problem.n, "dim": problem.dim, "eta": hyper.eta,
        "alpha": hyper.alpha, "rounds": rounds,
        "sampling": sampling.kind, "accuracy": schedule.kind,
        "p_hat": sampling.p_hat(problem.n),
        "f_x0": float(problem.objective(np.asarray(x0, dtype=float))),
        "L": problem.lipschitz(), "full_state": full_state,
        "validated": validate,
    })

    users, server = init_feddr(problem, hyper, schedule, seed)
    certified = schedule.kind in ("exact", "absolute", "relative")

    def snapshot(k: int, active: List[int], move_sq: float,
                 server_move_sq: float, resamples: int,
                 achieved: Optional[float], mode: str) -> TraceRecord:
        xbar = server.xbar
        eps_sum = math.fsum(u.eps_sq for u in users) if certified else None
        return TraceRecord(
            k=k, sim_time=None, active=active,
            objective=float(problem.objective(xbar)),
            train_acc=_train_accuracy(problem, xbar),
            grad_map_sq=float(np.sum(grad_mapping(problem, xbar, hyper.eta) ** 2)),
            lyapunov=lyapunov_V([u.x for u in users], xbar, hyper.eta, problem),
            lyapunov_tilde=None, bytes=server.bytes, delay=None,
            prox_mode=mode, achieved_acc=achieved, resamples=resamples,
            move_sq=move_sq if full_state else None,
            server_move_sq=server_move_sq if full_state else None,
            state={"eps_sq_sum": eps_sum, "xtilde": server.xtilde,
                   "xbar": xbar} if full_state else None)

    rec0 = snapshot(0, [], 0.0, 0.0, 0, None, schedule.kind)
    trace.append(rec0)
    if check_finite and not math.isfinite(rec0.objective):
        trace.header["aborted"] = "nonfinite objective at init"
        return trace

    for k in range(rounds):
        active, resamples = sample_users(
            sampling, problem.n, k, _stream(seed, _TAG_SAMPLE, k))
        deltas = []
        move_sq = 0.0
        achieved = None
        for i in active:
            target = accuracy_for_round(
                schedule, k, i, probs[i] if probs is not None else 1.0)
            rng = (_stream(seed, _TAG_PROX, k + 1, i)
                   if schedule.kind == "heuristic" else None)
            new, delta, res = dr_local_step(
                problem.users[i], users[i], server.xbar, hyper.eta,
                hyper.alpha, schedule, target, rng)
            move_sq += float(np.sum((new.x - users[i].x) ** 2))
            users[i] = new
            deltas.append((i, delta))
            if res.cert is not None:
                achieved = res.cert if achieved is None else max(achieved, res.cert)
        prev_xbar = server.xbar
        server = server_aggregate(server, deltas, problem.n, hyper.eta,
                                  problem.reg)
        server.bytes += bytes_per_round(len(active), problem.dim)
        rec = snapshot(k + 1, active, move_sq,
                       float(np.sum((server.xbar - prev_xbar) ** 2)),
                       resamples, achieved, schedule.kind)
        trace.append(rec)
        if check_finite and not math.isfinite(rec.objective):
            trace.header["aborted"] = f"nonfinite objective after round {k}"
            break
    return trace
