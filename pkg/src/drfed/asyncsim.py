"""Event-driven simulation of the asynchronous Douglas-Rachford solver.

One user finishes per event. A user that starts working at wall time s
reads the server point that was current at s; by the time it finishes, the
server may have moved on d versions. The simulator enforces d <= tau by
stalling violators (they refresh their read and retry a tick later, and
the retry is counted), so every accepted update provably used a read at
most tau versions old.

The discrete-event core is a single heap ordered by (completion time,
sequence number); ties break by insertion order, which keeps replays of
scripted schedules exactly reproducible. Everything runs single-threaded:
"asynchrony" here is the delay structure, not actual threads.
"""

from __future__ import annotations

from bisect import bisect_right
from dataclasses import dataclass, field
from heapq import heappop, heappush
from typing import List, Optional, Tuple

import numpy as np

from drfed.certify import async_rho, async_stepsize_caps, async_D, lyapunov_V, lyapunov_Vtilde
from drfed.feddr import AccuracySchedule, Hyper, UserState, dr_local_step, init_feddr
from drfed.harness.trace import Trace, TraceRecord, bytes_per_round
from drfed.numerics import Problem, grad_mapping, prox_g

_TAG_DELAY = 31


class StaleVersionError(RuntimeError):
    """A read referenced a version older than the ring retains."""


# ---------------------------------------------------------------------------
# delay models


@dataclass(frozen=True)
class DelayModel:
    """Per-user compute-time process plus the staleness cap tau.

    kinds: "uniform" (durations U(lo, hi), the default), "deterministic"
    (fixed ``duration``), "lognormal" (exp of N(mean, sigma)), "scripted"
    (explicit per-user (idle, duration) pairs; with ``cycle`` the last pair
    repeats forever, otherwise the user goes quiet once its list is spent).
    ``user_scale`` multiplies durations per user to model slow devices.
    Stochastic kinds have zero idle time: users restart work immediately.
    """

    kind: str = "uniform"
    lo: float = 1.0
    hi: float = 2.0
    duration: float = 1.0
    mean: float = 0.0
    sigma: float = 0.25
    user_scale: Optional[Tuple[float, ...]] = None
    script: Optional[Tuple[Tuple[Tuple[float, float], ...], ...]] = None
    cycle: bool = False
    tau: int = 3
    stall_tick: float = 0.001

    def __post_init__(self):
        if self.kind not in ("uniform", "deterministic", "lognormal", "scripted"):
            raise ValueError(f"unknown delay kind {self.kind!r}")
        if self.tau < 0:
            raise ValueError("tau must be >= 0")
        if self.stall_tick <= 0:
            raise ValueError("stall_tick must be positive")
        if self.kind == "uniform" and not (0 < self.lo <= self.hi):
            raise ValueError("uniform delays need 0 < lo <= hi")
        if self.kind == "scripted":
            if not self.script:
                raise ValueError("scripted delays need a script")
            object.__setattr__(
                self, "script",
                tuple(tuple((float(a), float(b)) for a, b in per_user)
                      for per_user in self.script))
            for per_user in self.script:
                for idle, dur in per_user:
                    if idle < 0 or dur <= 0:
                        raise ValueError(f"bad script entry ({idle}, {dur})")
        if self.user_scale is not None:
            object.__setattr__(self, "user_scale",
                               tuple(float(s) for s in self.user_scale))
            if any(s <= 0 for s in self.user_scale):
                raise ValueError("user_scale entries must be positive")

    def draw(self, user: int, j: int,
             rng: np.random.Generator) -> Optional[Tuple[float, float]]:
        """(idle, duration) for user's j-th activation; None = user stops."""
        if self.kind == "scripted":
            per_user = self.script[user % len(self.script)]
            if j >= len(per_user):
                if not self.cycle:
                    return None
                j = len(per_user) - 1
            return per_user[j]
        scale = self.user_scale[user] if self.user_scale is not None else 1.0
        if self.kind == "deterministic":
            return 0.0, self.duration * scale
        if self.kind == "uniform":
            return 0.0, float(rng.uniform(self.lo, self.hi)) * scale
        return 0.0, float(rng.lognormal(self.mean, self.sigma)) * scale


def sequential_script(n: int) -> DelayModel:
    """Round-robin schedule: user i first finishes at time i+1, then every
    n time units, so exactly one user lands per unit slot and every read is
    perfectly fresh. This is the schedule under which the event-driven run
    must match the one-user-per-round synchronous run bit for bit.
    """
    script = tuple(((i + 0.5, 0.5), (n - 0.5, 0.5)) for i in range(n))
    return DelayModel(kind="scripted", script=script, cycle=True, tau=1)


def staircase_script() -> DelayModel:
    """Four users, eight events, hand-checkable staleness pattern.

    Completion order C1 C2 C3 C4 C4 C2 C3 C1 at times
    1, 2, 3, 4, 4.5, 5, 5.5, 6.1; realized read delays
    0, 1, 2, 3, 0, 3, 3, 2, all within tau = 3. The last C1 event starts
    at 4.6 and therefore reads version 5, the state left by C4's second
    update.
    """
    script = (
        ((0.0, 1.0), (3.6, 1.5)),
        ((0.0, 2.0), (0.0, 3.0)),
        ((0.0, 3.0), (0.0, 2.5)),
        ((0.0, 4.0), (0.0, 0.5)),
    )
    return DelayModel(kind="scripted", script=script, cycle=False, tau=3)


# ---------------------------------------------------------------------------
# event queue and versioned server state


@dataclass(order=True)
class _Event:
    time: float
    seq: int
    user: int = field(compare=False)
    duration: float = field(compare=False)
    pinned_version: Optional[int] = field(compare=False, default=None)
    stalls: int = field(compare=False, default=0)


class EventQueue:
    """Min-heap on (completion time, insertion order)."""

    def __init__(self):
        self._heap: List[_Event] = []
        self._seq = 0

    def push(self, time: float, user: int, duration: float,
             pinned_version: Optional[int] = None, stalls: int = 0):
        heappush(self._heap, _Event(time, self._seq, user, duration,
                                    pinned_version, stalls))
        self._seq += 1

    def pop(self) -> _Event:
        return heappop(self._heap)

    def __len__(self):
        return len(self._heap)


class VersionedModel:
    """Server point history: the last tau+1 versions stay readable.

    Versions are numbered from 0 (the initial point). Reading anything the
    ring has dropped is a hard failure, not a silent fallback: the delay
    cap is supposed to make that impossible, so reaching it means the
    simulator (or a delay model) is broken.
    """

    def __init__(self, xbar0: np.ndarray, tau: int):
        self.tau = tau
        self._ring = [(0, np.array(xbar0, copy=True))]
        self._times = [0.0]    # creation time of each version, by version

    @property
    def version(self) -> int:
        return self._ring[-1][0]

    def push(self, xbar: np.ndarray, time: float) -> int:
        v = self.version + 1
        if time < self._times[-1]:
            raise ValueError("versions must be created in time order")
        self._ring.append((v, np.array(xbar, copy=True)))
        if len(self._ring) > self.tau + 1:
            self._ring.pop(0)
        self._times.append(time)
        return v

    def get(self, version: int) -> np.ndarray:
        oldest = self._ring[0][0]
        if version < oldest:
            raise StaleVersionError(
                f"version {version} was evicted (ring holds {oldest}.."
                f"{self.version}, tau = {self.tau})")
        if version > self.version:
            raise ValueError(f"version {version} does not exist yet")
        return self._ring[version - oldest][1]

    def version_at(self, time: float) -> int:
        """Latest version created at or before ``time``."""
        return bisect_right(self._times, time) - 1


def schedule_user(queue: EventQueue, user: int, now: float, j: int,
                  delay: DelayModel, rng: np.random.Generator) -> bool:
    """Queue user's next completion; False when its script is exhausted."""
    drawn = delay.draw(user, j, rng)
    if drawn is None:
        return False
    idle, duration = drawn
    queue.push(now + idle + duration, user, duration)
    return True


# ---------------------------------------------------------------------------
# algorithm ops


def async_local_update(model, state: UserState, xbar_read: np.ndarray,
                       eta: float, alpha: float) -> Tuple[UserState, np.ndarray]:
    """One user's reflected step against a possibly stale read.

    Exact prox only: the staleness analysis has no error budget, and the
    shared local step keeps the arithmetic identical to the synchronous
    path.
    """
    new, delta, _ = dr_local_step(model, state, xbar_read, eta, alpha,
                                  AccuracySchedule(kind="exact"), 0.0, None)
    return new, delta


def async_server_update(xtilde: np.ndarray, delta: np.ndarray, n: int,
                        eta: float, reg) -> Tuple[np.ndarray, np.ndarray]:
    """Apply one user's delta: xtilde += delta/n, then re-prox.

    Same division-once arithmetic as the synchronous aggregate, so a
    single-user round and a single event produce bitwise-equal floats.
    """
    xtilde = xtilde + delta / n
    return xtilde, prox_g(reg, xtilde, eta)


@dataclass(frozen=True)
class AsyncBounds:
    alpha_bar: float
    eta_bar: float
    rho: float
    rho_strict: float
    D: Optional[float] = None
    C_hat: Optional[float] = None


def stepsize_bounds_async(n: int, tau: int, alpha: float, L: float,
                          eta: Optional[float] = None,
                          T: Optional[int] = None,
                          p_hat: Optional[float] = None) -> AsyncBounds:
    """Admissibility for the event-driven solver; raises naming the
    offending quantity. With eta also checks rho > 0; with (T, p_hat) also
    evaluates the rate constants."""
    alpha_bar, eta_bar = async_stepsize_caps(n, tau, alpha, L)
    if not (0 < alpha < alpha_bar) and L > 0:
        raise ValueError(
            f"alpha = {alpha:.6g} outside (0, alpha_bar = {alpha_bar:.6g}) "
            f"for n = {n}, tau = {tau}")
    if eta is None:
        return AsyncBounds(alpha_bar, eta_bar, float("nan"), float("nan"))
    if L > 0 and not (0 < eta < eta_bar):
        raise ValueError(
            f"eta = {eta:.6g} outside (0, eta_bar = {eta_bar:.6g})")
    rho = async_rho(n, tau, alpha, eta, L)
    if rho <= 0:
        raise ValueError(f"rho = {rho:.6g} <= 0 despite admissible stepsizes")
    rho_s = async_rho(n, tau, alpha, eta, L, strict=True)
    D = C_hat = None
    if T is not None and p_hat is not None:
        D = async_D(n, tau, alpha, eta, L, T, p_hat)
        le = L * eta
        C_hat = 2.0 * (1.0 + le) ** 2 * D / (n * eta ** 2 * rho)
    return AsyncBounds(alpha_bar, eta_bar, rho, rho_s, D, C_hat)


# ---------------------------------------------------------------------------
# driver


def run_async(problem: Problem, hyper: Hyper, events: int, seed: int = 0,
              delay: Optional[DelayModel] = None, full_state: bool = False,
              name: str = "asyncfeddr") -> Trace:
    """Simulate ``events`` accepted updates and return the trace.

    Record 0 is the initial state; record k the state after the k-th
    accepted event. Stalled retries never produce records, they only bump
    the ``stalls`` counter of the event that finally lands.
    """
    if events < 0:
        raise ValueError("events must be >= 0")
    if seed < 0:
        raise ValueError("seed must be >= 0")
    delay = delay or DelayModel()
    if not all(getattr(u, "has_exact_prox", False) for u in problem.users):
        raise ValueError("the event-driven solver needs closed-form proxes")
    L = problem.lipschitz()
    stepsize_bounds_async(problem.n, delay.tau, hyper.alpha, L, eta=hyper.eta)

    n, dim, tau = problem.n, problem.dim, delay.tau
    users, server = init_feddr(problem, hyper, AccuracySchedule(kind="exact"),
                               seed)
    versions = VersionedModel(server.xbar, tau)
    xbar_hist = [np.array(server.xbar, copy=True)]   # last tau+1 points
    x0 = hyper.x0 if hyper.x0 is not None else np.zeros(dim)
    trace = Trace({
        "name": name, "algorithm": "asyncfeddr", "seed": seed,
        "n": n, "dim": dim, "eta": hyper.eta, "alpha": hyper.alpha,
        "events": events, "tau": tau, "delay": delay.kind,
        "f_x0": float(problem.objective(np.asarray(x0, dtype=float))),
        "L": L, "full_state": full_state,
    })

    def snapshot(k, t, active, d, stalls, move_sq, server_move_sq,
                 xhat=None, init_users=None):
        xbar = server.xbar
        V = lyapunov_V([u.x for u in users], xbar, hyper.eta, problem)
        state = None
        if full_state:
            state = {"eps_sq_sum": 0.0, "xtilde": server.xtilde,
                     "xbar": xbar}
            if xhat is not None:
                state["xhat"] = xhat
            if init_users is not None:
                # enough to replay the whole run from the trace alone
                state["x_all"] = [u.x for u in init_users]
                state["xhat_all"] = [u.xhat for u in init_users]
        return TraceRecord(
            k=k, sim_time=t, active=active,
            objective=float(problem.objective(xbar)),
            train_acc=None,
            grad_map_sq=float(np.sum(
                grad_mapping(problem, xbar, hyper.eta) ** 2)),
            lyapunov=V,
            lyapunov_tilde=lyapunov_Vtilde(V, xbar_hist, hyper.eta, n, tau),
            bytes=server.bytes, delay=d, prox_mode="exact",
            achieved_acc=None, stalls=stalls,
            move_sq=move_sq if full_state else None,
            server_move_sq=server_move_sq if full_state else None,
            state=state)

    trace.append(snapshot(0, 0.0, [], None, 0, 0.0, 0.0, init_users=users))

    queue = EventQueue()
    rngs = [np.random.default_rng([seed, _TAG_DELAY, i]) for i in range(n)]
    activations = [0] * n
    for i in range(n):
        if schedule_user(queue, i, 0.0, 0, delay, rngs[i]):
            activations[i] += 1

    done = 0
    pops = 0
    pop_budget = 200 * events + 10_000
    while done < events and len(queue):
        ev = queue.pop()
        pops += 1
        if pops > pop_budget:
            raise RuntimeError(
                "stall storm: the delay cap keeps rejecting events; "
                "raise tau or slow the schedule")
        if ev.pinned_version is not None:
            read_version = ev.pinned_version
        else:
            read_version = versions.version_at(ev.time - ev.duration)
        d = versions.version - read_version
        if d > tau:
            # refresh the read and retry just after; counted, not recorded
            queue.push(ev.time + delay.stall_tick, ev.user, ev.duration,
                       pinned_version=versions.version, stalls=ev.stalls + 1)
            continue
        i = ev.user
        xbar_read = versions.get(read_version)
        new, delta = async_local_update(problem.users[i], users[i],
                                        xbar_read, hyper.eta, hyper.alpha)
        move_sq = float(np.sum((new.x - users[i].x) ** 2))
        users[i] = new
        prev_xbar = server.xbar
        server.xtilde, server.xbar = async_server_update(
            server.xtilde, delta, n, hyper.eta, problem.reg)
        server.bytes += bytes_per_round(1, dim)
        versions.push(server.xbar, ev.time)
        xbar_hist.append(np.array(server.xbar, copy=True))
        if len(xbar_hist) > tau + 1:
            xbar_hist.pop(0)
        done += 1
        trace.append(snapshot(
            done, ev.time, [i], d, ev.stalls, move_sq,
            float(np.sum((server.xbar - prev_xbar) ** 2)), xhat=new.xhat))
        if schedule_user(queue, i, ev.time, activations[i], delay, rngs[i]):
            activations[i] += 1
    if done < events:
        trace.header["exhausted"] = done
    return trace


# ---------------------------------------------------------------------------
# post-hoc delay measurement


@dataclass(frozen=True)
class DelayStats:
    tau_obs: int
    T_obs: int
    p_hat_obs: float


def measure_delay_stats(trace: Trace) -> DelayStats:
    """Recover (tau, T, p_hat) from a finished trace.

    tau_obs is the largest realized read delay. T_obs is the smallest
    window length such that every run of T_obs consecutive events contains
    each user at least once; p_hat_obs the worst per-user activation
    frequency over all windows of that length.
    """
    recs = [r for r in trace.records if r.k >= 1]
    if not recs:
        raise ValueError("trace has no events")
    n = int(trace.header["n"])
    K = len(recs)
    tau_obs = max(r.delay for r in recs)
    idx = {i: [] for i in range(n)}
    for pos, r in enumerate(recs, start=1):
        for i in r.active:
            idx[i].append(pos)
    T_obs = 0
    for i, ks in idx.items():
        if not ks:
            raise ValueError(f"user {i} never appears; T is unbounded")
        worst = max(ks[0], K - ks[-1] + 1)
        worst = max([worst] + [b - a for a, b in zip(ks, ks[1:])])
        T_obs = max(T_obs, worst)
    p_hat = 1.0
    for i, ks in idx.items():
        marks = np.zeros(K + 1, dtype=int)
        for k in ks:
            marks[k] = 1
        csum = np.cumsum(marks)
        for start in range(0, K - T_obs + 1):
            count = csum[start + T_obs] - csum[start]
            p_hat = min(p_hat, count / T_obs)
    return DelayStats(tau_obs=int(tau_obs), T_obs=int(T_obs),
                      p_hat_obs=float(p_hat))
