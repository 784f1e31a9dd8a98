"""Runtime certificates: Lyapunov values, theory constants, bound checks.

Two kinds of statement get verified, and reports keep them apart:

* sure inequalities (per-realization descent of V, or of the delay-weighted
  merit function in the async case) are asserted round by round on a single
  trace;
* expectation-level rate bounds are asserted on the empirical seed average,
  20 seeds by default.

Everything here is read-only analysis over traces and plain floats.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from drfed.numerics import Problem

DESCENT_SLACK = 1e-9


class ConstantsError(ValueError):
    """A theory constant came out nonpositive/undefined; message names it."""


# ---------------------------------------------------------------------------
# Lyapunov values


def lyapunov_V(users, xbar: np.ndarray, eta: float, problem: Problem) -> float:
    """g(xbar) + (1/n) sum_i [ f_i(x_i) + <grad f_i(x_i), xbar - x_i>
    + ||xbar - x_i||^2 / (2 eta) ].

    Lower-bounds F* whenever eta <= 1/L, which is what makes it a usable
    potential; the caller is responsible for that hyperparameter regime.
    """
    if eta <= 0:
        raise ValueError("eta must be positive")
    n = problem.n
    total = 0.0
    for model, u in zip(problem.users, users):
        x_i = u.x if hasattr(u, "x") else np.asarray(u)
        d = xbar - x_i
        total += (model.value(x_i) + float(model.grad(x_i) @ d)
                  + float(d @ d) / (2.0 * eta))
    return problem.reg.value(xbar) + total / n


def lyapunov_Vtilde(V: float, xbar_history: Sequence[np.ndarray], eta: float,
                    n: int, tau: int) -> float:
    """Delay-weighted merit value at the newest point of ``xbar_history``.

    With history (xbar^{k-tau}, ..., xbar^k) this adds
    (tau/(n eta)) * sum_{l=k-tau}^{k-1} [l-(k-tau)+1] * ||xbar^{l+1}-xbar^l||^2,
    weights 1..tau with the newest difference weighted tau. Histories shorter
    than tau+1 are zero-padded (early rounds have no older versions).

    The tau/(n eta) normalization is the one under which the per-event sure
    descent inequality is provable; the same expression also circulates with
    a 1/(n eta) factor, which coincides for tau <= 1 but does not telescope
    for tau >= 2.
    """
    if tau < 0:
        raise ValueError("tau must be >= 0")
    if eta <= 0 or n < 1:
        raise ValueError("need eta > 0 and n >= 1")
    if tau == 0:
        return float(V)
    hist = [np.asarray(h, dtype=float) for h in xbar_history]
    if len(hist) > tau + 1:
        raise ValueError(f"history holds {len(hist) - 1} differences, cap is tau = {tau}")
    diffs_sq = [float(np.sum((b - a) ** 2)) for a, b in zip(hist[:-1], hist[1:])]
    # newest difference gets weight tau; zero-padding leaves old slots absent
    total = 0.0
    for j, dsq in enumerate(reversed(diffs_sq)):  # j = 0 is the newest
        total += (tau - j) * dsq
    return float(V) + tau / (n * eta) * total


# ---------------------------------------------------------------------------
# theory constants


@dataclass(frozen=True)
class TheoryConstants:
    """Every constant the bounds need, plus the inputs that produced them.

    Sync fields are always present. Async fields are None unless (tau, T)
    were supplied, relative-error fields None unless theta_hat was.
    """

    eta: float
    alpha: float
    n: int
    L: float
    p_hat: float
    gamma1: float
    gamma2: float
    gamma4: float
    exact: bool
    # sync (partial participation, inexact prox)
    D: float
    beta: float
    rho1: float
    rho2: float
    C1: float
    C2: float
    C3: float
    alpha_max_closed_form: float
    eta_max_closed_form: float
    # async
    tau: Optional[int] = None
    T: Optional[int] = None
    alpha_bar: Optional[float] = None
    eta_bar: Optional[float] = None
    rho: Optional[float] = None
    rho_strict: Optional[float] = None
    D_async: Optional[float] = None
    C_hat: Optional[float] = None
    # relative-error schedule
    theta_hat: Optional[float] = None
    C_hat_rel: Optional[float] = None
    eta_bar_rel: Optional[float] = None
    C_tilde: Optional[float] = None

    def descent_coefficient_sync(self) -> float:
        """Required-decrease coefficient of the exact-mode sure inequality:
        V^{k+1} <= V^k - coef * sum_{i in S_k} ||x_i^{k+1} - x_i^k||^2."""
        d_exact = descent_coefficient(self.alpha, self.eta, 0.0, self.L)
        return d_exact / (2.0 * self.alpha * self.eta * self.n)


def descent_coefficient(alpha: float, eta: float, gamma4: float, L: float) -> float:
    """D(alpha, eta) = 2 - alpha(L eta + 1) - 2 L^2 eta^2
    - 4 gamma4 alpha (1 + L^2 eta^2)."""
    le = L * eta
    return 2.0 - alpha * (le + 1.0) - 2.0 * le * le - 4.0 * gamma4 * alpha * (1.0 + le * le)


def closed_form_stepsize_bounds(alpha: float, gamma4: float, L: float):
    """The printed closed-form admissibility bounds, kept for logging only.

    The descent-coefficient positivity check is what actually gates configs:
    the reference stepsize choice (alpha = 1, eta = 1/(3L)) fails the printed
    alpha bound at gamma4 = 0 yet satisfies D > 0, which is what the proofs
    use.
    """
    alpha_max = min(8.0, math.sqrt(17.0 + 64.0 * gamma4) - 1.0) / (4.0 * (1.0 + 4.0 * gamma4))
    inner = (4.0 - alpha) ** 2 - 16.0 * alpha ** 2 * gamma4 * (1.0 + 4.0 * gamma4)
    if inner < 0 or L <= 0:
        eta_max = float("nan")
    else:
        eta_max = (math.sqrt(inner) - alpha) / (4.0 * L * (1.0 + 2.0 * alpha * gamma4))
    return alpha_max, eta_max


def async_stepsize_caps(n: int, tau: int, alpha: float, L: float):
    """(alpha_bar, eta_bar) of the async admissible region, two-branch form."""
    if n < 1 or tau < 0:
        raise ValueError("need n >= 1 and tau >= 0")
    c = (2.0 * tau * tau - n) / (n * n)
    if 2 * tau * tau <= n:
        alpha_bar = 1.0
        inner = 16.0 - 8.0 * alpha - 7.0 * alpha * alpha
        denom = 2.0 * L * (2.0 + alpha)
    else:
        alpha_bar = 2.0 / (2.0 + c)
        inner = 16.0 - 8.0 * alpha - (7.0 + 4.0 * c + 4.0 * c * c) * alpha * alpha
        denom = 2.0 * L * (2.0 + (1.0 + c) * alpha)
    eta_bar = (math.sqrt(inner) - alpha) / denom if inner >= 0 else float("nan")
    return alpha_bar, eta_bar


def async_rho(n: int, tau: int, alpha: float, eta: float, L: float,
              strict: bool = False) -> float:
    """Descent modulus of the async merit function.

    ``strict=True`` restores the factor 2 that the Young step
    ||xbar^{k+1}-xbar^k||^2 <= 2(1+eta^2 L^2)/n^2 * ||dx||^2 actually carries
    into the 2 tau^2 > n branch; the printed constant halves that term.
    Reports show both.
    """
    le = L * eta
    A = 2.0 * (1.0 - alpha) - (2.0 + alpha) * le * le - alpha * le
    if 2 * tau * tau <= n:
        return A / (alpha * eta * n)
    young = 2.0 if strict else 1.0
    num = n * n * A - young * alpha * (1.0 + le * le) * (2.0 * tau * tau - n)
    return num / (alpha * eta * n ** 3)


def async_D(n: int, tau: int, alpha: float, eta: float, L: float, T: int,
            p_hat: float) -> float:
    le2 = (L * eta) ** 2
    num = (8.0 * alpha ** 2 * (1.0 + le2) * (tau * tau + 2.0 * T * n * p_hat)
           + 8.0 * n * n * (1.0 + le2 + T * alpha ** 2 * p_hat))
    return num / (p_hat * alpha ** 2 * n * n)


def theory_constants(eta: float, alpha: float, n: int, L: float, p_hat: float,
                     gamma1: Optional[float] = None,
                     gamma2: Optional[float] = None,
                     gamma4: Optional[float] = None,
                     exact: bool = True,
                     tau: Optional[int] = None, T: Optional[int] = None,
                     theta_hat: Optional[float] = None) -> TheoryConstants:
    """Evaluate every constant for an accepted configuration.

    gamma defaults: 0 in exact mode (the lemma's last clause permits it),
    1.0 each otherwise. Any nonpositive denominator raises ConstantsError
    naming the constant.
    """
    if eta <= 0 or alpha <= 0:
        raise ConstantsError("need eta > 0 and alpha > 0")
    if not (0 < p_hat <= 1):
        raise ConstantsError(f"p_hat must lie in (0, 1], got {p_hat}")
    if gamma1 is None:
        gamma1 = 0.0 if exact else 1.0
    if gamma2 is None:
        gamma2 = 0.0 if exact else 1.0
    if gamma4 is None:
        gamma4 = 0.0 if exact else 1.0
    if not exact and min(gamma1, gamma2, gamma4) <= 0:
        raise ConstantsError("inexact mode needs gamma1, gamma2, gamma4 > 0")

    le = L * eta
    D = descent_coefficient(alpha, eta, gamma4, L)
    beta = p_hat * alpha * D / (2.0 * eta * (1.0 + gamma1) * (1.0 + le * le))
    if beta <= 0:
        raise ConstantsError(f"beta = {beta:.6g} <= 0 (descent coefficient D = {D:.6g})")
    if exact:
        rho1 = rho2 = 0.0
    else:
        rho2 = (2.0 * (1.0 + le) ** 2 / (gamma4 * eta * alpha ** 2)
                + (1.0 + le * le) / eta
                + alpha * D / (2.0 * eta * (1.0 + le * le) * gamma1))
        rho1 = rho2 + (1.0 + le * le) / eta
    C1 = 2.0 * (1.0 + le) ** 2 * (1.0 + gamma2) / (eta ** 2 * beta)
    C2 = rho1 * C1
    # the gamma2 cross term exists only when errors do; exact mode zeroes it
    C3 = rho2 * C1 + (0.0 if exact else
                      (1.0 + le) ** 2 * (1.0 + gamma2) / (eta ** 2 * gamma2))
    a_max, e_max = closed_form_stepsize_bounds(alpha, gamma4, L)

    kw = {}
    if tau is not None:
        if T is None or T < 1:
            raise ConstantsError("async constants need the window length T >= 1")
        alpha_bar, eta_bar = async_stepsize_caps(n, tau, alpha, L)
        rho = async_rho(n, tau, alpha, eta, L)
        if rho <= 0:
            raise ConstantsError(f"rho = {rho:.6g} <= 0: async descent modulus void")
        Da = async_D(n, tau, alpha, eta, L, T, p_hat)
        if Da <= 0:
            raise ConstantsError(f"D = {Da:.6g} <= 0")
        kw.update(
            tau=tau, T=T, alpha_bar=alpha_bar, eta_bar=eta_bar, rho=rho,
            rho_strict=async_rho(n, tau, alpha, eta, L, strict=True),
            D_async=Da,
            C_hat=2.0 * (1.0 + le) ** 2 * Da / (n * eta ** 2 * rho))

    if theta_hat is not None:
        if alpha != 1.0:
            raise ConstantsError("relative-error constants are stated for alpha = 1")
        if gamma4 <= 0:
            raise ConstantsError("relative-error constants need gamma4 > 0")
        C_hat_rel = max(1.0 + le * le, 2.0 * (1.0 + le) ** 2 / gamma4)
        margin = 1.0 - 4.0 * gamma4 - 8.0 * C_hat_rel * theta_hat
        if margin <= 0:
            raise ConstantsError(
                f"1 - 4*gamma4 - 8*C_hat*theta_hat = {margin:.6g} <= 0")
        eta_bar_rel = ((math.sqrt(1.0 + 8.0 * (1.0 + 2.0 * gamma4) * margin) - 1.0)
                       / (4.0 * L * (1.0 + 2.0 * gamma4)))
        num = p_hat ** 2 * eta * (1.0 - le - 2.0 * le * le
                                  - 4.0 * gamma4 * (1.0 + le * le)
                                  - 8.0 * C_hat_rel * theta_hat)
        den = 4.0 * (4.0 * (1.0 + le * le + 2.0 * theta_hat) + p_hat * theta_hat) \
            * (1.0 + le) ** 2
        C_tilde = num / den
        if C_tilde <= 0:
            raise ConstantsError(f"C_tilde = {C_tilde:.6g} <= 0")
        kw.update(theta_hat=theta_hat, C_hat_rel=C_hat_rel,
                  eta_bar_rel=eta_bar_rel, C_tilde=C_tilde)

    return TheoryConstants(
        eta=eta, alpha=alpha, n=n, L=L, p_hat=p_hat,
        gamma1=gamma1, gamma2=gamma2, gamma4=gamma4, exact=exact,
        D=D, beta=beta, rho1=rho1, rho2=rho2, C1=C1, C2=C2, C3=C3,
        alpha_max_closed_form=a_max, eta_max_closed_form=e_max, **kw)


# ---------------------------------------------------------------------------
# descent certification


@dataclass(frozen=True)
class LyapunovReport:
    k: int
    V: float
    Vtilde: Optional[float]
    coefficient: float
    required: float
    slack: float       # realized decrease minus required; negative = violation
    violation: bool


def check_descent(trace, constants: TheoryConstants,
                  slack_tol: float = DESCENT_SLACK,
                  strict_rho: bool = False) -> List[LyapunovReport]:
    """Per-round sure-descent verification over a full-state trace.

    Sync traces are checked against
        V^{k+1} <= V^k - [D/(2 alpha eta n)] * sum_{i in S_k} ||dx_i||^2,
    async traces against
        Vtilde^{k+1} <= Vtilde^k - (rho/2) * ||dx_{i_k}||^2,
    each with ``slack_tol`` of numerical slack. ``strict_rho`` swaps in the
    larger-Young-term variant of rho. The async merit value is recomputed
    here from V and the recorded server moves, then cross-checked against
    the value the runner logged.
    """
    recs = trace.records
    if not recs:
        return []
    if any(r.move_sq is None for r in recs[1:]):
        raise ValueError("descent check needs a full-state trace "
                         "(run with the full-state flag)")
    is_async = trace.header.get("algorithm") == "asyncfeddr"
    reports: List[LyapunovReport] = []
    if is_async:
        tau = int(trace.header["tau"])
        n = int(trace.header["n"])
        eta = float(trace.header["eta"])
        if constants.rho is None:
            raise ValueError("async trace needs async constants (tau, T)")
        coef = (constants.rho_strict if strict_rho else constants.rho) / 2.0
        vt_prev = None
        for idx, rec in enumerate(recs):
            vt = _vtilde_from_records(recs, idx, tau, n, eta)
            if rec.lyapunov_tilde is not None:
                if abs(vt - rec.lyapunov_tilde) > 1e-7 * (1.0 + abs(vt)):
                    raise ValueError(
                        f"recorded Vtilde diverges from recomputation at k={rec.k}: "
                        f"{rec.lyapunov_tilde!r} vs {vt!r}")
            if idx > 0:
                required = coef * rec.move_sq
                slack = (vt_prev - vt) - required
                reports.append(LyapunovReport(
                    k=rec.k, V=rec.lyapunov, Vtilde=vt, coefficient=coef,
                    required=required, slack=slack,
                    violation=bool(slack < -slack_tol)))
            vt_prev = vt
    else:
        coef = constants.descent_coefficient_sync()
        for prev, rec in zip(recs[:-1], recs[1:]):
            required = coef * rec.move_sq
            slack = (prev.lyapunov - rec.lyapunov) - required
            reports.append(LyapunovReport(
                k=rec.k, V=rec.lyapunov, Vtilde=None, coefficient=coef,
                required=required, slack=slack,
                violation=bool(slack < -slack_tol)))
    return reports


def _vtilde_from_records(recs, idx: int, tau: int, n: int, eta: float) -> float:
    """Vtilde at record idx from the logged V and server move norms."""
    if tau == 0:
        return recs[idx].lyapunov
    total = 0.0
    for j in range(tau):  # j = 0 is the newest difference
        src = idx - j
        if src >= 1:
            total += (tau - j) * recs[src].server_move_sq
    return recs[idx].lyapunov + tau / (n * eta) * total


# ---------------------------------------------------------------------------
# rate certification


@dataclass(frozen=True)
class RateReport:
    ok: bool
    max_ratio: float       # sup over K of lhs/rhs
    worst_K: int
    n_traces: int
    expectation: bool      # True: empirical seed average vs in-expectation bound
    bound: str             # which bound was checked
    note: str = ""


def check_rate(traces, constants: TheoryConstants, f_star: float,
               bound: str = "sync") -> RateReport:
    """Average-gradient-mapping rate check against the stated bound.

    ``bound`` selects the RHS: "sync" uses C1 (plus the C2/C3 epsilon sums
    when the traces carry them), "async" uses C_hat, "relative" uses C_tilde.
    The LHS is the running average of ||G||^2, averaged across traces; a
    single trace is accepted but flagged as such in the report.
    """
    if isinstance(traces, (list, tuple)) is False:
        traces = [traces]
    if not traces:
        raise ValueError("need at least one trace")
    n = constants.n
    f_x0 = float(traces[0].header["f_x0"])
    for tr in traces:
        if abs(float(tr.header["f_x0"]) - f_x0) > 1e-12 * (1.0 + abs(f_x0)):
            raise ValueError("traces mix different initial points")
    delta_f = f_x0 - f_star
    if delta_f < -1e-12:
        raise ValueError(f"F(x0) = {f_x0!r} below the supplied F* = {f_star!r}")
    G = np.mean([[r.grad_map_sq for r in tr.records] for tr in traces], axis=0)
    rounds = len(G) - 1

    eps_sums = None
    if bound == "sync" and not constants.exact:
        rows = []
        for tr in traces:
            if any(r.state is None or "eps_sq_sum" not in r.state for r in tr.records):
                raise ValueError("inexact rate check needs eps history "
                                 "(full-state trace)")
            rows.append([r.state["eps_sq_sum"] for r in tr.records])
        eps_sums = np.mean(rows, axis=0)
        rounds -= 1  # the K-th bound consumes eps at index K+1

    if bound == "sync":
        lead = constants.C1
    elif bound == "async":
        if constants.C_hat is None:
            raise ValueError("async bound requested without async constants")
        lead = constants.C_hat
    elif bound == "relative":
        if constants.C_tilde is None:
            raise ValueError("relative bound requested without C_tilde")
        lead = constants.C_tilde
    else:
        raise ValueError(f"unknown bound kind {bound!r}")

    max_ratio, worst_K = 0.0, 0
    cum = 0.0
    for K in range(rounds + 1):
        cum += G[K]
        lhs = cum / (K + 1)
        rhs = lead * delta_f / (K + 1)
        if eps_sums is not None:
            eps_part = (constants.C2 * np.sum(eps_sums[:K + 1])
                        + constants.C3 * np.sum(eps_sums[1:K + 2]))
            rhs += eps_part / (n * (K + 1))
        ratio = 0.0 if rhs == 0 else lhs / rhs
        if rhs == 0 and lhs > 1e-18:
            ratio = float("inf")
        if ratio > max_ratio:
            max_ratio, worst_K = ratio, K
    return RateReport(
        ok=bool(max_ratio <= 1.0 + 1e-9), max_ratio=float(max_ratio),
        worst_K=worst_K, n_traces=len(traces),
        expectation=True, bound=bound,
        note="empirical seed average vs in-expectation bound"
             if len(traces) > 1 else
             "single realization vs in-expectation bound (indicative only)")


# ---------------------------------------------------------------------------
# report rendering


def render_report(header: dict, constants: TheoryConstants,
                  descent: Optional[List[LyapunovReport]] = None,
                  rate: Optional[RateReport] = None) -> str:
    """Human-readable certificate block written next to each trace."""
    lines = []
    lines.append(f"certificate report: {header.get('name', 'run')} "
                 f"algorithm={header.get('algorithm')} seed={header.get('seed')}")
    lines.append(
        f"  config: n={constants.n} L={constants.L:.6g} eta={constants.eta:.6g} "
        f"alpha={constants.alpha:.6g} p_hat={constants.p_hat:.6g} "
        f"gammas=({constants.gamma1:g},{constants.gamma2:g},{constants.gamma4:g}) "
        f"mode={'exact' if constants.exact else 'inexact'}")
    lines.append(
        f"  stepsize gate: D = {constants.D:.6g} (> 0 required); closed-form "
        f"bounds logged: alpha < {constants.alpha_max_closed_form:.6g}, "
        f"eta < {constants.eta_max_closed_form:.6g} (not authoritative)")
    lines.append(f"  sync constants: beta={constants.beta:.6g} C1={constants.C1:.6g} "
                 f"C2={constants.C2:.6g} C3={constants.C3:.6g}")
    if constants.rho is not None:
        lines.append(
            f"  async constants: tau={constants.tau} T={constants.T} "
            f"alpha_bar={constants.alpha_bar:.6g} eta_bar={constants.eta_bar:.6g} "
            f"rho={constants.rho:.6g} (strict {constants.rho_strict:.6g}) "
            f"D={constants.D_async:.6g} C_hat={constants.C_hat:.6g}")
    if constants.C_tilde is not None:
        lines.append(f"  relative constants: theta_hat={constants.theta_hat:.6g} "
                     f"C_hat={constants.C_hat_rel:.6g} "
                     f"eta_bar={constants.eta_bar_rel:.6g} "
                     f"C_tilde={constants.C_tilde:.6g}")
    if descent is not None:
        viol = [r for r in descent if r.violation]
        worst = min((r.slack for r in descent), default=float("nan"))
        lines.append(
            f"  sure descent (per-realization): {len(descent)} rounds checked, "
            f"{len(viol)} violations, worst slack {worst:.3e}, "
            f"tolerance {DESCENT_SLACK:g}")
        for r in viol[:10]:
            lines.append(f"    VIOLATION k={r.k}: slack {r.slack:.3e} "
                         f"(required {r.required:.3e})")
        if len(viol) > 10:
            lines.append(f"    ... {len(viol) - 10} more")
    else:
        lines.append("  sure descent: not checked "
                     "(inexact/heuristic run or full states absent)")
    if rate is not None:
        lines.append(
            f"  rate bound [{rate.bound}]: max ratio lhs/rhs = {rate.max_ratio:.4g} "
            f"at K={rate.worst_K} over {rate.n_traces} trace(s) -> "
            f"{'OK' if rate.ok else 'EXCEEDED'} ({rate.note})")
    ok = (descent is None or not any(r.violation for r in descent)) and \
         (rate is None or rate.ok)
    lines.append(f"  result: {'PASS' if ok else 'FAIL'}")
    return "\n".join(lines) + "\n"
