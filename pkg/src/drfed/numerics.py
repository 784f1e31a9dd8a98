"""Loss models, proximal operators and the gradient mapping.

Every function here is pure: arrays and dataclasses in, arrays out, any
randomness through an explicit ``numpy.random.Generator``. Loss models expose
``value``/``grad``/``lipschitz``; the quadratic additionally has a closed-form
prox which the certified solver uses whenever it applies.

The certified prox solves

    min_z  phi(z) = f(z) + ||z - y||^2 / (2 eta)

by gradient descent. For eta < 1/L the objective is (1/eta - L)-strongly
convex, so ``||grad phi(z)|| / (1/eta - L)`` is a computable upper bound on
``||z - prox(y)||``; that bound is the certificate we stop on and report.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

Array = np.ndarray

PROX_MAX_ITER = 100_000


class NonConvergenceError(RuntimeError):
    """Inner solve hit its iteration cap before meeting its target.

    Carries the best iterate and its certificate so callers can inspect how
    close the solve got.
    """

    def __init__(self, message: str, best: Optional[Array] = None,
                 cert: Optional[float] = None):
        super().__init__(message)
        self.best = best
        self.cert = cert


class DivergenceError(RuntimeError):
    """An iterate went non-finite; the message names the offending stepsize."""


# ---------------------------------------------------------------------------
# loss models


class QuadraticLoss:
    """f(x) = (scale/2) * ||x - center||^2.

    The workhorse for exactness tests: smooth with constant Hessian
    ``scale * I``, so L = scale and the prox has a closed form.
    ``scale = 0`` degenerates to a constant function (zero gradient), which
    some edge-case tests rely on.
    """

    kind = "quadratic"
    has_exact_prox = True

    def __init__(self, center: Array, scale: float = 1.0):
        if scale < 0:
            raise ValueError(f"curvature scale must be >= 0, got {scale}")
        self.center = np.asarray(center, dtype=float)
        self.scale = float(scale)

    @property
    def dim(self) -> int:
        return self.center.size

    def value(self, x: Array) -> float:
        d = x - self.center
        return 0.5 * self.scale * float(d @ d)

    def grad(self, x: Array, idx: Optional[Array] = None) -> Array:
        return self.scale * (x - self.center)

    def lipschitz(self) -> float:
        return self.scale

    def prox(self, y: Array, eta: float) -> Array:
        # argmin_z (s/2)||z-a||^2 + ||z-y||^2/(2 eta)  =  (y + eta s a)/(1 + eta s)
        s = self.scale
        return (y + eta * s * self.center) / (1.0 + eta * s)


class SoftmaxLoss:
    """Multiclass cross-entropy of a linear softmax model.

    Parameters are the flattened (dim, classes) weight matrix; a bias is
    modelled by appending a constant-one feature column upstream. ``lipschitz``
    returns the inflated power-iteration bound 1.05 * (1/2) lambda_max(X^T X/m),
    valid because diag(p) - p p^T <= I/2 for any probability vector p.
    """

    kind = "softmax"
    has_exact_prox = False

    def __init__(self, X: Array, y: Array, classes: int):
        self.X = np.asarray(X, dtype=float)
        self.y = np.asarray(y, dtype=int)
        if self.X.ndim != 2 or self.y.ndim != 1 or len(self.X) != len(self.y):
            raise ValueError("X must be (m, d) with matching label vector")
        if classes < 2:
            raise ValueError("need at least two classes")
        if self.y.min() < 0 or self.y.max() >= classes:
            raise ValueError("labels out of range")
        self.classes = int(classes)
        self._lip: Optional[float] = None

    @property
    def n_samples(self) -> int:
        return len(self.y)

    @property
    def dim(self) -> int:
        return self.X.shape[1] * self.classes

    def _logits(self, params: Array, X: Array) -> Array:
        W = params.reshape(self.X.shape[1], self.classes)
        return X @ W

    def value(self, params: Array, idx: Optional[Array] = None) -> float:
        X = self.X if idx is None else self.X[idx]
        y = self.y if idx is None else self.y[idx]
        Z = self._logits(params, X)
        Z = Z - Z.max(axis=1, keepdims=True)
        lse = np.log(np.exp(Z).sum(axis=1))
        return float(np.mean(lse - Z[np.arange(len(y)), y]))

    def grad(self, params: Array, idx: Optional[Array] = None) -> Array:
        X = self.X if idx is None else self.X[idx]
        y = self.y if idx is None else self.y[idx]
        Z = self._logits(params, X)
        Z = Z - Z.max(axis=1, keepdims=True)
        P = np.exp(Z)
        P /= P.sum(axis=1, keepdims=True)
        P[np.arange(len(y)), y] -= 1.0
        return (X.T @ P).ravel() / len(y)

    def lipschitz(self) -> float:
        if self._lip is None:
            lam = _lambda_max_gram(self.X)
            self._lip = 0.5 * lam * 1.05
        return self._lip

    def accuracy(self, params: Array) -> float:
        pred = self._logits(params, self.X).argmax(axis=1)
        return float(np.mean(pred == self.y))


class TinyMLPLoss:
    """One-hidden-layer tanh network with cross-entropy loss.

    Nonconvex, so no computable smoothness constant: the caller supplies
    ``lipschitz_hint`` and certificates are off for runs using this model.
    """

    kind = "tiny-mlp"
    has_exact_prox = False

    def __init__(self, X: Array, y: Array, classes: int, hidden: int = 16,
                 lipschitz_hint: float = 1.0):
        self.X = np.asarray(X, dtype=float)
        self.y = np.asarray(y, dtype=int)
        self.classes = int(classes)
        self.hidden = int(hidden)
        if lipschitz_hint <= 0:
            raise ValueError("lipschitz_hint must be positive")
        self.lipschitz_hint = float(lipschitz_hint)
        d = self.X.shape[1]
        self._shapes = [(d, hidden), (hidden,), (hidden, classes), (classes,)]

    @property
    def n_samples(self) -> int:
        return len(self.y)

    @property
    def dim(self) -> int:
        return sum(int(np.prod(s)) for s in self._shapes)

    def _unpack(self, params: Array):
        out, k = [], 0
        for s in self._shapes:
            n = int(np.prod(s))
            out.append(params[k:k + n].reshape(s))
            k += n
        return out

    def _forward(self, params: Array, X: Array):
        W1, b1, W2, b2 = self._unpack(params)
        H = np.tanh(X @ W1 + b1)
        return H, H @ W2 + b2

    def value(self, params: Array, idx: Optional[Array] = None) -> float:
        X = self.X if idx is None else self.X[idx]
        y = self.y if idx is None else self.y[idx]
        _, Z = self._forward(params, X)
        Z = Z - Z.max(axis=1, keepdims=True)
        lse = np.log(np.exp(Z).sum(axis=1))
        return float(np.mean(lse - Z[np.arange(len(y)), y]))

    def grad(self, params: Array, idx: Optional[Array] = None) -> Array:
        X = self.X if idx is None else self.X[idx]
        y = self.y if idx is None else self.y[idx]
        W1, b1, W2, b2 = self._unpack(params)
        H = np.tanh(X @ W1 + b1)
        Z = H @ W2 + b2
        Z = Z - Z.max(axis=1, keepdims=True)
        P = np.exp(Z)
        P /= P.sum(axis=1, keepdims=True)
        P[np.arange(len(y)), y] -= 1.0
        P /= len(y)
        gW2 = H.T @ P
        gb2 = P.sum(axis=0)
        dH = (P @ W2.T) * (1.0 - H * H)
        gW1 = X.T @ dH
        gb1 = dH.sum(axis=0)
        return np.concatenate([gW1.ravel(), gb1, gW2.ravel(), gb2])

    def lipschitz(self) -> float:
        return self.lipschitz_hint

    def accuracy(self, params: Array) -> float:
        _, Z = self._forward(params, self.X)
        return float(np.mean(Z.argmax(axis=1) == self.y))


def _lambda_max_gram(X: Array, iters: int = 200) -> float:
    """Top eigenvalue of X^T X / m by power iteration, deterministic start."""
    m, d = X.shape
    v = np.ones(d) + 1e-3 * np.arange(d)  # ramp breaks symmetry, keeps determinism
    v /= np.linalg.norm(v)
    for _ in range(iters):
        w = X.T @ (X @ v) / m
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        v = w / nw
    return float(v @ (X.T @ (X @ v)) / m)


def lipschitz_bound(model) -> float:
    """Smoothness constant the certificates use; upper bound by construction."""
    return model.lipschitz()


# ---------------------------------------------------------------------------
# regularizer and its prox


@dataclass(frozen=True)
class Regularizer:
    """g(x): either identically zero or weight * ||x||_1."""

    kind: str = "zero"
    weight: float = 0.0

    def __post_init__(self):
        if self.kind not in ("zero", "l1"):
            raise ValueError(f"unknown regularizer kind {self.kind!r}")
        if self.weight < 0:
            raise ValueError("regularizer weight must be >= 0")
        if self.kind == "zero" and self.weight != 0.0:
            raise ValueError("zero regularizer cannot carry a weight")

    def value(self, x: Array) -> float:
        if self.kind == "zero":
            return 0.0
        return self.weight * float(np.abs(x).sum())


def soft_threshold(y: Array, t: float) -> Array:
    return np.sign(y) * np.maximum(np.abs(y) - t, 0.0)


def prox_g(reg: Regularizer, y: Array, eta: float) -> Array:
    """prox_{eta g}(y); exact for both supported kinds."""
    if eta <= 0:
        raise ValueError(f"eta must be positive, got {eta}")
    if reg.kind == "zero":
        return np.array(y, dtype=float, copy=True)
    return soft_threshold(np.asarray(y, dtype=float), eta * reg.weight)


# ---------------------------------------------------------------------------
# prox of the smooth losses


@dataclass(frozen=True)
class ProxResult:
    """Outcome of one prox evaluation.

    ``cert`` is a certified upper bound on the distance to the true prox
    (0.0 for closed-form solves, None when the solve was heuristic and no
    bound exists).
    """

    point: Array
    cert: Optional[float]
    iters: int
    mode: str


def _check_certificate_args(model, eta: float) -> float:
    if eta <= 0:
        raise ValueError(f"eta must be positive, got {eta}")
    L = model.lipschitz()
    if L > 0 and eta >= 1.0 / L:
        # eta >= 1/L voids the mu = 1/eta - L certificate; refuse. The
        # closed-form branch is exempt (a convex quadratic subproblem stays
        # strongly convex for any eta > 0).
        raise ValueError(
            f"certified prox needs eta < 1/L = {1.0 / L:.6g}, got eta = {eta:.6g}")
    return L


def prox_f_certified(model, y: Array, eta: float, eps: float,
                     max_iter: int = PROX_MAX_ITER, start: Optional[Array] = None,
                     force_iterative: bool = False) -> ProxResult:
    """Solve prox_{eta f}(y) to certified accuracy eps.

    Uses the closed form when the model has one (certificate 0.0), otherwise
    gradient descent on phi with step 1/(L + 1/eta), stopping as soon as
    ``||grad phi(z)|| / (1/eta - L) <= eps``. ``force_iterative`` bypasses the
    closed form so tests can exercise genuinely inexact solves.
    """
    if eps < 0:
        raise ValueError("eps must be >= 0")
    if eta <= 0:
        raise ValueError(f"eta must be positive, got {eta}")
    y = np.asarray(y, dtype=float)
    if model.has_exact_prox and not force_iterative:
        return ProxResult(model.prox(y, eta), 0.0, 0, "exact")
    L = _check_certificate_args(model, eta)
    mu = 1.0 / eta - L
    step = 1.0 / (L + 1.0 / eta)
    z = np.array(y if start is None else start, dtype=float, copy=True)
    for it in range(max_iter + 1):
        g = model.grad(z) + (z - y) / eta
        cert = float(np.linalg.norm(g)) / mu
        if cert <= eps:
            return ProxResult(z, cert, it, "certified")
        z = z - step * g
    raise NonConvergenceError(
        f"prox solve: {max_iter} iterations, certificate {cert:.3e} > eps {eps:.3e}",
        best=z, cert=cert)


def prox_f_relative(model, y: Array, eta: float, theta: float, x_prev: Array,
                    max_iter: int = PROX_MAX_ITER) -> ProxResult:
    """Certified prox under the relative criterion
    ||z - prox(y)||^2 <= theta * ||z - x_prev||^2.

    The criterion couples target and iterate, so we warm-start at x_prev and
    re-check the certified bound against sqrt(theta)*||z - x_prev|| after
    every step, stopping at first satisfaction.
    """
    if theta < 0:
        raise ValueError("theta must be >= 0")
    L = _check_certificate_args(model, eta)
    y = np.asarray(y, dtype=float)
    mu = 1.0 / eta - L
    step = 1.0 / (L + 1.0 / eta)
    sq = np.sqrt(theta)
    z = np.array(x_prev, dtype=float, copy=True)
    # When x_prev already is the prox both sides vanish and float residue in
    # the gradient would spin forever; a machine-noise floor unsticks that
    # case without weakening the returned bound.
    floor = 32 * np.finfo(float).eps * (
        1.0 + float(np.linalg.norm(x_prev)) + float(np.linalg.norm(y)))
    for it in range(max_iter + 1):
        g = model.grad(z) + (z - y) / eta
        cert = float(np.linalg.norm(g)) / mu
        if cert <= max(sq * float(np.linalg.norm(z - x_prev)), floor):
            return ProxResult(z, cert, it, "relative")
        z = z - step * g
    raise NonConvergenceError(
        f"relative prox solve: {max_iter} iterations without satisfying "
        f"cert <= sqrt({theta:.3e})*||z - x_prev||", best=z, cert=cert)


def prox_f_heuristic(model, y: Array, eta: float, epochs: int, lr: float,
                     batch_size: int, rng: np.random.Generator) -> ProxResult:
    """Uncertified prox: fixed budget of minibatch SGD on phi, started at y.

    This is the mode experiment-scale stepsizes run in (any eta > 0 accepted);
    the result carries no accuracy bound, cert is None.
    """
    if eta <= 0:
        raise ValueError(f"eta must be positive, got {eta}")
    if epochs < 0 or lr <= 0 or batch_size < 1:
        raise ValueError("need epochs >= 0, lr > 0, batch_size >= 1")
    y = np.asarray(y, dtype=float)
    z = np.array(y, copy=True)
    m = getattr(model, "n_samples", 1)
    steps = 0
    for _ in range(epochs):
        if m <= 1:
            batches = [None]
        else:
            order = rng.permutation(m)
            batches = [order[s:s + batch_size] for s in range(0, m, batch_size)]
        for idx in batches:
            g = model.grad(z, idx) + (z - y) / eta
            z = z - lr * g
            steps += 1
            if not np.all(np.isfinite(z)):
                raise DivergenceError(
                    f"heuristic prox diverged at lr={lr} (step {steps})")
    return ProxResult(z, None, steps, "heuristic")


# ---------------------------------------------------------------------------
# problem container and gradient mapping


@dataclass(frozen=True)
class Problem:
    """n user losses plus the shared regularizer."""

    users: tuple
    reg: Regularizer = Regularizer()

    def __post_init__(self):
        if len(self.users) == 0:
            raise ValueError("need at least one user")
        dims = {u.dim for u in self.users}
        if len(dims) != 1:
            raise ValueError(f"users disagree on parameter dimension: {sorted(dims)}")

    @property
    def n(self) -> int:
        return len(self.users)

    @property
    def dim(self) -> int:
        return self.users[0].dim

    def lipschitz(self) -> float:
        return max(u.lipschitz() for u in self.users)

    def mean_grad(self, x: Array) -> Array:
        g = np.zeros(self.dim)
        for u in self.users:
            g += u.grad(x)
        return g / self.n

    def objective(self, x: Array) -> float:
        return sum(u.value(x) for u in self.users) / self.n + self.reg.value(x)


def grad_mapping(problem: Problem, xbar: Array, eta: float) -> Array:
    """G_eta(x) = (x - prox_{eta g}(x - eta grad f(x))) / eta.

    The stationarity measure every rate statement is about; reduces to the
    mean gradient when g = 0.
    """
    if eta <= 0:
        raise ValueError(f"eta must be positive, got {eta}")
    inner = xbar - eta * problem.mean_grad(xbar)
    return (xbar - prox_g(problem.reg, inner, eta)) / eta


def quadratic_fstar(problem: Problem) -> float:
    """Closed-form minimum of F for all-quadratic problems (zero or l1 reg).

    With f_i = (s/2)||x - a_i||^2 the smooth part is a single quadratic in x;
    the l1 minimizer is coordinatewise soft-thresholding of the weighted mean.
    """
    if any(u.kind != "quadratic" for u in problem.users):
        raise ValueError("closed-form F* only for all-quadratic problems")
    scales = np.array([u.scale for u in problem.users])
    if np.any(scales != scales[0]):
        raise ValueError("closed-form F* needs a common curvature scale")
    s = float(scales[0])
    A = np.stack([u.center for u in problem.users])
    abar = A.mean(axis=0)
    const = 0.5 * s * float(np.mean(np.sum(A * A, axis=1)))
    if s == 0.0:
        return 0.0  # constant smooth part, reg minimized at the origin
    if problem.reg.kind == "zero":
        xstar = abar
    else:
        xstar = soft_threshold(abar, problem.reg.weight / s)
    smooth = 0.5 * s * float(xstar @ xstar) - s * float(abar @ xstar) + const
    return smooth + problem.reg.value(xstar)
