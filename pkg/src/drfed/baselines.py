"""FedAvg and FedProx rounds for head-to-head comparisons.

Both baselines share one local solver: epochs of minibatch SGD on
f_i(z) + (mu/2)||z - global||^2, with mu = 0 recovering plain FedAvg.
The mu term is added behind a branch so the mu = 0 path executes the
identical float operations as FedAvg, making the reduction exact rather
than merely close. Aggregation is the unweighted mean over sampled users.

The classical alpha = 2 reflection baseline needs no code of its own: run
the Douglas-Rachford solver with alpha = 2, full participation, zero
regularizer and validation off.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from drfed.feddr import SamplingScheme, sample_users
from drfed.harness.trace import Trace, TraceRecord, bytes_per_round
from drfed.numerics import DivergenceError, Problem, grad_mapping

_TAG_ROUND = 41


@dataclass(frozen=True)
class BaselineConfig:
    """Local-solver budget and participation for a baseline run."""

    algorithm: str = "fedavg"
    epochs: int = 1
    lr: float = 0.05
    batch_size: int = 32
    mu: float = 0.0
    sampling: SamplingScheme = SamplingScheme()

    def __post_init__(self):
        if self.algorithm not in ("fedavg", "fedprox"):
            raise ValueError(f"unknown baseline {self.algorithm!r}")
        if self.algorithm == "fedavg" and self.mu != 0.0:
            raise ValueError("fedavg has no proximal weight; use fedprox")
        if self.mu < 0:
            raise ValueError("mu must be nonnegative")
        if self.epochs < 0 or self.lr <= 0 or self.batch_size < 1:
            raise ValueError("need epochs >= 0, lr > 0, batch_size >= 1")


def local_sgd(model, start: np.ndarray, anchor: np.ndarray, mu: float,
              epochs: int, lr: float, batch_size: int,
              rng: np.random.Generator) -> np.ndarray:
    """Minibatch SGD on f(z) + (mu/2)||z - anchor||^2 from ``start``.

    Shuffling consumes the generator the same way for every mu, so FedProx
    and FedAvg trajectories are comparable draw for draw.
    """
    z = np.array(start, dtype=float, copy=True)
    m = getattr(model, "n_samples", 1)
    step = 0
    for _ in range(epochs):
        if m <= 1:
            batches: List = [None]
        else:
            order = rng.permutation(m)
            batches = [order[s:s + batch_size] for s in range(0, m, batch_size)]
        for idx in batches:
            g = model.grad(z, idx)
            if mu:
                g = g + mu * (z - anchor)
            z = z - lr * g
            step += 1
            if not np.all(np.isfinite(z)):
                raise DivergenceError(
                    f"local SGD diverged at lr={lr} (step {step})")
    return z


def fedprox_round(x: np.ndarray, users: Sequence, cfg: BaselineConfig,
                  rng: np.random.Generator, k: int = 0) -> Tuple[np.ndarray, List[int]]:
    """One round: sample, run anchored local SGD, average the returns.

    Returns (new global model, sampled users). FedAvg is this with mu = 0.
    """
    active, _ = sample_users(cfg.sampling, len(users), k, rng)
    locals_ = [local_sgd(users[i], x, x, cfg.mu, cfg.epochs, cfg.lr,
                         cfg.batch_size, rng) for i in active]
    return np.mean(locals_, axis=0), active


def fedavg_round(x: np.ndarray, users: Sequence, cfg: BaselineConfig,
                 rng: np.random.Generator, k: int = 0) -> Tuple[np.ndarray, List[int]]:
    if cfg.mu != 0.0:
        raise ValueError("fedavg_round needs mu = 0")
    return fedprox_round(x, users, cfg, rng, k)


def run_baseline(problem: Problem, cfg: BaselineConfig, rounds: int,
                 seed: int = 0, x0: Optional[np.ndarray] = None,
                 name: Optional[str] = None) -> Trace:
    """Drive a baseline and emit a trace with the shared byte accounting.

    These baselines handle the non-composite problem only (zero
    regularizer); the gradient-mapping column then reduces to the plain
    mean-gradient norm, comparable across algorithms.
    """
    if problem.reg.kind != "zero":
        raise ValueError("baselines run the non-composite problem; "
                         "drop the regularizer for comparisons")
    if rounds < 0 or seed < 0:
        raise ValueError("need rounds >= 0 and seed >= 0")
    x = np.zeros(problem.dim) if x0 is None else np.array(x0, dtype=float)
    if x.shape != (problem.dim,):
        raise ValueError(f"x0 has shape {x.shape}, problem dim is {problem.dim}")
    trace = Trace({
        "name": name or cfg.algorithm, "algorithm": cfg.algorithm,
        "seed": seed, "n": problem.n, "dim": problem.dim,
        "rounds": rounds, "epochs": cfg.epochs, "lr": cfg.lr,
        "mu": cfg.mu, "sampling": cfg.sampling.kind,
        "f_x0": float(problem.objective(x)), "L": problem.lipschitz(),
        "full_state": False,
    })

    total_bytes = 0

    def snapshot(k: int, active: List[int]) -> TraceRecord:
        accs = []
        for u in problem.users:
            fn = getattr(u, "accuracy", None)
            if fn is None:
                accs = None
                break
            accs.append(fn(x))
        return TraceRecord(
            k=k, sim_time=None, active=active,
            objective=float(problem.objective(x)),
            train_acc=None if accs is None else float(np.mean(accs)),
            grad_map_sq=float(np.sum(grad_mapping(problem, x, 1.0) ** 2)),
            lyapunov=None, lyapunov_tilde=None, bytes=total_bytes,
            delay=None, prox_mode=cfg.algorithm, achieved_acc=None)

    rec0 = snapshot(0, [])
    trace.append(rec0)
    if not math.isfinite(rec0.objective):
        trace.header["aborted"] = "nonfinite objective at init"
        return trace
    for k in range(rounds):
        rng = np.random.default_rng([seed, _TAG_ROUND, k])
        x, active = fedprox_round(x, problem.users, cfg, rng, k)
        total_bytes += bytes_per_round(len(active), problem.dim)
        rec = snapshot(k + 1, active)
        trace.append(rec)
        if not math.isfinite(rec.objective):
            trace.header["aborted"] = f"nonfinite objective after round {k}"
            break
    return trace
