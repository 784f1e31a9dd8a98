"""Heterogeneous synthetic classification data.

Two knobs steer the heterogeneity: ``r`` spreads the per-user *models*
(each user's ground-truth softmax weights are drawn around a user-specific
mean) and ``s`` spreads the per-user *feature* distributions. ``(0, 0)``
still gives distinct users; the ``iid`` preset is what makes everyone share
one model and one feature distribution.

Per user i, with variances r and s:

    u_i ~ N(0, r),  b_i ~ N(0, r)
    W_i entries ~ N(u_i, 1),  bias_i entries ~ N(b_i, 1)
    B_i ~ N(0, s),  v_i entries ~ N(B_i, 1)
    features ~ N(v_i, Sigma),  Sigma_jj = j^{-1.2}
    label = argmax(W_i^T x + bias_i)

Sample counts are uniform over ``samples`` (inclusive). Each user's data is
split 80/20 train/test by a seeded permutation. Everything downstream of a
(seed, n, dim, classes, ...) tuple is deterministic.
"""

from dataclasses import dataclass
from typing import Optional, Tuple

import json

import numpy as np

from ..numerics import Problem, Regularizer, SoftmaxLoss, TinyMLPLoss

_TAG_DATA = 53

TRAIN_FRACTION = 0.8


@dataclass(frozen=True)
class UserData:
    """One user's split. Features are raw (no bias column yet)."""

    train_X: np.ndarray
    train_y: np.ndarray
    test_X: np.ndarray
    test_y: np.ndarray


@dataclass(frozen=True)
class SyntheticDataset:
    users: Tuple[UserData, ...]
    dim: int
    classes: int
    r: float
    s: float
    iid: bool
    seed: int

    @property
    def n(self) -> int:
        return len(self.users)

    def problem(self, reg: Regularizer = Regularizer(),
                model: str = "softmax", hidden: int = 16,
                lipschitz_hint: float = 1.0) -> Problem:
        """Wrap the train shares as losses. A constant-one column is
        appended so the linear model carries a bias term."""
        losses = []
        for u in self.users:
            X = _with_bias(u.train_X)
            if model == "softmax":
                losses.append(SoftmaxLoss(X, u.train_y, self.classes))
            elif model == "tiny-mlp":
                losses.append(TinyMLPLoss(X, u.train_y, self.classes,
                                          hidden=hidden,
                                          lipschitz_hint=lipschitz_hint))
            else:
                raise ValueError(f"unknown model kind {model!r}")
        return Problem(users=tuple(losses), reg=reg)

    def train_accuracy(self, params: np.ndarray) -> float:
        return _pooled_accuracy([(u.train_X, u.train_y) for u in self.users],
                                params, self.classes)

    def test_accuracy(self, params: np.ndarray) -> float:
        return _pooled_accuracy([(u.test_X, u.test_y) for u in self.users],
                                params, self.classes)

    def save(self, path) -> None:
        arrays = {}
        for i, u in enumerate(self.users):
            arrays[f"train_X_{i}"] = u.train_X
            arrays[f"train_y_{i}"] = u.train_y
            arrays[f"test_X_{i}"] = u.test_X
            arrays[f"test_y_{i}"] = u.test_y
        meta = {"n": self.n, "dim": self.dim, "classes": self.classes,
                "r": self.r, "s": self.s, "iid": self.iid, "seed": self.seed}
        np.savez(path, meta=json.dumps(meta, sort_keys=True), **arrays)


def load_dataset(path) -> SyntheticDataset:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        users = tuple(
            UserData(z[f"train_X_{i}"], z[f"train_y_{i}"],
                     z[f"test_X_{i}"], z[f"test_y_{i}"])
            for i in range(meta["n"]))
    return SyntheticDataset(users=users, dim=meta["dim"],
                            classes=meta["classes"], r=meta["r"],
                            s=meta["s"], iid=meta["iid"], seed=meta["seed"])


def _with_bias(X: np.ndarray) -> np.ndarray:
    return np.hstack([X, np.ones((len(X), 1))])


def _pooled_accuracy(shares, params: np.ndarray, classes: int) -> float:
    hits = total = 0
    for X, y in shares:
        if len(y) == 0:
            continue
        Z = _with_bias(X) @ np.asarray(params).reshape(-1, classes)
        hits += int(np.sum(Z.argmax(axis=1) == y))
        total += len(y)
    return hits / total if total else 0.0


def _user_model(rng: np.random.Generator, dim: int, classes: int, r: float):
    u = rng.normal(0.0, np.sqrt(r))
    b = rng.normal(0.0, np.sqrt(r))
    W = rng.normal(u, 1.0, size=(dim, classes))
    bias = rng.normal(b, 1.0, size=classes)
    return W, bias


def _feature_mean(rng: np.random.Generator, dim: int, s: float) -> np.ndarray:
    B = rng.normal(0.0, np.sqrt(s))
    return rng.normal(B, 1.0, size=dim)


def gen_synthetic(n: int, dim: int, classes: int, r: float = 1.0,
                  s: float = 1.0, samples: Tuple[int, int] = (50, 150),
                  seed: int = 0, iid: bool = False) -> SyntheticDataset:
    """Draw the full federation. ``iid=True`` ignores r and s for the
    shared pieces: one (W, bias) and one feature mean serve every user."""
    if n < 1 or dim < 1 or classes < 2:
        raise ValueError("need n >= 1, dim >= 1, classes >= 2")
    if r < 0 or s < 0:
        raise ValueError("r and s are variances, must be >= 0")
    lo, hi = int(samples[0]), int(samples[1])
    if not (1 <= lo <= hi):
        raise ValueError(f"bad samples-per-user range {samples}")

    sigma = np.sqrt(np.arange(1, dim + 1, dtype=float) ** -1.2)
    if iid:
        shared = np.random.default_rng([seed, _TAG_DATA])
        W_shared, bias_shared = _user_model(shared, dim, classes, r)
        v_shared = _feature_mean(shared, dim, s)

    users = []
    for i in range(n):
        rng = np.random.default_rng([seed, _TAG_DATA, i])
        m = int(rng.integers(lo, hi + 1))
        if iid:
            W, bias, v = W_shared, bias_shared, v_shared
        else:
            W, bias = _user_model(rng, dim, classes, r)
            v = _feature_mean(rng, dim, s)
        X = v + rng.normal(size=(m, dim)) * sigma
        y = np.argmax(X @ W + bias, axis=1)
        n_train = max(1, int(round(TRAIN_FRACTION * m)))
        if n_train == m and m > 1:
            n_train = m - 1
        perm = rng.permutation(m)
        tr, te = perm[:n_train], perm[n_train:]
        users.append(UserData(X[tr], y[tr], X[te], y[te]))
    return SyntheticDataset(users=tuple(users), dim=dim, classes=classes,
                            r=float(r), s=float(s), iid=bool(iid),
                            seed=seed)
