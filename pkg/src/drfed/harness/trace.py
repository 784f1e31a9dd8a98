"""Trace format: one JSON line per round/event, header line first.

Floats are rendered with 17 significant digits so a rerun of the same seed
produces a byte-identical file. Records always carry the same fields in the
same order; runs started with the full-state flag additionally carry the move
norms and state snapshots that post-hoc descent certification needs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields
from typing import Any, List, Optional

import numpy as np

SCALAR_BYTES = 8  # float64 payloads


def bytes_per_round(participants: int, dim: int, scalar_bytes: int = SCALAR_BYTES) -> int:
    """Communication cost of one round: each participant downloads the server
    model and uploads one vector of the same size."""
    if participants < 0 or dim < 0 or scalar_bytes < 0:
        raise ValueError("byte accounting takes nonnegative sizes")
    return participants * 2 * dim * scalar_bytes


@dataclass
class TraceRecord:
    k: int
    sim_time: Optional[float]        # None for synchronous algorithms
    active: List[int]                # sampled set (sync) or [user] (async)
    objective: float                 # F(xbar)
    train_acc: Optional[float]       # classification models only
    grad_map_sq: float               # ||G_eta(xbar)||^2
    lyapunov: Optional[float]        # V
    lyapunov_tilde: Optional[float]  # async merit value, else None
    bytes: int                       # cumulative
    delay: Optional[int]             # realized read delay (async)
    prox_mode: str
    achieved_acc: Optional[float]    # certified accuracy actually reached
    resamples: int = 0               # Bernoulli empty-sample redraws
    stalls: int = 0                  # async delay-cap stalls before this event
    # full-state extras (None unless the run traced full states)
    move_sq: Optional[float] = None        # sum_{i in S} ||x_i^{k+1} - x_i^k||^2
    server_move_sq: Optional[float] = None  # ||xbar^{k+1} - xbar^k||^2
    state: Optional[dict] = None


_FIELD_ORDER = [f.name for f in fields(TraceRecord)]


class Trace:
    """Header plus the record list; optionally holds state snapshots."""

    def __init__(self, header: dict):
        self.header = dict(header)
        self.records: List[TraceRecord] = []

    @property
    def full_state(self) -> bool:
        return bool(self.header.get("full_state", False))

    def append(self, rec: TraceRecord):
        self.records.append(rec)

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i):
        return self.records[i]

    # -- serialization ------------------------------------------------------

    def write(self, path):
        with open(path, "w") as fh:
            fh.write(_dumps({"header": self.header}) + "\n")
            for rec in self.records:
                row = {name: getattr(rec, name) for name in _FIELD_ORDER}
                if not self.full_state:
                    row.pop("move_sq"), row.pop("server_move_sq"), row.pop("state")
                fh.write(_dumps(row) + "\n")

    @staticmethod
    def read(path) -> "Trace":
        with open(path) as fh:
            header = json.loads(fh.readline())["header"]
            tr = Trace(header)
            for line in fh:
                row = json.loads(line)
                for name in ("move_sq", "server_move_sq", "state"):
                    row.setdefault(name, None)
                tr.append(TraceRecord(**row))
        return tr


def _dumps(obj) -> str:
    """JSON encoder with floats pinned to format(x, '.17g').

    The stdlib encoder offers no hook for float formatting, and 17 significant
    digits is what makes traces byte-reproducible, so the encoding is done by
    hand for the handful of shapes records contain.
    """
    if obj is None:
        return "null"
    if obj is True:
        return "true"
    if obj is False:
        return "false"
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        if f != f or f in (float("inf"), float("-inf")):
            return "null"  # JSON has no NaN/inf; abort records carry a reason
        return format(f, ".17g")
    if isinstance(obj, np.ndarray):
        return _dumps(obj.tolist())
    if isinstance(obj, (list, tuple)):
        return "[" + ",".join(_dumps(v) for v in obj) + "]"
    if isinstance(obj, dict):
        return "{" + ",".join(
            json.dumps(str(k)) + ":" + _dumps(v) for k, v in obj.items()) + "}"
    raise TypeError(f"cannot serialize {type(obj).__name__} into a trace")
