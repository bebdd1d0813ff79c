"""Fixed-step Euler and midpoint integration of ``dx/dt = f(x, t)`` on [0, 1]."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

import numpy as np

__all__ = [
    "Method",
    "SolverConfig",
    "SolverRun",
    "NonFiniteStateError",
    "solve",
    "nfe_per_step",
    "steps_for_nfe",
    "OrderEstimate",
    "empirical_order",
    "write_trajectory_csv",
]

Field = Callable[[np.ndarray, float], np.ndarray]


class Method(str, Enum):
    EULER = "euler"
    MIDPOINT = "midpoint"


class NonFiniteStateError(FloatingPointError):
    def __init__(self, step: int):
        self.step = step
        super().__init__(f"non-finite state produced at step {step}")


@dataclass(frozen=True)
class SolverConfig:
    method: Method = Method.MIDPOINT
    steps: int = 3
    record_trajectory: bool = False

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        if int(self.steps) < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")

    @property
    def nfe(self) -> int:
        return self.steps * nfe_per_step(self.method)


@dataclass
class SolverRun:
    endpoint: np.ndarray
    nfe: int
    trajectory: list | None = field(default=None)


def nfe_per_step(method) -> int:
    return 2 if Method(method) is Method.MIDPOINT else 1


def steps_for_nfe(method, nfe: int) -> int:
    """Step count that spends exactly ``nfe`` field evaluations."""
    per = nfe_per_step(method)
    if nfe < per or nfe % per:
        raise ValueError(f"NFE={nfe} is not reachable with the {Method(method).value} method")
    return nfe // per


def solve(field: Field, x0, cfg: SolverConfig = SolverConfig()) -> SolverRun:
    """Integrate from t=0 to t=1 with ``cfg.steps`` uniform steps.

    Euler: ``x <- x + h f(x, t)``.
    Midpoint: ``x <- x + h f(x + h/2 f(x, t), t + h/2)``.
    """
    x = np.array(x0, copy=True)
    h = 1.0 / cfg.steps
    nfe = 0
    traj = [(0.0, x.copy())] if cfg.record_trajectory else None
    for k in range(cfg.steps):
        t = k * h
        k1 = field(x, t)
        nfe += 1
        if cfg.method is Method.MIDPOINT:
            k2 = field(x + 0.5 * h * k1, t + 0.5 * h)
            nfe += 1
            x = x + h * k2
        else:
            x = x + h * k1
        if not np.all(np.isfinite(x)):
            raise NonFiniteStateError(k)
        if traj is not None:
            traj.append(((k + 1) / cfg.steps, x.copy()))
    if traj is not None:
        traj[-1] = (1.0, x)
    return SolverRun(x, nfe, traj)


@dataclass(frozen=True)
class OrderEstimate:
    order: float | None
    errors: tuple
    steps: tuple
    exact: bool


def empirical_order(field: Field, x0, method, exact_endpoint, steps: int = 16) -> OrderEstimate:
    """Convergence order from one step doubling: ``log2(err(n) / err(2n))``.

    When both errors vanish the integration is exact and ``order`` is None.
    """
    errs = []
    for n in (steps, 2 * steps):
        run = solve(field, x0, SolverConfig(method, n))
        errs.append(float(np.max(np.abs(np.asarray(run.endpoint) - exact_endpoint))))
    tol = 64 * np.finfo(np.float64).eps * max(1.0, float(np.max(np.abs(exact_endpoint))))
    if errs[0] <= tol and errs[1] <= tol:
        return OrderEstimate(None, tuple(errs), (steps, 2 * steps), True)
    return OrderEstimate(math.log2(errs[0] / errs[1]), tuple(errs), (steps, 2 * steps), False)


def write_trajectory_csv(path, run: SolverRun) -> None:
    """Columns ``t, x0, x1, ...`` over the flattened (real) state."""
    if run.trajectory is None:
        raise ValueError("run has no recorded trajectory")
    first = np.asarray(run.trajectory[0][1])
    cols = first.size * (2 if np.iscomplexobj(first) else 1)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t"] + [f"x{i}" for i in range(cols)])
        for t, state in run.trajectory:
            s = np.asarray(state).ravel()
            if np.iscomplexobj(s):
                s = np.concatenate([s.real, s.imag])
            writer.writerow([repr(float(t))] + [repr(float(v)) for v in s])
