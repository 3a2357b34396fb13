"""Integrators for ``dz/dt = v(z, t)`` on ``t in [0, 1]``.

Fixed-step Euler and classical RK4, plus the Dormand-Prince 5(4) pair, which
can run adaptively (embedded error estimate, FSAL) or with a fixed step.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

Field = Callable[[np.ndarray, float], np.ndarray]

METHODS = ("euler", "rk4", "dopri45")

# Dormand & Prince (1980), 5th-order weights with the 4th-order embedded pair
_C = (0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0)
_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
_B = (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0)
_B_HAT = (5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40)
_E = tuple(b - bh for b, bh in zip(_B, _B_HAT))


class SolverError(RuntimeError):
    pass


class MaxStepsExceeded(SolverError):
    pass


class NonFiniteState(SolverError, FloatingPointError):
    pass


@dataclass
class SolveConfig:
    method: str = "dopri45"
    steps: int = 50
    rtol: float = 1e-5
    atol: float = 1e-5
    initial_dt: float = 0.05
    max_steps: int = 10000
    adaptive: bool = True
    record_trajectory: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.steps < 1 or self.max_steps < 1:
            raise ValueError("steps and max_steps must be >= 1")
        if self.rtol <= 0 or self.atol <= 0 or self.initial_dt <= 0:
            raise ValueError("rtol, atol and initial_dt must be positive")


@dataclass
class SolveReport:
    z: np.ndarray
    t_final: float
    accepted: int
    rejected: int
    evaluations: int
    trajectory: list[tuple[float, np.ndarray]] = field(default_factory=list)


def _check(z: np.ndarray, t: float) -> np.ndarray:
    if not np.all(np.isfinite(z)):
        raise NonFiniteState(f"non-finite state at t={t:.6g}")
    return z


def euler_step(z: np.ndarray, t: float, dt: float, f: Field) -> np.ndarray:
    if dt <= 0 or t + dt > 1.0 + 1e-12:
        raise ValueError(f"invalid step t={t}, dt={dt}")
    v = f(z, t)
    if not np.all(np.isfinite(v)):
        raise NonFiniteState(f"non-finite velocity at t={t:.6g}")
    return z + v * dt


def rk4_step(z: np.ndarray, t: float, dt: float, f: Field) -> np.ndarray:
    k1 = f(z, t)
    k2 = f(z + 0.5 * dt * k1, t + 0.5 * dt)
    k3 = f(z + 0.5 * dt * k2, t + 0.5 * dt)
    k4 = f(z + dt * k3, t + dt)
    return z + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def dopri_stages(z: np.ndarray, t: float, dt: float, f: Field, k1: np.ndarray) -> list[np.ndarray]:
    """All seven stage derivatives; the last is the derivative at the new point (FSAL)."""
    ks = [k1]
    for i in range(1, 7):
        zi = z.copy()
        for a, k in zip(_A[i], ks):
            if a:
                zi += (dt * a) * k
        ks.append(f(zi, min(t + _C[i] * dt, 1.0)))
    return ks


def _dopri_combine(z, dt, ks, weights):
    out = z.copy()
    for w, k in zip(weights, ks):
        if w:
            out += (dt * w) * k
    return out


def integrate(z0: np.ndarray, velocity, cond=None, cfg: SolveConfig | None = None) -> SolveReport:
    """Integrate from t=0 to t=1.

    ``velocity`` is called as ``velocity(z, t, cond)`` when ``cond`` is given,
    otherwise ``velocity(z, t)``.  The last step is clamped so the run ends at
    exactly ``t = 1``.
    """
    cfg = cfg or SolveConfig()
    evals = 0

    def f(z, t):
        nonlocal evals
        evals += 1
        v = velocity(z, t) if cond is None else velocity(z, t, cond)
        return np.asarray(v, dtype=np.float64)

    z = _check(np.array(z0, dtype=np.float64), 0.0)
    traj = [(0.0, z.copy())] if cfg.record_trajectory else []

    if cfg.method != "dopri45" or not cfg.adaptive:
        n = cfg.steps
        k1 = None
        for i in range(n):
            t, t_next = i / n, (i + 1) / n
            dt = t_next - t
            if cfg.method == "euler":
                z = euler_step(z, t, dt, f)
            elif cfg.method == "rk4":
                z = rk4_step(z, t, dt, f)
            else:
                ks = dopri_stages(z, t, dt, f, f(z, t) if k1 is None else k1)
                z, k1 = _dopri_combine(z, dt, ks, _B), ks[6]
            _check(z, t_next)
            if cfg.record_trajectory:
                traj.append((t_next, z.copy()))
        return SolveReport(z, 1.0, n, 0, evals, traj)

    t, dt = 0.0, min(cfg.initial_dt, 1.0)
    accepted = rejected = 0
    k1 = f(z, t)
    while t < 1.0:
        if accepted + rejected >= cfg.max_steps:
            raise MaxStepsExceeded(f"gave up at t={t:.6g} after {cfg.max_steps} step attempts")
        last = t + dt >= 1.0
        if last:
            dt = 1.0 - t
        ks = dopri_stages(z, t, dt, f, k1)
        z_new = _dopri_combine(z, dt, ks, _B)
        _check(z_new, t + dt)
        err_vec = _dopri_combine(np.zeros_like(z), dt, ks, _E)
        scale = cfg.atol + cfg.rtol * np.maximum(np.abs(z), np.abs(z_new))
        err = math.sqrt(float(np.mean((err_vec / scale) ** 2)))
        factor = 5.0 if err == 0.0 else min(5.0, max(0.2, 0.9 * err ** -0.2))
        if err <= 1.0:
            accepted += 1
            t = 1.0 if last else t + dt
            z, k1 = z_new, ks[6]
            if cfg.record_trajectory:
                traj.append((t, z.copy()))
        else:
            rejected += 1
        dt *= factor
    return SolveReport(z, t, accepted, rejected, evals, traj)


def convergence_order(velocity: Field, exact: np.ndarray, z0: np.ndarray, method: str,
                      steps: Sequence[int]) -> float:
    """Least-squares slope of log(error at t=1) against log(dt) over a ladder of step counts.

    Rungs whose error is already at the float64 round-off floor
    (100 ulp of the solution) carry no order information and are skipped.
    """
    floor = 100 * np.finfo(np.float64).eps * max(1.0, float(np.max(np.abs(exact))))
    errs, dts = [], []
    for n in steps:
        rep = integrate(z0, velocity, None, SolveConfig(method=method, steps=n, adaptive=False))
        err = float(np.max(np.abs(rep.z - exact)))
        if err > floor:
            errs.append(err)
            dts.append(1.0 / n)
    if len(errs) < 2:
        raise SolverError("fewer than two ladder rungs above the round-off floor")
    slope, _ = np.polyfit(np.log(dts), np.log(errs), 1)
    return float(slope)


def dump_trajectory(report: SolveReport, directory: str | os.PathLike, frame_rate: int = 25) -> None:
    """Write each recorded state as a latent cache file plus an ``index.txt`` of t values."""
    from .codec import LatentTensor, write_latent

    os.makedirs(directory, exist_ok=True)
    lines = []
    for i, (t, z) in enumerate(report.trajectory):
        name = f"z_{i:05d}.iflt"
        write_latent(LatentTensor(z, frame_rate), os.path.join(directory, name))
        lines.append(f"{t!r}\t{name}")
    with open(os.path.join(directory, "index.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
