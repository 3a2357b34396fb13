"""Conditional flow matching on the straight noise-to-data path.

For a target latent ``z1`` and Gaussian noise ``z0`` the path is
``z_t = (1 - t) z0 + t z1`` and the regression target is the constant
velocity ``u = z1 - z0``.  Training minimises the mean squared error between
the network's velocity and ``u`` with Adam.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import AdamState, Tensor
from .velocity import VelocityField, forward

log = logging.getLogger(__name__)


class TrainingDivergedError(FloatingPointError):
    def __init__(self, step: int, detail: str):
        super().__init__(f"non-finite loss at step {step}: {detail}")
        self.step = step


@dataclass
class FlowBatch:
    t: np.ndarray       # [B]
    z0: np.ndarray      # [B, C, D, T']
    z1: np.ndarray
    z_cond: np.ndarray  # [B, Cc, D, T']
    z_t: np.ndarray
    u: np.ndarray

    def __len__(self) -> int:
        return self.t.shape[0]


def sample_path(z1: np.ndarray, z_cond: np.ndarray, rng: np.random.Generator,
                t: float | None = None) -> FlowBatch:
    """One-item batch on the linear path; ``t`` may be forced instead of drawn from U[0, 1]."""
    z1 = np.asarray(z1, dtype=np.float64)
    z0 = rng.standard_normal(z1.shape)
    tt = rng.uniform(0.0, 1.0) if t is None else float(t)
    z_t = (1.0 - tt) * z0 + tt * z1
    return FlowBatch(np.array([tt]), z0[None], z1[None], np.asarray(z_cond, dtype=np.float64)[None],
                     z_t[None], (z1 - z0)[None])


def collate(items: Sequence[FlowBatch]) -> FlowBatch:
    cat = lambda name: np.concatenate([getattr(b, name) for b in items], axis=0)  # noqa: E731
    return FlowBatch(cat("t"), cat("z0"), cat("z1"), cat("z_cond"), cat("z_t"), cat("u"))


def flow_loss(net: VelocityField, batch: FlowBatch) -> Tensor:
    pred = forward(net, batch.z_t, batch.t, batch.z_cond)
    return T.mse_loss(pred, Tensor(batch.u))


@dataclass
class TrainConfig:
    steps: int = 500
    batch_size: int = 8
    lr: float = 1e-3
    seed: int = 0
    t_distribution: str = "uniform"
    log_every: int = 50
    checkpoint_every: int = 0
    ema_decay: float | None = None

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.t_distribution != "uniform":
            raise ValueError(f"unsupported t distribution {self.t_distribution!r}")


@dataclass
class TrainResult:
    net: VelocityField
    history: list[tuple[int, float]]
    optimizer_state: AdamState
    ema: dict[str, np.ndarray] | None = None
    extra: dict = field(default_factory=dict)


def make_batch(dataset: Sequence[tuple[np.ndarray, np.ndarray]], seed: int, step: int,
               batch_size: int) -> FlowBatch:
    """The batch for ``step``; depends only on (seed, step), so resumed runs replay exactly."""
    picks = np.random.default_rng([seed, step]).integers(0, len(dataset), batch_size)
    items = []
    for i, k in enumerate(picks):
        z_cond, z1 = dataset[int(k)]
        items.append(sample_path(z1, z_cond, np.random.default_rng([seed, step, i])))
    return collate(items)


def train(dataset: Sequence[tuple[np.ndarray, np.ndarray]], net: VelocityField, cfg: TrainConfig,
          optimizer_state: AdamState | None = None, start_step: int = 0,
          on_step: Callable[[int, float, VelocityField, AdamState], None] | None = None) -> TrainResult:
    """Adam on the flow-matching loss for steps ``start_step + 1 .. cfg.steps``.

    ``dataset`` holds ``(z_cond, z1)`` pairs.  ``on_step`` is called after every
    update (logging and checkpointing hang off it).
    """
    if not dataset:
        raise ValueError("empty training set")
    state = optimizer_state or T.adam_init(net.params)
    ema = {k: p.data.copy() for k, p in net.params.items()} if cfg.ema_decay else None
    history: list[tuple[int, float]] = []
    for step in range(start_step + 1, cfg.steps + 1):
        batch = make_batch(dataset, cfg.seed, step, cfg.batch_size)
        try:
            with T.Tape() as tape:
                loss = flow_loss(net, batch)
        except T.NonFiniteError as exc:
            raise TrainingDivergedError(step, str(exc)) from exc
        value = float(loss.data)
        if not np.isfinite(value):
            raise TrainingDivergedError(step, f"loss={value}")
        grads = T.backward(loss, tape, net.params)
        new, state = T.adam_step(net.state_arrays(), {k: g.data for k, g in grads.items()},
                                 state, cfg.lr)
        net.load_arrays(new)
        if ema is not None:
            for k, p in net.params.items():
                ema[k] = cfg.ema_decay * ema[k] + (1.0 - cfg.ema_decay) * p.data
        history.append((step, value))
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("step %d loss %.6f", step, value)
        if on_step is not None:
            on_step(step, value, net, state)
    return TrainResult(net, history, state, ema)


def smoothed(values: Sequence[float], window: int = 50) -> np.ndarray:
    """Trailing moving average (shorter window at the start)."""
    v = np.asarray(values, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(1, v.size + 1)
    lo = np.maximum(0, idx - window)
    return (c[idx] - c[lo]) / (idx - lo)


def append_history(history: Sequence[tuple[int, float]], path) -> None:
    """Append ``step<TAB>loss`` lines (``repr`` floats, so values round-trip exactly)."""
    with open(path, "a") as fh:
        for step, value in history:
            fh.write(f"{step}\t{value!r}\n")


def read_history(path) -> list[tuple[int, float]]:
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                step, value = line.split("\t")
                out.append((int(step), float(value)))
    return out
