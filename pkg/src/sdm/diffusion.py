"""Spatial diffusion loop: Predict, Pick, Sample.

Arrays are batched: images (N, C, H, W); masks and uncertainty (N, 1, H, W).
Masks use 1 = known, 0 = missing. Unknown pixels hold the placeholder 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .numerics import Tensor, as_tensor, no_grad
from .prob_head import GaussianPrediction, sample_pixels, uncertainty_from_variance
from .schedule import MaskSchedule, reveal_counts

#: (x_t, m0, m_t, u_t, t, T) -> prediction for iteration t + 1
Predictor = Callable[[np.ndarray, np.ndarray, np.ndarray, np.ndarray, int, int], GaussianPrediction]


@dataclass
class DiffusionState:
    x0: np.ndarray
    m0: np.ndarray
    x: np.ndarray
    m: np.ndarray
    u: np.ndarray
    t: int = 0


@dataclass
class Trajectory:
    images: list[np.ndarray] = field(default_factory=list)
    masks: list[np.ndarray] = field(default_factory=list)
    uncertainty: list[np.ndarray] = field(default_factory=list)

    def append(self, state: DiffusionState) -> None:
        self.images.append(state.x.copy())
        self.masks.append(state.m.copy())
        self.uncertainty.append(state.u.copy())

    def __len__(self) -> int:
        return len(self.images)


def _as_batched_mask(m0: np.ndarray, x0: np.ndarray) -> np.ndarray:
    m0 = np.asarray(m0, dtype=np.float64)
    if m0.ndim == x0.ndim - 1:
        m0 = m0[:, None] if x0.ndim == 4 else m0[None]
    return m0


def init_state(x0, m0) -> DiffusionState:
    """Start a diffusion run; hole pixels of ``x0`` are zeroed, ``u_0 = 1 - m0``."""
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.ndim != 4:
        raise ValueError(f"x0 must be (N, C, H, W), got {x0.shape}")
    m0 = _as_batched_mask(m0, x0)
    if m0.shape != (x0.shape[0], 1) + x0.shape[2:]:
        raise ValueError(f"mask shape {m0.shape} does not match image {x0.shape}")
    if not np.all((m0 == 0) | (m0 == 1)):
        raise ValueError("mask must be binary")
    x0 = x0 * m0
    return DiffusionState(x0=x0, m0=m0, x=x0.copy(), m=m0.copy(), u=1.0 - m0, t=0)


def pick(state: DiffusionState, u_pre: np.ndarray, schedule: MaskSchedule, t: int) -> tuple[np.ndarray, np.ndarray]:
    """Reveal the lowest-uncertainty unknown pixels scheduled for iteration ``t``.

    Ties are broken in row-major scan order. Returns ``(m_t, u_t)``.
    """
    T = schedule.total_iterations
    if not 1 <= t <= T:
        raise ValueError(f"t={t} outside [1, {T}]")
    u_pre = np.asarray(u_pre, dtype=np.float64)
    n = state.m0.shape[0]
    m_new = state.m.copy()
    for b in range(n):
        unknown = np.flatnonzero(state.m[b, 0].ravel() == 0)
        if unknown.size == 0:
            continue
        n_hole = int((state.m0[b, 0] == 0).sum())
        k = reveal_counts(schedule, n_hole)[t - 1]
        if t == T:
            k = unknown.size
        k = min(k, unknown.size)
        if k == 0:
            continue
        scores = u_pre[b, 0].ravel()[unknown]
        chosen = unknown[np.argsort(scores, kind="stable")[:k]]
        flat = m_new[b, 0].reshape(-1)
        flat[chosen] = 1.0
    revealed = (m_new == 1) & (state.m0 == 0)
    u_new = np.where(state.m0 == 1, 0.0, np.where(revealed, u_pre, 1.0))
    return m_new, u_new


def compose(state: DiffusionState, pred: GaussianPrediction, m_t: np.ndarray, alpha: float,
            final: bool, rng: np.random.Generator | None) -> Tensor:
    """``x0 + (m_t - m0) * sample``; differentiable in the predicted mean."""
    fill = sample_pixels(pred, alpha, rng, final)
    return as_tensor(state.x0) + fill * (m_t - state.m0)


def run(predict: Predictor, state: DiffusionState, schedule: MaskSchedule, alpha: float,
        rng: np.random.Generator, record: bool = False,
        freeze_revealed: bool = False) -> tuple[np.ndarray, Trajectory]:
    """Iterate Predict -> Pick -> Sample for ``schedule.total_iterations`` steps.

    With ``freeze_revealed`` pixels keep the value drawn when they were
    revealed; otherwise every revealed hole pixel takes the latest sample.
    """
    T = schedule.total_iterations
    if T < 1:
        raise ValueError("need at least one iteration")
    traj = Trajectory()
    with no_grad():
        for t in range(1, T + 1):
            pred = predict(state.x, state.m0, state.m, state.u, t - 1, T)
            u_pre = uncertainty_from_variance(pred)
            m_t, u_t = pick(state, u_pre, schedule, t)
            x_t = compose(state, pred, m_t, alpha, t == T, rng).data
            if freeze_revealed:
                x_t = np.where(state.m == 1, state.x, x_t)
            state = DiffusionState(state.x0, state.m0, x_t, m_t, u_t, t)
            if record:
                traj.append(state)
    return state.x, traj
