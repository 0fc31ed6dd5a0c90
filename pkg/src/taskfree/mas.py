"""Memory Aware Synapses importance weights and the quadratic anchor penalty."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, EmptySamplesError, InputError
from .nn import Model, _as_rows, forward, per_sample_grads

CUMULATIVE = "cumulative"
DECAYING = "decaying"


@dataclass(frozen=True)
class ImportanceState:
    omega: np.ndarray
    anchor: np.ndarray
    update_count: int = 0
    mode: str = CUMULATIVE
    lam: float = 1.0

    def __post_init__(self):
        if self.mode not in (CUMULATIVE, DECAYING):
            raise ConfigError(f"unknown importance accumulation mode {self.mode!r}")
        if self.lam < 0:
            raise ConfigError("penalty weight must be nonnegative")
        if self.omega.shape != self.anchor.shape:
            raise InputError("omega and anchor must have the same length")

    @classmethod
    def zeros(cls, model: Model, lam: float, mode: str = CUMULATIVE) -> "ImportanceState":
        return cls(np.zeros(model.n_params), model.flatten(), 0, mode, float(lam))


def output_sensitivity(model: Model, x) -> np.ndarray:
    """|d(0.5 * ||F(x)||^2) / d theta| for a single input vector."""
    x = _as_rows(model, x)
    if x.shape[0] != 1:
        raise InputError("output_sensitivity takes a single input vector")
    return np.abs(per_sample_grads(model, x, forward(model, x))[0])


def estimate_raw_importance(model: Model, samples) -> np.ndarray:
    """Mean per-sample sensitivity over ``samples`` (rows of inputs).

    Triplet-shaped inputs ``(B, 3, d)`` are treated as 3B separate inputs.
    """
    X = np.asarray(samples, dtype=np.float64)
    if X.size == 0:
        raise EmptySamplesError("cannot estimate importance from zero samples")
    X = _as_rows(model, X.reshape(-1, model.input_dim))
    grads = per_sample_grads(model, X, forward(model, X))
    return np.abs(grads).mean(axis=0)


def consolidate(state: ImportanceState, model: Model, samples) -> ImportanceState:
    """Fold a fresh importance estimate into ``state`` and re-anchor at ``model``."""
    raw = estimate_raw_importance(model, samples)
    n = state.update_count + 1
    if state.mode == CUMULATIVE:
        omega = state.omega + (raw - state.omega) / n
    else:
        omega = (state.omega + raw) / 2.0
    return replace(state, omega=omega, anchor=model.flatten(), update_count=n)


def penalty(state: ImportanceState, model: Model) -> float:
    d = model.params - state.anchor
    return 0.5 * state.lam * float(np.dot(state.omega, d * d))


def penalty_grad(state: ImportanceState, model: Model) -> np.ndarray:
    return state.lam * state.omega * (model.params - state.anchor)
