"""Energy of a ground model and its closed-form partial derivatives."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from softlogic.grounding import GroundModel

log = logging.getLogger(__name__)


@dataclass
class State:
    y: np.ndarray
    g: np.ndarray

    @classmethod
    def of(cls, model: GroundModel, y=None, g=None) -> "State":
        y = np.zeros(model.n_y) if y is None else np.asarray(y, dtype=float)
        g = np.zeros(model.n_g) if g is None else np.asarray(g, dtype=float)
        if y.shape != (model.n_y,) or g.shape != (model.n_g,):
            raise ValueError(
                f"state shapes y{y.shape}, g{g.shape} do not match model ({model.n_y}, {model.n_g})"
            )
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(g))):
            raise ValueError("state contains non-finite entries")
        return cls(y, g)


@dataclass
class EnergyBreakdown:
    phi: np.ndarray  # per-partition summed potentials
    total: float


def clamp_neural(g: np.ndarray) -> np.ndarray:
    g = np.asarray(g, dtype=float)
    if g.size and (g.min() < 0.0 or g.max() > 1.0):
        log.warning("neural outputs outside [0, 1] clamped (range %.3g..%.3g)", g.min(), g.max())
        return np.clip(g, 0.0, 1.0)
    return g


def potential_value(l: float, alpha: int) -> float:
    h = max(l, 0.0)
    return h * h if alpha == 2 else h


def linear_values(model: GroundModel, y: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Inner linear form of every potential."""
    return model.pot_y @ y + model.pot_g @ g + model.pot_const


def potential_values(model: GroundModel, y: np.ndarray, g: np.ndarray) -> np.ndarray:
    h = np.maximum(linear_values(model, y, clamp_neural(g)), 0.0)
    return np.where(model.pot_alpha == 2, h * h, h)


def phi(model: GroundModel, y: np.ndarray, g: np.ndarray) -> np.ndarray:
    return np.bincount(
        model.pot_partition, weights=potential_values(model, y, g), minlength=model.n_partitions
    ).astype(float)


def energy(model: GroundModel, y, g=None, eps: float = 0.0) -> EnergyBreakdown:
    """``w . Phi`` plus an optional ``eps * ||y||^2`` term."""
    s = State.of(model, y, g)
    p = phi(model, s.y, s.g)
    total = float(model.weights @ p) if len(p) else 0.0
    if eps:
        total += eps * float(s.y @ s.y)
    return EnergyBreakdown(p, total)


def _slopes(model: GroundModel, y, g) -> np.ndarray:
    """``w * alpha * hinge^(alpha-1)`` per potential, 0 where inactive."""
    l = linear_values(model, y, clamp_neural(g))
    w = model.weights[model.pot_partition] if model.n_potentials else np.zeros(0)
    active = l > 0.0
    d = np.where(model.pot_alpha == 2, 2.0 * np.maximum(l, 0.0), 1.0)
    return np.where(active, w * d, 0.0)


def grad_y(model: GroundModel, y, g=None, eps: float = 0.0) -> np.ndarray:
    s = State.of(model, y, g)
    out = model.pot_y.T @ _slopes(model, s.y, s.g)
    if eps:
        out = out + 2.0 * eps * s.y
    return np.asarray(out, dtype=float)


def grad_wpsl(model: GroundModel, y, g=None) -> np.ndarray:
    s = State.of(model, y, g)
    return phi(model, s.y, s.g)


def grad_g(model: GroundModel, y, g=None) -> np.ndarray:
    s = State.of(model, y, g)
    return np.asarray(model.pot_g.T @ _slopes(model, s.y, s.g), dtype=float)


def constraint_values(model: GroundModel, y, g=None) -> np.ndarray:
    s = State.of(model, y, g)
    return model.con_y @ s.y + model.con_g @ s.g + model.con_const


def constraint_violation(model: GroundModel, y, g=None, rows: Optional[np.ndarray] = None) -> np.ndarray:
    """|c| for equalities, max(c, 0) for inequalities."""
    c = constraint_values(model, y, g)
    v = np.where(model.con_eq, np.abs(c), np.maximum(c, 0.0))
    return v if rows is None else v[rows]
