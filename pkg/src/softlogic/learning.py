"""Energy-loss learning of rule weights and neural parameters.

Rule weights live on the unit simplex and are updated by projected gradient
descent with a decaying step; a negative-log penalty keeps them away from
the simplex corners.  Neural providers receive the gradient of the energy
with respect to their outputs and step with plain SGD.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from softlogic.grounding import GroundModel, clamp_targets
from softlogic.inference import AdmmSettings, AdmmWorkspace, InfeasibleError, fixed_constraint_check
from softlogic.model import energy, grad_g, grad_wpsl

log = logging.getLogger(__name__)


class TrainingDataError(ValueError):
    """A training example's labels are inconsistent with the hard constraints."""


@dataclass
class TrainingExample:
    """One independent piece of the ground model with labels for some targets."""

    model: GroundModel
    truth: dict[int, float]
    name: str = ""

    @property
    def latent(self) -> list[int]:
        return [i for i in range(self.model.n_y) if i not in self.truth]


@dataclass
class LearnSettings:
    gamma0: float = 0.01
    neural_lr: float = 1e-3
    epochs: int = 10
    log_base: float = math.e
    reg_weight: float = 0.01
    admm: AdmmSettings = field(default_factory=AdmmSettings)
    seed: int = 42
    eps: float = 1e-3  # strong convexity on latent variables
    floor: float = 1e-6
    learn_weights: bool = True
    learn_neural: bool = True
    record_time: bool = False
    tolerance: float = 1e-6
    patience: int = 3

    def __post_init__(self):
        if self.gamma0 <= 0 or self.neural_lr < 0:
            raise ValueError("step sizes must be positive")
        if self.log_base <= 1:
            raise ValueError("log base must exceed 1")
        if self.reg_weight < 0:
            raise ValueError("regularizer weight must be nonnegative")


@dataclass
class TraceRow:
    epoch: int
    example_count: int
    total_loss: float
    wall_ms: int


@dataclass
class LearnResult:
    weights: np.ndarray
    providers: dict
    trace: list[TraceRow]
    weight_history: list[np.ndarray] = field(default_factory=list)


def build_examples(model: GroundModel, truth: Mapping[int, float]) -> list[TrainingExample]:
    """One example per connected component of the ground model."""
    out = []
    for k, part in enumerate(model.components()):
        parents = part.parent_y if part.parent_y is not None else np.arange(part.n_y)
        labels = {i: float(truth[p]) for i, p in enumerate(parents) if p in truth}
        out.append(TrainingExample(part, labels, name=f"component {k}"))
    return out


# --- simplex and regularizer ------------------------------------------------------


def project_simplex(v) -> np.ndarray:
    """Euclidean projection onto {w >= 0, sum w = 1} by the sorted-threshold rule."""
    v = np.asarray(v, dtype=float)
    if v.size == 0:
        return v.copy()
    if not np.all(np.isfinite(v)):
        raise ValueError("cannot project non-finite vector")
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    ks = np.arange(1, v.size + 1)
    rho = np.nonzero(u - css / ks > 0)[0][-1]
    theta = css[rho] / (rho + 1.0)
    w = np.maximum(v - theta, 0.0)
    # remove rounding drift so the sum is 1 to machine precision
    w /= w.sum()
    return w


def project_floored(v, floor: float) -> np.ndarray:
    """Projection onto the simplex intersected with {w >= floor}."""
    v = np.asarray(v, dtype=float)
    r = v.size
    if floor <= 0 or r == 0:
        return project_simplex(v)
    scale = 1.0 - r * floor
    if scale <= 0:
        raise ValueError(f"floor {floor} too large for {r} weights")
    w = floor + scale * project_simplex((v - floor) / scale)
    return w / w.sum()


def regularizer(w, reg_weight: float, base: float = math.e) -> float:
    w = np.asarray(w, dtype=float)
    if reg_weight == 0:
        return 0.0
    if np.any(w <= 0):
        raise ValueError("negative-log regularizer needs strictly positive weights")
    return -reg_weight * float(np.sum(np.log(w))) / math.log(base)


def regularizer_grad(w, reg_weight: float, base: float = math.e) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    if reg_weight == 0:
        return np.zeros_like(w)
    if np.any(w <= 0):
        raise ValueError("negative-log regularizer needs strictly positive weights")
    return -reg_weight / (w * math.log(base))


def regularized_loss(loss: float, w, settings: LearnSettings) -> float:
    return loss + regularizer(w, settings.reg_weight, settings.log_base)


# --- losses and gradients -----------------------------------------------------------


def _merge(example: TrainingExample, z: np.ndarray) -> np.ndarray:
    y = np.zeros(example.model.n_y)
    for i, v in example.truth.items():
        y[i] = v
    y[example.latent] = z
    return y


def energy_loss(
    example: TrainingExample,
    weights,
    g: Optional[np.ndarray] = None,
    admm: Optional[AdmmSettings] = None,
    eps: float = 1e-3,
    workspace: Optional[AdmmWorkspace] = None,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Energy of the labels with latent targets minimized out.

    Returns ``(loss, z_star, full_y)``.  ``loss`` includes ``eps * ||z||^2``.
    """
    model = example.model.with_weights(weights)
    g = np.zeros(model.n_g) if g is None else np.asarray(g, dtype=float)
    latent = example.latent
    if latent:
        reduced = clamp_targets(model, example.truth)
        settings = AdmmSettings(**{**(admm or AdmmSettings()).__dict__, "eps": eps})
        try:
            if workspace is None:
                workspace = AdmmWorkspace(reduced, g, settings)
            else:
                workspace.set_offsets(reduced, g)
            z, _, _, _, _ = workspace.solve()
        except InfeasibleError as exc:
            raise TrainingDataError(f"{example.name}: labels make the constraints infeasible: {exc}") from exc
    else:
        z = np.zeros(0)
        try:
            fixed_constraint_check(clamp_targets(model, example.truth), g)
        except InfeasibleError as exc:
            raise TrainingDataError(f"{example.name}: labels violate hard constraints: {exc}") from exc
    y = _merge(example, z)
    loss = energy(model, y, g).total + eps * float(z @ z)
    return loss, z, y


def loss_grad_wpsl(example: TrainingExample, y: np.ndarray, g: Optional[np.ndarray] = None) -> np.ndarray:
    """Gradient of the energy loss in the rule weights: Phi at the solved state."""
    return grad_wpsl(example.model, y, g)


def loss_grad_neural(
    example: TrainingExample, weights, y: np.ndarray, g: np.ndarray
) -> dict[str, np.ndarray]:
    """Upstream gradients per neural predicate, shaped (entities, classes)."""
    model = example.model.with_weights(weights)
    gg = grad_g(model, y, g)
    out = {}
    for b in model.neural:
        out[b.predicate] = gg[b.offset : b.offset + b.size].reshape(len(b.entities), len(b.classes))
    return out


def neural_forward(model: GroundModel, providers: Mapping[str, object], cache: bool = True) -> np.ndarray:
    g = np.zeros(model.n_g)
    for b in model.neural:
        if not b.entities:
            continue
        if b.predicate not in providers:
            raise KeyError(f"no provider bound for neural predicate {b.predicate}")
        p = providers[b.predicate]
        out = p.forward(b.features) if cache else p.predict(b.features)
        g[b.offset : b.offset + b.size] = np.asarray(out).ravel()
    return g


# --- training loop ------------------------------------------------------------------


def learn(
    examples: Sequence[TrainingExample],
    providers: Optional[Mapping[str, object]] = None,
    settings: Optional[LearnSettings] = None,
    initial_weights: Optional[np.ndarray] = None,
    callback=None,
) -> LearnResult:
    """Projected gradient descent on the regularized energy loss."""
    settings = settings or LearnSettings()
    providers = dict(providers or {})
    if initial_weights is not None:
        w = np.asarray(initial_weights, dtype=float).copy()
        r = w.size
    else:
        # a model without rules has no examples and nothing to learn
        r = examples[0].model.n_partitions if examples else 0
        w = np.full(r, 1.0 / r) if r else np.zeros(0)
    floor = settings.floor if settings.reg_weight > 0 else 0.0
    rng = np.random.default_rng(settings.seed)
    gamma = settings.gamma0
    trace: list[TraceRow] = []
    history = [w.copy()]
    workspaces: dict[int, AdmmWorkspace] = {}
    warm: dict[int, np.ndarray] = {}

    for epoch in range(1, settings.epochs + 1):
        t0 = time.perf_counter()
        total = 0.0
        for idx in rng.permutation(len(examples)):
            ex = examples[idx]
            g = neural_forward(ex.model, providers, cache=True)
            ws = None
            if ex.latent:
                ws = workspaces.get(idx)
                if ws is None:
                    reduced = clamp_targets(ex.model.with_weights(w), ex.truth)
                    ws = AdmmWorkspace(reduced, g, AdmmSettings(**{**settings.admm.__dict__, "eps": settings.eps}))
                    workspaces[idx] = ws
                elif idx in warm:
                    ws.warm_start(warm[idx])
            loss, z, y = energy_loss(ex, w, g, settings.admm, settings.eps, ws)
            if ex.latent:
                warm[idx] = z
            total += loss

            if settings.learn_neural and ex.model.n_g:
                for name, up in loss_grad_neural(ex, w, y, g).items():
                    if up.size:
                        providers[name].backward(up)
                        providers[name].step(settings.neural_lr)
            if settings.learn_weights and r:
                grad = loss_grad_wpsl(ex, y, g)
                if floor > 0:
                    grad = grad + regularizer_grad(w, settings.reg_weight, settings.log_base)
                w = project_floored(w - gamma * grad, floor)
                history.append(w.copy())
        gamma = gamma / (epoch + 1)
        wall = int(round((time.perf_counter() - t0) * 1000)) if settings.record_time else 0
        trace.append(TraceRow(epoch, len(examples), total, wall))
        log.info("epoch %d loss %.6g weights %s", epoch, total, np.array2string(w, precision=4))
        if callback is not None:
            callback(epoch, w, providers, total)
        if len(trace) > settings.patience:
            if trace[-settings.patience - 1].total_loss - total < settings.tolerance:
                break
    return LearnResult(w, providers, trace, history)


def write_trace(path, trace: Sequence[TraceRow]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("epoch,example_count,total_loss,wall_ms\n")
        for row in trace:
            fh.write(f"{row.epoch},{row.example_count},{row.total_loss:.17g},{row.wall_ms}\n")


def write_weights(path, labels: Sequence[str], weights) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for label, w in zip(labels, weights):
            fh.write(f"{label} {float(w):.17g}\n")


def read_weights(path) -> tuple[list[str], np.ndarray]:
    labels, values = [], []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                a, b = line.split()
                labels.append(a)
                values.append(float(b))
    return labels, np.array(values)
