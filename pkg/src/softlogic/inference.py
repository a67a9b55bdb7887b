"""MAP inference over target variables with consensus ADMM.

Every weighted potential and every hard constraint that touches a target
variable is a factor with its own local copy of those variables.  Factor
updates have closed forms along the normal of their linear form; the
consensus step averages copies and clips into the box [0, 1].
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np

from softlogic.grounding import GroundModel, clamp_targets, describe_constraint
from softlogic.model import clamp_neural, constraint_violation, energy

log = logging.getLogger(__name__)

KIND_HINGE1, KIND_HINGE2, KIND_EQ, KIND_LE = 0, 1, 2, 3
FEASIBILITY_TOL = 1e-3


class InfeasibleError(RuntimeError):
    """The hard constraints admit no point in the box."""

    def __init__(self, message: str, constraints: list[str]):
        super().__init__(message + ("\n  " + "\n  ".join(constraints) if constraints else ""))
        self.constraints = constraints


@dataclass
class AdmmSettings:
    rho: float = 1.0
    max_iterations: int = 500
    primal_tol: float = 1e-5
    dual_tol: float = 1e-5
    box: bool = True
    eps: float = 0.0  # strong-convexity term eps * ||y||^2
    stall_window: int = 250
    residual_log: Optional[str] = None

    def __post_init__(self):
        if self.rho <= 0:
            raise ValueError("rho must be positive")
        if self.primal_tol <= 0 or self.dual_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be nonnegative")


@dataclass
class InferenceResult:
    y: np.ndarray
    energy: float
    iterations: int
    converged: bool
    primal_residual: float = 0.0
    dual_residual: float = 0.0


class AdmmWorkspace:
    """Flattened local copies, duals and the consensus vector for one model."""

    def __init__(self, model: GroundModel, g: Optional[np.ndarray], settings: AdmmSettings):
        self.model = model
        self.settings = settings
        g = np.zeros(model.n_g) if g is None else clamp_neural(g)
        n = model.n_y

        pot_active = np.flatnonzero(np.diff(model.pot_y.indptr) > 0)
        con_rows = np.arange(model.n_constraints)
        con_free = np.diff(model.con_y.indptr) > 0
        con_active = con_rows[con_free]

        lin_g_pot = model.pot_g @ g + model.pot_const
        lin_g_con = model.con_g @ g + model.con_const
        self._check_fixed_constraints(lin_g_con, con_rows[~con_free])

        py = model.pot_y[pot_active]
        cy = model.con_y[con_active]
        self.con_active = con_active
        self.n_factors = len(pot_active) + len(con_active)
        self.kind = np.concatenate([
            np.where(model.pot_alpha[pot_active] == 2, KIND_HINGE2, KIND_HINGE1),
            np.where(model.con_eq[con_active], KIND_EQ, KIND_LE),
        ]).astype(np.int64)
        self.weight = np.concatenate([model.weights[model.pot_partition[pot_active]], np.zeros(len(con_active))])
        self.offset = np.concatenate([lin_g_pot[pot_active], lin_g_con[con_active]])
        sizes = np.concatenate([np.diff(py.indptr), np.diff(cy.indptr)]).astype(np.int64)
        self.copy_var = np.concatenate([py.indices, cy.indices]).astype(np.int64)
        self.coef = np.concatenate([py.data, cy.data]).astype(float)
        self.copy_fac = np.repeat(np.arange(self.n_factors), sizes).astype(np.int64)
        self.asq = np.bincount(self.copy_fac, weights=self.coef**2, minlength=self.n_factors)
        self.count = np.bincount(self.copy_var, minlength=n).astype(float)
        self.used = self.count > 0

        self.z = np.clip(model.initial_y.astype(float).copy(), 0.0, 1.0)
        self.x = self.z[self.copy_var].copy()
        self.u = np.zeros_like(self.x)
        self.iterations = 0

    def _check_fixed_constraints(self, values: np.ndarray, rows: np.ndarray) -> None:
        check_fixed_constraints(self.model, values, rows)

    def warm_start(self, y: np.ndarray) -> None:
        self.z = np.clip(np.asarray(y, dtype=float).copy(), 0.0, 1.0)
        self.x = self.z[self.copy_var].copy()
        self.u = np.zeros_like(self.x)

    def set_offsets(self, model: GroundModel, g: np.ndarray) -> None:
        """Refresh weights and neural contributions without rebuilding (same structure)."""
        g = clamp_neural(g)
        pot_active = np.flatnonzero(np.diff(model.pot_y.indptr) > 0)
        n_pot = int(np.sum(self.kind <= KIND_HINGE2))
        if len(pot_active) != n_pot:
            raise ValueError("model structure changed; rebuild the workspace")
        lin_pot = (model.pot_g @ g + model.pot_const)[pot_active]
        lin_con = (model.con_g @ g + model.con_const)
        self._check_fixed_constraints(lin_con, np.flatnonzero(np.diff(model.con_y.indptr) == 0))
        self.offset = np.concatenate([lin_pot, lin_con[self.con_active]])
        self.weight = np.concatenate([model.weights[model.pot_partition[pot_active]], np.zeros(len(self.con_active))])
        self.model = model

    def step(self) -> tuple[float, float]:
        """One round of factor updates, consensus averaging and dual update."""
        rho = self.settings.rho
        if self.n_factors == 0:
            self.iterations += 1
            return 0.0, 0.0
        v = self.z[self.copy_var] - self.u
        h = np.bincount(self.copy_fac, weights=self.coef * v, minlength=self.n_factors) + self.offset
        asq = self.asq
        w = self.weight
        t = np.zeros(self.n_factors)
        pos = h > 0
        k1 = pos & (self.kind == KIND_HINGE1)
        t[k1] = np.minimum(w[k1] / rho, h[k1] / asq[k1])
        k2 = pos & (self.kind == KIND_HINGE2)
        t[k2] = 2.0 * w[k2] * h[k2] / (rho + 2.0 * w[k2] * asq[k2])
        ke = self.kind == KIND_EQ
        t[ke] = h[ke] / asq[ke]
        kl = pos & (self.kind == KIND_LE)
        t[kl] = h[kl] / asq[kl]
        self.x = v - t[self.copy_fac] * self.coef

        z_old = self.z
        total = np.bincount(self.copy_var, weights=self.x + self.u, minlength=len(self.z))
        z = z_old.copy()
        denom = 2.0 * self.settings.eps + rho * self.count
        z[self.used] = rho * total[self.used] / denom[self.used]
        if self.settings.eps > 0:
            z[~self.used] = 0.0
        if self.settings.box:
            np.clip(z, 0.0, 1.0, out=z)
        self.z = z
        r = self.x - z[self.copy_var]
        self.u += r
        self.iterations += 1
        scale = np.sqrt(max(len(self.x), 1))
        primal = float(np.linalg.norm(r) / scale)
        dual = float(rho * np.sqrt(np.sum(self.count * (z - z_old) ** 2)) / scale)
        return primal, dual

    def max_violation(self) -> tuple[float, np.ndarray]:
        m = self.model
        rows = self.con_active
        if not len(rows):
            return 0.0, rows
        c = m.con_y[rows] @ self.z + self.offset[len(self.offset) - len(rows) :]
        viol = np.where(m.con_eq[rows], np.abs(c), np.maximum(c, 0.0))
        return float(viol.max()), rows[np.argsort(-viol)][: int(np.sum(viol > FEASIBILITY_TOL))]

    def infeasible(self, rows: np.ndarray) -> InfeasibleError:
        names = [describe_constraint(self.model, i) for i in rows[:20]]
        return InfeasibleError(f"hard constraints are infeasible ({len(rows)} violated)", names)

    def solve(self) -> tuple[np.ndarray, int, bool, float, float]:
        s = self.settings
        start = self.iterations
        history: list[float] = []
        primal = dual = 0.0
        converged = False
        fh = open(s.residual_log, "w", encoding="utf-8") if s.residual_log else None
        try:
            if fh:
                fh.write("iteration,primal_residual,dual_residual\n")
            for k in range(s.max_iterations):
                primal, dual = self.step()
                if fh:
                    fh.write(f"{k + 1},{primal:.6e},{dual:.6e}\n")
                history.append(primal)
                if primal < s.primal_tol and dual < s.dual_tol:
                    converged = True
                    break
                if s.stall_window and (k + 1) % s.stall_window == 0 and len(history) > s.stall_window:
                    before = history[-s.stall_window - 1]
                    worst, rows = self.max_violation()
                    if primal > 0.999 * before and worst > FEASIBILITY_TOL and dual < 1e2 * s.dual_tol:
                        raise self.infeasible(rows)
            if self.n_factors == 0:
                converged = True
            if not converged:
                worst, rows = self.max_violation()
                if worst > FEASIBILITY_TOL and primal > 1e2 * s.primal_tol:
                    raise self.infeasible(rows)
        finally:
            if fh:
                fh.close()
        return self.z.copy(), self.iterations - start, converged, primal, dual


_warned_neural_only = set()


def check_fixed_constraints(model: GroundModel, values: np.ndarray, rows: np.ndarray) -> None:
    """Raise if a constraint without free targets is violated.

    ``values`` are the constraint values with neural/observed parts folded in.
    Constraints that never involved a target are reported once as a warning,
    since inference cannot act on them.
    """
    m = model
    if not len(rows):
        return
    viol = np.where(m.con_eq[rows], np.abs(values[rows]), np.maximum(values[rows], 0.0))
    bad = rows[viol > FEASIBILITY_TOL]
    from_targets = bad[m.con_has_target[bad]]
    if len(from_targets):
        raise InfeasibleError(
            f"{len(from_targets)} constraint(s) violated by fixed values",
            [describe_constraint(m, i) for i in from_targets[:20]],
        )
    neural_only = bad[~m.con_has_target[bad]]
    if len(neural_only):
        key = describe_constraint(m, neural_only[0])
        if key not in _warned_neural_only:
            _warned_neural_only.add(key)
            log.warning(
                "%d constraint(s) over neural/observed atoms only are violated and cannot be "
                "enforced by inference (first: %s)", len(neural_only), key
            )


def fixed_constraint_check(model: GroundModel, g: Optional[np.ndarray] = None) -> None:
    g = np.zeros(model.n_g) if g is None else clamp_neural(g)
    rows = np.flatnonzero(np.diff(model.con_y.indptr) == 0)
    if len(rows):
        check_fixed_constraints(model, model.con_g @ g + model.con_const, rows)


def admm_step(workspace: AdmmWorkspace) -> tuple[float, float]:
    return workspace.step()


def map_inference(
    model: GroundModel,
    settings: Optional[AdmmSettings] = None,
    g: Optional[np.ndarray] = None,
    workspace: Optional[AdmmWorkspace] = None,
) -> InferenceResult:
    """Minimize the energy over targets in the feasible set."""
    settings = settings or AdmmSettings()
    if model.weights.size and np.any(model.weights < 0):
        raise ValueError("rule weights must be nonnegative")
    g = np.zeros(model.n_g) if g is None else np.asarray(g, dtype=float)
    ws = workspace or AdmmWorkspace(model, g, settings)
    y, iters, converged, primal, dual = ws.solve()
    if not converged:
        log.info("ADMM stopped after %d iterations without converging", iters)
    e = energy(model, y, g, settings.eps).total
    return InferenceResult(y, e, iters, converged, primal, dual)


def latent_inference(
    model: GroundModel,
    clamped: Mapping[int, float],
    settings: Optional[AdmmSettings] = None,
    g: Optional[np.ndarray] = None,
) -> tuple[np.ndarray, float, InferenceResult]:
    """Clamp the given targets and solve for the remaining (latent) ones."""
    reduced = clamp_targets(model, clamped)
    res = map_inference(reduced, settings, g)
    return res.y, res.energy, res


def feasibility_report(model: GroundModel, y, g=None, tol: float = 1e-5) -> list[str]:
    viol = constraint_violation(model, y, g)
    return [describe_constraint(model, i) for i in np.flatnonzero(viol > tol)]
