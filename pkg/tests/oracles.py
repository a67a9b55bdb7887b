"""Independent reference solvers used only by the tests."""
import itertools

import numpy as np
from scipy.optimize import minimize


def dense(model):
    return (
        model.pot_y.toarray(), model.pot_const, model.pot_alpha,
        model.weights[model.pot_partition], model.con_y.toarray(), model.con_const, model.con_eq,
    )


def map_oracle(model, eps=0.0, grid_step=0.05):
    """Minimize the energy over the feasible box.

    Hinges become slack variables (s >= l, s >= 0) so the problem is smooth;
    SLSQP is started from every feasible point of a coarse grid and the best
    refined point wins.
    """
    A, b, alpha, w, C, c, eq = dense(model)
    n, m = A.shape[1], A.shape[0]
    C, c, eq = _independent_equalities(C, c, eq)

    def f(z):
        y, s = z[:n], z[n:]
        return float(np.sum(np.where(alpha == 2, w * s * s, w * s)) + eps * y @ y)

    def jac(z):
        y, s = z[:n], z[n:]
        return np.concatenate([2 * eps * y, np.where(alpha == 2, 2 * w * s, w)])

    cons = []
    if m:
        cons.append({"type": "ineq", "fun": lambda z: z[n:] - (A @ z[:n] + b),
                     "jac": lambda z: np.hstack([-A, np.eye(m)])})
    if eq.any():
        cons.append({"type": "eq", "fun": lambda z: C[eq] @ z[:n] + c[eq],
                     "jac": lambda z: np.hstack([C[eq], np.zeros((eq.sum(), m))])})
    if (~eq).any():
        cons.append({"type": "ineq", "fun": lambda z: -(C[~eq] @ z[:n] + c[~eq]),
                     "jac": lambda z: np.hstack([-C[~eq], np.zeros(((~eq).sum(), m))])})
    bounds = [(0.0, 1.0)] * n + [(0.0, None)] * m

    axis = np.arange(0.0, 1.0 + 1e-9, grid_step) if n <= 2 else np.linspace(0, 1, 5)
    starts = []
    for y in itertools.product(axis, repeat=n):
        y = np.array(y)
        viol = np.concatenate([np.abs(C[eq] @ y + c[eq]), np.maximum(C[~eq] @ y + c[~eq], 0)])
        starts.append((viol.max() if viol.size else 0.0, f(np.concatenate([y, np.maximum(A @ y + b, 0)])), y))
    starts.sort(key=lambda t: (round(t[0], 6), t[1]))
    best = None
    for _, _, y in starts[:8]:
        z0 = np.concatenate([y, np.maximum(A @ y + b, 0)])
        res = minimize(f, z0, jac=jac, bounds=bounds, constraints=cons, method="SLSQP",
                       options={"ftol": 1e-14, "maxiter": 1000})
        z = np.clip(res.x[:n], 0, 1)
        viol = np.concatenate([np.abs(C[eq] @ z + c[eq]), np.maximum(C[~eq] @ z + c[~eq], 0)])
        if viol.size and viol.max() > 1e-7:
            continue
        h = np.maximum(A @ z + b, 0)
        val = float(np.sum(w * np.where(alpha == 2, h * h, h)) + eps * z @ z)
        if best is None or val < best[0]:
            best = (val, z)
    return best


def _independent_equalities(C, c, eq):
    """Drop equality rows that are linear combinations of earlier ones."""
    keep, basis = [], np.zeros((0, C.shape[1] + 1))
    for i in range(len(c)):
        if not eq[i]:
            keep.append(i)
            continue
        row = np.append(C[i], c[i])
        trial = np.vstack([basis, row])
        if np.linalg.matrix_rank(trial, tol=1e-9) > len(basis):
            basis = trial
            keep.append(i)
    keep = np.array(keep, dtype=int)
    return C[keep], c[keep], eq[keep]


def simplex_grid_nearest(v, step):
    """Nearest point to ``v`` among simplex points on a regular grid."""
    r = len(v)
    k = int(round(1 / step))
    best, best_d = None, np.inf
    for combo in itertools.product(range(k + 1), repeat=r - 1):
        if sum(combo) > k:
            continue
        p = np.array(list(combo) + [k - sum(combo)], dtype=float) / k
        d = np.sum((p - v) ** 2)
        if d < best_d:
            best, best_d = p, d
    return best
