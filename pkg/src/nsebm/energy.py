"""Energy semantics: feature vector, energy value, ranking, detection.

The energy of an assignment is ``E = w . phi(y, x, g)`` where entry ``i`` of
``phi`` sums the hinge potentials of weighted rule ``i``:
``phi_i = sum_k max(l_k, 0)^{q_k}``.  Assignments violating any hard
constraint beyond tolerance have energy ``+inf``.
"""

from __future__ import annotations

import numpy as np

from .grounding import FEAS_TOL

__all__ = [
    "phi_vector",
    "hinge_values",
    "constraint_violation",
    "energy",
    "rank",
    "detect",
    "apply_dsvar",
]


def _expr_value(expr, y, x, g):
    """Evaluate an affine expression; ``y``/``g`` may carry batch dims."""
    v = expr.const
    if expr.x:
        idx = np.fromiter(expr.x.keys(), dtype=int)
        coef = np.fromiter(expr.x.values(), dtype=float)
        v = v + x[idx] @ coef
    out = np.asarray(v, dtype=float)
    if expr.y:
        idx = np.fromiter(expr.y.keys(), dtype=int)
        coef = np.fromiter(expr.y.values(), dtype=float)
        out = out + np.asarray(y)[..., idx] @ coef
    if expr.g:
        idx = np.fromiter(expr.g.keys(), dtype=int)
        coef = np.fromiter(expr.g.values(), dtype=float)
        out = out + np.asarray(g)[..., idx] @ coef
    return out


def phi_vector(model, y, g=None):
    """Per-rule feature vector; batched ``y`` of shape (..., n_y) supported."""
    y = np.asarray(y, dtype=float)
    if g is None:
        g = model.g_values
    batch = y.shape[:-1]
    phi = np.zeros(batch + (model.r,), dtype=float)
    for p in model.potentials:
        l = _expr_value(p.expr, y, model.x_values, g)
        h = np.maximum(l, 0.0)
        phi[..., p.rule_id] += h**p.q
    return phi


def hinge_values(model, y, g=None):
    """Per-potential hinge ``max(l, 0)`` plus exponent and rule-id arrays.

    Returns ``(h, q, rule)``; ``h`` carries the batch dims of ``y``.  Useful
    when the regularized objective needs per-potential slack values rather
    than the per-rule sums of :func:`phi_vector`.
    """
    y = np.asarray(y, dtype=float)
    if g is None:
        g = model.g_values
    m = len(model.potentials)
    h = np.zeros(y.shape[:-1] + (m,), dtype=float)
    q = np.zeros(m, dtype=int)
    rule = np.zeros(m, dtype=int)
    for k, p in enumerate(model.potentials):
        l = _expr_value(p.expr, y, model.x_values, g)
        h[..., k] = np.maximum(l, 0.0)
        q[k] = p.q
        rule[k] = p.rule_id
    return h, q, rule


def constraint_violation(model, y, g=None):
    """Worst hard-constraint violation (0 when none), batched like ``y``."""
    y = np.asarray(y, dtype=float)
    if g is None:
        g = model.g_values
    worst = np.zeros(y.shape[:-1], dtype=float)
    for c in model.constraints:
        v = _expr_value(c.expr, y, model.x_values, g)
        viol = np.abs(v) if c.equality else np.maximum(v, 0.0)
        worst = np.maximum(worst, viol)
    return worst


def energy(model, w, y, g=None, feas_tol=FEAS_TOL):
    """``w . phi`` with ``+inf`` outside the feasible set."""
    w = np.asarray(w, dtype=float)
    e = phi_vector(model, y, g) @ w
    viol = constraint_violation(model, y, g)
    return np.where(viol > feas_tol, np.inf, e)


def rank(model, w, candidates, g=None):
    """Indices of candidate assignments sorted by ascending energy, stable."""
    e = energy(model, w, np.asarray(candidates, dtype=float), g)
    return np.argsort(e, kind="stable")


def detect(model, w, y, tau, g=None):
    """Threshold decision: 1 when the energy is at most ``tau``."""
    return (energy(model, w, y, g) <= tau).astype(int)


def apply_dsvar(model, y, g=None):
    """Overwrite clamped target coordinates with their neural outputs."""
    if g is None:
        g = model.g_values
    y = np.array(y, dtype=float, copy=True)
    for yi, gi in model.dsvar_map.items():
        y[..., yi] = np.asarray(g)[..., gi]
    return y
