"""Value-function gradients and their finite-difference verification.

The certified MAP value is differentiable in the rule weights with gradient
``phi(y*)`` (the optimal slacks are exactly the hinge values, so the feature
vector doubles as the weight gradient) and subdifferentiable in each
constraint constant with subgradient ``mu*``.  The constants depend affinely
on the neural outputs, so the neural chain rule is one matrix transpose;
clamped targets add the derivative of their eliminated regularizer.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .energy import phi_vector
from .lcqp import SolverFailure

__all__ = [
    "ValueGradients",
    "FdCheck",
    "grad_wsy",
    "subgrad_b",
    "chain_to_neural",
    "value_gradients",
    "fd_check",
]


def _require_certified(result):
    conv = np.atleast_1d(result.converged)
    inf = np.atleast_1d(result.infeasible)
    if inf.any():
        raise SolverFailure("gradient requested on an infeasible lane")
    if not conv.all():
        raise SolverFailure(
            f"gradient requested on an uncertified result "
            f"(gap {np.max(np.atleast_1d(result.gap)):.3g})"
        )


@dataclass
class ValueGradients:
    """Gradient bundle extracted from one certified inference result."""

    d_wsy: np.ndarray  # (r,) or (B, r); equals phi(y*), entrywise >= 0
    d_b: np.ndarray  # multipliers per assembled row
    d_g: np.ndarray  # (n_g,) or (B, n_g)
    at: object  # the SolveResult these came from


def grad_wsy(model, result, g=None):
    """``dV/dw = phi(y*)``: hinge feature vector at the certified argmin."""
    _require_certified(result)
    return phi_vector(model, result.y_full, g)


def subgrad_b(result):
    """``dV/db`` row-wise: the optimal dual multipliers, all >= 0."""
    _require_certified(result)
    return result.mu


def chain_to_neural(lcqp, d_b, g=None):
    """Chain row subgradients to the neural outputs: ``B_g^T mu + 2 eps g``.

    The second term appears only on clamped coordinates, whose eliminated
    box regularizer ``eps * g_j^2`` survives as a constant of the program
    (once per clamped target, so duplicates accumulate).
    """
    d_b = np.asarray(d_b, dtype=float)
    d_g = d_b @ lcqp.B_g
    if g is not None and len(lcqp.dsvar_g):
        g = np.asarray(g, dtype=float)
        extra = np.zeros_like(d_g)
        if d_g.ndim == 1:
            np.add.at(extra, lcqp.dsvar_g, 2.0 * lcqp.epsilon * g[lcqp.dsvar_g])
        else:
            np.add.at(
                extra.T, lcqp.dsvar_g, 2.0 * lcqp.epsilon * g[:, lcqp.dsvar_g].T
            )
        d_g = d_g + extra
    return d_g


def value_gradients(model, lcqp, result, g=None):
    """All Theorem-style gradients of the certified value in one bundle."""
    _require_certified(result)
    if g is None:
        g = lcqp.g_default
    return ValueGradients(
        d_wsy=phi_vector(model, result.y_full, g),
        d_b=result.mu,
        d_g=chain_to_neural(lcqp, result.mu, g),
        at=result,
    )


class FdCheck(NamedTuple):
    analytic: float
    numeric: float
    rel_err: float
    kink: bool  # one-sided differences disagree; comparison not meaningful


def fd_check(fn, point, direction, h=1e-4, kink_tol=1e-5):
    """Central-difference check of a directional derivative.

    ``fn(p) -> (value, grad)``.  When the two one-sided differences disagree
    by more than ``kink_tol`` relative, the point straddles a kink of the
    piecewise structure and the check is flagged instead of failed.
    """
    point = np.asarray(point, dtype=float)
    direction = np.asarray(direction, dtype=float)
    v0, g0 = fn(point)
    analytic = float(np.asarray(g0).ravel() @ direction.ravel())
    vp = fn(point + h * direction)[0]
    vm = fn(point - h * direction)[0]
    numeric = (vp - vm) / (2.0 * h)
    fwd = (vp - v0) / h
    bwd = (v0 - vm) / h
    scale = max(1.0, abs(fwd), abs(bwd))
    kink = abs(fwd - bwd) / scale > max(kink_tol, 4.0 * h)
    rel_err = abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))
    return FdCheck(analytic, float(numeric), float(rel_err), bool(kink))
