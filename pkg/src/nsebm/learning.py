"""Losses and the four learning algorithms for neural-symbolic energy models.

The training-data model is a list of :class:`TrainingSample`, each wrapping a
ground model (typically one connected component of a grounded program), the
labeled target coordinates ``t_Y``, and optionally a feature binding plus
labels for the neural head.  Losses decompose into a neural term on the
network outputs, a value-based term built from optimal values of the energy
(``energy``: the latent value ``V_Z``; ``sp``: structured perceptron
``V_Z - V_Y``), a minimizer-based distance ``d(y*, t_Y)``, and an L2
regularizer that contributes exactly ``lambda * ||.||^2`` to every reported
objective.

Algorithms:

* :func:`learn_modular` - train the network on its own labels, freeze it,
  then fit symbolic weights by a seeded random search over a log grid or by
  a symbolic-only gradient phase.
* :func:`learn_value_gd` - direct first-order descent using the value-function
  gradients ``dV/dw = phi(y*)`` and the chain of ``dV/db`` through the rows
  that carry neural outputs.
* :func:`learn_bilevel` - the relaxed value-function method: per-sample
  anchors ``yhat`` are coupled to the energy through Moreau-envelope
  constraints ``M(yhat) - V_Y <= iota`` handled by a bound-constrained
  augmented Lagrangian; ``iota`` is halved after every inner minimization.
* :func:`learn_policy` - score-function (REINFORCE) policy search with
  independent per-group categorical neural policies; deterministic policies
  fall back to the exact gradient path.

A note on the structured-perceptron value: fixing labeled coordinates
eliminates their box regularizer ``eps * t^2`` from the solver objective, so
:func:`loss_sp` adds that constant back.  Both terms of the difference then
minimize the same regularized objective over nested feasible sets, which
keeps the loss nonnegative up to the duality-gap tolerance.

Samples whose components share an identical LCQP structure (same constraint
matrix, offsets, fixed set, and binding shape) are grouped by
:func:`group_samples` and solved as batched lanes with per-group warm-started
duals; per-epoch work for tasks with many small identical components is a
handful of batched solves.
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import neural
from .energy import constraint_violation, hinge_values, phi_vector
from .gradients import chain_to_neural
from .grounding import FEAS_TOL
from .lcqp import (
    EPSILON,
    GAP_TOL,
    InfeasibleModel,
    SolverFailure,
    assemble,
    solve,
)

__all__ = [
    "LearningFailure",
    "TrainingSample",
    "LossConfig",
    "BilevelState",
    "PolicyConfig",
    "TrainLog",
    "group_samples",
    "loss_energy",
    "loss_sp",
    "loss_minimizer",
    "learn_modular",
    "learn_value_gd",
    "learn_bilevel",
    "learn_policy",
    "enumerated_policy_gradient",
    "sampled_policy_gradient",
]


class LearningFailure(RuntimeError):
    """Training aborted: solver failure, divergence, or bad configuration."""


# ---------------------------------------------------------------------------
# training data


@dataclass
class TrainingSample:
    """One supervised instance over a (component of a) ground model.

    ``labels`` maps target indices to values in [0, 1]; the complement of its
    key set is the latent domain.  ``binding`` carries the per-example neural
    inputs and the contiguous block each example fills in the flat ``g``
    vector; ``nn_labels``/``nn_mask`` give head targets for the labeled rows.
    """

    model: object
    labels: dict = field(default_factory=dict)
    binding: object = None
    nn_labels: np.ndarray = None  # (rows, width)
    nn_mask: np.ndarray = None  # (rows,) bool
    tag: str = ""

    def __post_init__(self):
        for i, v in self.labels.items():
            if not (0 <= i < self.model.n_y):
                raise ValueError(f"label index {i} out of range")
            if not (-1e-9 <= v <= 1 + 1e-9):
                raise ValueError(f"label value {v} outside [0, 1]")
        if self.binding is not None and self.nn_mask is None:
            self.nn_mask = np.zeros(len(self.binding.starts), dtype=bool)


@dataclass
class LossConfig:
    """Which loss terms are active and their coefficients.

    ``neural``:    {"bce", "mse", "none"} on labeled network outputs.
    ``value``:     {"energy", "sp", "none"}, scaled by ``value_coef``.
    ``minimizer``: {"bce", "mse", "none"} distance d for minimizer losses.
    ``reg_wsy``/``reg_wnn``: L2 coefficients of the regularizer R.
    """

    neural: str = "none"
    value: str = "none"
    minimizer: str = "none"
    value_coef: float = 1.0
    reg_wsy: float = 0.0
    reg_wnn: float = 0.0

    def validate(self):
        if self.neural not in ("bce", "mse", "none"):
            raise ValueError(f"bad neural loss {self.neural!r}")
        if self.value not in ("energy", "sp", "none"):
            raise ValueError(f"bad value loss {self.value!r}")
        if self.minimizer not in ("bce", "mse", "none"):
            raise ValueError(f"bad minimizer distance {self.minimizer!r}")
        if min(self.value_coef, self.reg_wsy, self.reg_wnn) < 0:
            raise ValueError("loss coefficients must be nonnegative")
        if (self.neural, self.value, self.minimizer) == ("none",) * 3:
            raise ValueError("at least one loss term must be active")
        return self


def _dist(kind, y, t):
    """Mean distance over the trailing axis and its gradient in ``y``."""
    y = np.asarray(y, dtype=float)
    t = np.asarray(t, dtype=float)
    n = max(y.shape[-1], 1)
    if kind == "mse":
        d = y - t
        return (d * d).sum(axis=-1) / n, 2.0 * d / n
    if kind == "bce":
        yc = np.clip(y, 1e-12, 1.0 - 1e-12)
        val = -(t * np.log(yc) + (1.0 - t) * np.log1p(-yc)).sum(axis=-1) / n
        return val, (yc - t) / (yc * (1.0 - yc)) / n
    raise ValueError(f"unknown distance {kind!r}")


# ---------------------------------------------------------------------------
# per-sample losses (reference single-lane paths)


def _sample_g(sample, mlp):
    if sample.binding is not None:
        if mlp is None:
            raise LearningFailure(
                f"sample {sample.tag!r} binds neural features but no network given"
            )
        g, _ = neural.bind_forward(mlp, sample.binding)
        return g
    return sample.model.g_values


def _fixed_value(model, w, y, g, epsilon):
    """Regularized objective at a fully specified target vector.

    Each potential's optimal slack is ``max(l, 0)`` in closed form, so the
    value needs no solve: ``sum w*h^q + eps*h^2`` (the solver's slack
    regularizer), infeasible points raise.
    """
    if constraint_violation(model, y, g) > FEAS_TOL:
        raise InfeasibleModel("labels violate a hard constraint")
    h, q, rule = hinge_values(model, y, g)
    return float((np.asarray(w)[rule] * h**q).sum() + epsilon * (h * h).sum())


def loss_energy(sample, w_sy, mlp=None, epsilon=EPSILON):
    """Latent optimal value ``V_Z``: labels fixed, latents minimized out.

    Nonnegative always; when every target is labeled the value is the
    regularized energy of the labels in closed form (no optimization).
    """
    g = _sample_g(sample, mlp)
    fixed = sorted(sample.labels)
    if len(fixed) == sample.model.n_y - len(sample.model.dsvar_map):
        y = np.zeros(sample.model.n_y)
        for i, v in sample.labels.items():
            y[i] = v
        for yi, gi in sample.model.dsvar_map.items():
            y[yi] = g[gi]
        return _fixed_value(sample.model, w_sy, y, g, epsilon)
    lq = assemble(sample.model, epsilon, fixed=fixed)
    t = np.array([sample.labels[i] for i in fixed], dtype=float)
    res = solve(lq, w_sy, t=t if fixed else None, g=g).single()
    return float(res.value)


def loss_sp(sample, w_sy, mlp=None, epsilon=EPSILON):
    """Structured perceptron ``V_Z - V_Y`` (>= -2*gap_tol up to certification).

    The latent side adds the labeled coordinates' eliminated box regularizer
    ``eps * ||t_Y||^2`` so both sides minimize the same objective over nested
    sets; see the module docstring.
    """
    g = _sample_g(sample, mlp)
    vz = loss_energy(sample, w_sy, mlp, epsilon)
    vz += epsilon * sum(v * v for v in sample.labels.values())
    lq = assemble(sample.model, epsilon)
    vy = float(solve(lq, w_sy, g=g).single().value)
    return vz - vy


def loss_minimizer(sample, w_sy, mlp=None, d="mse", epsilon=EPSILON):
    """Distance ``d`` between the full MAP state and labels, labeled coords only."""
    g = _sample_g(sample, mlp)
    lq = assemble(sample.model, epsilon)
    res = solve(lq, w_sy, g=g).single()
    idx = sorted(sample.labels)
    t = np.array([sample.labels[i] for i in idx], dtype=float)
    val, _ = _dist(d, res.y_full[idx], t)
    return float(val)


# ---------------------------------------------------------------------------
# batched sample groups


@dataclass
class SampleGroup:
    """Samples sharing one LCQP structure, solved as batched lanes."""

    samples: list
    lcqp_full: object
    lcqp_latent: object
    t: np.ndarray  # (B, L) labeled values, fixed-index order
    lab_pos: np.ndarray  # (L,) labeled positions inside lcqp_full.free_y
    x: np.ndarray = None  # (B, n_x) observed values when a model has any
    feats: np.ndarray = None  # (B*rows, d_in)
    rows: int = 0
    width: int = 0
    starts: np.ndarray = None
    nn_labels: np.ndarray = None  # (B, rows, width)
    nn_mask: np.ndarray = None  # (B, rows)
    g_fixed: np.ndarray = None  # (B, n_g) when no binding
    mu: dict = field(default_factory=dict)  # warm starts per solve flavor

    @property
    def n_lanes(self):
        return len(self.samples)

    @property
    def n_g(self):
        return self.lcqp_full.B_g.shape[1]


def _structure_key(lq):
    return (
        lq.A.tobytes(),
        lq.b_const.tobytes(),
        lq.B_x.tobytes(),
        lq.B_f.tobytes(),
        lq.B_g.tobytes(),
        lq.col_rule.tobytes(),
        lq.lin_rule.tobytes(),
        lq.free_y.tobytes(),
        lq.fixed_idx.tobytes(),
        lq.dsvar_y.tobytes(),
        lq.dsvar_g.tobytes(),
    )


def group_samples(samples, epsilon=EPSILON):
    """Partition samples into :class:`SampleGroup` by LCQP structure."""
    buckets = {}
    order = []
    for s in samples:
        fixed = sorted(s.labels)
        lq_full = assemble(s.model, epsilon)
        lq_lat = assemble(s.model, epsilon, fixed=fixed) if fixed else lq_full
        if s.binding is not None:
            bshape = (len(s.binding.starts), s.binding.width,
                      s.binding.starts.tobytes())
        else:
            bshape = None
        key = (_structure_key(lq_full), _structure_key(lq_lat), bshape)
        if key not in buckets:
            buckets[key] = (lq_full, lq_lat, [])
            order.append(key)
        buckets[key][2].append(s)

    groups = []
    for key in order:
        lq_full, lq_lat, members = buckets[key]
        fixed = sorted(members[0].labels)
        pos = {int(yi): k for k, yi in enumerate(lq_full.free_y)}
        lab_pos = np.array([pos[i] for i in fixed], dtype=int)
        t = np.array([[s.labels[i] for i in fixed] for s in members], dtype=float)
        t = t.reshape(len(members), len(fixed))
        grp = SampleGroup(members, lq_full, lq_lat, t, lab_pos)
        if members[0].model.n_x:
            grp.x = np.stack([s.model.x_values for s in members])
        b0 = members[0].binding
        if b0 is not None:
            grp.rows = len(b0.starts)
            grp.width = b0.width
            grp.starts = b0.starts
            grp.feats = np.concatenate([s.binding.features for s in members])
            grp.nn_mask = np.stack([s.nn_mask for s in members])
            if any(s.nn_labels is not None for s in members):
                grp.nn_labels = np.stack(
                    [
                        s.nn_labels
                        if s.nn_labels is not None
                        else np.zeros((grp.rows, grp.width))
                        for s in members
                    ]
                )
        elif grp.n_g:
            grp.g_fixed = np.stack([s.model.g_values for s in members])
        groups.append(grp)
    return groups


def _group_g(group, mlp):
    """Flat per-lane neural outputs ``(B, n_g)`` and the forward cache."""
    if group.feats is None:
        return group.g_fixed, None
    if mlp is None:
        raise LearningFailure(
            f"sample {group.samples[0].tag!r} binds neural features but no "
            "network given"
        )
    out, cache = neural.forward_cached(mlp, group.feats)
    B = group.n_lanes
    out3 = out.reshape(B, group.rows, group.width)
    g = np.zeros((B, group.n_g))
    for r, s0 in enumerate(group.starts):
        g[:, s0 : s0 + group.width] = out3[:, r]
    return g, cache


def _group_g_backward(group, mlp, cache, d_g):
    """Parameter gradients from per-lane upstream over the flat outputs."""
    B = group.n_lanes
    up = np.zeros((B, group.rows, group.width))
    for r, s0 in enumerate(group.starts):
        up[:, r] = d_g[:, s0 : s0 + group.width]
    return neural.backward(mlp, cache, up.reshape(B * group.rows, group.width))


def _neural_terms(group, g, kind):
    """Per-lane supervised head loss and its gradient in the flat ``g``.

    Each lane is normalized by its own labeled-coordinate count so the
    aggregate stays the mean over samples of per-sample means.
    """
    B = group.n_lanes
    losses = np.zeros(B)
    d_g = np.zeros((B, group.n_g))
    if group.nn_labels is None or not group.nn_mask.any():
        return losses, d_g
    out3 = np.stack(
        [g[:, s0 : s0 + group.width] for s0 in group.starts], axis=1
    )  # (B, rows, width)
    t = group.nn_labels
    m = group.nn_mask[:, :, None]  # broadcast over width
    counts = np.maximum(group.nn_mask.sum(axis=1) * group.width, 1)
    if kind == "mse":
        d = np.where(m, out3 - t, 0.0)
        losses = (d * d).sum(axis=(1, 2)) / counts
        grad3 = 2.0 * d / counts[:, None, None]
    elif kind == "bce":
        oc = np.clip(out3, 1e-12, 1.0 - 1e-12)
        terms = -(t * np.log(oc) + (1.0 - t) * np.log1p(-oc))
        losses = np.where(m, terms, 0.0).sum(axis=(1, 2)) / counts
        grad3 = np.where(m, (oc - t) / (oc * (1.0 - oc)), 0.0) / counts[:, None, None]
    else:
        raise ValueError(f"unknown neural loss {kind!r}")
    for r, s0 in enumerate(group.starts):
        d_g[:, s0 : s0 + group.width] += grad3[:, r]
    return losses, d_g


def _solve_group(group, flavor, w, g, rho=None, anchor=None, context=""):
    """Batched solve with per-group warm starts; failures carry sample tags."""
    lq = group.lcqp_latent if flavor == "latent" else group.lcqp_full
    t = group.t if (flavor == "latent" and group.t.shape[1]) else None
    try:
        res = solve(
            lq,
            w,
            x=group.x,
            t=t,
            g=g if group.n_g else None,
            rho=rho,
            anchor=anchor,
            mu0=group.mu.get(flavor),
            raise_infeasible=False,
            raise_failure=False,
        )
    except FloatingPointError as exc:  # pragma: no cover - numeric guard
        raise LearningFailure(f"{context}: solver error: {exc}") from exc
    bad = ~res.converged | res.infeasible
    if bad.any():
        tags = [group.samples[i].tag or str(i) for i in np.nonzero(bad)[0][:5]]
        kind = "infeasible" if res.infeasible.any() else "uncertified"
        raise LearningFailure(
            f"{context}: {kind} {flavor} inference on sample(s) {', '.join(tags)}"
        )
    group.mu[flavor] = res.mu
    return res


def _phi_rows(group, res, g):
    """Per-lane feature vectors ``phi(y*)`` stacked to ``(B, r)``."""
    out = np.empty((group.n_lanes, group.samples[0].model.r))
    for b, s in enumerate(group.samples):
        out[b] = phi_vector(s.model, res.y_full[b], g[b] if group.n_g else None)
    return out


def _tnorm(group):
    return (group.t * group.t).sum(axis=1) if group.t.shape[1] else 0.0


# ---------------------------------------------------------------------------
# training log


class TrainLog:
    """Epoch-level records; written as TSV with 9 significant digits."""

    def __init__(self):
        self.rows = []
        self.columns = []

    def add(self, **kv):
        for k in kv:
            if k not in self.columns:
                self.columns.append(k)
        self.rows.append(kv)

    def column(self, name):
        return [r.get(name) for r in self.rows]

    @staticmethod
    def _fmt(v):
        if v is None:
            return ""
        if isinstance(v, (bool, np.bool_)):
            return str(int(v))
        if isinstance(v, (int, np.integer)):
            return str(int(v))
        if isinstance(v, (float, np.floating)):
            return "%.9g" % float(v)
        return str(v)

    def write(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\t".join(self.columns) + "\n")
            for r in self.rows:
                fh.write("\t".join(self._fmt(r.get(c)) for c in self.columns) + "\n")


# ---------------------------------------------------------------------------
# shared value-based objective (value-gd, modular phase 2, delta policies)


def _value_objective(groups, config, mlp, w, need_grad=True, context=""):
    """Mean loss over all samples plus gradients in ``w`` and the network.

    Returns ``(parts, gw, pgrads)`` where ``parts`` carries the separate
    neural/value/regularizer terms; gradients are None when ``need_grad``
    is off or the corresponding component is absent.
    """
    P = sum(g.n_lanes for g in groups)
    neural_sum = 0.0
    value_sum = 0.0
    gw = np.zeros_like(np.asarray(w, dtype=float)) if need_grad else None
    pgrads = [np.zeros_like(p) for p in mlp.params] if (mlp and need_grad) else None

    for grp in groups:
        g, cache = _group_g(grp, mlp)
        d_g = np.zeros((grp.n_lanes, grp.n_g)) if grp.n_g else None

        if config.neural != "none":
            nl, d_gn = _neural_terms(grp, g, config.neural)
            neural_sum += nl.sum()
            if need_grad and d_g is not None:
                d_g += d_gn / P

        if config.value != "none":
            res_z = _solve_group(grp, "latent", w, g, context=context)
            vz = res_z.value + grp.lcqp_latent.epsilon * _tnorm(grp)
            if config.value == "sp":
                res_y = _solve_group(grp, "full", w, g, context=context)
                value_sum += config.value_coef * float((vz - res_y.value).sum())
            else:
                value_sum += config.value_coef * float(res_z.value.sum())
            if need_grad:
                phi_z = _phi_rows(grp, res_z, g)
                gw_term = phi_z.sum(axis=0)
                if config.value == "sp":
                    gw_term = gw_term - _phi_rows(grp, res_y, g).sum(axis=0)
                gw += config.value_coef * gw_term / P
                if d_g is not None:
                    ch = chain_to_neural(grp.lcqp_latent, res_z.mu, g)
                    if config.value == "sp":
                        ch = ch - chain_to_neural(grp.lcqp_full, res_y.mu, g)
                    d_g += config.value_coef * ch / P

        if need_grad and cache is not None and d_g is not None:
            for pg, dp in zip(pgrads, _group_g_backward(grp, mlp, cache, d_g)):
                pg += dp

    reg = config.reg_wsy * float(np.dot(w, w))
    if mlp is not None:
        reg += config.reg_wnn * sum(float((p * p).sum()) for p in mlp.params)
    if need_grad:
        gw += 2.0 * config.reg_wsy * np.asarray(w)
        if pgrads is not None and config.reg_wnn:
            for pg, p in zip(pgrads, mlp.params):
                pg += 2.0 * config.reg_wnn * p
    parts = {
        "neural": neural_sum / P,
        "value": value_sum / P,
        "reg": reg,
        "loss": neural_sum / P + value_sum / P + reg,
    }
    return parts, gw, pgrads


# ---------------------------------------------------------------------------
# modular learning


def learn_modular(
    train,
    config,
    mlp,
    w_sy0,
    *,
    val=None,
    metric=None,
    symbolic="auto",
    grid=None,
    draws=16,
    nn_epochs=500,
    patience=20,
    lr_nn=1e-3,
    sy_epochs=60,
    lr_sy=1e-2,
    seed=0,
    epsilon=EPSILON,
    log=None,
):
    """Two-phase training: neural on its own labels, then symbolic weights.

    Phase 1 runs AdamW on the configured head loss over all labeled feature
    rows until ``patience`` epochs pass without improvement (validation rows
    are monitored when available), restoring the best parameters.  Phase 2
    freezes the network and either scores random draws from a per-weight log
    grid on ``metric`` (higher is better) or, with ``symbolic='gradient'``,
    runs the symbolic-only gradient phase of :func:`learn_value_gd`.
    """
    config.validate()
    log = log if log is not None else TrainLog()
    rng = np.random.default_rng(seed)
    w = np.asarray(w_sy0, dtype=float).copy()

    def labeled_rows(samples):
        feats, tgts = [], []
        for s in samples or []:
            if s.binding is None or s.nn_labels is None or not s.nn_mask.any():
                continue
            feats.append(s.binding.features[s.nn_mask])
            tgts.append(s.nn_labels[s.nn_mask])
        if not feats:
            return None, None
        return np.concatenate(feats), np.concatenate(tgts)

    f_tr, t_tr = labeled_rows(train)
    f_va, t_va = labeled_rows(val)
    head_kind = config.neural if config.neural != "none" else "bce"
    if f_tr is None or mlp is None:
        warnings.warn("no neural labels available; phase 1 skipped")
    else:
        opt = neural.AdamW(lr=lr_nn, weight_decay=0.0)
        best = (np.inf, [p.copy() for p in mlp.params])
        stale = 0
        for epoch in range(nn_epochs):
            out, cache = neural.forward_cached(mlp, f_tr)
            tr_loss, d_out = neural.neural_loss(out, t_tr, kind=head_kind)
            if config.reg_wnn:
                tr_loss += config.reg_wnn * sum(
                    float((p * p).sum()) for p in mlp.params
                )
            grads = neural.backward(mlp, cache, d_out)
            if config.reg_wnn:
                grads = [gr + 2.0 * config.reg_wnn * p
                         for gr, p in zip(grads, mlp.params)]
            opt.step(mlp.params, grads)
            if f_va is not None:
                mon, _ = neural.neural_loss(neural.forward(mlp, f_va), t_va,
                                            kind=head_kind)
            else:
                mon = tr_loss
            log.add(phase=1, epoch=epoch, neural_loss=tr_loss, monitor=mon)
            if mon < best[0] - 1e-12:
                best = (mon, [p.copy() for p in mlp.params])
                stale = 0
            else:
                stale += 1
                if stale > patience:
                    break
        mlp.params[:] = best[1]

    if symbolic == "auto":
        symbolic = "grid" if (metric is not None) else "gradient"

    if symbolic == "grid":
        if metric is None:
            raise LearningFailure("grid phase needs a validation metric")
        if grid is None:
            levels = np.array([1e-2, 1e-1, 1.0, 10.0])
            n = min(draws, len(levels) ** len(w)) if len(w) else 1
            seen = {tuple(w)}
            grid = [w.copy()]
            for _ in range(50 * n):
                if len(grid) >= n + 1:
                    break
                cand = tuple(rng.choice(levels, size=len(w)))
                if cand not in seen:
                    seen.add(cand)
                    grid.append(np.array(cand))
        best_score, best_w = -np.inf, w
        for k, cand in enumerate(grid):
            cand = np.asarray(cand, dtype=float)
            score = metric(mlp, cand)
            log.add(phase=2, epoch=k, w=" ".join("%.9g" % v for v in cand),
                    metric=score)
            if score > best_score:
                best_score, best_w = score, cand.copy()
        w = best_w
    elif symbolic == "gradient":
        frozen = None if mlp is None else [p.copy() for p in mlp.params]
        _, w, _ = learn_value_gd(
            train,
            config,
            mlp,
            w,
            val=val,
            epochs=sy_epochs,
            lr_sy=lr_sy,
            freeze_nn=True,
            epsilon=epsilon,
            log=log,
        )
        if frozen is not None:
            mlp.params[:] = frozen  # freezing contract, bit-identical
    else:
        raise ValueError(f"unknown symbolic phase {symbolic!r}")
    return mlp, w, log


# ---------------------------------------------------------------------------
# value-based gradient descent


def learn_value_gd(
    train,
    config,
    mlp,
    w_sy0,
    *,
    val=None,
    epochs=100,
    lr_nn=1e-3,
    lr_sy=1e-2,
    freeze_nn=False,
    epsilon=EPSILON,
    seed=0,
    log=None,
):
    """Direct descent on value-based losses with exact first-order gradients.

    Every epoch solves latent (and, for the structured perceptron, full)
    inference per sample and applies ``dV/dw = phi(y*)`` to the symbolic
    weights (fixed step, projected onto >= 0) and the chained row gradients
    to the network (AdamW).  A solver failure on any sample aborts the epoch
    with the offending tags in the message.
    """
    config.validate()
    if config.value == "none":
        raise LearningFailure("learn_value_gd needs a value-based loss")
    if config.minimizer != "none":
        raise LearningFailure(
            "minimizer-based losses need learn_bilevel (no implicit gradients)"
        )
    log = log if log is not None else TrainLog()
    groups = group_samples(train, epsilon)
    val_groups = group_samples(val, epsilon) if val else None
    w = np.asarray(w_sy0, dtype=float).copy()
    opt = neural.AdamW(lr=lr_nn, weight_decay=0.0)

    for epoch in range(epochs):
        parts, gw, pgrads = _value_objective(
            groups, config, mlp, w, context=f"epoch {epoch}"
        )
        if mlp is not None and not freeze_nn and pgrads is not None:
            opt.step(mlp.params, pgrads)
        w = np.maximum(w - lr_sy * gw, 0.0)
        row = dict(epoch=epoch, loss=parts["loss"], value_loss=parts["value"],
                   neural_loss=parts["neural"], reg=parts["reg"])
        if val_groups:
            vparts, _, _ = _value_objective(
                val_groups, config, mlp, w, need_grad=False, context="val"
            )
            row["val_loss"] = vparts["loss"]
        log.add(**row)
    return mlp, w, log


# ---------------------------------------------------------------------------
# bilevel value-function optimization


@dataclass
class BilevelState:
    """Anchors, slacks, multipliers, and schedule of the relaxed method."""

    yhat: list  # per group, (B, n_free) anchors
    s: np.ndarray  # (P,) slack per constraint, >= 0
    lam: np.ndarray  # (P,) multipliers
    mu_pen: float
    iota: float
    rho: float
    iota_init: float = 0.0
    c: np.ndarray = None  # most recent constraint values


def _bilevel_init(groups, mlp, w, rho, epsilon):
    """Anchors at the latent minimizers; iota at the worst Moreau gap.

    At this point every constraint value ``c_i = M(yhat) - V_Y - iota`` is
    nonpositive and the supervised distance d is exactly zero.
    """
    yhat, gaps = [], []
    for grp in groups:
        g, _ = _group_g(grp, mlp)
        res_z = _solve_group(grp, "latent", w, g, context="bilevel init")
        anchors = res_z.y_full[:, grp.lcqp_full.free_y]
        yhat.append(anchors)
        res_m = _solve_group(grp, "moreau", w, g, rho=rho, anchor=anchors,
                             context="bilevel init")
        res_y = _solve_group(grp, "full", w, g, context="bilevel init")
        gaps.append(res_m.value - res_y.value)
    gaps = np.concatenate(gaps)
    iota = max(float(gaps.max()), 1e-8)
    state = BilevelState(
        yhat=yhat,
        s=np.maximum(iota - gaps, 0.0),
        lam=np.zeros(len(gaps)),
        mu_pen=10.0,
        iota=iota,
        rho=rho,
        iota_init=iota,
        c=gaps - iota,
    )
    return state


def _bilevel_eval(groups, config, mlp, w, state, need_grad=True, context=""):
    """Augmented Lagrangian value and gradients at the current point.

    Per sample: ``c_i = M(yhat_i; rho) - V_Y_i - iota``; the objective is
    ``mean(base_i) + sum lam_i (c_i + s_i) + mu/2 sum (c_i + s_i)^2 + R``
    with ``base_i`` the configured neural/value terms plus ``d(yhat, t_Y)``.
    """
    P = sum(g.n_lanes for g in groups)
    base_sum = 0.0
    d_sum = 0.0
    cs = []
    cache_rows = []
    for gi, grp in enumerate(groups):
        g, cache = _group_g(grp, mlp)
        res_m = _solve_group(grp, "moreau", w, g, rho=state.rho,
                             anchor=state.yhat[gi], context=context)
        res_y = _solve_group(grp, "full", w, g, context=context)
        c_lane = res_m.value - res_y.value - state.iota
        cs.append(c_lane)

        d_val = np.zeros(grp.n_lanes)
        d_grad = None
        if config.minimizer != "none" and grp.t.shape[1]:
            d_val, d_grad = _dist(
                config.minimizer, state.yhat[gi][:, grp.lab_pos], grp.t
            )
        nl = np.zeros(grp.n_lanes)
        d_gn = None
        if config.neural != "none":
            nl, d_gn = _neural_terms(grp, g, config.neural)
        vz = np.zeros(grp.n_lanes)
        res_z = None
        if config.value != "none":
            res_z = _solve_group(grp, "latent", w, g, context=context)
            vz = res_z.value + grp.lcqp_latent.epsilon * _tnorm(grp)
            if config.value == "sp":
                vz = vz - res_y.value
            vz = config.value_coef * vz
        base_sum += float((d_val + nl + vz).sum())
        d_sum += float(d_val.sum())
        cache_rows.append((grp, g, cache, res_m, res_y, res_z, d_grad, d_gn))

    c = np.concatenate(cs)
    viol = c + state.s
    reg = config.reg_wsy * float(np.dot(w, w))
    if mlp is not None:
        reg += config.reg_wnn * sum(float((p * p).sum()) for p in mlp.params)
    la = base_sum / P + float(state.lam @ viol) + 0.5 * state.mu_pen * float(
        viol @ viol
    ) + reg
    diag = {
        "la": la,
        "base": base_sum / P,
        "d": d_sum / P,
        "c": c,
        "max_c": float(c.max()),
        "viol": float(np.maximum(c, 0.0).max()),
    }
    if not need_grad:
        return diag, None

    beta = state.lam + state.mu_pen * viol  # multiplier estimates per sample
    gw = 2.0 * config.reg_wsy * np.asarray(w, dtype=float).copy()
    pgrads = [np.zeros_like(p) for p in mlp.params] if mlp is not None else None
    if pgrads is not None and config.reg_wnn:
        for pg, p in zip(pgrads, mlp.params):
            pg += 2.0 * config.reg_wnn * p
    gyhat = []
    off = 0
    for grp, g, cache, res_m, res_y, res_z, d_grad, d_gn in cache_rows:
        B = grp.n_lanes
        bet = beta[off : off + B]
        off += B

        gy = bet[:, None] * (state.yhat[len(gyhat)] - res_m.y) / state.rho
        if d_grad is not None:
            gy[:, grp.lab_pos] += d_grad / P
        gyhat.append(gy)

        phi_m = _phi_rows(grp, res_m, g)
        phi_y = _phi_rows(grp, res_y, g)
        gw += bet @ (phi_m - phi_y)
        if config.value != "none":
            phi_z = _phi_rows(grp, res_z, g)
            gw += config.value_coef / P * phi_z.sum(axis=0)
            if config.value == "sp":
                gw -= config.value_coef / P * phi_y.sum(axis=0)

        if cache is not None:
            ch = bet[:, None] * (
                chain_to_neural(grp.lcqp_full, res_m.mu, g)
                - chain_to_neural(grp.lcqp_full, res_y.mu, g)
            )
            if d_gn is not None:
                ch += d_gn / P
            if config.value != "none":
                cz = chain_to_neural(grp.lcqp_latent, res_z.mu, g)
                if config.value == "sp":
                    cz = cz - chain_to_neural(grp.lcqp_full, res_y.mu, g)
                ch += config.value_coef / P * cz
            for pg, dp in zip(pgrads, _group_g_backward(grp, mlp, cache, ch)):
                pg += dp

    grads = {"w": gw, "params": pgrads, "yhat": gyhat, "s": beta.copy()}
    return diag, grads


def learn_bilevel(
    train,
    config,
    mlp,
    w_sy0,
    *,
    val=None,
    metric=None,
    rho=1.0,
    outer_max=12,
    inner_steps=200,
    inner_tol=1e-4,
    mu_cap=1e8,
    patience=5,
    freeze_nn=False,
    epsilon=EPSILON,
    seed=0,
    log=None,
):
    """Relaxed value-function bilevel learning with an augmented Lagrangian.

    Initialization places each anchor at its latent minimizer and ``iota`` at
    the worst Moreau gap, so the supervised loss starts at exactly zero and
    all constraints hold.  Each outer round runs a projected-gradient inner
    minimization with backtracking (monotone by construction) over
    ``(w_sy, w_nn, yhat, s)``, then updates multipliers
    ``lam_i += mu_pen * (c_i + s_i)``, grows ``mu_pen`` tenfold whenever the
    worst violation fails to halve, and halves ``iota``.  Stops when ``iota``
    falls below ``iota_init * 2**-10``, after ``patience`` non-improving
    validation rounds, or at ``outer_max``; the penalty exceeding ``mu_cap``
    aborts with diagnostics.
    """
    config.validate()
    if config.minimizer == "none":
        raise LearningFailure("learn_bilevel needs a minimizer-based distance")
    log = log if log is not None else TrainLog()
    groups = group_samples(train, epsilon)
    w = np.asarray(w_sy0, dtype=float).copy()
    state = _bilevel_init(groups, mlp, w, rho, epsilon)
    prev_viol = np.inf
    best = (-np.inf, None, None)
    stale = 0
    trainable = mlp is not None and not freeze_nn

    def project(w_, yhat_, s_):
        w_ = np.maximum(w_, 0.0)
        yhat_ = [np.clip(yh, 0.0, 1.0) for yh in yhat_]
        return w_, yhat_, np.maximum(s_, 0.0)

    for outer in range(outer_max):
        alpha = 1.0 / (1.0 + state.mu_pen)
        diag, grads = _bilevel_eval(groups, config, mlp, w, state,
                                    context=f"outer {outer}")
        for step in range(inner_steps):
            accepted = False
            for _ in range(40):
                w_n = w - alpha * grads["w"]
                yh_n = [yh - alpha * gy
                        for yh, gy in zip(state.yhat, grads["yhat"])]
                s_n = state.s - alpha * grads["s"]
                w_n, yh_n, s_n = project(w_n, yh_n, s_n)
                if trainable:
                    saved = [p.copy() for p in mlp.params]
                    for p, gp in zip(mlp.params, grads["params"]):
                        p -= alpha * gp
                move = float(
                    ((w_n - w) ** 2).sum()
                    + sum(((a - b) ** 2).sum()
                          for a, b in zip(yh_n, state.yhat))
                    + ((s_n - state.s) ** 2).sum()
                    + (sum(((p - q) ** 2).sum()
                           for p, q in zip(mlp.params, saved))
                       if trainable else 0.0)
                )
                trial_state = replace(state, yhat=yh_n, s=s_n)
                tdiag, tgrads = _bilevel_eval(groups, config, mlp, w_n,
                                              trial_state,
                                              context=f"outer {outer}")
                if tdiag["la"] <= diag["la"] - 1e-4 * move / max(alpha, 1e-300):
                    w, state.yhat, state.s = w_n, yh_n, s_n
                    diag, grads = tdiag, tgrads
                    alpha = min(alpha * 2.0, 1e3)
                    accepted = True
                    break
                if trainable:
                    mlp.params[:] = saved
                alpha *= 0.5
                if alpha < 1e-16:
                    break
            if not accepted:
                break
            pg = max(
                np.abs(w - np.maximum(w - grads["w"], 0.0)).max(initial=0.0),
                max(
                    (np.abs(yh - np.clip(yh - gy, 0.0, 1.0)).max(initial=0.0)
                     for yh, gy in zip(state.yhat, grads["yhat"])),
                    default=0.0,
                ),
                np.abs(state.s - np.maximum(state.s - grads["s"], 0.0)).max(
                    initial=0.0
                ),
                max(
                    (np.abs(gp).max(initial=0.0) for gp in grads["params"]),
                    default=0.0,
                ) if trainable else 0.0,
            )
            if pg <= inner_tol:
                break

        state.c = diag["c"]
        state.lam = state.lam + state.mu_pen * (state.c + state.s)
        viol = diag["viol"]
        if viol > 0.5 * prev_viol and viol > 1e-10:
            state.mu_pen *= 10.0
            if state.mu_pen > mu_cap:
                raise LearningFailure(
                    f"augmented-Lagrangian penalty exceeded {mu_cap:g} at outer "
                    f"round {outer} (worst violation {viol:.3g}); the inner "
                    "problem is diverging"
                )
        prev_viol = max(viol, 1e-12)
        state.s = np.maximum(-state.c - state.lam / state.mu_pen, 0.0)

        score = None
        if metric is not None:
            score = metric(mlp, w)
        elif val:
            score = -_bilevel_val_loss(val, config, mlp, w, epsilon)
        log.add(outer=outer, la=diag["la"], base=diag["base"], d=diag["d"],
                max_c=diag["max_c"], viol=viol, mu_pen=state.mu_pen,
                iota=state.iota, val_metric=score)
        if score is not None:
            if score > best[0] + 1e-12:
                best = (score, [p.copy() for p in mlp.params] if mlp else None,
                        w.copy())
                stale = 0
            else:
                stale += 1
                if stale >= patience:
                    break
        state.iota *= 0.5
        if state.iota <= state.iota_init * 2.0**-10:
            break

    if best[2] is not None:
        if mlp is not None and best[1] is not None:
            mlp.params[:] = best[1]
        w = best[2]
    return mlp, w, log


def _bilevel_val_loss(val, config, mlp, w, epsilon):
    d = config.minimizer if config.minimizer != "none" else "mse"
    vals = [loss_minimizer(s, w, mlp, d=d, epsilon=epsilon) for s in val]
    return float(np.mean(vals)) if vals else 0.0


# ---------------------------------------------------------------------------
# stochastic policy optimization


@dataclass
class PolicyConfig:
    """Sampling policies for the stochastic reformulation.

    ``pi_nn``: "categorical" draws one class per softmax head group
    (independent-categorical estimator); "delta" passes the network output
    through unchanged.  ``pi_sy``: "delta" keeps the symbolic weights
    deterministic (their gradient then follows the exact value-function
    path); "lognormal" samples ``w * exp(sigma * xi)`` with a score-function
    gradient.  ``n_samples`` draws are averaged per step.
    """

    pi_nn: str = "categorical"
    pi_sy: str = "delta"
    n_samples: int = 4
    baseline: bool = True
    sigma_sy: float = 0.1
    floor: float = 1e-9

    def validate(self):
        if self.pi_nn not in ("categorical", "delta"):
            raise ValueError(f"bad neural policy {self.pi_nn!r}")
        if self.pi_sy not in ("delta", "lognormal"):
            raise ValueError(f"bad symbolic policy {self.pi_sy!r}")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        return self


def _floor_probs(p, floor):
    """Clip probabilities away from zero and renormalize rows."""
    p = np.maximum(p, floor)
    return p / p.sum(axis=-1, keepdims=True)


def enumerated_policy_gradient(probs, j_fn):
    """Expected loss and exact logit-space gradient by full enumeration.

    ``probs`` is a list of per-group probability vectors; ``j_fn(choice)``
    maps a tuple of class indices to a scalar.  This is the estimator's
    enumeration-weighted limit, which equals the exact policy gradient.
    """
    total = 0.0
    grads = [np.zeros_like(np.asarray(p, dtype=float)) for p in probs]
    for choice in itertools.product(*(range(len(p)) for p in probs)):
        pi = 1.0
        for p, c in zip(probs, choice):
            pi *= p[c]
        j = j_fn(choice)
        total += pi * j
        for k, (p, c) in enumerate(zip(probs, choice)):
            score = -np.asarray(p, dtype=float)
            score[c] += 1.0
            grads[k] += pi * j * score
    return total, grads


def sampled_policy_gradient(probs, j_fn, n, rng, baseline=0.0, floor=1e-9):
    """N-sample REINFORCE estimate of the logit-space policy gradient."""
    probs = [_floor_probs(np.asarray(p, dtype=float), floor) for p in probs]
    grads = [np.zeros_like(p) for p in probs]
    for _ in range(n):
        choice = tuple(rng.choice(len(p), p=p) for p in probs)
        j = j_fn(choice) - baseline
        for k, (p, c) in enumerate(zip(probs, choice)):
            score = -p.copy()
            score[c] += 1.0
            grads[k] += j * score / n
    return grads


def learn_policy(
    train,
    config,
    mlp,
    w_sy0,
    policy=None,
    *,
    val=None,
    epochs=100,
    lr_nn=1e-3,
    lr_sy=1e-2,
    freeze_nn=False,
    epsilon=EPSILON,
    seed=0,
    log=None,
):
    """Score-function policy optimization of the configured loss.

    Per epoch and sample, ``n_samples`` outcomes are drawn from the neural
    (and optionally symbolic) policies; the loss at each sampled energy
    weights the score of the draw.  Labeled head rows are clamped to their
    labels and never sampled (an interpretation choice: the alternative of
    sampling labeled coordinates is not taken).  With both policies set to
    "delta" the step reduces to the exact value-function gradient path.
    """
    config.validate()
    policy = (policy or PolicyConfig()).validate()
    if config.value == "none" and config.minimizer == "none":
        raise LearningFailure("learn_policy needs a value or minimizer loss")
    if config.minimizer != "none" and policy.pi_sy == "delta":
        warnings.warn(
            "minimizer loss with a delta symbolic policy leaves w_sy fixed "
            "(no pathwise minimizer gradient)"
        )
    log = log if log is not None else TrainLog()
    rng = np.random.default_rng(seed)
    groups = group_samples(train, epsilon)
    w = np.asarray(w_sy0, dtype=float).copy()
    opt = neural.AdamW(lr=lr_nn, weight_decay=0.0)
    baseline = None
    P = sum(g.n_lanes for g in groups)

    if policy.pi_nn == "categorical":
        for grp in groups:
            if grp.feats is not None and mlp is not None \
                    and mlp.head != "softmax":
                raise LearningFailure(
                    "categorical policy requires a softmax-grouped head"
                )

    delta_path = policy.pi_nn == "delta" and policy.pi_sy == "delta"
    if delta_path and config.value == "none":
        raise LearningFailure(
            "deterministic policies reduce to the value-gradient path, which "
            "needs a value-based loss"
        )
    for epoch in range(epochs):
        if delta_path:
            parts, gw, pgrads = _value_objective(
                groups, config, mlp, w, context=f"epoch {epoch}"
            )
            if mlp is not None and not freeze_nn and pgrads is not None:
                opt.step(mlp.params, pgrads)
            w = np.maximum(w - lr_sy * gw, 0.0)
            log.add(epoch=epoch, loss=parts["loss"], mean_j=parts["loss"],
                    baseline=baseline)
            continue

        gw = 2.0 * config.reg_wsy * w
        pgrads = [np.zeros_like(p) for p in mlp.params] if mlp else None
        if pgrads is not None and config.reg_wnn:
            for pg, p in zip(pgrads, mlp.params):
                pg += 2.0 * config.reg_wnn * p
        j_all = []
        for grp in groups:
            g, cache = _group_g(grp, mlp)
            B = grp.n_lanes
            up_total = np.zeros((B, grp.n_g)) if grp.n_g else None
            for _ in range(policy.n_samples):
                if policy.pi_sy == "lognormal":
                    xi = rng.standard_normal(len(w))
                    h_sy = w * np.exp(policy.sigma_sy * xi)
                else:
                    h_sy = w
                h, p_eff, picks = _sample_heads(grp, g, policy, rng)
                js = _policy_loss(grp, config, h_sy, h, context=f"epoch {epoch}")
                j_all.extend(js.tolist())
                j_adj = js - (baseline or 0.0)
                if policy.pi_sy == "lognormal":
                    score_w = np.where(w > 0, policy.sigma_sy * xi /
                                       (policy.sigma_sy**2 * np.maximum(w, 1e-12)),
                                       0.0)
                    gw += j_adj.mean() * score_w / policy.n_samples
                elif config.value != "none":
                    gw += _delta_wsy_grad(grp, config, h_sy, h) / (
                        policy.n_samples * P
                    )
                if up_total is not None and picks is not None:
                    up_total += _score_upstream(grp, p_eff, picks, j_adj) / (
                        policy.n_samples * P
                    )
            if cache is not None and up_total is not None and not freeze_nn:
                for pg, dp in zip(
                    pgrads, _group_g_backward(grp, mlp, cache, up_total)
                ):
                    pg += dp
        if mlp is not None and not freeze_nn and pgrads is not None:
            opt.step(mlp.params, pgrads)
        w = np.maximum(w - lr_sy * gw, 0.0)
        mean_j = float(np.mean(j_all)) if j_all else 0.0
        baseline = mean_j if (baseline is None or not policy.baseline) \
            else 0.9 * baseline + 0.1 * mean_j
        log.add(epoch=epoch, loss=mean_j, mean_j=mean_j, baseline=baseline)
    return mlp, w, log


def _sample_heads(grp, g, policy, rng):
    """Draw per-group categorical outcomes; labeled rows stay clamped.

    Returns ``(h, p_eff, picks)``: the sampled flat outputs, the floored
    probabilities used, and the chosen class per (lane, row) with -1 marking
    clamped rows.
    """
    if policy.pi_nn == "delta" or grp.feats is None:
        return g, None, None
    B = grp.n_lanes
    p3 = np.stack([g[:, s0 : s0 + grp.width] for s0 in grp.starts], axis=1)
    p_eff = _floor_probs(p3, policy.floor)
    u = rng.random((B, grp.rows, 1))
    picks = (p_eff.cumsum(axis=2) < u).sum(axis=2)
    picks = np.minimum(picks, grp.width - 1)
    if grp.nn_mask is not None and grp.nn_mask.any():
        lab = grp.nn_labels.argmax(axis=2)
        picks = np.where(grp.nn_mask, lab, picks)
    h3 = np.zeros_like(p3)
    np.put_along_axis(h3, picks[:, :, None], 1.0, axis=2)
    h = np.zeros((B, grp.n_g))
    for r, s0 in enumerate(grp.starts):
        h[:, s0 : s0 + grp.width] = h3[:, r]
    if grp.nn_mask is not None and grp.nn_mask.any():
        picks = np.where(grp.nn_mask, -1, picks)
    return h, p_eff, picks


def _score_upstream(grp, p_eff, picks, j_adj):
    """Upstream that backpropagates ``J * (onehot - p)`` into head logits.

    The softmax head's backward maps an upstream ``J * e_k / p_k`` to exactly
    the score ``J * (e_k - p)`` in logit space; clamped rows get zero.
    """
    B, rows, width = p_eff.shape
    up3 = np.zeros((B, rows, width))
    sampled = picks >= 0
    b, r = np.nonzero(sampled)
    k = picks[b, r]
    up3[b, r, k] = j_adj[b] / p_eff[b, r, k]
    up = np.zeros((B, grp.n_g))
    for r0, s0 in enumerate(grp.starts):
        up[:, s0 : s0 + grp.width] = up3[:, r0]
    return up


def _policy_loss(grp, config, w, h, context=""):
    """Per-lane configured loss at the sampled energy arguments."""
    if config.value != "none":
        res_z = _solve_group(grp, "latent", w, h, context=context)
        js = res_z.value + grp.lcqp_latent.epsilon * _tnorm(grp)
        if config.value == "sp":
            res_y = _solve_group(grp, "full", w, h, context=context)
            js = js - res_y.value
        return config.value_coef * js
    res_y = _solve_group(grp, "full", w, h, context=context)
    val, _ = _dist(config.minimizer, res_y.y_full[:, grp.lcqp_full.free_y]
                   [:, grp.lab_pos], grp.t)
    return val


def _delta_wsy_grad(grp, config, w, h):
    """Pathwise value-loss gradient in ``w`` at a sampled neural outcome."""
    res_z = _solve_group(grp, "latent", w, h, context="policy")
    gw = config.value_coef * _phi_rows(grp, res_z, h).sum(axis=0)
    if config.value == "sp":
        res_y = _solve_group(grp, "full", w, h, context="policy")
        gw -= config.value_coef * _phi_rows(grp, res_y, h).sum(axis=0)
    return gw
