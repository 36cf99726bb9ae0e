"""Independent reference implementations used to cross-check the engine.

Everything here is deliberately written against the *definitions* rather than
the engine's data layout: the QP oracle orders variables differently and goes
through scipy's trust-region solver, the grid and enumeration oracles evaluate
expressions directly, and the counting oracle re-derives substitutions from
scratch.  Tests compare engine outputs against these.
"""

from __future__ import annotations

import heapq
import itertools
from typing import NamedTuple

import numpy as np

from .grounding import (
    FEAS_TOL,
    GBlock,
    GroundConstraint,
    GroundModel,
    GroundPotential,
    LinearExpr,
)

__all__ = [
    "OracleReport",
    "closed_slack_value",
    "grid_map",
    "grid_map_refined",
    "scipy_map",
    "exhaustive_map",
    "exact_policy_value_grad",
    "dijkstra",
    "sudoku_valid",
    "count_groundings",
    "random_model",
]


class OracleReport(NamedTuple):
    """One engine-vs-oracle comparison; ``ok`` iff the error is in tolerance."""

    check: str
    instance: str
    oracle: float
    engine: float
    tol: float
    ok: bool

    @classmethod
    def compare(cls, check, instance, oracle, engine, tol, relative=False):
        err = abs(float(engine) - float(oracle))
        if relative:
            err /= max(abs(float(oracle)), 1.0)
        return cls(check, instance, float(oracle), float(engine), tol,
                   bool(err <= tol))


def _effective(expr, x, g):
    """Fold fixed x and g into (y-index array, y-coef array, const)."""
    const = expr.const
    const += sum(c * x[i] for i, c in expr.x.items())
    const += sum(c * g[i] for i, c in expr.g.items())
    idx = np.array(sorted(expr.y), dtype=int)
    coef = np.array([expr.y[i] for i in idx], dtype=float)
    return idx, coef, const


def closed_slack_value(model, w, y, epsilon, g=None, feas_tol=FEAS_TOL):
    """Regularized value at fixed y with slacks analytically eliminated.

    For a squared hinge the optimal slack is ``max(l, 0)`` giving
    ``(w + eps) * h^2``; for a linear hinge likewise ``w*h + eps*h^2``.
    Adds ``eps * ||y||^2``.  Returns +inf when a hard constraint is violated
    beyond ``feas_tol`` (numerical argmins satisfy hard rows only to solver
    tolerance, so callers comparing against one pass that tolerance here).
    """
    if g is None:
        g = model.g_values
    y = np.asarray(y, dtype=float)
    total = epsilon * float(y @ y)
    for c in model.constraints:
        idx, coef, const = _effective(c.expr, model.x_values, g)
        v = const + (coef @ y[idx] if len(idx) else 0.0)
        if (abs(v) if c.equality else v) > feas_tol:
            return np.inf
    for p in model.potentials:
        idx, coef, const = _effective(p.expr, model.x_values, g)
        l = const + (coef @ y[idx] if len(idx) else 0.0)
        h = max(l, 0.0)
        wi = w[p.rule_id]
        if p.q == 2:
            total += (wi + epsilon) * h * h
        else:
            total += wi * h + epsilon * h * h
    return total


def grid_map(model, w, epsilon, step=1e-3, g=None, fixed=None, lo=None, hi=None):
    """Dense grid search over feasible y in [0,1]^n; n is expected tiny.

    ``lo``/``hi`` shrink the searched box per coordinate (clipped to [0,1]);
    used by :func:`grid_map_refined` to zoom around a coarse optimum.
    """
    if g is None:
        g = model.g_values
    n = model.n_y
    fixed = fixed or {}
    axes = []
    for i in range(n):
        if i in fixed:
            axes.append(np.array([float(fixed[i])]))
        else:
            a = 0.0 if lo is None else max(0.0, float(lo[i]))
            b = 1.0 if hi is None else min(1.0, float(hi[i]))
            axes.append(np.arange(a, b + step / 2, step))
    total = int(np.prod([len(a) for a in axes]))
    if total > 40_000_000:
        raise ValueError(f"grid of {total} points; use a coarser step")
    best_v, best_y = np.inf, None
    chunk = 2_000_000
    combos = itertools.product(*axes)
    while True:
        block = list(itertools.islice(combos, chunk))
        if not block:
            break
        pts = np.array(block)
        value = epsilon * np.sum(pts * pts, axis=1)
        feasible = np.ones(len(pts), dtype=bool)
        for c in model.constraints:
            idx, coef, const = _effective(c.expr, model.x_values, g)
            v = const + (pts[:, idx] @ coef if len(idx) else 0.0)
            feasible &= (np.abs(v) if c.equality else v) <= FEAS_TOL
        for p in model.potentials:
            idx, coef, const = _effective(p.expr, model.x_values, g)
            l = const + (pts[:, idx] @ coef if len(idx) else 0.0)
            h = np.maximum(l, 0.0)
            wi = w[p.rule_id]
            if p.q == 2:
                value += (wi + epsilon) * h * h
            else:
                value += wi * h + epsilon * h * h
        value[~feasible] = np.inf
        k = int(np.argmin(value))
        if value[k] < best_v:
            best_v, best_y = float(value[k]), pts[k].copy()
    return best_y, best_v


def grid_map_refined(model, w, epsilon, step=1e-3, coarse=1e-2, window=0.03,
                     g=None, fixed=None):
    """Two-stage grid search: full box at ``coarse``, then a ``window``-wide
    zoom at ``step`` around the coarse argmin.

    The epsilon-strong convexity of the objective keeps the true optimum
    within O(sqrt(coarse/epsilon)) of the coarse argmin, so a window a few
    coarse cells wide contains it; the coarse argmin stays among the refined
    candidates, so the refined value never regresses.
    """
    y0, v0 = grid_map(model, w, epsilon, step=coarse, g=g, fixed=fixed)
    if y0 is None:
        return y0, v0
    y1, v1 = grid_map(model, w, epsilon, step=step, g=g, fixed=fixed,
                      lo=y0 - window, hi=y0 + window)
    return (y1, v1) if v1 <= v0 else (y0, v0)


def scipy_map(model, w, epsilon, g=None, fixed=None, tol=1e-12):
    """Solve the regularized MAP program with scipy's trust-constr.

    Variables are ordered (y, squared slacks, linear slacks) with explicit
    hinge rows, so the construction shares nothing with the engine's
    assembly.  ``fixed`` pins target coordinates (their eps*t^2 still counts).
    Returns (y*, value*).
    """
    from scipy.optimize import Bounds, LinearConstraint, minimize

    if g is None:
        g = model.g_values
    fixed = fixed or {}
    n = model.n_y
    sq = [p for p in model.potentials if p.q == 2]
    lin = [p for p in model.potentials if p.q == 1]
    m_s, m_l = len(sq), len(lin)
    nvar = n + m_s + m_l

    d = np.full(nvar, epsilon)
    d[n : n + m_s] += np.array([w[p.rule_id] for p in sq])
    c = np.zeros(nvar)
    c[n + m_s :] = np.array([w[p.rule_id] for p in lin])

    rows, lbs, ubs = [], [], []
    for k, p in enumerate(itertools.chain(sq, lin)):
        idx, coef, const = _effective(p.expr, model.x_values, g)
        row = np.zeros(nvar)
        row[idx] = coef
        row[n + k] = -1.0
        rows.append(row)
        lbs.append(-np.inf)
        ubs.append(-const)
    for con in model.constraints:
        idx, coef, const = _effective(con.expr, model.x_values, g)
        row = np.zeros(nvar)
        row[idx] = coef
        rows.append(row)
        lbs.append(-const if con.equality else -np.inf)
        ubs.append(-const)

    lo = np.concatenate([np.zeros(n), np.full(m_s, -np.inf), np.zeros(m_l)])
    hi = np.concatenate([np.ones(n), np.full(m_s + m_l, np.inf)])
    for i, t in fixed.items():
        lo[i] = hi[i] = t

    v0 = np.clip((lo + np.minimum(hi, 1.0)) / 2, 0.0, 1.0)
    v0[np.isnan(v0)] = 0.0
    for k, p in enumerate(itertools.chain(sq, lin)):
        idx, coef, const = _effective(p.expr, model.x_values, g)
        v0[n + k] = max(const + coef @ v0[idx] if len(idx) else const, 0.0)

    cons = []
    if rows:
        cons.append(LinearConstraint(np.vstack(rows), np.array(lbs), np.array(ubs)))
    res = minimize(
        lambda v: float(v @ (d * v) + c @ v),
        v0,
        jac=lambda v: 2 * d * v + c,
        hess=lambda v: 2 * np.diag(d),
        method="trust-constr",
        bounds=Bounds(lo, hi),
        constraints=cons,
        options={"gtol": tol, "xtol": tol, "maxiter": 5000},
    )
    v = res.x
    return v[:n].copy(), float(v @ (d * v) + c @ v)


def exhaustive_map(model, w, levels=(0.0, 1.0), g=None, feas_tol=FEAS_TOL):
    """Enumerate level combinations, return (argmin, min) of the raw energy."""
    if g is None:
        g = model.g_values
    best_e, best_y = np.inf, None
    for combo in itertools.product(levels, repeat=model.n_y):
        y = np.array(combo)
        feasible = True
        for c in model.constraints:
            idx, coef, const = _effective(c.expr, model.x_values, g)
            v = const + (coef @ y[idx] if len(idx) else 0.0)
            if (abs(v) if c.equality else v) > feas_tol:
                feasible = False
                break
        if not feasible:
            continue
        e = 0.0
        for p in model.potentials:
            idx, coef, const = _effective(p.expr, model.x_values, g)
            l = const + (coef @ y[idx] if len(idx) else 0.0)
            e += w[p.rule_id] * max(l, 0.0) ** p.q
        if e < best_e:
            best_e, best_y = e, y
    return best_y, best_e


def exact_policy_value_grad(logits, loss_fn):
    """Expected loss under independent per-group softmax policies, with its
    exact gradient in the logits, by full enumeration.

    ``logits``: list of 1-d arrays (one per group).  ``loss_fn(choice)`` maps
    a tuple of class indices to a scalar.  Returns (J, grads) where grads
    mirrors the shape of ``logits``.
    """
    probs = []
    for z in logits:
        e = np.exp(z - np.max(z))
        probs.append(e / e.sum())
    J = 0.0
    grads = [np.zeros_like(z, dtype=float) for z in logits]
    for choice in itertools.product(*(range(len(z)) for z in logits)):
        pi = 1.0
        for k, c in enumerate(choice):
            pi *= probs[k][c]
        loss = loss_fn(choice)
        J += pi * loss
        for k, c in enumerate(choice):
            grads[k] -= pi * loss * probs[k]
            grads[k][c] += pi * loss
    return J, grads


def dijkstra(nodes, edges, source, goal):
    """Shortest path; ``edges`` maps (u, v) -> cost.  Returns (dist, edge set)."""
    adj = {}
    for (u, v), cost in edges.items():
        adj.setdefault(u, []).append((v, cost))
    dist = {source: 0.0}
    parent = {}
    heap = [(0.0, source)]
    seen = set()
    while heap:
        d, u = heapq.heappop(heap)
        if u in seen:
            continue
        seen.add(u)
        if u == goal:
            break
        for v, cost in adj.get(u, ()):
            nd = d + cost
            if nd < dist.get(v, np.inf) - 1e-12:
                dist[v] = nd
                parent[v] = u
                heapq.heappush(heap, (nd, v))
    if goal not in dist:
        return np.inf, set()
    path = set()
    node = goal
    while node != source:
        path.add((parent[node], node))
        node = parent[node]
    return dist[goal], path


def sudoku_valid(grid):
    """True when a 4x4 digit grid solves the puzzle (rows/cols/boxes)."""
    grid = np.asarray(grid, dtype=int)
    want = set(range(4))
    for i in range(4):
        if set(grid[i, :]) != want or set(grid[:, i]) != want:
            return False
    for bi in range(2):
        for bj in range(2):
            box = grid[2 * bi : 2 * bi + 2, 2 * bj : 2 * bj + 2]
            if set(box.ravel()) != want:
                return False
    return True


def count_groundings(program, tables):
    """Count surviving (potentials, constraint rows) by brute enumeration.

    Re-derives variable ranges and the pruning rule from first principles;
    shares no code with :func:`nsebm.grounding.ground`.
    """
    from .lang import ArithmeticRule

    doms = {}
    for pred, p in program.predicates.items():
        pools = [
            tables.observed.get(pred, {}),
            tables.targets.get(pred, {}),
            tables.truth.get(pred, {}),
            tables.deep.get(pred, {}),
        ]
        for pool in pools:
            for args in pool:
                for pos, a in enumerate(args):
                    doms.setdefault(p.domains[pos], set()).add(a)
    for name, members in program.domains.items():
        doms[name] = set(members)

    target_sets = {p: set(v) for p, v in tables.targets.items()}
    deep_sets = {p: set(v) for p, v in tables.deep.items()}

    def atom_kind_value(pred, args):
        kind = program.predicates[pred].kind
        if kind == "target":
            return ("free", None) if args in target_sets.get(pred, ()) else ("val", 0.0)
        if kind == "deep":
            if args not in deep_sets.get(pred, ()):
                raise ValueError("unbound deep atom")
            return ("free", None)
        return ("val", tables.observed.get(pred, {}).get(args, 0.0))

    n_pot = 0
    n_con = 0
    for rule in program.rules:
        varnames = []
        ranges = {}
        for atom in rule.atoms():
            p = program.predicates[atom.pred]
            for pos, t in enumerate(atom.args):
                if t.is_var:
                    r = doms.get(p.domains[pos], set())
                    if t.name in ranges:
                        ranges[t.name] &= r
                    else:
                        varnames.append(t.name)
                        ranges[t.name] = set(r)
        for combo in itertools.product(*(sorted(ranges[v]) for v in varnames)):
            bind = dict(zip(varnames, combo))

            def ground_args(atom):
                return tuple(bind[t.name] if t.is_var else t.name for t in atom.args)

            if isinstance(rule, ArithmeticRule):
                sign = -1.0 if rule.op == ">=" else 1.0
                const = sign * rule.const
                n_free = 0
                pos_sum = neg_sum = 0.0
                for coef, atom in rule.terms:
                    coef = sign * coef
                    kind, val = atom_kind_value(atom.pred, ground_args(atom))
                    if kind == "val":
                        const += coef * val
                    else:
                        n_free += 1
                        pos_sum += max(coef, 0.0)
                        neg_sum += min(coef, 0.0)
                lmax = const + pos_sum  # over free atoms in [0,1]
                lmin = const + neg_sum
                if rule.hard:
                    if rule.op == "=":
                        n_con += 2 if n_free else 0
                    elif n_free and lmax > 1e-12:
                        n_con += 1
                else:
                    if rule.op == "=":
                        n_pot += int(lmax > 1e-12) + int(-lmin > 1e-12)
                    elif lmax > 1e-12:
                        n_pot += 1
            else:
                # clause per head literal: body literals appear negated
                for head_lit in rule.head:
                    lits = [(l.atom, not l.negated) for l in rule.body]
                    lits.append((head_lit.atom, head_lit.negated))
                    lmax = 1.0
                    for atom, neg in lits:
                        kind, val = atom_kind_value(atom.pred, ground_args(atom))
                        if kind == "val":
                            lmax -= (1.0 - val) if neg else val
                    if lmax > 1e-12:
                        if rule.hard:
                            n_con += 1
                        else:
                            n_pot += 1
    return n_pot, n_con


def random_model(rng, n_y=6, n_g=2, n_rules=3, n_pot=8, n_ineq=2, n_eq=1):
    """Synthetic ground model with a guaranteed interior feasible point.

    Mixed hinge exponents, sparse supports, optional neural columns.  The
    interior point is stored as ``model.witness``.
    """
    z = rng.uniform(0.15, 0.85, n_y)
    g_vals = rng.uniform(0.1, 0.9, n_g) if n_g else np.zeros(0)
    rule_q = rng.integers(1, 3, n_rules)
    potentials = []
    for k in range(n_pot):
        rid = k if k < n_rules else int(rng.integers(0, n_rules))
        support = rng.choice(n_y, size=int(rng.integers(1, min(3, n_y) + 1)), replace=False)
        expr = LinearExpr()
        for i in support:
            expr.y[int(i)] = float(np.round(rng.uniform(-2, 2), 3)) or 0.5
        if n_g and rng.random() < 0.4:
            expr.g[int(rng.integers(0, n_g))] = float(np.round(rng.uniform(-1, 1), 3)) or 0.3
        expr.const = float(np.round(rng.uniform(-1, 1), 3))
        potentials.append(GroundPotential(rid, int(rule_q[rid]), expr))
    constraints = []
    for _ in range(n_ineq):
        support = rng.choice(n_y, size=min(2, n_y), replace=False)
        expr = LinearExpr()
        for i in support:
            expr.y[int(i)] = float(np.round(rng.uniform(-1.5, 1.5), 3)) or 1.0
        margin = rng.uniform(0.05, 0.3)
        expr.const = -sum(c * z[i] for i, c in expr.y.items()) - margin
        constraints.append(GroundConstraint(expr, False))
    for _ in range(n_eq):
        support = rng.choice(n_y, size=min(2, n_y), replace=False)
        expr = LinearExpr()
        for i in support:
            expr.y[int(i)] = float(np.round(rng.uniform(-1.5, 1.5), 3)) or 1.0
        expr.const = -sum(c * z[i] for i, c in expr.y.items())
        constraints.append(GroundConstraint(expr, True))
    model = GroundModel(
        y_atoms=[("Y", (str(i),)) for i in range(n_y)],
        x_atoms=[],
        x_values=np.zeros(0),
        g_atoms=[("G", (str(i),)) for i in range(n_g)],
        g_values=g_vals,
        g_blocks=[GBlock("G", 1, [(str(i),) for i in range(n_g)], list(range(n_g)))]
        if n_g
        else [],
        potentials=potentials,
        constraints=constraints,
        weights=np.round(rng.uniform(0.1, 2.0, n_rules), 3),
        rule_q=np.asarray(rule_q, dtype=int),
        rule_positions=list(range(n_rules)),
    )
    model.witness = z
    return model
