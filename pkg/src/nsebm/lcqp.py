"""Regularized LCQP assembly and a batched dual coordinate-descent solver.

MAP inference minimizes ``nu^T (D + eps*I) nu + c^T nu`` over
``nu = [s_S; s_L; y]`` subject to ``A nu + b <= 0``:

* squared hinges get a free slack ``s_S`` with diagonal weight ``w_i``,
* linear hinges get a nonnegative slack ``s_L`` with linear cost ``w_i``,
* every hinge contributes a row ``l(y) - s <= 0``,
* hard rows, slack lower bounds, and the box ``0 <= y <= 1`` fill the rest.

Rows are ordered hard / hinge (squared then linear) / lower bounds
(``s_L`` then ``y``) / upper bounds.  ``b`` is affine in the observations,
fixed targets, and neural outputs: ``b = b_const + B_x x + B_f t + B_g g``,
which is what makes one assembled problem reusable across a batch of samples
sharing structure (the batch dimension runs over lanes of ``b``).

The dual is solved by cyclic projected coordinate descent on
``h(mu) = 1/4 u^T Q^-1 u - b^T mu`` with ``u = A^T mu + c`` maintained
incrementally; each coordinate step is an exact Newton step clipped at zero.
Certificates: the primal value is evaluated at the clipped primal estimate
with slacks closed-form-optimal, the dual value bounds it from below, and
the solve reports the relative gap, worst constraint violation, and worst
complementarity residual.  Primal infeasibility surfaces as dual divergence.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grounding import FEAS_TOL

__all__ = [
    "EPSILON",
    "GAP_TOL",
    "KKT_TOL",
    "InfeasibleModel",
    "SolverFailure",
    "LCQP",
    "SolveResult",
    "assemble",
    "solve",
    "infer_full",
    "infer_latent",
    "infer_moreau",
    "prox_point",
    "round_discrete",
]

EPSILON = 1e-2
GAP_TOL = 1e-6
KKT_TOL = 1e-6
DIVERGE = 1e9


class InfeasibleModel(RuntimeError):
    """The hard constraints admit no assignment."""


class SolverFailure(RuntimeError):
    """The solver stopped without a certificate."""


@dataclass
class LCQP:
    """Assembled problem; see module docstring for the layout."""

    A: np.ndarray  # (R, C) dense
    b_const: np.ndarray  # (R,)
    B_x: np.ndarray  # (R, n_x)
    B_f: np.ndarray  # (R, n_fixed)
    B_g: np.ndarray  # (R, n_g)
    col_rule: np.ndarray  # (m_S,) dense rule id per squared-slack column
    lin_rule: np.ndarray  # (m_L,) dense rule id per linear-slack column
    free_y: np.ndarray  # (n_free,) global target indices in column order
    fixed_idx: np.ndarray  # (n_fixed,) global target indices fixed at solve
    dsvar_y: np.ndarray  # global target indices clamped to neural outputs
    dsvar_g: np.ndarray  # matching neural indices
    pot_row: np.ndarray  # (m,) row of each surviving model potential
    pot_rule: np.ndarray
    pot_q: np.ndarray
    n_y_total: int
    epsilon: float
    x_default: np.ndarray
    g_default: np.ndarray
    rows_hard: int = 0
    eq_pairs: np.ndarray = None  # first row of each expanded equality (i, i+1)

    @property
    def m_S(self):
        return len(self.col_rule)

    @property
    def m_L(self):
        return len(self.lin_rule)

    @property
    def n_free(self):
        return len(self.free_y)

    @property
    def n_cols(self):
        return self.m_S + self.m_L + self.n_free

    @property
    def n_rows(self):
        return self.A.shape[0]

    @property
    def y_col0(self):
        return self.m_S + self.m_L

    def q_diag(self, w, rho=None):
        """Diagonal of Q = D + eps*I (+ Moreau term on y columns)."""
        q = np.full(self.n_cols, self.epsilon)
        if self.m_S:
            q[: self.m_S] += w[self.col_rule]
        if rho is not None:
            q[self.y_col0 :] += 1.0 / (2.0 * rho)
        return q

    def c_vec(self, w):
        c = np.zeros(self.n_cols)
        if self.m_L:
            c[self.m_S : self.y_col0] = w[self.lin_rule]
        return c


def assemble(model, epsilon=EPSILON, fixed=None):
    """Build the LCQP for a ground model.

    ``fixed``: iterable of global target indices whose values are supplied at
    solve time (label conditioning).  Targets in ``model.dsvar_map`` are
    always eliminated by substitution of their neural output.  Bound rows are
    emitted only for free targets; fixed values are assumed to lie in [0,1].
    Hard rows that lose all variable support fold into a feasibility check
    at solve time (an all-zero row with positive ``b`` diverges immediately),
    except rows with no lane dependence at all, which are checked here.
    """
    fixed = np.array(sorted(set(fixed or ())), dtype=int)
    ds_y = np.array(sorted(model.dsvar_map), dtype=int)
    ds_g = np.array([model.dsvar_map[i] for i in ds_y], dtype=int)
    if np.intersect1d(fixed, ds_y).size:
        raise ValueError("a target cannot be both label-fixed and clamped")
    gone = {int(i): ("f", k) for k, i in enumerate(fixed)}
    gone.update({int(i): ("g", int(gi)) for i, gi in zip(ds_y, ds_g)})
    free_y = np.array(
        [i for i in range(model.n_y) if i not in gone], dtype=int
    )
    col_of = {int(i): k for k, i in enumerate(free_y)}

    sq = [p for p in model.potentials if p.q == 2]
    lin = [p for p in model.potentials if p.q == 1]
    m_s, m_l, n_f = len(sq), len(lin), len(free_y)
    n_x, n_g = model.n_x, model.n_g
    q_rows = sum(2 if c.equality else 1 for c in model.constraints)
    rows = q_rows + m_s + m_l + m_l + n_f + n_f
    cols = m_s + m_l + n_f

    A = np.zeros((rows, cols))
    b_const = np.zeros(rows)
    B_x = np.zeros((rows, n_x))
    B_f = np.zeros((rows, len(fixed)))
    B_g = np.zeros((rows, n_g))

    def fill(r, expr, sign=1.0):
        b_const[r] += sign * expr.const
        for i, cc in expr.x.items():
            B_x[r, i] += sign * cc
        for i, cc in expr.g.items():
            B_g[r, i] += sign * cc
        for i, cc in expr.y.items():
            dest = gone.get(i)
            if dest is None:
                A[r, m_s + m_l + col_of[i]] += sign * cc
            elif dest[0] == "f":
                B_f[r, dest[1]] += sign * cc
            else:
                B_g[r, dest[1]] += sign * cc

    r = 0
    eq_pairs = []
    for con in model.constraints:
        fill(r, con.expr)
        if con.equality:
            fill(r + 1, con.expr, -1.0)
            eq_pairs.append(r)
            r += 2
        else:
            r += 1
    pot_row = np.zeros(len(model.potentials), dtype=int)
    pot_rule = np.array([p.rule_id for p in model.potentials], dtype=int)
    pot_q = np.array([p.q for p in model.potentials], dtype=int)
    order = {id(p): k for k, p in enumerate(model.potentials)}
    for j, p in enumerate(sq):
        fill(r, p.expr)
        A[r, j] = -1.0
        pot_row[order[id(p)]] = r
        r += 1
    for j, p in enumerate(lin):
        fill(r, p.expr)
        A[r, m_s + j] = -1.0
        pot_row[order[id(p)]] = r
        r += 1
    for j in range(m_l):  # s_L >= 0
        A[r, m_s + j] = -1.0
        r += 1
    for k in range(n_f):  # y >= 0
        A[r, m_s + m_l + k] = -1.0
        r += 1
    for k in range(n_f):  # y <= 1
        A[r, m_s + m_l + k] = 1.0
        b_const[r] = -1.0
        r += 1

    return LCQP(
        A=A,
        b_const=b_const,
        B_x=B_x,
        B_f=B_f,
        B_g=B_g,
        col_rule=np.array([p.rule_id for p in sq], dtype=int),
        lin_rule=np.array([p.rule_id for p in lin], dtype=int),
        free_y=free_y,
        fixed_idx=fixed,
        dsvar_y=ds_y,
        dsvar_g=ds_g,
        pot_row=pot_row,
        pot_rule=pot_rule,
        pot_q=pot_q,
        n_y_total=model.n_y,
        epsilon=epsilon,
        x_default=np.asarray(model.x_values, dtype=float),
        g_default=np.asarray(model.g_values, dtype=float),
        rows_hard=q_rows,
        eq_pairs=np.array(eq_pairs, dtype=int),
    )


@dataclass
class SolveResult:
    y: np.ndarray  # (B, n_free) clipped primal targets
    y_full: np.ndarray  # (B, n_y_total) with fixed/clamped coords refilled
    nu: np.ndarray  # (B, C) raw primal estimate from the dual
    mu: np.ndarray  # (B, R) dual multipliers
    value: np.ndarray  # (B,) certified primal value (upper bound)
    dual: np.ndarray  # (B,) dual value (lower bound)
    gap: np.ndarray  # (B,) relative duality gap
    viol: np.ndarray  # (B,) worst hard-row violation at the clipped point
    compl: np.ndarray  # (B,) worst complementarity residual
    converged: np.ndarray  # (B,) bool
    infeasible: np.ndarray  # (B,) bool (dual divergence)
    sweeps: int = 0
    batched: bool = True

    def single(self):
        """View of lane 0 for unbatched callers."""
        r = SolveResult(
            self.y[0],
            self.y_full[0],
            self.nu[0],
            self.mu[0],
            float(self.value[0]),
            float(self.dual[0]),
            float(self.gap[0]),
            float(self.viol[0]),
            float(self.compl[0]),
            bool(self.converged[0]),
            bool(self.infeasible[0]),
            self.sweeps,
            batched=False,
        )
        return r


def _as_lanes(arr, B, n, name):
    if arr is None:
        raise ValueError(f"{name} values required")
    a = np.asarray(arr, dtype=float)
    if a.ndim == 1:
        a = np.broadcast_to(a, (B, n))
    if a.shape != (B, n):
        raise ValueError(f"{name} shape {a.shape} != ({B}, {n})")
    return a


def solve(
    lcqp,
    w,
    x=None,
    t=None,
    g=None,
    rho=None,
    anchor=None,
    mu0=None,
    bound_lo=None,
    bound_hi=None,
    gap_tol=GAP_TOL,
    kkt_tol=KKT_TOL,
    max_sweeps=None,
    check_every=8,
    polish=True,
    raise_infeasible=True,
    raise_failure=True,
):
    """Batched solve; lanes come from the leading dim of t/g/x/anchor/bounds.

    ``rho``/``anchor`` add the Moreau envelope ``||y - anchor||^2 / (2 rho)``.
    ``bound_lo``/``bound_hi`` tighten the free-target box per lane (rounding
    search).  Returns a :class:`SolveResult`; infeasible lanes are flagged
    and raise :class:`InfeasibleModel` unless ``raise_infeasible=False``.

    ``polish=True`` finishes lanes whose sweep progress has flattened with an
    interior-point solve of the same LCQP; the polished multipliers are kept
    only when they tighten the certificate, so the duality-gap/KKT guarantees
    are unchanged.
    """
    w = np.asarray(w, dtype=float)
    R, C = lcqp.n_rows, lcqp.n_cols
    n_f, m_s, m_l = lcqp.n_free, lcqp.m_S, lcqp.m_L
    y0 = lcqp.y_col0

    B = 1
    for arr, n in ((x, None), (t, None), (g, None), (anchor, None)):
        if arr is not None and np.ndim(arr) == 2:
            B = max(B, np.shape(arr)[0])
    for arr in (bound_lo, bound_hi, mu0):
        if arr is not None and np.ndim(arr) == 2:
            B = max(B, np.shape(arr)[0])

    x = _as_lanes(x if x is not None else lcqp.x_default, B, lcqp.B_x.shape[1], "x")
    g = _as_lanes(g if g is not None else lcqp.g_default, B, lcqp.B_g.shape[1], "g")
    if lcqp.B_f.shape[1]:
        t = _as_lanes(t, B, lcqp.B_f.shape[1], "t")
    else:
        t = np.zeros((B, 0))

    b = lcqp.b_const + x @ lcqp.B_x.T + t @ lcqp.B_f.T + g @ lcqp.B_g.T
    lo = _as_lanes(bound_lo if bound_lo is not None else np.zeros(n_f), B, n_f, "lo")
    hi = _as_lanes(bound_hi if bound_hi is not None else np.ones(n_f), B, n_f, "hi")
    r_ylb = lcqp.rows_hard + m_s + m_l + m_l
    r_yub = r_ylb + n_f
    b = np.array(b, copy=True)
    b[:, r_ylb : r_ylb + n_f] = lo  # -y + lo <= 0
    b[:, r_yub : r_yub + n_f] = -hi  # y - hi <= 0

    eps = lcqp.epsilon
    qd = lcqp.q_diag(w, rho)
    c = np.broadcast_to(lcqp.c_vec(w), (B, C)).copy()
    const = eps * np.sum(t * t, axis=1)
    if len(lcqp.dsvar_g):
        gi = g[:, lcqp.dsvar_g]
        const = const + eps * np.sum(gi * gi, axis=1)
    if rho is not None:
        anc = _as_lanes(anchor, B, n_f, "anchor")
        c[:, y0:] -= anc / rho
        const = const + np.sum(anc * anc, axis=1) / (2.0 * rho)

    # row geometry
    kappa = 0.5 * (lcqp.A * lcqp.A / qd).sum(axis=1)
    zero_rows = kappa <= 0.0
    infeasible = (b[:, zero_rows] > FEAS_TOL).any(axis=1)
    seq_rows = [
        (i, np.nonzero(lcqp.A[i])[0])
        for i in range(lcqp.rows_hard + m_s + m_l)
        if not zero_rows[i]
    ]
    seq_rows = [(i, cols, lcqp.A[i, cols].copy()) for i, cols in seq_rows]
    groups = []  # vectorizable single-entry row blocks with distinct columns
    if m_l:
        rr = np.arange(lcqp.rows_hard + m_s + m_l, lcqp.rows_hard + m_s + 2 * m_l)
        groups.append((rr, np.arange(m_s, m_s + m_l), -1.0))
    if n_f:
        groups.append((np.arange(r_ylb, r_ylb + n_f), np.arange(y0, y0 + n_f), -1.0))
        groups.append((np.arange(r_yub, r_yub + n_f), np.arange(y0, y0 + n_f), 1.0))

    mu = np.zeros((B, R)) if mu0 is None else np.array(mu0, dtype=float, copy=True)
    if mu.ndim == 1:
        mu = np.broadcast_to(mu, (B, R)).copy()
    mu[:, zero_rows] = 0.0
    u = mu @ lcqp.A + c

    if max_sweeps is None:
        max_sweeps = 50 * max(R, 1)

    pot_rows = np.arange(lcqp.rows_hard, lcqp.rows_hard + m_s + m_l)
    hard_rows = np.arange(0, lcqp.rows_hard)
    live_hard = hard_rows[~zero_rows[hard_rows]]

    def certificates():
        nu = -0.5 * u / qd
        yhat = np.clip(nu[:, y0:], lo, hi)
        lvals = yhat @ lcqp.A[pot_rows, y0:].T + b[:, pot_rows]
        s = np.maximum(lvals, 0.0)
        nu_hat = np.concatenate([s, yhat], axis=1)
        P = (nu_hat * nu_hat * qd).sum(axis=1) + (c * nu_hat).sum(axis=1) + const
        G = -0.25 * (u * u / qd).sum(axis=1) + (b * mu).sum(axis=1) + const
        viol = np.zeros(B)
        if len(live_hard):
            hv = yhat @ lcqp.A[live_hard, y0:].T + b[:, live_hard]
            viol = np.maximum(viol, hv.max(axis=1).clip(min=0.0))
        if zero_rows.any():
            viol = np.maximum(viol, b[:, zero_rows].max(axis=1).clip(min=0.0))
        resid = nu @ lcqp.A.T + b
        compl = np.abs(mu * resid).max(axis=1) if R else np.zeros(B)
        gap = np.abs(P - G) / np.maximum(1.0, np.abs(P))
        return nu, yhat, P, G, gap, viol, compl

    sweeps_done = 0
    converged = np.zeros(B, dtype=bool)
    next_polish = 64
    a_scale = max(1.0, float(np.abs(lcqp.A).max())) if R else 1.0
    mu_prev = mu.copy()
    farkas_hits = np.zeros(B, dtype=int)
    for sweep in range(max_sweeps):
        for i, cols, coefs in seq_rows:
            nu_cols = -0.5 * u[:, cols] / qd[cols]
            grad = -(nu_cols @ coefs + b[:, i])
            mu_new = np.maximum(0.0, mu[:, i] - grad / kappa[i])
            delta = mu_new - mu[:, i]
            if np.any(delta):
                u[:, cols] += delta[:, None] * coefs
                mu[:, i] = mu_new
        for rr, cc, sign in groups:
            nu_cols = -0.5 * u[:, cc] / qd[cc]
            grad = -(sign * nu_cols + b[:, rr])
            mu_new = np.maximum(0.0, mu[:, rr] - grad / kappa[rr])
            delta = mu_new - mu[:, rr]
            u[:, cc] += sign * delta
            mu[:, rr] = mu_new
        sweeps_done = sweep + 1
        if (sweep + 1) % check_every == 0 or sweep + 1 == max_sweeps:
            # cancel the common component on anti-parallel row pairs (expanded
            # equalities, pinned bounds): a dual null direction that CD never
            # shrinks and that would otherwise poison the complementarity
            # measure; A^T mu and b^T mu are exactly unchanged
            if len(lcqp.eq_pairs):
                pi = lcqp.eq_pairs
                common = np.minimum(mu[:, pi], mu[:, pi + 1])
                mu[:, pi] -= common
                mu[:, pi + 1] -= common
            if n_f:
                pinned = lo == hi
                if pinned.any():
                    rl = np.arange(r_ylb, r_ylb + n_f)
                    ru = np.arange(r_yub, r_yub + n_f)
                    common = np.minimum(mu[:, rl], mu[:, ru]) * pinned
                    mu[:, rl] -= common
                    mu[:, ru] -= common
            diverged = np.abs(mu).max(axis=1) > DIVERGE
            infeasible |= diverged
            nu, yhat, P, G, gap, viol, compl = certificates()
            converged = (gap <= gap_tol) & (viol <= kkt_tol) & (compl <= kkt_tol)
            # slow dual divergence: the per-check increment of a diverging
            # lane settles on a recession direction d >= 0 with A^T d = 0 and
            # b^T d > 0, i.e. a Farkas certificate of primal infeasibility.
            # A converging lane cannot produce one (its increments must have
            # negative components), so two consecutive hits are conclusive.
            if R:
                d_mu = mu - mu_prev
                nd = np.abs(d_mu).max(axis=1)
                moving = nd >= 1e-9 * np.maximum(1.0, np.abs(mu).max(axis=1))
                cone = d_mu.min(axis=1) >= -1e-10 * nd
                a_zero = np.abs(d_mu @ lcqp.A).max(axis=1) <= 1e-12 * nd * a_scale
                b_pos = (d_mu * b).sum(axis=1) >= 1e-7 * nd
                hit = moving & cone & a_zero & b_pos & ~converged & ~infeasible
                farkas_hits = np.where(hit, farkas_hits + 1, 0)
                infeasible |= farkas_hits >= 2
                mu_prev = mu.copy()
            if np.all(converged | infeasible):
                break
            if polish and sweep + 1 >= next_polish:
                lanes = np.nonzero(~(converged | infeasible))[0]
                mu_old = mu[lanes].copy()
                gap_old = gap[lanes].copy()
                replaced = np.zeros(len(lanes), dtype=bool)
                for k, lane in enumerate(lanes):
                    mu_p, bad = _polish_lane(lcqp.A, qd, c[lane], b[lane], mu[lane])
                    if bad:
                        infeasible[lane] = True
                        continue
                    replaced[k] = True
                    mu[lane] = mu_p
                    u[lane] = lcqp.A.T @ mu_p + c[lane]
                nu, yhat, P, G, gap, viol, compl = certificates()
                worse = np.nonzero(replaced & (gap[lanes] > gap_old))[0]
                if len(worse):
                    for k in worse:
                        mu[lanes[k]] = mu_old[k]
                        u[lanes[k]] = lcqp.A.T @ mu_old[k] + c[lanes[k]]
                    nu, yhat, P, G, gap, viol, compl = certificates()
                converged = (gap <= gap_tol) & (viol <= kkt_tol) & (compl <= kkt_tol)
                if np.all(converged | infeasible):
                    break
                next_polish *= 4

    nu, yhat, P, G, gap, viol, compl = certificates()
    converged = (gap <= gap_tol) & (viol <= kkt_tol) & (compl <= kkt_tol)
    y_full = np.zeros((B, lcqp.n_y_total))
    y_full[:, lcqp.free_y] = yhat
    if len(lcqp.fixed_idx):
        y_full[:, lcqp.fixed_idx] = t
    if len(lcqp.dsvar_y):
        y_full[:, lcqp.dsvar_y] = g[:, lcqp.dsvar_g]
    res = SolveResult(
        y=yhat,
        y_full=y_full,
        nu=nu,
        mu=mu,
        value=P,
        dual=G,
        gap=gap,
        viol=viol,
        compl=compl,
        converged=converged,
        infeasible=infeasible,
        sweeps=sweeps_done,
    )
    if raise_infeasible and infeasible.any():
        raise InfeasibleModel(
            f"{int(infeasible.sum())}/{B} lanes have no feasible assignment"
        )
    if raise_failure and not np.all(converged | infeasible):
        worst = float(gap[~(converged | infeasible)].max())
        raise SolverFailure(
            f"no certificate after {sweeps_done} sweeps (worst gap {worst:.3g})"
        )
    return res


def _polish_lane(A, qd, c, b, mu, iters=120):
    """Interior-point refinement plus KKT crossover for one lane.

    Returns ``(multipliers, infeasible)``.

    Phase 1: infeasible-start primal-dual path following on
    ``min nu^T Q nu + c^T nu  s.t.  A nu + b + s = 0, s >= 0``.  The reduced
    Newton system ``(2Q + A^T diag(mu/s) A) dnu = rhs`` is positive definite
    (Q >= eps), but turns numerically singular once complementarity bottoms
    out, so the best iterate is tracked and iteration stops on stall.
    Primal infeasibility surfaces here as exponential multiplier growth;
    the normalized multipliers are then checked as a Farkas certificate.
    Coordinate sweeps cannot be relied on for this: on infeasible problems
    they can freeze at a coordinatewise-optimal, non-stationary point.

    Phase 2: the converged iterate identifies the active set cleanly
    (``mu_i > s_i``); one least-squares solve of the equality-KKT system on
    those rows lands on the exact optimum.  Min-norm splits the multiplier
    of an expanded equality evenly across its +/- rows, one side negative;
    anti-parallel adjacent pairs are repaired by moving the net to one side.
    Rows left with clearly negative multipliers mean a misidentified set and
    are dropped for a retry.  The caller keeps whichever multipliers give
    the tighter certificate, so a failed polish is harmless.

    All-zero rows (lane feasibility was checked upfront) are excluded.
    """
    live = np.nonzero(np.abs(A).sum(axis=1) > 0.0)[0]
    Al = A[live]
    bl = b[live]
    R, C = Al.shape
    out = np.zeros(len(b))
    if R == 0:
        return out, False
    a_scale = max(1.0, float(np.abs(Al).max()))
    b_scale = max(1.0, float(np.abs(bl).max()))
    nu = np.zeros(C)
    s = np.ones(R)
    m = np.ones(R)
    best_err, best_m, best_s, stall = np.inf, m, s, 0
    nm_prev = 1.0
    for _ in range(iters):
        r_d = 2.0 * qd * nu + c + Al.T @ m
        r_p = Al @ nu + bl + s
        gap = float(m @ s) / R
        err = max(np.abs(r_d).max(), np.abs(r_p).max(), gap)
        if err < best_err:
            best_err, best_m, best_s, stall = err, m.copy(), s.copy(), 0
        else:
            stall += 1
        nm = float(m.max())
        if nm > 1e8:
            # on infeasible problems the multipliers blow up exponentially
            # along a recession direction; m > 0 throughout, so this is a
            # Farkas certificate once A^T m vanishes relative to m.  The
            # primal-residual gate tells genuine divergence (r_p is pinned
            # away from zero) apart from late-phase numerical breakdown on
            # a solved problem (r_p at roundoff).
            d = m / nm
            if (
                np.abs(r_p).max() > 1e-6
                and np.abs(Al.T @ d).max() <= 1e-10 * a_scale
                and bl @ d >= 1e-6 * b_scale
            ):
                return out, True
            if nm > 1e30:
                break
        growing = nm > 1.5 * nm_prev
        nm_prev = nm
        if err < 1e-12 or (stall >= 8 and not growing):
            break
        sigma = 0.1 if gap < 1e-4 else 0.2
        r_c = m * s - sigma * gap
        w = m / s
        H = np.diag(2.0 * qd) + Al.T @ (w[:, None] * Al)
        rhs = -r_d + Al.T @ ((r_c - w * s * r_p) / s)
        try:
            dnu = np.linalg.solve(H, rhs)
        except np.linalg.LinAlgError:
            break
        ds = -r_p - Al @ dnu
        dm = -(r_c + m * ds) / s
        alpha = 1.0
        neg = ds < 0
        if neg.any():
            alpha = min(alpha, 0.995 * float((s[neg] / -ds[neg]).min()))
        neg = dm < 0
        if neg.any():
            alpha = min(alpha, 0.995 * float((m[neg] / -dm[neg]).min()))
        nu += alpha * dnu
        s += alpha * ds
        m += alpha * dm

    out[live] = best_m
    act = np.nonzero(best_m > best_s)[0]
    for _ in range(4):
        K = len(act)
        k_m = np.zeros((C + K, C + K))
        k_m[:C, :C] = np.diag(2.0 * qd)
        if K:
            k_m[:C, C:] = Al[act].T
            k_m[C:, :C] = Al[act]
        rhs = np.concatenate([-c, -bl[act]])
        sol = np.linalg.lstsq(k_m, rhs, rcond=None)[0]
        lam = sol[C:]
        for j in range(K - 1):  # expanded-equality repair
            r0, r1 = act[j], act[j + 1]
            if r1 == r0 + 1 and bl[r1] == -bl[r0] and np.array_equal(Al[r1], -Al[r0]):
                net = lam[j] - lam[j + 1]
                lam[j], lam[j + 1] = max(net, 0.0), max(-net, 0.0)
        if not K or lam.min() > -1e-8:
            cand = np.zeros(len(b))
            cand[live[act]] = np.maximum(lam, 0.0)
            u_c = A.T @ cand + c
            h_new = 0.25 * (u_c @ (u_c / qd)) - b @ cand
            u_b = A.T @ out + c
            if h_new <= 0.25 * (u_b @ (u_b / qd)) - b @ out:
                out = cand
            break
        act = np.delete(act, int(np.argmin(lam)))
    return out, False


def infer_full(model, w=None, epsilon=EPSILON, **kw):
    """MAP over all targets.  Returns (y_full, result) for a single lane."""
    w = model.weights if w is None else np.asarray(w, dtype=float)
    lcqp = assemble(model, epsilon)
    res = solve(lcqp, w, **kw).single()
    return res.y_full, res


def infer_latent(model, labels, w=None, epsilon=EPSILON, **kw):
    """Value/argmin with labeled targets fixed: ``labels`` maps index->value."""
    w = model.weights if w is None else np.asarray(w, dtype=float)
    idx = sorted(labels)
    lcqp = assemble(model, epsilon, fixed=idx)
    tvals = np.array([labels[i] for i in idx], dtype=float)
    res = solve(lcqp, w, t=tvals, **kw).single()
    return res.y_full, res


def infer_moreau(model, anchor, rho, w=None, epsilon=EPSILON, lcqp=None, **kw):
    """Moreau envelope of the value function at ``anchor``.

    Returns (M, dM/danchor, y*, result); the gradient is
    ``(anchor - y*) / rho``.
    """
    w = model.weights if w is None else np.asarray(w, dtype=float)
    if lcqp is None:
        lcqp = assemble(model, epsilon)
    res = solve(lcqp, w, rho=rho, anchor=anchor, **kw)
    single = np.ndim(anchor) == 1
    anc = np.atleast_2d(np.asarray(anchor, dtype=float))
    grad = (anc - res.y) / rho
    if single:
        res = res.single()
        return float(res.value), grad[0], res.y, res
    return res.value, grad, res.y, res


def prox_point(model, rho, w=None, epsilon=EPSILON, start=None, iters=500, tol=1e-10):
    """Fixed point of ``anchor <- y*(anchor)``: the unanchored minimizer.

    The proximal-point iteration converges to the value-function minimizer;
    used to check that ``min M = min V`` and the argmins agree.
    """
    w = model.weights if w is None else np.asarray(w, dtype=float)
    lcqp = assemble(model, epsilon)
    anchor = np.full(lcqp.n_free, 0.5) if start is None else np.asarray(start, float)
    mu = None
    for _ in range(iters):
        res = solve(lcqp, w, rho=rho, anchor=anchor, mu0=mu)
        mu = res.mu
        step = res.y[0] - anchor
        anchor = res.y[0]
        if np.abs(step).max() <= tol:
            break
    return anchor


def round_discrete(
    model,
    w=None,
    epsilon=EPSILON,
    y0=None,
    g=None,
    t=None,
    lcqp=None,
    max_backtrack=2000,
    **kw,
):
    """Round a continuous MAP state to feasible {0,1} targets.

    Greedy conditioning: repeatedly pin the most confident undecided
    coordinate (per lane, batched) to its rounded value, re-solving with
    tightened bounds and flipping the pin when the lane turns infeasible.
    Lanes that greedy cannot finish fall back to per-lane depth-first
    search over pin flips.  Returns (B, n_free) 0/1 array aligned with the
    assembled free targets.
    """
    w = model.weights if w is None else np.asarray(w, dtype=float)
    if lcqp is None:
        lcqp = assemble(model, epsilon)
    n = lcqp.n_free
    base = dict(kw)
    base.setdefault("raise_failure", False)

    res = solve(
        lcqp, w, g=g, t=t, raise_infeasible=False, **base
    )
    B = res.y.shape[0]
    lo = np.zeros((B, n))
    hi = np.ones((B, n))
    decided = np.zeros((B, n), dtype=bool)
    mu = res.mu
    y = res.y

    def resolve(lo_, hi_, mu_):
        return solve(
            lcqp,
            w,
            g=g,
            t=t,
            bound_lo=lo_,
            bound_hi=hi_,
            mu0=mu_,
            raise_infeasible=False,
            **base,
        )

    for _ in range(n):
        if decided.all():
            break
        conf = np.where(decided, -1.0, np.abs(y - 0.5))
        pick = conf.argmax(axis=1)
        lanes = np.arange(B)
        vals = (y[lanes, pick] >= 0.5).astype(float)
        active = ~decided.all(axis=1)
        prev_lo, prev_hi = lo.copy(), hi.copy()
        lo[active, pick[active]] = vals[active]
        hi[active, pick[active]] = vals[active]
        decided[lanes, pick] |= active
        r = resolve(lo, hi, mu)
        bad = r.infeasible | ((r.viol > KKT_TOL) & ~r.converged)
        if bad.any():
            flip = bad & active
            lo[flip, pick[flip]] = 1.0 - vals[flip]
            hi[flip, pick[flip]] = 1.0 - vals[flip]
            r = resolve(lo, hi, np.where(bad[:, None], 0.0, r.mu))
            still = (r.infeasible | ((r.viol > KKT_TOL) & ~r.converged)) & flip
            if still.any():
                for lane in np.nonzero(still)[0]:
                    lo[lane], hi[lane] = prev_lo[lane], prev_hi[lane]
                    out = _dfs_round(
                        lcqp, w, g, t, lo[lane], hi[lane], base, max_backtrack
                    )
                    if out is None:
                        raise InfeasibleModel("rounding found no feasible completion")
                    lo[lane] = hi[lane] = out
                    decided[lane] = True
                r = resolve(lo, hi, None)
        mu, y = r.mu, r.y

    return np.round(lo)


def _dfs_round(lcqp, w, g, t, lo0, hi0, base, budget):
    """Per-lane DFS over pin assignments; returns a feasible 0/1 vector."""
    n = lcqp.n_free
    free0 = [k for k in range(n) if lo0[k] < hi0[k]]

    def feasible(lo, hi):
        r = solve(
            lcqp,
            w,
            g=g,
            t=t,
            bound_lo=lo,
            bound_hi=hi,
            raise_infeasible=False,
            **base,
        )
        if bool(r.infeasible[0]) or (r.viol[0] > KKT_TOL and not r.converged[0]):
            return None
        return r.y[0]

    state = [(np.array(lo0), np.array(hi0), free0)]
    spent = 0
    while state and spent < budget:
        lo, hi, free = state.pop()
        yc = feasible(lo, hi)
        spent += 1
        if yc is None:
            continue
        if not free:
            return lo
        conf = sorted(free, key=lambda k: -abs(yc[k] - 0.5))
        k = conf[0]
        v = 1.0 if yc[k] >= 0.5 else 0.0
        rest = [j for j in free if j != k]
        for val in (1.0 - v, v):  # stack: preferred value popped first
            lo2, hi2 = lo.copy(), hi.copy()
            lo2[k] = hi2[k] = val
            state.append((lo2, hi2, rest))
    return None
