"""Grounding: instantiate rule templates into hinge potentials and constraints.

A ground model partitions ground atoms into targets ``y`` (free variables of
MAP inference), observations ``x`` (fixed values), and neural outputs ``g``.
Weighted rules instantiate into hinge-loss potentials ``max(l, 0)^q`` with
``l`` affine in (y, x, g); hard rules instantiate into linear constraints.
Logical rules pass through Łukasiewicz logic: a clause's distance to
satisfaction is ``max(l, 0)`` with ``l = 1 - sum_pos v - sum_neg (1 - v)``.

Serialized ground-model format (``dump_model``/``load_model``), one record per
line, tab separated::

    groundmodel 1
    yatom   <index> <atom>
    xatom   <index> <atom> <value>
    gatom   <index> <atom> <value>
    gblock  <pred> <width> <first-group-atom-index> ...
    weight  <dense-rule-id> <weight> <q> <program-rule-position>
    potential   <dense-rule-id> <q> <expr>
    constraint  <eq|le> <expr>
    dsvar   <y-index> <g-index>

where ``<expr>`` is ``y:i:c ... x:i:c ... g:i:c ... k:<const>`` with
coefficients printed at full precision and terms sorted by kind then index.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .lang import Atom, ArithmeticRule, LangError, LogicalRule, const

__all__ = [
    "GroundingError",
    "LinearExpr",
    "GroundPotential",
    "GroundConstraint",
    "GBlock",
    "GroundModel",
    "DataTables",
    "load_tsv_atoms",
    "load_data",
    "normalize_logical",
    "clause_to_linear",
    "arithmetic_to_linear",
    "ground",
    "connected_components",
    "dump_model",
    "load_model",
]

FEAS_TOL = 1e-8


class GroundingError(ValueError):
    pass


@dataclass
class LinearExpr:
    """Affine expression ``sum c_y*y + sum c_x*x + sum c_g*g + const``."""

    y: dict = field(default_factory=dict)
    x: dict = field(default_factory=dict)
    g: dict = field(default_factory=dict)
    const: float = 0.0

    def add(self, kind, idx, coef):
        table = getattr(self, kind)
        table[idx] = table.get(idx, 0.0) + coef
        if table[idx] == 0.0:
            del table[idx]

    def value(self, y, x, g):
        v = self.const
        for i, c in self.y.items():
            v += c * y[i]
        for i, c in self.x.items():
            v += c * x[i]
        for i, c in self.g.items():
            v += c * g[i]
        return v

    def max_over_box(self, x):
        """Upper bound of the expression over y, g in [0,1] at fixed x."""
        v = self.const + sum(c * x[i] for i, c in self.x.items())
        v += sum(max(c, 0.0) for c in self.y.values())
        v += sum(max(c, 0.0) for c in self.g.values())
        return v

    def scaled(self, factor):
        return LinearExpr(
            {i: factor * c for i, c in self.y.items()},
            {i: factor * c for i, c in self.x.items()},
            {i: factor * c for i, c in self.g.items()},
            factor * self.const,
        )

    def sorted_items(self):
        return (
            sorted(self.y.items()),
            sorted(self.x.items()),
            sorted(self.g.items()),
        )


@dataclass
class GroundPotential:
    """Hinge potential ``max(expr, 0)^q`` belonging to dense rule ``rule_id``."""

    rule_id: int
    q: int
    expr: LinearExpr


@dataclass
class GroundConstraint:
    """Hard constraint ``expr <= 0`` (or ``expr = 0`` when ``equality``)."""

    expr: LinearExpr
    equality: bool


@dataclass
class GBlock:
    """A deep predicate's output block: ``groups`` of ``width`` atoms each."""

    pred: str
    width: int
    group_keys: list  # tuple of constants identifying each group
    group_start: list  # first g index of each group (atoms contiguous)


@dataclass
class GroundModel:
    y_atoms: list = field(default_factory=list)
    x_atoms: list = field(default_factory=list)
    x_values: np.ndarray = None
    g_atoms: list = field(default_factory=list)
    g_values: np.ndarray = None
    g_blocks: list = field(default_factory=list)
    potentials: list = field(default_factory=list)
    constraints: list = field(default_factory=list)
    weights: np.ndarray = None  # (r,) template weights per dense rule id
    rule_q: np.ndarray = None  # (r,) exponent per dense rule id
    rule_positions: list = field(default_factory=list)  # dense id -> program rule pos
    dsvar_map: dict = field(default_factory=dict)  # y index -> g index
    dropped_targets: list = field(default_factory=list)
    truth: dict = field(default_factory=dict)  # atom str -> label value
    features: dict = field(default_factory=dict)  # pred -> {group key: vector}

    @property
    def n_y(self):
        return len(self.y_atoms)

    @property
    def n_x(self):
        return len(self.x_atoms)

    @property
    def n_g(self):
        return len(self.g_atoms)

    @property
    def r(self):
        return 0 if self.weights is None else len(self.weights)

    def dims(self):
        """(n_y, n_x, n_g, m potentials, q constraint rows, r rules)."""
        q_rows = sum(2 if c.equality else 1 for c in self.constraints)
        return (self.n_y, self.n_x, self.n_g, len(self.potentials), q_rows, self.r)

    def y_index(self):
        return {a: i for i, a in enumerate(self.y_atoms)}

    def g_index(self):
        return {a: i for i, a in enumerate(self.g_atoms)}


# ---------------------------------------------------------------------------
# data loading


@dataclass
class DataTables:
    observed: dict = field(default_factory=dict)  # pred -> {args: value}
    targets: dict = field(default_factory=dict)  # pred -> ordered {args: None}
    truth: dict = field(default_factory=dict)  # pred -> {args: value}
    deep: dict = field(default_factory=dict)  # pred -> {args: value}
    deep_widths: dict = field(default_factory=dict)
    features: dict = field(default_factory=dict)  # pred -> {group args: vector}
    clamps: dict = field(default_factory=dict)


def load_tsv_atoms(path, arity, values="optional"):
    """Load TSV rows of ``arity`` constants plus a value column.

    ``values``: 'optional' (missing -> 1.0), 'none' (forbid extra column), or
    'vector' (all trailing columns parsed as floats).
    Returns list of (args tuple, value-or-vector).
    """
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            cells = line.split("\t")
            if len(cells) < arity:
                raise GroundingError(f"{path}:{lineno}: expected {arity} constants")
            args = tuple(cells[:arity])
            rest = cells[arity:]
            if values == "vector":
                out.append((args, np.array([float(v) for v in rest], dtype=float)))
            elif values == "none":
                if rest:
                    raise GroundingError(f"{path}:{lineno}: unexpected value column")
                out.append((args, None))
            else:
                if len(rest) > 1:
                    raise GroundingError(f"{path}:{lineno}: too many columns")
                out.append((args, float(rest[0]) if rest else 1.0))
    return out


def load_data(program, datamap, base_dir="."):
    """Read every file the data map binds into :class:`DataTables`."""
    import os

    tables = DataTables()
    tables.clamps = dict(datamap.clamps)
    tables.deep_widths = dict(datamap.deep_widths)
    for pred, roles in datamap.bindings.items():
        p = program.predicates.get(pred)
        if p is None:
            raise LangError(f"data map binds unknown predicate {pred!r}")
        for role, relpath in roles.items():
            path = os.path.join(base_dir, relpath)
            if role == "observed":
                tables.observed[pred] = dict(load_tsv_atoms(path, p.arity))
            elif role == "target":
                tables.targets[pred] = {args: None for args, _ in load_tsv_atoms(path, p.arity)}
            elif role == "truth":
                tables.truth[pred] = dict(load_tsv_atoms(path, p.arity))
            elif role == "deep":
                tables.deep[pred] = dict(load_tsv_atoms(path, p.arity))
            elif role == "features":
                width = datamap.deep_widths.get(pred, 1)
                key_arity = p.arity - 1 if width > 1 else p.arity
                tables.features[pred] = dict(
                    load_tsv_atoms(path, key_arity, values="vector")
                )
    return tables


# ---------------------------------------------------------------------------
# logical / arithmetic translation


def normalize_logical(rule):
    """DNF-normalize an implication into clauses of literals.

    ``b1 & ... & bk -> h1 & ... & hm`` becomes the m clauses
    ``(!b1 | ... | !bk | hj)``; negations on body literals flip.
    """
    clauses = []
    negated_body = [lit.__class__(lit.atom, not lit.negated) for lit in rule.body]
    for head_lit in rule.head:
        clauses.append(tuple(negated_body) + (head_lit,))
    return clauses


def _route_atom(atom, program, tables, y_index, g_index, domains):
    """Classify a ground atom: ('y', idx) | ('g', idx) | ('const', value)."""
    p = program.predicates.get(atom.pred)
    if p is None:
        raise GroundingError(f"unknown predicate {atom.pred!r}")
    args = tuple(t.name for t in atom.args)
    for pos, argname in enumerate(args):
        dom = domains.get(p.domains[pos])
        if dom is not None and argname not in dom:
            raise GroundingError(
                f"constant {argname!r} not in declared domain {p.domains[pos]!r}"
            )
    key = (atom.pred, args)
    if p.kind == "target":
        idx = y_index.get(key)
        if idx is None:
            return ("const", 0.0)  # closed world: unlisted target atoms are 0
        return ("y", idx)
    if p.kind == "deep":
        idx = g_index.get(key)
        if idx is None:
            raise GroundingError(f"deep atom {atom} not bound in data")
        return ("g", idx)
    value = tables.observed.get(atom.pred, {}).get(args, 0.0)
    return ("x", key, value)


def clause_to_linear(clause, resolve):
    """Łukasiewicz distance-to-satisfaction of a disjunctive clause.

    ``resolve(atom)`` maps a ground atom to a routing tuple as produced by
    the grounder.  Returns the affine ``l`` with
    ``max(l, 0) = 1 - min(1, sum of literal values)``.
    """
    expr = LinearExpr(const=1.0)
    for lit in clause:
        sign = 1.0 if lit.negated else -1.0
        route = resolve(lit.atom)
        if lit.negated:
            expr.const -= 1.0
        if route[0] == "const":
            expr.const += sign * route[1]
        elif route[0] in ("y", "g"):
            expr.add(route[0], route[1], sign)
        else:  # observed x
            expr.add("x", route[1], sign)
    return expr


def arithmetic_to_linear(rule, resolve):
    """Instantiate an arithmetic rule into potentials or constraints.

    Weighted ``expr <= 0`` yields ``max(expr, 0)^q``; weighted equalities
    yield both one-sided hinges; hard rules yield constraints.
    Returns (potential exprs, constraint specs).
    """
    expr = LinearExpr(const=rule.const)
    for coef, atom in rule.terms:
        route = resolve(atom)
        if route[0] == "const":
            expr.const += coef * route[1]
        elif route[0] in ("y", "g"):
            expr.add(route[0], route[1], coef)
        else:
            expr.add("x", route[1], coef)
    if rule.op == ">=":
        expr = expr.scaled(-1.0)
    if rule.hard:
        if rule.op == "=":
            return [], [(expr, True)]
        return [], [(expr, False)]
    if rule.op == "=":
        return [expr, expr.scaled(-1.0)], []
    return [expr], []


# ---------------------------------------------------------------------------
# grounding proper


def _resolve_domains(program, tables):
    """Declared domains plus domains inferred from bound data files."""
    inferred = {}
    for pred, p in program.predicates.items():
        sources = []
        sources.extend(tables.observed.get(pred, {}).keys())
        sources.extend(tables.targets.get(pred, {}).keys())
        sources.extend(tables.truth.get(pred, {}).keys())
        sources.extend(tables.deep.get(pred, {}).keys())
        for args in sources:
            for pos, argname in enumerate(args):
                inferred.setdefault(p.domains[pos], set()).add(argname)
    domains = {}
    for name, members in inferred.items():
        domains[name] = tuple(sorted(members))
    for name, members in program.domains.items():
        domains[name] = tuple(members)  # declared order wins
    return domains


def _enumerate_g_atoms(program, tables, domains):
    """Fixed ordering of neural atoms: blocks by predicate, groups sorted."""
    g_atoms, g_values, blocks = [], [], []
    for pred in sorted(tables.deep):
        p = program.predicates[pred]
        width = tables.deep_widths.get(pred, 1)
        rows = tables.deep[pred]
        if width == 1:
            keys = sorted(rows)
            starts = list(range(len(g_atoms), len(g_atoms) + len(keys)))
            for args in keys:
                g_atoms.append((pred, args))
                g_values.append(rows[args])
            blocks.append(GBlock(pred, 1, keys, starts))
            continue
        class_domain = domains.get(p.domains[-1])
        if class_domain is None or len(class_domain) != width:
            raise GroundingError(
                f"deep predicate {pred!r}: block width {width} does not match "
                f"its class domain"
            )
        groups = {}
        for args in rows:
            groups.setdefault(args[:-1], {})[args[-1]] = rows[args]
        keys = sorted(groups)
        starts = []
        for key in keys:
            members = groups[key]
            if sorted(members) != sorted(class_domain):
                raise GroundingError(
                    f"deep predicate {pred!r}: group {key} does not cover the "
                    f"class domain exactly"
                )
            starts.append(len(g_atoms))
            for cls in class_domain:
                g_atoms.append((pred, key + (cls,)))
                g_values.append(members[cls])
        blocks.append(GBlock(pred, width, keys, starts))
    return g_atoms, np.array(g_values, dtype=float), blocks


def _rule_variables(rule, program, domains):
    """Variables in first-occurrence order with their constant ranges."""
    order = []
    ranges = {}
    for atom in rule.atoms():
        p = program.predicates[atom.pred]
        for pos, term in enumerate(atom.args):
            if not term.is_var:
                continue
            dom = domains.get(p.domains[pos], ())
            if term.name not in ranges:
                order.append(term.name)
                ranges[term.name] = tuple(dom)
            elif ranges[term.name] != tuple(dom):
                common = [c for c in ranges[term.name] if c in set(dom)]
                ranges[term.name] = tuple(common)
    return order, ranges


def _substitute(atom, binding):
    args = tuple(
        const(binding[t.name]) if t.is_var else t for t in atom.args
    )
    return Atom(atom.pred, args)


def ground(program, tables):
    """Instantiate every rule over all in-domain substitutions.

    Deterministic: potentials/constraints ordered by (rule position,
    substitution tuple); atoms indexed in sorted order.  Potentials that are
    constantly zero over the box given observations are pruned; hard rows
    without free support are dropped when satisfied and raise
    :class:`GroundingError` when violated.  Target atoms left unused after
    pruning are dropped from ``y`` (recorded in ``dropped_targets``).
    """
    domains = _resolve_domains(program, tables)

    y_atoms = []
    for pred in sorted(tables.targets):
        for args in sorted(tables.targets[pred]):
            y_atoms.append((pred, args))
    y_index = {a: i for i, a in enumerate(y_atoms)}

    g_atoms, g_values, g_blocks = _enumerate_g_atoms(program, tables, domains)
    g_index = {a: i for i, a in enumerate(g_atoms)}

    x_atoms = []
    x_index = {}
    x_values = []

    def resolve(atom):
        route = _route_atom(atom, program, tables, y_index, g_index, domains)
        if route[0] != "x":
            return route
        key, value = route[1], route[2]
        if key not in x_index:
            x_index[key] = len(x_atoms)
            x_atoms.append(key)
            x_values.append(value)
        return ("x", x_index[key])

    raw_potentials = []  # (rule position, q, expr)
    constraints = []

    for pos, rule in enumerate(program.rules):
        var_order, ranges = _rule_variables(rule, program, domains)
        for combo in itertools.product(*(ranges[v] for v in var_order)):
            binding = dict(zip(var_order, combo))
            if isinstance(rule, LogicalRule):
                bound = rule.__class__(
                    tuple(l.__class__(_substitute(l.atom, binding), l.negated) for l in rule.body),
                    tuple(l.__class__(_substitute(l.atom, binding), l.negated) for l in rule.head),
                    rule.weight,
                    rule.q,
                    rule.line,
                )
                pot_exprs, con_specs = [], []
                for clause in normalize_logical(bound):
                    expr = clause_to_linear(clause, resolve)
                    if rule.hard:
                        con_specs.append((expr, False))
                    else:
                        pot_exprs.append(expr)
            else:
                bound = ArithmeticRule(
                    tuple((c, _substitute(a, binding)) for c, a in rule.terms),
                    rule.const,
                    rule.op,
                    rule.weight,
                    rule.q,
                    rule.line,
                )
                pot_exprs, con_specs = arithmetic_to_linear(bound, resolve)

            x_vals = x_values  # grows as atoms intern; value() indexes lazily
            for expr in pot_exprs:
                if expr.max_over_box(x_vals) <= 1e-12:
                    continue  # constantly-zero hinge
                raw_potentials.append((pos, rule.q, expr))
            for expr, equality in con_specs:
                free = bool(expr.y) or bool(expr.g)
                if not free:
                    v = expr.value((), x_vals, ())
                    if equality and abs(v) > FEAS_TOL:
                        raise GroundingError(
                            f"rule at line {rule.line}: ground equality fixes "
                            f"observed values inconsistently ({v:.3g} != 0)"
                        )
                    if not equality and v > FEAS_TOL:
                        raise GroundingError(
                            f"rule at line {rule.line}: ground constraint violated "
                            f"by observations ({v:.3g} > 0)"
                        )
                    continue
                if not equality and expr.max_over_box(x_vals) <= 1e-12:
                    continue  # satisfied everywhere
                constraints.append(GroundConstraint(expr, equality))

    # dense rule ids over weighted rules with surviving instantiations
    rule_positions = sorted({pos for pos, _, _ in raw_potentials})
    dense = {pos: i for i, pos in enumerate(rule_positions)}
    potentials = [
        GroundPotential(dense[pos], q, expr) for pos, q, expr in raw_potentials
    ]
    weights = np.array(
        [program.rules[pos].weight for pos in rule_positions], dtype=float
    )
    rule_q = np.array([program.rules[pos].q for pos in rule_positions], dtype=int)

    # drop unused target atoms, reindex densely
    used = set()
    for p in potentials:
        used.update(p.expr.y)
    for c in constraints:
        used.update(c.expr.y)
    clamped = set()
    for tgt_pred, deep_pred in tables.clamps.items():
        for i, (pred, args) in enumerate(y_atoms):
            if pred == tgt_pred:
                clamped.add(i)
    keep = sorted(used | clamped)
    remap = {old: new for new, old in enumerate(keep)}
    dropped = [y_atoms[i] for i in range(len(y_atoms)) if i not in remap]
    y_atoms = [y_atoms[i] for i in keep]
    for p in potentials:
        p.expr.y = {remap[i]: c for i, c in p.expr.y.items()}
    for c in constraints:
        c.expr.y = {remap[i]: c2 for i, c2 in c.expr.y.items()}

    # drop x atoms referenced only by pruned items
    used_x = set()
    for p in potentials:
        used_x.update(p.expr.x)
    for c in constraints:
        used_x.update(c.expr.x)
    keep_x = sorted(used_x)
    remap_x = {old: new for new, old in enumerate(keep_x)}
    x_atoms = [x_atoms[i] for i in keep_x]
    x_values = [x_values[i] for i in keep_x]
    for p in potentials:
        p.expr.x = {remap_x[i]: c for i, c in p.expr.x.items()}
    for c in constraints:
        c.expr.x = {remap_x[i]: c2 for i, c2 in c.expr.x.items()}

    dsvar_map = {}
    for tgt_pred, deep_pred in tables.clamps.items():
        for i, (pred, args) in enumerate(y_atoms):
            if pred != tgt_pred:
                continue
            gi = g_index.get((deep_pred, args))
            if gi is None:
                raise GroundingError(
                    f"clamp: no deep atom {deep_pred}{args} for target {pred}{args}"
                )
            dsvar_map[i] = gi

    truth = {}
    for pred in sorted(tables.truth):
        for args, value in sorted(tables.truth[pred].items()):
            truth[(pred, args)] = value

    return GroundModel(
        y_atoms=y_atoms,
        x_atoms=x_atoms,
        x_values=np.array(x_values, dtype=float),
        g_atoms=g_atoms,
        g_values=g_values,
        g_blocks=g_blocks,
        potentials=potentials,
        constraints=constraints,
        weights=weights,
        rule_q=rule_q,
        rule_positions=rule_positions,
        dsvar_map=dsvar_map,
        dropped_targets=dropped,
        truth=truth,
        features={p: dict(v) for p, v in tables.features.items()},
    )


# ---------------------------------------------------------------------------
# components


def connected_components(model):
    """Partition target indices by shared potentials/constraints (union-find).

    Returns a list of sorted index arrays, one per component, ordered by
    smallest member.  Targets coupled only through neural atoms are *not*
    merged: components are defined over the inference variables y.
    """
    n = model.n_y
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    def union(a, b):
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)

    for item in itertools.chain(model.potentials, model.constraints):
        idxs = sorted(item.expr.y)
        for a, b in zip(idxs, idxs[1:]):
            union(a, b)

    groups = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)
    return [np.array(groups[root], dtype=int) for root in sorted(groups)]


def extract_component(model, y_subset):
    """Sub-model over the given target indices (dense rule ids preserved).

    Observed and neural atoms are restricted to the ones the component
    references and re-indexed locally, so structurally identical components
    produce identical LCQPs and can share batched solves.  Neural atoms are
    kept in whole head groups (a partially referenced group is completed) to
    preserve block structure for the network binding.  The sub-model records
    ``y_global``/``x_global``/``g_global`` index maps into the parent.
    """
    y_subset = np.asarray(y_subset, dtype=int)
    inset = {int(i): k for k, i in enumerate(y_subset)}

    potentials, constraints = [], []
    for p in model.potentials:
        if p.expr.y and all(i in inset for i in p.expr.y):
            potentials.append(p)
    for c in model.constraints:
        if c.expr.y and all(i in inset for i in c.expr.y):
            constraints.append(c)

    x_used, g_used = set(), set()
    for item in itertools.chain(potentials, constraints):
        x_used.update(item.expr.x)
        g_used.update(item.expr.g)
    g_used.update(model.dsvar_map[i] for i in model.dsvar_map if i in inset)

    # close g over head groups so bound network outputs stay contiguous
    blocks = []
    for blk in model.g_blocks:
        keys, starts = [], []
        for key, start in zip(blk.group_keys, blk.group_start):
            if any(start + j in g_used for j in range(blk.width)):
                g_used.update(range(start, start + blk.width))
                keys.append(key)
                starts.append(start)
        if keys:
            blocks.append(GBlock(blk.pred, blk.width, keys, starts))

    x_global = np.array(sorted(x_used), dtype=int)
    g_global = np.array(sorted(g_used), dtype=int)
    x_local = {int(i): k for k, i in enumerate(x_global)}
    g_local = {int(i): k for k, i in enumerate(g_global)}
    for blk in blocks:
        blk.group_start = [g_local[s] for s in blk.group_start]

    def remap_expr(expr):
        return LinearExpr(
            {inset[i]: c for i, c in expr.y.items()},
            {x_local[i]: c for i, c in expr.x.items()},
            {g_local[i]: c for i, c in expr.g.items()},
            expr.const,
        )

    sub = GroundModel(
        y_atoms=[model.y_atoms[i] for i in y_subset],
        x_atoms=[model.x_atoms[i] for i in x_global],
        x_values=None if model.x_values is None else model.x_values[x_global],
        g_atoms=[model.g_atoms[i] for i in g_global],
        g_values=None if model.g_values is None else model.g_values[g_global],
        g_blocks=blocks,
        potentials=[GroundPotential(p.rule_id, p.q, remap_expr(p.expr))
                    for p in potentials],
        constraints=[GroundConstraint(remap_expr(c.expr), c.equality)
                     for c in constraints],
        weights=model.weights,
        rule_q=model.rule_q,
        rule_positions=list(model.rule_positions),
        dsvar_map={inset[i]: g_local[gi] for i, gi in model.dsvar_map.items()
                   if i in inset},
        truth=model.truth,
        features=model.features,
    )
    sub.y_global = y_subset
    sub.x_global = x_global
    sub.g_global = g_global
    return sub


# ---------------------------------------------------------------------------
# serialization


def _atom_str(key):
    pred, args = key
    return f"{pred}({','.join(args)})"


def _atom_parse(s):
    pred, rest = s.split("(", 1)
    return (pred, tuple(rest[:-1].split(",")))


def _expr_str(expr):
    parts = []
    ys, xs, gs = expr.sorted_items()
    parts.extend(f"y:{i}:{c!r}" for i, c in ys)
    parts.extend(f"x:{i}:{c!r}" for i, c in xs)
    parts.extend(f"g:{i}:{c!r}" for i, c in gs)
    parts.append(f"k:{expr.const!r}")
    return " ".join(parts)


def _expr_parse(s):
    expr = LinearExpr()
    for tok in s.split():
        kind, rest = tok.split(":", 1)
        if kind == "k":
            expr.const = float(rest)
        else:
            idx, coef = rest.split(":")
            getattr(expr, kind)[int(idx)] = float(coef)
    return expr


def dump_model(model):
    """Deterministic text serialization of a ground model."""
    out = ["groundmodel\t1"]
    for i, a in enumerate(model.y_atoms):
        out.append(f"yatom\t{i}\t{_atom_str(a)}")
    for i, a in enumerate(model.x_atoms):
        out.append(f"xatom\t{i}\t{_atom_str(a)}\t{float(model.x_values[i])!r}")
    for i, a in enumerate(model.g_atoms):
        out.append(f"gatom\t{i}\t{_atom_str(a)}\t{float(model.g_values[i])!r}")
    for blk in model.g_blocks:
        starts = "\t".join(str(s) for s in blk.group_start)
        out.append(f"gblock\t{blk.pred}\t{blk.width}\t{starts}")
    for rid in range(model.r):
        out.append(
            f"weight\t{rid}\t{float(model.weights[rid])!r}\t{model.rule_q[rid]}"
            f"\t{model.rule_positions[rid]}"
        )
    for p in model.potentials:
        out.append(f"potential\t{p.rule_id}\t{p.q}\t{_expr_str(p.expr)}")
    for c in model.constraints:
        kind = "eq" if c.equality else "le"
        out.append(f"constraint\t{kind}\t{_expr_str(c.expr)}")
    for yi in sorted(model.dsvar_map):
        out.append(f"dsvar\t{yi}\t{model.dsvar_map[yi]}")
    return "\n".join(out) + "\n"


def load_model(text):
    lines = text.splitlines()
    if not lines or not lines[0].startswith("groundmodel\t1"):
        raise GroundingError("not a ground-model dump (missing header)")
    model = GroundModel(x_values=np.zeros(0), g_values=np.zeros(0))
    x_vals, g_vals = [], []
    weights, rule_q, positions = {}, {}, {}
    blocks = {}
    for line in lines[1:]:
        if not line.strip():
            continue
        cells = line.split("\t")
        tag = cells[0]
        if tag == "yatom":
            model.y_atoms.append(_atom_parse(cells[2]))
        elif tag == "xatom":
            model.x_atoms.append(_atom_parse(cells[2]))
            x_vals.append(float(cells[3]))
        elif tag == "gatom":
            model.g_atoms.append(_atom_parse(cells[2]))
            g_vals.append(float(cells[3]))
        elif tag == "gblock":
            starts = [int(s) for s in cells[3:]]
            blocks[cells[1]] = (int(cells[2]), starts)
        elif tag == "weight":
            rid = int(cells[1])
            weights[rid] = float(cells[2])
            rule_q[rid] = int(cells[3])
            positions[rid] = int(cells[4])
        elif tag == "potential":
            model.potentials.append(
                GroundPotential(int(cells[1]), int(cells[2]), _expr_parse(cells[3]))
            )
        elif tag == "constraint":
            model.constraints.append(
                GroundConstraint(_expr_parse(cells[2]), cells[1] == "eq")
            )
        elif tag == "dsvar":
            model.dsvar_map[int(cells[1])] = int(cells[2])
        else:
            raise GroundingError(f"unknown record {tag!r}")
    model.x_values = np.array(x_vals, dtype=float)
    model.g_values = np.array(g_vals, dtype=float)
    r = len(weights)
    model.weights = np.array([weights[i] for i in range(r)], dtype=float)
    model.rule_q = np.array([rule_q[i] for i in range(r)], dtype=int)
    model.rule_positions = [positions[i] for i in range(r)]
    for pred, (width, starts) in blocks.items():
        keys = []
        for s in starts:
            args = model.g_atoms[s][1]
            keys.append(args[:-1] if width > 1 else args)
        model.g_blocks.append(GBlock(pred, width, keys, starts))
    return model
