"""Rule language and data map: parsing, validation, canonical printing.

Grammar (EBNF, line oriented; ``//`` starts a comment anywhere on a line)::

    program     = { line } ;
    line        = declaration | rule | empty ;
    declaration = predicate-decl | domain-decl ;

    predicate-decl = "predicate" pred-name "(" domain-name { "," domain-name } ")"
                     ":" kind ;
    kind           = "observed" | "target" | "deep" ;
    domain-decl    = "domain" domain-name "=" constant { "," constant } ;

    rule        = [ weight ":" ] body [ "^" exponent ] [ "." ] ;
    weight      = nonnegative float ;
    exponent    = "1" | "2" ;
    body        = logical | arithmetic ;

    logical     = [ conjunction "->" ] conjunction ;
    conjunction = literal { "&" literal } ;
    literal     = [ "!" ] atom ;

    arithmetic  = linexpr ( "=" | "<=" | ">=" ) linexpr ;
    linexpr     = [ "-" ] term { ( "+" | "-" ) term } ;
    term        = [ float "*" ] atom | float ;

    atom        = pred-name "(" term-arg { "," term-arg } ")" ;
    term-arg    = variable | constant ;
    variable    = uppercase-initial identifier ;
    constant    = '"' any-non-quote '"' | non-uppercase-initial identifier ;

A rule is *hard* when it ends with ``.`` and *weighted* when it carries a
``w:`` prefix; exactly one of the two must be present.  ``^2`` marks a squared
potential and is only legal on weighted rules.  A logical rule without ``->``
is an implication with an empty body (a fact template); validation rejects it
unless it is variable-free, since head variables must be bound by the body.

Data map (same comment syntax)::

    datamap = { stanza } ;
    stanza  = pred-name ":" role ":" tail ;
    role    = "observed" | "target" | "truth" | "deep" | "features" | "clamp" ;
    tail    = path                      (* observed/target/truth/features *)
            | width ":" path            (* deep: block width, then path   *)
            | pred-name                  (* clamp: deep predicate          *)

``clamp`` declares the deep-substitution-by-variables pairing: target atoms of
the stanza predicate are clamped one-to-one to the deep predicate's outputs
with identical arguments.  Paths are relative to the data-map file.

Data files are TSV: one ground atom per row, constants tab-separated, optional
final column a float value (absent = 1.0).  ``features`` files carry the
neural input vector after the key constants instead of a single value.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace

__all__ = [
    "LangError",
    "Term",
    "Atom",
    "Literal",
    "LogicalRule",
    "ArithmeticRule",
    "Predicate",
    "Program",
    "DataMap",
    "parse_program",
    "format_program",
    "parse_data_map",
    "format_data_map",
    "validate_program",
]

KINDS = ("observed", "target", "deep")
DATA_ROLES = ("observed", "target", "truth", "deep", "features", "clamp")


class LangError(ValueError):
    """Parse or validation error carrying source position."""

    def __init__(self, msg, line=None, col=None):
        self.msg = msg
        self.line = line
        self.col = col
        where = ""
        if line is not None:
            where = f" (line {line}" + (f", col {col}" if col is not None else "") + ")"
        super().__init__(msg + where)


@dataclass(frozen=True, order=True)
class Term:
    """Argument of an atom: a variable (uppercase-initial) or a constant."""

    name: str
    is_var: bool

    def __str__(self):
        if self.is_var:
            return self.name
        if re.fullmatch(r"[a-z0-9_][A-Za-z0-9_]*", self.name):
            return self.name
        return '"' + self.name + '"'


def var(name):
    return Term(name, True)


def const(name):
    return Term(str(name), False)


@dataclass(frozen=True, order=True)
class Atom:
    pred: str
    args: tuple

    def __str__(self):
        return f"{self.pred}({', '.join(str(a) for a in self.args)})"

    def variables(self):
        return {a.name for a in self.args if a.is_var}


@dataclass(frozen=True)
class Literal:
    atom: Atom
    negated: bool = False

    def __str__(self):
        return ("!" if self.negated else "") + str(self.atom)


@dataclass(frozen=True)
class LogicalRule:
    """``body -> head`` over conjunctions of literals.

    ``weight is None`` for hard rules.  ``q`` is the hinge exponent (1 or 2
    as parsed; validation enforces the range).
    """

    body: tuple
    head: tuple
    weight: float | None
    q: int = 1
    line: int = 0

    @property
    def hard(self):
        return self.weight is None

    def atoms(self):
        return [lit.atom for lit in self.body + self.head]


@dataclass(frozen=True)
class ArithmeticRule:
    """``sum_i coef_i * atom_i + const OP 0`` with OP in {=, <=, >=}.

    Parsed from ``lhs OP rhs`` by moving everything to the left side; the
    original operator is preserved so the canonical printer round-trips.
    """

    terms: tuple  # tuple of (coef: float, Atom)
    const: float
    op: str
    weight: float | None
    q: int = 1
    line: int = 0

    @property
    def hard(self):
        return self.weight is None

    def atoms(self):
        return [a for _, a in self.terms]


@dataclass(frozen=True)
class Predicate:
    name: str
    domains: tuple  # domain names per argument
    kind: str  # observed | target | deep

    @property
    def arity(self):
        return len(self.domains)


@dataclass
class Program:
    predicates: dict = field(default_factory=dict)  # name -> Predicate
    domains: dict = field(default_factory=dict)  # name -> tuple of constants
    rules: list = field(default_factory=list)  # LogicalRule | ArithmeticRule

    def __eq__(self, other):
        return (
            isinstance(other, Program)
            and self.predicates == other.predicates
            and self.domains == other.domains
            and [replace(r, line=0) for r in self.rules]
            == [replace(r, line=0) for r in other.rules]
        )


@dataclass
class DataMap:
    """Per-predicate file bindings plus deep-block and clamp declarations."""

    bindings: dict = field(default_factory=dict)  # pred -> {role -> path}
    deep_widths: dict = field(default_factory=dict)  # deep pred -> block width
    clamps: dict = field(default_factory=dict)  # target pred -> deep pred

    def path(self, pred, role):
        return self.bindings.get(pred, {}).get(role)


# ---------------------------------------------------------------------------
# tokenizer


_TOKEN_RE = re.compile(
    r"""
      (?P<ws>\s+)
    | (?P<float>-?(\d+\.\d*|\.\d+|\d+)([eE][+-]?\d+)?)
    | (?P<qconst>"[^"]*")
    | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
    | (?P<op><=|>=|->|[():,=&!+\-*^.])
    """,
    re.VERBOSE,
)


def _tokenize(text, lineno):
    """Yield (kind, value, col) for one source line; comments stripped."""
    cut = text.find("//")
    if cut >= 0:
        text = text[:cut]
    pos = 0
    out = []
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if not m:
            raise LangError(f"unexpected character {text[pos]!r}", lineno, pos + 1)
        kind = m.lastgroup
        if kind != "ws":
            out.append((kind, m.group(), pos + 1))
        pos = m.end()
    return out


class _Cursor:
    def __init__(self, tokens, lineno):
        self.toks = tokens
        self.i = 0
        self.line = lineno

    def peek(self, offset=0):
        j = self.i + offset
        return self.toks[j] if j < len(self.toks) else (None, None, None)

    def next(self):
        tok = self.peek()
        self.i += 1
        return tok

    def expect(self, value):
        kind, val, col = self.next()
        if val != value:
            raise LangError(f"expected {value!r}, found {val!r}", self.line, col)
        return val

    def done(self):
        return self.i >= len(self.toks)

    def error(self, msg):
        _, val, col = self.peek()
        raise LangError(msg + (f" near {val!r}" if val else ""), self.line, col)


# ---------------------------------------------------------------------------
# parser


def _parse_term_arg(cur):
    kind, val, col = cur.next()
    if kind == "qconst":
        return const(val[1:-1])
    if kind == "ident":
        if val[0].isupper():
            return var(val)
        return const(val)
    if kind == "float":
        return const(val)
    raise LangError(f"expected atom argument, found {val!r}", cur.line, col)


def _parse_atom(cur):
    kind, name, col = cur.next()
    if kind != "ident" or not name[0].isupper():
        raise LangError(f"expected predicate name, found {name!r}", cur.line, col)
    cur.expect("(")
    args = [_parse_term_arg(cur)]
    while cur.peek()[1] == ",":
        cur.next()
        args.append(_parse_term_arg(cur))
    cur.expect(")")
    return Atom(name, tuple(args))


def _parse_literal(cur):
    negated = False
    if cur.peek()[1] == "!":
        cur.next()
        negated = True
    return Literal(_parse_atom(cur), negated)


def _parse_conjunction(cur):
    lits = [_parse_literal(cur)]
    while cur.peek()[1] == "&":
        cur.next()
        lits.append(_parse_literal(cur))
    return tuple(lits)


def _looks_arithmetic(cur):
    """Arithmetic iff a top-level =, <=, >=, +, or coefficient * appears."""
    depth = 0
    for kind, val, _ in cur.toks[cur.i :]:
        if val == "(":
            depth += 1
        elif val == ")":
            depth -= 1
        elif depth == 0:
            if val in ("=", "<=", ">=", "+", "*"):
                return True
            if val in ("->", "&", "!"):
                return False
            if kind == "float":
                return True
    return False


def _parse_linexpr(cur):
    """Parse a signed sum of terms; returns (list[(coef, Atom)], const)."""
    terms, c = [], 0.0
    sign = 1.0
    if cur.peek()[1] == "-":
        cur.next()
        sign = -1.0
    while True:
        kind, val, col = cur.peek()
        if kind == "float":
            cur.next()
            coef = float(val)
            if cur.peek()[1] == "*":
                cur.next()
                terms.append((sign * coef, _parse_atom(cur)))
            else:
                c += sign * coef
        elif kind == "ident" and val[0].isupper():
            terms.append((sign, _parse_atom(cur)))
        else:
            cur.error("expected arithmetic term")
        nxt = cur.peek()[1]
        if nxt == "+":
            cur.next()
            sign = 1.0
        elif nxt == "-":
            cur.next()
            sign = -1.0
        else:
            return terms, c


def _merge_terms(terms):
    """Combine duplicate atoms, drop zero coefficients, sort canonically."""
    acc = {}
    order = []
    for coef, atom in terms:
        if atom not in acc:
            acc[atom] = 0.0
            order.append(atom)
        acc[atom] += coef
    return tuple((acc[a], a) for a in order if acc[a] != 0.0)


def _parse_rule(cur):
    weight = None
    if cur.peek()[0] == "float" and cur.peek(1)[1] == ":":
        _, wtok, col = cur.next()
        cur.next()
        weight = float(wtok)
        if weight < 0:
            raise LangError("rule weight must be nonnegative", cur.line, col)

    if _looks_arithmetic(cur):
        lhs_terms, lhs_c = _parse_linexpr(cur)
        kind, op, col = cur.next()
        if op not in ("=", "<=", ">="):
            raise LangError(f"expected =, <= or >=, found {op!r}", cur.line, col)
        rhs_terms, rhs_c = _parse_linexpr(cur)
        terms = _merge_terms(
            list(lhs_terms) + [(-c, a) for c, a in rhs_terms]
        )
        rule = ArithmeticRule(terms, lhs_c - rhs_c, op, weight, 1, cur.line)
    else:
        first = _parse_conjunction(cur)
        if cur.peek()[1] == "->":
            cur.next()
            head = _parse_conjunction(cur)
            body = first
        else:
            body, head = (), first
        rule = LogicalRule(body, head, weight, 1, cur.line)

    q = 1
    if cur.peek()[1] == "^":
        cur.next()
        kind, val, col = cur.next()
        if kind != "float" or val not in ("1", "2"):
            # keep the raw exponent so validation can report q not in {1,2}
            try:
                q = int(float(val))
            except (TypeError, ValueError):
                raise LangError(f"expected exponent, found {val!r}", cur.line, col)
        else:
            q = int(val)
    hard = False
    if cur.peek()[1] == ".":
        cur.next()
        hard = True
    if not cur.done():
        cur.error("trailing tokens after rule")

    if hard and weight is not None:
        raise LangError("rule cannot be both weighted and hard", cur.line)
    if not hard and weight is None:
        raise LangError("rule must carry a weight or end with '.'", cur.line)
    if hard and q != 1:
        raise LangError("hard rule cannot take an exponent", cur.line)
    return replace(rule, q=q)


def _parse_predicate_decl(cur, program):
    cur.next()  # 'predicate'
    kind, name, col = cur.next()
    if kind != "ident" or not name[0].isupper():
        raise LangError(f"expected predicate name, found {name!r}", cur.line, col)
    cur.expect("(")
    doms = []
    while True:
        k, d, c = cur.next()
        if k != "ident":
            raise LangError(f"expected domain name, found {d!r}", cur.line, c)
        doms.append(d)
        if cur.peek()[1] == ",":
            cur.next()
            continue
        break
    cur.expect(")")
    cur.expect(":")
    k, kd, c = cur.next()
    if kd not in KINDS:
        raise LangError(f"predicate kind must be one of {KINDS}, found {kd!r}", cur.line, c)
    if not cur.done():
        cur.error("trailing tokens after predicate declaration")
    if name in program.predicates:
        raise LangError(f"duplicate predicate declaration {name!r}", cur.line)
    program.predicates[name] = Predicate(name, tuple(doms), kd)


def _parse_domain_decl(cur, program):
    cur.next()  # 'domain'
    kind, name, col = cur.next()
    if kind != "ident":
        raise LangError(f"expected domain name, found {name!r}", cur.line, col)
    cur.expect("=")
    consts = []
    while True:
        t = _parse_term_arg(cur)
        if t.is_var:
            raise LangError("domain members must be constants", cur.line)
        consts.append(t.name)
        if cur.peek()[1] == ",":
            cur.next()
            continue
        break
    if not cur.done():
        cur.error("trailing tokens after domain declaration")
    if name in program.domains:
        raise LangError(f"duplicate domain declaration {name!r}", cur.line)
    program.domains[name] = tuple(consts)


def parse_program(text):
    """Parse program source into a :class:`Program`.

    Raises :class:`LangError` with line/column on the first syntax error.
    """
    program = Program()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        toks = _tokenize(raw, lineno)
        if not toks:
            continue
        cur = _Cursor(toks, lineno)
        head = toks[0][1]
        if head == "predicate":
            _parse_predicate_decl(cur, program)
        elif head == "domain":
            _parse_domain_decl(cur, program)
        else:
            program.rules.append(_parse_rule(cur))
    return program


# ---------------------------------------------------------------------------
# canonical printer


def _fmt_num(x):
    s = f"{x + 0.0:.9g}"  # +0.0 folds negative zero
    return s


def _fmt_rule(rule):
    if isinstance(rule, LogicalRule):
        head = " & ".join(str(l) for l in rule.head)
        core = head if not rule.body else (
            " & ".join(str(l) for l in rule.body) + " -> " + head
        )
    else:
        parts = []
        for i, (coef, atom) in enumerate(rule.terms):
            mag = abs(coef)
            piece = str(atom) if mag == 1.0 else f"{_fmt_num(mag)} * {atom}"
            if i == 0:
                parts.append(("-" if coef < 0 else "") + piece)
            else:
                parts.append(("- " if coef < 0 else "+ ") + piece)
        core = " ".join(parts) + f" {rule.op} {_fmt_num(-rule.const)}"
    prefix = "" if rule.hard else f"{_fmt_num(rule.weight)}: "
    suffix = " ^2" if rule.q == 2 else ""
    dot = " ." if rule.hard else ""
    return prefix + core + suffix + dot


def format_program(program):
    """Canonical text form; ``parse(format(parse(t))) == parse(t)``."""
    lines = []
    for name in sorted(program.predicates):
        p = program.predicates[name]
        lines.append(f"predicate {p.name}({', '.join(p.domains)}): {p.kind}")
    for name in sorted(program.domains):
        members = ", ".join(str(const(c)) for c in program.domains[name])
        lines.append(f"domain {name} = {members}")
    for rule in program.rules:
        lines.append(_fmt_rule(rule))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# data map


def parse_data_map(text):
    """Parse data-map source into a :class:`DataMap`."""
    dm = DataMap()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        cut = raw.find("//")
        if cut >= 0:
            raw = raw[:cut]
        line = raw.strip()
        if not line:
            continue
        parts = [p.strip() for p in line.split(":")]
        if len(parts) < 3:
            raise LangError("stanza must be 'predicate: role: ...'", lineno)
        pred, role = parts[0], parts[1]
        if role not in DATA_ROLES:
            raise LangError(f"unknown role {role!r}", lineno)
        if role == "clamp":
            if len(parts) != 3:
                raise LangError("clamp stanza takes a deep predicate name", lineno)
            if pred in dm.clamps:
                raise LangError(f"duplicate clamp for {pred!r}", lineno)
            dm.clamps[pred] = parts[2]
            continue
        if role == "deep":
            if len(parts) != 4:
                raise LangError("deep stanza is 'pred: deep: width: path'", lineno)
            try:
                width = int(parts[2])
            except ValueError:
                raise LangError(f"deep block width must be an integer, found {parts[2]!r}", lineno)
            if width < 1:
                raise LangError("deep block width must be >= 1", lineno)
            path = parts[3]
            dm.deep_widths[pred] = width
        else:
            if len(parts) != 3:
                raise LangError("stanza must be 'predicate: role: path'", lineno)
            path = parts[2]
        roles = dm.bindings.setdefault(pred, {})
        if role in roles:
            raise LangError(f"duplicate binding {pred}: {role}", lineno)
        roles[role] = path
    return dm


def format_data_map(dm):
    lines = []
    for pred in sorted(dm.bindings):
        for role in sorted(dm.bindings[pred]):
            if role == "deep":
                lines.append(f"{pred}: deep: {dm.deep_widths[pred]}: {dm.bindings[pred][role]}")
            else:
                lines.append(f"{pred}: {role}: {dm.bindings[pred][role]}")
    for pred in sorted(dm.clamps):
        lines.append(f"{pred}: clamp: {dm.clamps[pred]}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# validation


def validate_program(program, datamap=None):
    """Check that every rule is groundable and representable.

    Raises :class:`LangError` listing all problems found.  With a
    ``datamap``, also checks bindings (every open predicate bound, no unknown
    predicates, clamp pairings well-formed).
    """
    problems = []

    def atom_problems(atom, rule):
        p = program.predicates.get(atom.pred)
        if p is None:
            problems.append(f"line {rule.line}: unknown predicate {atom.pred!r}")
            return None
        if len(atom.args) != p.arity:
            problems.append(
                f"line {rule.line}: arity mismatch for {atom.pred!r}"
                f" (expected {p.arity}, found {len(atom.args)})"
            )
        return p

    for rule in program.rules:
        if rule.q not in (1, 2):
            problems.append(f"line {rule.line}: exponent must be 1 or 2, found {rule.q}")
        preds = {}
        for atom in rule.atoms():
            preds[atom] = atom_problems(atom, rule)
        if isinstance(rule, LogicalRule):
            body_vars = set()
            for lit in rule.body:
                body_vars |= lit.atom.variables()
            for lit in rule.head:
                unbound = lit.atom.variables() - body_vars
                for v in sorted(unbound):
                    problems.append(
                        f"line {rule.line}: unbound head variable {v!r}"
                        " (head variables must occur in the body)"
                    )
            if rule.hard:
                for lit in rule.head:
                    p = preds.get(lit.atom)
                    if p is not None and p.kind == "deep":
                        problems.append(
                            f"line {rule.line}: deep atom {lit.atom} in head of hard rule"
                        )

    if datamap is not None:
        for pred in datamap.bindings:
            if pred not in program.predicates:
                problems.append(f"data map: unknown predicate {pred!r}")
        for pred, roles in datamap.bindings.items():
            p = program.predicates.get(pred)
            if p is None:
                continue
            if p.kind == "target" and "target" in roles and "observed" in roles:
                problems.append(f"data map: {pred!r} bound as both target and observed")
            if p.kind != "deep" and "deep" in roles:
                problems.append(f"data map: {pred!r} is not a deep predicate")
            if p.kind == "deep" and "deep" not in roles:
                problems.append(f"data map: deep predicate {pred!r} missing deep binding")
        for pred in program.predicates.values():
            if pred.kind == "target" and datamap.path(pred.name, "target") is None:
                problems.append(f"data map: missing binding for open predicate {pred.name!r}")
            if pred.kind == "deep" and datamap.path(pred.name, "deep") is None:
                problems.append(f"data map: missing binding for deep predicate {pred.name!r}")
        for tgt, deep in datamap.clamps.items():
            pt = program.predicates.get(tgt)
            pd = program.predicates.get(deep)
            if pt is None or pt.kind != "target":
                problems.append(f"data map: clamp source {tgt!r} is not a target predicate")
            if pd is None or pd.kind != "deep":
                problems.append(f"data map: clamp binding {deep!r} is not a deep predicate")
            if pt is not None and pd is not None and pt.domains != pd.domains:
                problems.append(
                    f"data map: clamp {tgt!r} -> {deep!r} domain signatures differ"
                )

    if problems:
        raise LangError("; ".join(problems))
