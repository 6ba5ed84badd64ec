"""Core data model: expressions, distances, types, propositions, commands, programs.

Every value here is an immutable dataclass; sharing between threads is safe.
Numeric literals are exact rationals (`fractions.Fraction`) so that constraint
generation stays solver-exact; interpreters convert to binary64 at evaluation
time.

Distances are represented with the same expression nodes as program
expressions (their grammars coincide on the numeric fragment); `DVar` nodes
only ever appear in distances, between inference start and constraint solving.
Hat variables (`HatVar("x")`, rendered `^x`) are the companion distance
holders of star-typed variables; they never occur in source command bodies,
only in annotations, preconditions, and target programs.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Callable, Iterable, Iterator, Optional, Union


# ---------------------------------------------------------------------------
# Expressions (shared by programs and distance annotations)
# ---------------------------------------------------------------------------

LINEAR_OPS = ("+", "-")
NONLINEAR_OPS = ("*", "/", "%")
CMP_OPS = ("<", ">", "==", "<=", ">=")


@dataclass(frozen=True)
class Expr:
    """Base class for expression/distance nodes. Abstract."""


@dataclass(frozen=True)
class Lit(Expr):
    value: Fraction

    def __post_init__(self):
        object.__setattr__(self, "value", Fraction(self.value))


@dataclass(frozen=True)
class BoolLit(Expr):
    value: bool


@dataclass(frozen=True)
class Var(Expr):
    name: str


@dataclass(frozen=True)
class HatVar(Expr):
    """Companion distance of a star-typed variable; spelled ^x."""

    base: str

    @property
    def name(self) -> str:
        return "^" + self.base


@dataclass(frozen=True)
class DVar(Expr):
    """Distance variable (inference placeholder, e.g. alpha/beta/gamma)."""

    name: str


@dataclass(frozen=True)
class BinOp(Expr):
    op: str  # one of LINEAR_OPS + NONLINEAR_OPS
    lhs: Expr
    rhs: Expr


@dataclass(frozen=True)
class Cmp(Expr):
    op: str  # one of CMP_OPS
    lhs: Expr
    rhs: Expr


@dataclass(frozen=True)
class Not(Expr):
    operand: Expr


@dataclass(frozen=True)
class Cons(Expr):
    head: Expr
    tail: Expr


@dataclass(frozen=True)
class Index(Expr):
    seq: Expr
    idx: Expr


@dataclass(frozen=True)
class Select(Expr):
    """Ternary e1 ? e2 : e3 (also the select form of distances)."""

    cond: Expr
    then: Expr
    other: Expr


@dataclass(frozen=True)
class Abs(Expr):
    """Absolute value; appears in instrumented privacy costs."""

    operand: Expr


@dataclass(frozen=True)
class Log(Expr):
    """Natural logarithm; appears in uniform-source privacy costs."""

    operand: Expr


Distance = Expr  # distances are the numeric fragment of Expr plus DVar


def lit(v) -> Lit:
    return Lit(Fraction(v))


ZERO = lit(0)
ONE = lit(1)


def add(a: Expr, b: Expr) -> Expr:
    return BinOp("+", a, b)


def sub(a: Expr, b: Expr) -> Expr:
    return BinOp("-", a, b)


def mul(a: Expr, b: Expr) -> Expr:
    return BinOp("*", a, b)


def div(a: Expr, b: Expr) -> Expr:
    return BinOp("/", a, b)


def neg(a: Expr) -> Expr:
    return BinOp("-", ZERO, a)


# ---------------------------------------------------------------------------
# Random expressions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RandExpr:
    pass


@dataclass(frozen=True)
class Laplace(RandExpr):
    """lap(r): zero-mean Laplace draw with scale r.

    The scale must evaluate to a strictly positive real under the program
    precondition; `check_wellformed_program` emits a diagnostic otherwise.
    """

    scale: Expr


@dataclass(frozen=True)
class Uniform(RandExpr):
    """uniform: a draw from [0, 1]."""


# ---------------------------------------------------------------------------
# Propositions (preconditions, invariants, obligations)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Prop:
    pass


@dataclass(frozen=True)
class PAtom(Prop):
    expr: Expr  # boolean-valued expression


@dataclass(frozen=True)
class PAnd(Prop):
    parts: tuple

    def __post_init__(self):
        object.__setattr__(self, "parts", tuple(self.parts))


@dataclass(frozen=True)
class POr(Prop):
    parts: tuple

    def __post_init__(self):
        object.__setattr__(self, "parts", tuple(self.parts))


@dataclass(frozen=True)
class PNot(Prop):
    operand: Prop


@dataclass(frozen=True)
class PImplies(Prop):
    hyp: Prop
    concl: Prop


@dataclass(frozen=True)
class PForall(Prop):
    """Universal quantifier; sort is "int" (index variables) or "real"."""

    var: str
    sort: str
    body: Prop


TRUE = PAtom(BoolLit(True))


def pand(parts: Iterable[Prop]) -> Prop:
    flat = []
    for p in parts:
        if isinstance(p, PAnd):
            flat.extend(p.parts)
        elif p != TRUE:
            flat.append(p)
    if not flat:
        return TRUE
    if len(flat) == 1:
        return flat[0]
    return PAnd(tuple(flat))


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Ty:
    pass


@dataclass(frozen=True)
class NumTy(Ty):
    """Numeric type carrying a distance. `integer` marks counter-like
    variables whose arithmetic lives in the integers; it feeds solver sort
    selection and changes nothing else."""

    dist: Expr
    integer: bool = False


@dataclass(frozen=True)
class StarTy(Ty):
    """Star type: the distance is tracked dynamically by the companion hat
    variable, which houses it (the type itself carries none)."""


@dataclass(frozen=True)
class BoolTy(Ty):
    """Booleans; a zero-distance shell."""


@dataclass(frozen=True)
class ListTy(Ty):
    """Lists; the shell has distance zero, elements carry their own type."""

    elem: Ty


@dataclass(frozen=True)
class FunTy(Ty):
    """Function types; only ever appear in signatures, never in bodies."""

    params: tuple
    ret: Ty


def zero_shell(ty: Ty) -> bool:
    """True when every value of this type must coincide in related runs."""
    if isinstance(ty, BoolTy):
        return True
    if isinstance(ty, NumTy):
        return normalize(ty.dist) == ZERO
    if isinstance(ty, ListTy):
        return zero_shell(ty.elem)
    return False


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Cmd:
    pass


@dataclass(frozen=True)
class Skip(Cmd):
    pass


@dataclass(frozen=True)
class Assign(Cmd):
    name: str  # may be a hat name "^x" in target programs
    expr: Expr
    instrumented: bool = False


@dataclass(frozen=True)
class Sample(Cmd):
    name: str
    rand: RandExpr


@dataclass(frozen=True)
class Havoc(Cmd):
    """Target-language command: sets the variable to an arbitrary real."""

    name: str


@dataclass(frozen=True)
class Havoc01(Cmd):
    """Target-language command: sets the variable to an arbitrary value in [0,1]."""

    name: str


@dataclass(frozen=True)
class Seq(Cmd):
    cmds: tuple

    def __post_init__(self):
        flat = []
        for c in self.cmds:
            if isinstance(c, Seq):
                flat.extend(c.cmds)
            else:
                flat.append(c)
        object.__setattr__(self, "cmds", tuple(flat))


@dataclass(frozen=True)
class If(Cmd):
    cond: Expr
    then: Cmd
    els: Cmd


@dataclass(frozen=True)
class While(Cmd):
    cond: Expr
    invariant: Optional[Prop]
    body: Cmd


@dataclass(frozen=True)
class Return(Cmd):
    expr: Expr


def seq(cmds: Iterable[Cmd]) -> Cmd:
    cmds = [c for c in cmds if not isinstance(c, Skip)] or [Skip()]
    if len(cmds) == 1:
        return cmds[0]
    return Seq(tuple(cmds))


COST_VAR = "v_eps"


# ---------------------------------------------------------------------------
# Programs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Program:
    """A source program: `body` ends in a single `return e`.

    `annotations` are the programmer-supplied local types (the DefVars beyond
    the signature); `budget` is the claimed privacy bound, an expression over
    the parameters.
    """

    name: str
    params: tuple  # tuple[(str, Ty)]
    ret: tuple  # (str, Ty)
    pre: Prop
    budget: Expr
    annotations: tuple  # tuple[(str, Ty)] for locals
    body: Cmd

    def param_names(self) -> list:
        return [n for n, _ in self.params]

    def annotation_map(self) -> dict:
        return dict(self.annotations)


@dataclass(frozen=True)
class TargetProgram:
    """Nonprobabilistic instrumented program.

    `params` include the lifted hat parameters of star-typed inputs; `body`
    uses havoc/havoc01 instead of sampling and accumulates the privacy price
    in the distinguished `v_eps`, written only by the initial `v_eps := 0`
    and the instrumented increments. `sorts` records the solver sort of every
    variable (including hat companions) for obligation closure.
    """

    name: str
    params: tuple  # tuple[(str, Ty)]
    ret: tuple
    pre: Prop
    budget: Expr
    body: Cmd
    int_vars: frozenset = frozenset()
    cost_var: str = COST_VAR
    sorts: tuple = ()


# ---------------------------------------------------------------------------
# Traversals: free variables, substitution
# ---------------------------------------------------------------------------


def children(e: Expr) -> tuple:
    if isinstance(e, BinOp):
        return (e.lhs, e.rhs)
    if isinstance(e, Cmp):
        return (e.lhs, e.rhs)
    if isinstance(e, Not):
        return (e.operand,)
    if isinstance(e, Cons):
        return (e.head, e.tail)
    if isinstance(e, Index):
        return (e.seq, e.idx)
    if isinstance(e, Select):
        return (e.cond, e.then, e.other)
    if isinstance(e, (Abs, Log)):
        return (e.operand,)
    return ()


def free_vars(term: Union[Expr, Prop, None], *, bound: frozenset = frozenset()) -> set:
    """Unbound names of an expression or proposition.

    Hat variables are reported with their `^` spelling, distance variables
    with their bare name; quantifier-bound index variables are excluded.
    """
    if term is None:
        return set()
    if isinstance(term, Var):
        return set() if term.name in bound else {term.name}
    if isinstance(term, HatVar):
        return {term.name}
    if isinstance(term, DVar):
        return {term.name}
    if isinstance(term, Expr):
        out: set = set()
        for c in children(term):
            out |= free_vars(c, bound=bound)
        return out
    if isinstance(term, PAtom):
        return free_vars(term.expr, bound=bound)
    if isinstance(term, (PAnd, POr)):
        out = set()
        for p in term.parts:
            out |= free_vars(p, bound=bound)
        return out
    if isinstance(term, PNot):
        return free_vars(term.operand, bound=bound)
    if isinstance(term, PImplies):
        return free_vars(term.hyp, bound=bound) | free_vars(term.concl, bound=bound)
    if isinstance(term, PForall):
        return free_vars(term.body, bound=bound | {term.var})
    raise TypeError(f"free_vars: unsupported term {term!r}")


def dvars(term) -> set:
    """Distance-variable names occurring in the term."""
    if isinstance(term, DVar):
        return {term.name}
    if isinstance(term, Expr):
        out: set = set()
        for c in children(term):
            out |= dvars(c)
        return out
    if isinstance(term, PAtom):
        return dvars(term.expr)
    if isinstance(term, (PAnd, POr)):
        out = set()
        for p in term.parts:
            out |= dvars(p)
        return out
    if isinstance(term, PNot):
        return dvars(term.operand)
    if isinstance(term, PImplies):
        return dvars(term.hyp) | dvars(term.concl)
    if isinstance(term, PForall):
        return dvars(term.body)
    return set()


def _rebuild(e: Expr, kids: tuple) -> Expr:
    if isinstance(e, BinOp):
        return BinOp(e.op, *kids)
    if isinstance(e, Cmp):
        return Cmp(e.op, *kids)
    if isinstance(e, Not):
        return Not(*kids)
    if isinstance(e, Cons):
        return Cons(*kids)
    if isinstance(e, Index):
        return Index(*kids)
    if isinstance(e, Select):
        return Select(*kids)
    if isinstance(e, Abs):
        return Abs(*kids)
    if isinstance(e, Log):
        return Log(*kids)
    raise TypeError(e)


def subst(term, name: str, repl: Expr):
    """Capture-avoiding substitution of `repl` for the variable `name`.

    `name` may be a plain variable, a hat spelling `^x`, or a distance
    variable; the term is returned unchanged when the name is absent.
    """
    if isinstance(term, Expr):
        if isinstance(term, Var):
            return repl if term.name == name else term
        if isinstance(term, HatVar):
            return repl if term.name == name else term
        if isinstance(term, DVar):
            return repl if term.name == name else term
        kids = children(term)
        if not kids:
            return term
        new = tuple(subst(c, name, repl) for c in kids)
        if new == kids:
            return term
        return _rebuild(term, new)
    if isinstance(term, PAtom):
        return PAtom(subst(term.expr, name, repl))
    if isinstance(term, PAnd):
        return PAnd(tuple(subst(p, name, repl) for p in term.parts))
    if isinstance(term, POr):
        return POr(tuple(subst(p, name, repl) for p in term.parts))
    if isinstance(term, PNot):
        return PNot(subst(term.operand, name, repl))
    if isinstance(term, PImplies):
        return PImplies(subst(term.hyp, name, repl), subst(term.concl, name, repl))
    if isinstance(term, PForall):
        if term.var == name:
            return term
        if term.var in free_vars(repl):
            fresh = term.var
            taken = free_vars(repl) | free_vars(term.body)
            while fresh in taken:
                fresh += "_"
            body = subst(term.body, term.var, Var(fresh))
            return PForall(fresh, term.sort, subst(body, name, repl))
        return PForall(term.var, term.sort, subst(term.body, name, repl))
    raise TypeError(f"subst: unsupported term {term!r}")


def subst_ty(ty: Ty, name: str, repl: Expr) -> Ty:
    if isinstance(ty, NumTy):
        return NumTy(subst(ty.dist, name, repl), ty.integer)
    if isinstance(ty, ListTy):
        return ListTy(subst_ty(ty.elem, name, repl))
    return ty


# ---------------------------------------------------------------------------
# Normalization: canonical rational-linear form over atomic factors
# ---------------------------------------------------------------------------

# A linear form is (constant, {monomial: coefficient}) where a monomial is a
# sorted tuple of (atom, power). Atoms are normalized non-decomposable
# expressions (variables, indexing, selects, abs/log, irreducible quotients).


def _atom_key(e: Expr) -> str:
    return repr(e)


def _mono_mul(m1: tuple, m2: tuple) -> tuple:
    powers: dict = {}
    order: dict = {}
    for atom, p in m1 + m2:
        k = _atom_key(atom)
        powers[k] = powers.get(k, 0) + p
        order[k] = atom
    items = [(order[k], p) for k, p in powers.items() if p != 0]
    items.sort(key=lambda ap: _atom_key(ap[0]))
    return tuple(items)


def _mono_invert(m: tuple) -> tuple:
    return tuple((atom, -p) for atom, p in m)


def _lf_add(a, b, factor=Fraction(1)):
    const = a[0] + factor * b[0]
    terms = dict(a[1])
    for m, c in b[1].items():
        terms[m] = terms.get(m, Fraction(0)) + factor * c
        if terms[m] == 0:
            del terms[m]
    return (const, terms)


def _lf_scale(a, k: Fraction):
    if k == 0:
        return (Fraction(0), {})
    return (a[0] * k, {m: c * k for m, c in a[1].items()})


def _lf_mul(a, b):
    const = a[0] * b[0]
    terms: dict = {}

    def acc(m, c):
        if c == 0:
            return
        terms[m] = terms.get(m, Fraction(0)) + c
        if terms[m] == 0:
            del terms[m]

    for m, c in a[1].items():
        acc(m, c * b[0])
    for m, c in b[1].items():
        acc(m, c * a[0])
    for m1, c1 in a[1].items():
        for m2, c2 in b[1].items():
            acc(_mono_mul(m1, m2), c1 * c2)
    return (const, terms)


def _atom(e: Expr):
    return (Fraction(0), {((e, 1),): Fraction(1)})


def _linearize(e: Expr):
    if isinstance(e, Lit):
        return (e.value, {})
    if isinstance(e, (Var, HatVar, DVar)):
        return _atom(e)
    if isinstance(e, BinOp):
        if e.op == "+":
            return _lf_add(_linearize(e.lhs), _linearize(e.rhs))
        if e.op == "-":
            return _lf_add(_linearize(e.lhs), _linearize(e.rhs), Fraction(-1))
        if e.op == "*":
            return _lf_mul(_linearize(e.lhs), _linearize(e.rhs))
        if e.op == "/":
            num = _linearize(e.lhs)
            den = _linearize(e.rhs)
            if not den[1]:
                if den[0] == 0:
                    return _atom(BinOp("/", _from_linear(num), ZERO))
                return _lf_scale(num, Fraction(1) / den[0])
            if den[0] == 0 and len(den[1]) == 1:
                ((mono, coeff),) = den[1].items()
                return _lf_mul(num, (Fraction(0), {_mono_invert(mono): Fraction(1) / coeff}))
            return _atom(BinOp("/", _from_linear(num), _from_linear(den)))
        if e.op == "%":
            return _atom(BinOp("%", normalize(e.lhs), normalize(e.rhs)))
    if isinstance(e, Index):
        return _atom(Index(normalize(e.seq), normalize(e.idx)))
    if isinstance(e, Select):
        return _atom(Select(normalize(e.cond), normalize(e.then), normalize(e.other)))
    if isinstance(e, Abs):
        inner = _linearize(e.operand)
        if not inner[1]:
            return (abs(inner[0]), {})
        return _atom(Abs(_from_linear(inner)))
    if isinstance(e, Log):
        return _atom(Log(normalize(e.operand)))
    # boolean-valued nodes showing up in numeric position: keep as atoms
    return _atom(normalize_structural(e))


def _pow_expr(atom: Expr, p: int) -> Expr:
    out = atom
    for _ in range(abs(p) - 1):
        out = BinOp("*", out, atom)
    if p < 0:
        return BinOp("/", ONE, out)
    return out


def _from_linear(lf) -> Expr:
    const, terms = lf
    parts = []
    for mono, coeff in sorted(terms.items(), key=lambda mc: tuple(_atom_key(a) for a, _ in mc[0])):
        pos_factors = [_pow_expr(a, p) for a, p in mono if p > 0]
        neg_factors = [_pow_expr(a, -p) for a, p in mono if p < 0]
        expr = None
        for f in pos_factors:
            expr = f if expr is None else BinOp("*", expr, f)
        mag = abs(coeff)
        if expr is None:
            expr = Lit(mag)
        else:
            # render p/q coefficients as (p*e)/q, so eps/2 stays eps/2
            if mag.numerator != 1:
                expr = BinOp("*", Lit(Fraction(mag.numerator)), expr)
            if mag.denominator != 1:
                neg_factors = [Lit(Fraction(mag.denominator))] + neg_factors
        den = None
        for f in neg_factors:
            den = f if den is None else BinOp("*", den, f)
        if den is not None:
            expr = BinOp("/", expr, den)
        parts.append((coeff < 0, expr))
    out: Optional[Expr] = None
    if const != 0 or not parts:
        out = Lit(const)
    for negative, expr in parts:
        if out is None:
            out = neg(expr) if negative else expr
        else:
            out = BinOp("-" if negative else "+", out, expr)
    assert out is not None
    return out


def normalize_structural(e: Expr) -> Expr:
    if isinstance(e, Cmp):
        return Cmp(e.op, normalize(e.lhs), normalize(e.rhs))
    if isinstance(e, Not):
        return Not(normalize(e.operand))
    if isinstance(e, Cons):
        return Cons(normalize(e.head), normalize(e.tail))
    if isinstance(e, BoolLit):
        return e
    kids = children(e)
    if not kids:
        return e
    return _rebuild(e, tuple(normalize(c) for c in kids))


def normalize(e: Expr) -> Expr:
    """Canonical form: constant folding plus sorted rational-linear sums.

    Structurally equal normal forms decide the checker's "syntactically
    identical distance" tests and refine's equivalence check.
    """
    if isinstance(e, (Cmp, Not, Cons, BoolLit)):
        return normalize_structural(e)
    return _from_linear(_linearize(e))


def dist_equal(a: Expr, b: Expr) -> bool:
    return normalize(a) == normalize(b)


def fold_abs(d: Expr) -> Expr:
    """abs(d), folded when the sign is syntactically evident.

    Keeps instrumented costs in their literal shape: abs over a select of
    nonnegative constants disappears, a constant folds to its magnitude, and
    abs(-e) canonicalizes to abs(e).
    """
    const, terms = _linearize(d)
    sign_vector = [const] + [
        c for _, c in sorted(terms.items(), key=lambda mc: tuple(_atom_key(a) for a, _ in mc[0]))
    ]
    leading = next((s for s in sign_vector if s != 0), Fraction(0))
    if leading < 0:
        const, terms = _lf_scale((const, terms), Fraction(-1))
    nd = _from_linear((const, terms))
    if isinstance(nd, Lit):
        return Lit(abs(nd.value))
    if isinstance(nd, Select) and isinstance(nd.then, Lit) and isinstance(nd.other, Lit):
        if nd.then.value >= 0 and nd.other.value >= 0:
            return nd
        if nd.then.value <= 0 and nd.other.value <= 0:
            return Select(nd.cond, Lit(-nd.then.value), Lit(-nd.other.value))
    return Abs(nd)


def scale_cost(d_abs: Expr, scale: Expr) -> Expr:
    """|d| / r with divide-by-quotient rewriting: |d| / (a/b) = |d|*b/a."""
    s = normalize(scale)
    if isinstance(s, BinOp) and s.op == "/":
        num, den = s.lhs, s.rhs
        e: Expr = d_abs
        if not (isinstance(den, Lit) and den.value == 1):
            e = BinOp("*", e, den)
        if not (isinstance(num, Lit) and num.value == 1):
            e = BinOp("/", e, num)
        return normalize(e)
    return normalize(BinOp("/", d_abs, s))


# ---------------------------------------------------------------------------
# Typing environment
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TypingEnv:
    """Variable typing: the Gamma of the judgments.

    `defvars` are the names whose distances were given by the programmer
    (signature plus typedef block); inference never refines those.
    """

    bindings: tuple  # tuple[(str, Ty)], insertion-ordered
    defvars: frozenset

    @staticmethod
    def make(bindings: dict, defvars: Iterable[str]) -> "TypingEnv":
        return TypingEnv(tuple(bindings.items()), frozenset(defvars))

    def as_dict(self) -> dict:
        return dict(self.bindings)

    def lookup(self, name: str) -> Ty:
        for n, t in self.bindings:
            if n == name:
                return t
        raise KeyError(name)

    def __contains__(self, name: str) -> bool:
        return any(n == name for n, _ in self.bindings)

    def bind(self, name: str, ty: Ty) -> "TypingEnv":
        found = False
        out = []
        for n, t in self.bindings:
            if n == name:
                out.append((n, ty))
                found = True
            else:
                out.append((n, t))
        if not found:
            out.append((name, ty))
        return TypingEnv(tuple(out), self.defvars)

    def subst_dvar(self, name: str, repl: Expr) -> "TypingEnv":
        return TypingEnv(
            tuple((n, subst_ty(t, name, repl)) for n, t in self.bindings), self.defvars
        )

    def normalized(self) -> dict:
        out = {}
        for n, t in self.bindings:
            if isinstance(t, NumTy):
                out[n] = ("num", normalize(t.dist))
            elif isinstance(t, StarTy):
                out[n] = ("star",)
            else:
                out[n] = (repr(t),)
        return out


# ---------------------------------------------------------------------------
# Program-shape helpers
# ---------------------------------------------------------------------------


def statements(c: Cmd) -> Iterator[Cmd]:
    """All statements, pre-order."""
    yield c
    if isinstance(c, Seq):
        for s in c.cmds:
            yield from statements(s)
    elif isinstance(c, If):
        yield from statements(c.then)
        yield from statements(c.els)
    elif isinstance(c, While):
        yield from statements(c.body)


def command_exprs(c: Cmd) -> Iterator[Expr]:
    """Expressions appearing in commands (guards, RHSs, scales, returns)."""
    for s in statements(c):
        if isinstance(s, Assign):
            yield s.expr
        elif isinstance(s, Sample) and isinstance(s.rand, Laplace):
            yield s.rand.scale
        elif isinstance(s, (If, While)):
            yield s.cond
        elif isinstance(s, Return):
            yield s.expr


def random_vars(p: Program) -> set:
    return {s.name for s in statements(p.body) if isinstance(s, Sample)}


def assigned_vars(c: Cmd) -> set:
    out = set()
    for s in statements(c):
        if isinstance(s, Assign):
            out.add(s.name)
        elif isinstance(s, (Sample, Havoc, Havoc01)):
            out.add(s.name)
    return out


def budget_params(p: Program) -> list:
    names = [n for n, _ in p.params]
    return [n for n in names if n in free_vars(p.budget)]


def ambient_pre(p: Program) -> Prop:
    """Program precondition plus the implicit positivity of budget parameters."""
    extra = [PAtom(Cmp(">", Var(n), ZERO)) for n in budget_params(p)]
    return pand([p.pre, *extra])


def integer_vars(p: Program, env: Optional[TypingEnv] = None) -> frozenset:
    """Variables whose values provably stay integral.

    Parameters declared `int[...]` seed the set; a local stays in when every
    expression assigned to it is built from integer literals and other
    integral variables under +, -, *, %. Sampled variables never qualify.
    """
    ints = {n for n, t in p.params if isinstance(t, NumTy) and t.integer}
    rname, rty = p.ret
    if isinstance(rty, NumTy) and rty.integer:
        ints.add(rname)
    sampled = random_vars(p)
    assigns: dict = {}
    for s in statements(p.body):
        if isinstance(s, Assign):
            assigns.setdefault(s.name, []).append(s.expr)

    def int_expr(e: Expr, cur: set) -> bool:
        if isinstance(e, Lit):
            return e.value.denominator == 1
        if isinstance(e, Var):
            return e.name in cur
        if isinstance(e, BinOp) and e.op in ("+", "-", "*", "%"):
            return int_expr(e.lhs, cur) and int_expr(e.rhs, cur)
        if isinstance(e, Select):
            return int_expr(e.then, cur) and int_expr(e.other, cur)
        return False

    cur = ints | {n for n in assigns if n not in sampled}
    changed = True
    while changed:
        changed = False
        for n in list(cur):
            if n in assigns and not all(int_expr(e, cur) for e in assigns[n]):
                cur.discard(n)
                changed = True
    return frozenset(cur)


# ---------------------------------------------------------------------------
# Well-formedness
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Diagnostic:
    code: str
    message: str
    where: str = ""

    def __str__(self):
        loc = f" [{self.where}]" if self.where else ""
        return f"{self.code}: {self.message}{loc}"


def _blocks(c: Cmd) -> Iterator[tuple]:
    """Yield every maximal statement list (program order within one scope)."""
    if isinstance(c, Seq):
        yield c.cmds
        for s in c.cmds:
            yield from _blocks(s)
    elif isinstance(c, If):
        for b in (c.then, c.els):
            if not isinstance(b, Seq):
                yield (b,)
            yield from _blocks(b)
    elif isinstance(c, While):
        if not isinstance(c.body, Seq):
            yield (c.body,)
        yield from _blocks(c.body)


def _count_uses(c: Cmd, name: str) -> int:
    n = 0
    for e in command_exprs(c):
        n += sum(1 for v in _iter_exprs(e) if isinstance(v, Var) and v.name == name)
    return n


def _iter_exprs(e: Expr) -> Iterator[Expr]:
    yield e
    for k in children(e):
        yield from _iter_exprs(k)


def _head_exprs(s: Cmd) -> Iterator[Expr]:
    """Expressions evaluated first when `s` runs (RHS or guard)."""
    if isinstance(s, Assign):
        yield s.expr
    elif isinstance(s, (If, While)):
        yield s.cond
    elif isinstance(s, Return):
        yield s.expr
    elif isinstance(s, Sample) and isinstance(s.rand, Laplace):
        yield s.rand.scale


def check_wellformed_program(
    p: Program, prove: Optional[Callable[[Prop], bool]] = None
) -> list:
    """Pre-typing sanity checks; an empty list means well-formed.

    `prove`, when given, decides validity of closed propositions (used for
    scale positivity and division-by-zero); without it those two checks fall
    back to syntactic constants.
    """
    diags: list = []
    body = p.body

    # return shape: exactly one return, and it is the final statement
    stmts = list(statements(body))
    returns = [s for s in stmts if isinstance(s, Return)]
    top = body.cmds if isinstance(body, Seq) else (body,)
    if len(returns) != 1 or not top or top[-1] is not returns[0]:
        diags.append(
            Diagnostic("return-shape", "program must end in exactly one return")
        )

    sampled = random_vars(p)
    mutable = assigned_vars(body) | sampled
    star_vars = set()
    ann = dict(p.params) | {p.ret[0]: p.ret[1]} | p.annotation_map()
    for n, t in ann.items():
        if isinstance(t, StarTy) or (isinstance(t, ListTy) and isinstance(t.elem, StarTy)):
            star_vars.add(n)

    # random variables: one sample site, one adjacent use
    sample_sites: dict = {}
    for s in stmts:
        if isinstance(s, Sample):
            sample_sites.setdefault(s.name, []).append(s)
    for name, sites in sample_sites.items():
        if len(sites) != 1:
            diags.append(
                Diagnostic("sample-once", f"random variable {name} sampled at {len(sites)} sites")
            )
            continue
        uses = _count_uses(body, name)
        if uses != 1:
            diags.append(
                Diagnostic("single-use", f"random variable {name} has {uses} uses, expected 1")
            )
            continue
        adjacent = False
        for block in _blocks(body):
            for i, s in enumerate(block):
                if s is sites[0]:
                    if i + 1 < len(block):
                        nxt = block[i + 1]
                        in_head = any(
                            isinstance(v, Var) and v.name == name
                            for e in _head_exprs(nxt)
                            for v in _iter_exprs(e)
                        )
                        in_stmt = _count_uses(nxt, name) == 1
                        adjacent = in_head or in_stmt
        if not adjacent:
            diags.append(
                Diagnostic("single-use", f"use of random variable {name} is not adjacent to its definition")
            )

    # immutability of distance dependencies for normal variables
    for n, t in ann.items():
        if n in sampled or not isinstance(t, NumTy):
            continue
        for fv in free_vars(t.dist):
            base = fv[1:] if fv.startswith("^") else fv
            if fv.startswith("^"):
                if base in mutable and base in star_vars:
                    diags.append(
                        Diagnostic(
                            "immutable-distance",
                            f"distance of {n} depends on mutable hat variable {fv}",
                        )
                    )
            elif fv in mutable:
                diags.append(
                    Diagnostic(
                        "immutable-distance",
                        f"distance of {n} depends on mutable variable {fv}",
                    )
                )

    # laplace scales strictly positive under the precondition; the prover
    # callback receives open propositions and closes them itself
    amb = ambient_pre(p)
    for s in stmts:
        if isinstance(s, Sample) and isinstance(s.rand, Laplace):
            scale = normalize(s.rand.scale)
            if isinstance(scale, Lit):
                if scale.value <= 0:
                    diags.append(
                        Diagnostic("scale-positive", f"lap scale for {s.name} is not positive")
                    )
            elif prove is not None:
                if not prove(PImplies(amb, PAtom(Cmp(">", scale, ZERO)))):
                    diags.append(
                        Diagnostic(
                            "scale-positive",
                            f"cannot show lap scale for {s.name} is positive under the precondition",
                        )
                    )

    # division (and mod) by possibly-zero expressions
    if prove is not None:
        seen = set()
        for e, ctx in _divisions(p):
            d = normalize(e)
            key = (d, tuple(ctx))
            if key in seen:
                continue
            seen.add(key)
            if isinstance(d, Lit):
                if d.value == 0:
                    diags.append(Diagnostic("div-zero", "division by zero"))
                continue
            hyp = pand([amb, *[PAtom(c) for c in ctx]])
            if not prove(PImplies(hyp, PNot(PAtom(Cmp("==", d, ZERO))))):
                diags.append(
                    Diagnostic(
                        "div-zero",
                        f"divisor {d!r} may be zero under the precondition",
                    )
                )

    return diags


def _divisions(p: Program) -> Iterator[tuple]:
    """All division sites with their select-condition context."""

    def walk(e: Expr, ctx: tuple) -> Iterator[tuple]:
        if isinstance(e, BinOp) and e.op in ("/", "%"):
            yield (e.rhs, ctx)
        if isinstance(e, Select):
            yield from walk(e.cond, ctx)
            yield from walk(e.then, ctx + (e.cond,))
            yield from walk(e.other, ctx + (Not(e.cond),))
            return
        for k in children(e):
            yield from walk(k, ctx)

    for e in command_exprs(p.body):
        yield from walk(e, ())
    for _, t in p.annotations:
        if isinstance(t, NumTy):
            yield from walk(t.dist, ())
    yield from walk(p.budget, ())
