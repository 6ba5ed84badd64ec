"""Relational type checking and the type-directed transformation.

`type_expr` synthesizes distance-annotated types; comparisons emit quantified
equivalence constraints (two related runs must take the same branch) and
assignments whose distances are not syntactically identical after
normalization emit equality constraints. `check_cmd`/`transform` produce the
cost-instrumented nonprobabilistic target program: sampling becomes havoc,
each alignment step pays into the distinguished `v_eps` cost variable, and
star-typed assignments explicitly maintain their hat companions.

`check_injectivity` decomposes the environment's memory relation: variables
with acyclic distance dependencies need nothing; a random variable whose
distance mentions itself yields a monotonicity obligation; multi-variable
cycles are rejected conservatively.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from .core import (
    Abs,
    Assign,
    BinOp,
    BoolLit,
    BoolTy,
    Cmd,
    Cmp,
    Cons,
    Diagnostic,
    DVar,
    Expr,
    HatVar,
    Havoc,
    Havoc01,
    If,
    Index,
    Laplace,
    Lit,
    ListTy,
    Log,
    Not,
    NumTy,
    PAnd,
    PAtom,
    PImplies,
    Program,
    Prop,
    Return,
    Sample,
    Select,
    Seq,
    Skip,
    StarTy,
    TargetProgram,
    TRUE,
    Ty,
    TypingEnv,
    Uniform,
    Var,
    While,
    ZERO,
    COST_VAR,
    ambient_pre,
    assigned_vars,
    check_wellformed_program,
    dist_equal,
    dvars as term_dvars,
    fold_abs,
    free_vars,
    integer_vars,
    lit,
    normalize,
    pand,
    random_vars,
    scale_cost,
    seq,
    statements,
    subst,
)


@dataclass(frozen=True)
class Constraint:
    """A universally quantified solver obligation.

    qvars closes the formula over program variables; distance variables stay
    free (they are the unknowns of residual-inference constraints).
    """

    name: str
    kind: str  # odot | equality | injectivity | uniform-side
    qvars: tuple  # ((name, sort), ...) with sort real|int|bool|rarray|barray
    hyps: tuple  # tuple of Prop
    concl: Prop

    def dvars(self) -> set:
        out = set()
        for h in self.hyps:
            out |= term_dvars(h)
        return out | term_dvars(self.concl)

    def is_residual(self) -> bool:
        return bool(self.dvars())


@dataclass
class CheckResult:
    target: Optional[TargetProgram]
    constraints: list
    diagnostics: list

    @property
    def ok(self) -> bool:
        return not self.diagnostics


class CheckError(Exception):
    pass


# ---------------------------------------------------------------------------
# Sorts for quantification
# ---------------------------------------------------------------------------


def sort_env(p: Program, env: TypingEnv) -> dict:
    """Solver sort of every program variable and hat companion."""
    ints = integer_vars(p, env)
    sorts: dict = {COST_VAR: "real"}
    for name, ty in env.bindings:
        if isinstance(ty, NumTy):
            sorts[name] = "int" if (ty.integer or name in ints) else "real"
        elif isinstance(ty, StarTy):
            sorts[name] = "real"
            sorts["^" + name] = "real"
        elif isinstance(ty, BoolTy):
            sorts[name] = "bool"
        elif isinstance(ty, ListTy):
            sorts[name] = "barray" if isinstance(ty.elem, BoolTy) else "rarray"
            if isinstance(ty.elem, StarTy):
                sorts["^" + name] = "rarray"
    return sorts


def close_constraint(
    name: str, kind: str, hyps: list, concl: Prop, sorts: dict
) -> Constraint:
    """Quantify every free program variable; distance variables stay free."""
    names = set()
    for h in hyps:
        names |= free_vars(h)
    names |= free_vars(concl)
    qvars = tuple(
        (n, sorts.get(n, "real"))
        for n in sorted(names)
        if not _is_dvar_name(n, hyps, concl)
    )
    return Constraint(name, kind, qvars, tuple(hyps), concl)


def _is_dvar_name(n: str, hyps, concl) -> bool:
    dv = set()
    for h in hyps:
        dv |= term_dvars(h)
    dv |= term_dvars(concl)
    return n in dv


# ---------------------------------------------------------------------------
# Expression typing
# ---------------------------------------------------------------------------


class _Checker:
    def __init__(self, p: Program, env: TypingEnv):
        self.program = p
        self.env = env
        self.pre = ambient_pre(p)
        self.sorts = sort_env(p, env)
        self.constraints: list = []
        self.diagnostics: list = []
        self.counts: dict = {}

    def _name(self, kind: str) -> str:
        self.counts[kind] = self.counts.get(kind, 0) + 1
        return f"{kind}{self.counts[kind]}"

    def diag(self, code: str, msg: str):
        self.diagnostics.append(Diagnostic(code, msg))

    def emit(self, kind: str, concl: Prop, extra_hyps: tuple = (), name: str = ""):
        c = close_constraint(
            name or self._name(kind), kind, [self.pre, *extra_hyps], concl, self.sorts
        )
        self.constraints.append(c)

    def equate(self, d1: Expr, d2: Expr, what: str):
        """Distance equality: silent when normal forms coincide, a solver
        constraint otherwise (residual when distance variables occur)."""
        if dist_equal(d1, d2):
            return
        self.emit("equality", PAtom(Cmp("==", normalize(d1), normalize(d2))))

    # -- T-rules for expressions --------------------------------------------

    def type_expr(self, e: Expr):
        if isinstance(e, Lit):
            return NumTy(ZERO, e.value.denominator == 1)
        if isinstance(e, BoolLit):
            return BoolTy()
        if isinstance(e, Var):
            try:
                ty = self.env.lookup(e.name)
            except KeyError:
                raise CheckError(f"unbound variable {e.name}")
            if isinstance(ty, StarTy):
                return NumTy(HatVar(e.name))
            return ty
        if isinstance(e, HatVar):
            raise CheckError(f"hat variable ^{e.base} in a source expression")
        if isinstance(e, DVar):
            raise CheckError(f"distance variable {e.name} in a source expression")
        if isinstance(e, BinOp):
            t1, t2 = self.type_expr(e.lhs), self.type_expr(e.rhs)
            if not isinstance(t1, NumTy) or not isinstance(t2, NumTy):
                raise CheckError(f"arithmetic on non-numeric operands in {e!r}")
            if e.op in ("+", "-"):
                return NumTy(BinOp(e.op, t1.dist, t2.dist), t1.integer and t2.integer)
            # T-OTimes: nonlinear operators require zero distances
            for t, side in ((t1, e.lhs), (t2, e.rhs)):
                nd = normalize(t.dist)
                if nd != ZERO:
                    if term_dvars(nd):
                        self.equate(nd, ZERO, "nonlinear operand")
                    else:
                        raise CheckError(
                            f"nonlinear operator {e.op} on operand with nonzero distance {nd!r}"
                        )
            return NumTy(ZERO, t1.integer and t2.integer and e.op != "/")
        if isinstance(e, Cmp):
            t1, t2 = self.type_expr(e.lhs), self.type_expr(e.rhs)
            if not isinstance(t1, NumTy) or not isinstance(t2, NumTy):
                raise CheckError(f"comparison on non-numeric operands in {e!r}")
            d1, d2 = normalize(t1.dist), normalize(t2.dist)
            if d1 != ZERO or d2 != ZERO:
                shifted = Cmp(e.op, BinOp("+", e.lhs, t1.dist), BinOp("+", e.rhs, t2.dist))
                self.emit("odot", PAtom(Cmp("==", e, shifted)))
            return BoolTy()
        if isinstance(e, Not):
            t = self.type_expr(e.operand)
            if not isinstance(t, BoolTy):
                raise CheckError("negation of a non-boolean")
            return BoolTy()
        if isinstance(e, Cons):
            th = self.type_expr(e.head)
            tt = self.type_expr(e.tail)
            if not isinstance(tt, ListTy):
                raise CheckError("cons onto a non-list")
            self._match_elem(th, tt.elem)
            return tt
        if isinstance(e, Index):
            ts = self.type_expr(e.seq)
            ti = self.type_expr(e.idx)
            if not isinstance(ts, ListTy):
                raise CheckError("indexing a non-list")
            if not isinstance(ti, NumTy):
                raise CheckError("index must be numeric")
            nd = normalize(ti.dist)
            if nd != ZERO:
                if term_dvars(nd):
                    self.equate(nd, ZERO, "index distance")
                else:
                    raise CheckError(f"index with nonzero distance {nd!r}")
            if isinstance(ts.elem, StarTy):
                if isinstance(e.seq, Var):
                    return NumTy(Index(HatVar(e.seq.name), e.idx))
                raise CheckError("star-typed list access requires a named list")
            return ts.elem
        if isinstance(e, Select):
            tc = self.type_expr(e.cond)
            if not isinstance(tc, BoolTy):
                raise CheckError("ternary condition must be boolean")
            t1, t2 = self.type_expr(e.then), self.type_expr(e.other)
            if isinstance(t1, NumTy) and isinstance(t2, NumTy):
                if not dist_equal(t1.dist, t2.dist):
                    self.equate(t1.dist, t2.dist, "ternary branches")
                return NumTy(t1.dist, t1.integer and t2.integer)
            if type(t1) is type(t2):
                return t1
            raise CheckError("ternary branches of different types")
        if isinstance(e, (Abs, Log)):
            raise CheckError(f"{type(e).__name__.lower()} is target-language only")
        raise CheckError(f"cannot type {e!r}")

    def _match_elem(self, th: Ty, elem: Ty):
        if isinstance(elem, NumTy) and isinstance(th, NumTy):
            self.equate(th.dist, elem.dist, "list element")
        elif isinstance(elem, StarTy) and isinstance(th, NumTy):
            raise CheckError("cannot cons onto a star-element list")
        elif isinstance(elem, BoolTy) and isinstance(th, BoolTy):
            pass
        elif isinstance(elem, ListTy) and isinstance(th, ListTy):
            self._match_elem(th.elem, elem.elem)
        else:
            raise CheckError(
                f"cons of mismatched element types {th!r} vs {elem!r}"
            )

    # -- command checking ------------------------------------------------------

    def check_cmd(self, c: Cmd) -> Cmd:
        if isinstance(c, Skip):
            return Skip()
        if isinstance(c, Seq):
            return seq([self.check_cmd(s) for s in c.cmds])
        if isinstance(c, Assign):
            try:
                xty = self.env.lookup(c.name)
            except KeyError:
                raise CheckError(f"assignment to unbound variable {c.name}")
            ety = self.type_expr(c.expr)
            if isinstance(xty, StarTy):
                if not isinstance(ety, NumTy):
                    raise CheckError(f"star variable {c.name} assigned a non-number")
                return seq(
                    [
                        Assign(c.name, c.expr),
                        Assign("^" + c.name, ety.dist, instrumented=True),
                    ]
                )
            if isinstance(xty, NumTy):
                if not isinstance(ety, NumTy):
                    raise CheckError(f"numeric variable {c.name} assigned a non-number")
                self.equate(ety.dist, xty.dist, f"assignment to {c.name}")
                return Assign(c.name, c.expr)
            if isinstance(xty, BoolTy):
                if not isinstance(ety, BoolTy):
                    raise CheckError(f"boolean variable {c.name} assigned a non-boolean")
                return Assign(c.name, c.expr)
            if isinstance(xty, ListTy):
                if not isinstance(ety, ListTy):
                    raise CheckError(f"list variable {c.name} assigned a non-list")
                self._match_list(ety, xty)
                return Assign(c.name, c.expr)
            raise CheckError(f"cannot assign to {c.name}: {xty!r}")
        if isinstance(c, Sample):
            try:
                ety = self.env.lookup(c.name)
            except KeyError:
                raise CheckError(f"unannotated random variable {c.name}")
            if not isinstance(ety, NumTy):
                raise CheckError(f"random variable {c.name} must have a numeric type")
            d = ety.dist
            if isinstance(c.rand, Laplace):
                cost = scale_cost(fold_abs(d), c.rand.scale)
                return seq(
                    [
                        Havoc(c.name),
                        Assign(COST_VAR, BinOp("+", Var(COST_VAR), cost), instrumented=True),
                    ]
                )
            # uniform source: the distance must have the shape eta * d
            coeff = _uniform_coefficient(d, c.name)
            if coeff is None:
                raise CheckError(
                    f"uniform variable {c.name} needs a distance of the form {c.name}*d"
                )
            self._uniform_side_conditions(c.name, coeff)
            cost = Log(BinOp("+", lit(1), coeff))
            return seq(
                [
                    Havoc01(c.name),
                    Assign(COST_VAR, BinOp("-", Var(COST_VAR), cost), instrumented=True),
                ]
            )
        if isinstance(c, If):
            tc = self.type_expr(c.cond)
            if not isinstance(tc, BoolTy):
                raise CheckError("if guard must be boolean")
            return If(c.cond, self.check_cmd(c.then), self.check_cmd(c.els))
        if isinstance(c, While):
            tc = self.type_expr(c.cond)
            if not isinstance(tc, BoolTy):
                raise CheckError("while guard must be boolean")
            return While(c.cond, c.invariant, self.check_cmd(c.body))
        if isinstance(c, Return):
            ty = self.type_expr(c.expr)
            self._check_zero_return(ty)
            return Return(c.expr)
        raise CheckError(f"cannot check command {c!r}")

    def _match_list(self, src: ListTy, dst: ListTy):
        if isinstance(dst.elem, NumTy) and isinstance(src.elem, NumTy):
            self.equate(src.elem.dist, dst.elem.dist, "list assignment")
        elif type(dst.elem) is not type(src.elem):
            raise CheckError("list assignment with mismatched element types")

    def _check_zero_return(self, ty: Ty):
        # extended to zero-distance lists: all corpus algorithms return lists
        if isinstance(ty, BoolTy):
            return
        if isinstance(ty, NumTy):
            nd = normalize(ty.dist)
            if nd == ZERO:
                return
            if term_dvars(nd):
                self.equate(nd, ZERO, "return distance")
                return
            raise CheckError(f"return value has nonzero distance {nd!r}")
        if isinstance(ty, ListTy):
            self._check_zero_return(ty.elem)
            return
        if isinstance(ty, StarTy):
            raise CheckError("cannot return a star-typed value")
        raise CheckError(f"cannot return a value of type {ty!r}")

    def _uniform_side_conditions(self, name: str, coeff: Expr):
        nc = normalize(coeff)
        minus_one = lit(-1)
        if isinstance(nc, Select):
            for tag, cond_extra, branch in (
                ("true", nc.cond, nc.then),
                ("false", Not(nc.cond), nc.other),
            ):
                concl = PAnd(
                    (
                        PAtom(Cmp("<", minus_one, branch)),
                        PAtom(Cmp("<=", branch, ZERO)),
                    )
                )
                self.emit(
                    "uniform-side",
                    concl,
                    extra_hyps=(PAtom(cond_extra),),
                    name=f"uniform_side_{name}_{tag}",
                )
        else:
            concl = PAnd(
                (PAtom(Cmp("<", minus_one, nc)), PAtom(Cmp("<=", nc, ZERO)))
            )
            self.emit("uniform-side", concl, name=f"uniform_side_{name}")


def _uniform_coefficient(d: Expr, name: str) -> Optional[Expr]:
    """Extract c from a distance of the form name*c (or c*name).

    The coefficient may itself mention the variable (the alignment
    v -> v*(1+c(v)) is piecewise in the paper's categorical example)."""
    if isinstance(d, BinOp) and d.op == "*":
        if isinstance(d.lhs, Var) and d.lhs.name == name:
            return d.rhs
        if isinstance(d.rhs, Var) and d.rhs.name == name:
            return d.lhs
    return None


# ---------------------------------------------------------------------------
# Public operations
# ---------------------------------------------------------------------------


def type_expr(env: TypingEnv, pre_or_program, e: Expr):
    """Type an expression; returns (Ty, constraints).

    Accepts either a Program (preferred: sorts come out right) or a bare
    precondition Prop for ad-hoc use.
    """
    p = _as_program(pre_or_program, env)
    ck = _Checker(p, env)
    ty = ck.type_expr(e)
    return ty, ck.constraints


def check_cmd(env: TypingEnv, pre_or_program, c: Cmd) -> CheckResult:
    p = _as_program(pre_or_program, env)
    ck = _Checker(p, env)
    try:
        target = ck.check_cmd(c)
    except CheckError as ex:
        ck.diag("type-error", str(ex))
        target = None
    result = CheckResult(None, ck.constraints, ck.diagnostics)
    result.target_body = target
    return result


def _as_program(pre_or_program, env: TypingEnv) -> Program:
    if isinstance(pre_or_program, Program):
        return pre_or_program
    pre = pre_or_program if pre_or_program is not None else TRUE
    return Program(
        "anonymous",
        tuple(),
        ("out", NumTy(ZERO)),
        pre,
        ZERO,
        tuple(env.bindings),
        Return(ZERO),
    )


def check_injectivity(env: TypingEnv, pre_or_program, rand_kinds: Optional[dict] = None) -> list:
    """Obligations making the environment's memory relation injective.

    `rand_kinds` maps random variable names to "laplace" | "uniform"; when a
    Program is supplied it is derived from the sample sites.
    """
    p = _as_program(pre_or_program, env)
    if rand_kinds is None:
        rand_kinds = {}
        for s in statements(p.body):
            if isinstance(s, Sample):
                rand_kinds[s.name] = "uniform" if isinstance(s.rand, Uniform) else "laplace"
    ck = _Checker(p, env)
    pre = ck.pre
    sorts = ck.sorts
    out: list = []
    names = {n for n, _ in env.bindings}
    deps: dict = {}
    for n, ty in env.bindings:
        if isinstance(ty, NumTy):
            deps[n] = {
                fv for fv in free_vars(ty.dist) if fv in names and not fv.startswith("^")
            }
        else:
            deps[n] = set()

    # conservative cycle detection over distance dependencies
    color: dict = {}
    cycle_found: list = []

    def dfs(n: str, stack: tuple):
        color[n] = 1
        for m in sorted(deps.get(n, ())):
            if m == n:
                continue
            if color.get(m) == 1:
                cycle_found.append(stack + (m,))
            elif color.get(m, 0) == 0:
                dfs(m, stack + (m,))
        color[n] = 2

    for n in sorted(deps):
        if color.get(n, 0) == 0:
            dfs(n, (n,))
    if cycle_found:
        raise CheckError(
            "cyclic distance dependency through "
            + " -> ".join(cycle_found[0])
            + " (conservatively rejected)"
        )

    for n, ty in env.bindings:
        if not isinstance(ty, NumTy):
            continue
        if n not in free_vars(ty.dist):
            continue
        kind = rand_kinds.get(n)
        if kind is None:
            raise CheckError(
                f"distance of non-random variable {n} depends on itself"
            )
        if kind == "uniform":
            coeff = _uniform_coefficient(ty.dist, n)
            if coeff is None:
                continue  # diagnosed during checking
            concl = PAtom(Cmp(">", coeff, lit(-1)))
            out.append(close_constraint(f"inj_{n}", "injectivity", [pre], concl, sorts))
        else:
            v1, v2 = Var(f"$v1_{n}"), Var(f"$v2_{n}")
            d1 = subst(ty.dist, n, v1)
            d2 = subst(ty.dist, n, v2)
            hyp = PAtom(Cmp("==", BinOp("+", v1, d1), BinOp("+", v2, d2)))
            concl = PAtom(Cmp("==", v1, v2))
            c = close_constraint(
                f"inj_{n}",
                "injectivity",
                [pre, hyp],
                concl,
                {**sorts, v1.name: "real", v2.name: "real"},
            )
            out.append(c)
    return out


def env_from_annotations(p: Program):
    """Typing environment for fully-annotated checking.

    Returns (env, missing): `missing` lists locals without annotations; in
    non-inference mode any entry there is a hard error.
    """
    bindings: dict = {}
    for n, t in p.params:
        bindings[n] = t
    rn, rt = p.ret
    bindings[rn] = rt
    for n, t in p.annotations:
        bindings[n] = t
    missing = sorted(
        (assigned_vars(p.body) | random_vars(p)) - set(bindings)
    )
    env = TypingEnv.make(bindings, bindings.keys())
    return env, missing


def hat_params(p: Program) -> list:
    """Hat parameters lifted into the target signature for star-typed inputs."""
    out = []
    for n, ty in p.params:
        if isinstance(ty, StarTy):
            out.append(("^" + n, NumTy(ZERO)))
        elif isinstance(ty, ListTy) and isinstance(ty.elem, StarTy):
            out.append(("^" + n, ListTy(NumTy(ZERO))))
    return out


def transform(p: Program, env: TypingEnv) -> CheckResult:
    """Full check of a program under `env`: returns the instrumented target
    plus every emitted constraint (comparisons, assignment equalities,
    injectivity, uniform side conditions)."""
    diags = check_wellformed_program(p)
    ck = _Checker(p, env)
    target = None
    try:
        body = ck.check_cmd(p.body)
        init = Assign(COST_VAR, ZERO, instrumented=True)
        params = tuple(list(p.params) + hat_params(p))
        target = TargetProgram(
            name=p.name,
            params=params,
            ret=p.ret,
            pre=p.pre,
            budget=p.budget,
            body=seq([init, body]),
            int_vars=integer_vars(p, env),
            sorts=tuple(sorted(ck.sorts.items())),
        )
    except CheckError as ex:
        ck.diag("type-error", str(ex))
    constraints = list(ck.constraints)
    try:
        constraints += check_injectivity(env, p)
    except CheckError as ex:
        ck.diag("injectivity", str(ex))
    return CheckResult(target, constraints, diags + ck.diagnostics)
