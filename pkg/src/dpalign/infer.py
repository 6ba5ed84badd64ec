"""Distance inference: the refinement algorithm plus residual solving.

Every unannotated variable starts at a fresh distance variable. A forward
pass refines the environment at each assignment (substituting the variable's
placeholder, keeping provably-equal distances, or promoting to a star type),
propagates comparison contexts into random-variable distances, and iterates
loop bodies to a fixed point in the lattice  alpha <= d <= *.

Type checking under the refined environment collects constraints; equality
constraints in which exactly one distance variable occurs linearly are solved
symbolically (e.g. 0 = ^sum + alpha forces alpha = -^sum). What remains - in
practice the comparison constraints - is handed to the MaxSMT minimizer.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Optional

from .checker import CheckError, CheckResult, Constraint, transform
from .core import (
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
    If,
    Index,
    Lit,
    ListTy,
    Not,
    NumTy,
    PAtom,
    Program,
    Prop,
    Return,
    Sample,
    Select,
    Seq,
    Skip,
    StarTy,
    Ty,
    TypingEnv,
    Var,
    While,
    ZERO,
    check_wellformed_program,
    dist_equal,
    dvars as term_dvars,
    free_vars,
    normalize,
    random_vars,
    statements,
    subst,
    subst_ty,
)

_GREEK = ("alpha", "beta", "gamma", "delta", "zeta", "theta", "kappa", "mu", "nu", "xi")


class _Fresh:
    def __init__(self):
        self.n = 0

    def __call__(self) -> DVar:
        name = _GREEK[self.n] if self.n < len(_GREEK) else f"dv{self.n}"
        self.n += 1
        return DVar(name)


class InferError(Exception):
    pass


# ---------------------------------------------------------------------------
# Base types for unannotated locals (distance inference assumes base types)
# ---------------------------------------------------------------------------


def _base_of_ty(t: Ty):
    if isinstance(t, BoolTy):
        return "bool"
    if isinstance(t, (NumTy, StarTy)):
        return "num"
    if isinstance(t, ListTy):
        return ("list", _base_of_ty(t.elem))
    return "num"


def infer_base_types(p: Program) -> dict:
    """num/bool/list shape of every variable, from signature and assignments."""
    base: dict = {}
    for n, t in list(p.params) + [p.ret] + list(p.annotations):
        base[n] = _base_of_ty(t)
    sampled = random_vars(p)
    for n in sampled:
        base[n] = "num"

    def expr_base(e: Expr):
        if isinstance(e, (Lit,)):
            return "num"
        if isinstance(e, BoolLit):
            return "bool"
        if isinstance(e, Var):
            return base.get(e.name, "num")
        if isinstance(e, BinOp):
            return "num"
        if isinstance(e, (Cmp, Not)):
            return "bool"
        if isinstance(e, Cons):
            return ("list", expr_base(e.head))
        if isinstance(e, Index):
            b = expr_base(e.seq)
            return b[1] if isinstance(b, tuple) else "num"
        if isinstance(e, Select):
            return expr_base(e.then)
        return "num"

    for _ in range(4):
        changed = False
        for s in statements(p.body):
            if isinstance(s, Assign):
                b = expr_base(s.expr)
                if base.get(s.name) != b and s.name not in dict(p.annotations):
                    if s.name not in {n for n, _ in p.params} | {p.ret[0]}:
                        if base.get(s.name) in (None, "num") and b != "num":
                            base[s.name] = b
                            changed = True
                        elif s.name not in base:
                            base[s.name] = b
                            changed = True
        if not changed:
            break
    return base


# ---------------------------------------------------------------------------
# init_env
# ---------------------------------------------------------------------------


def _locals_in_order(p: Program) -> list:
    known = {n for n, _ in p.params} | {p.ret[0]}
    out = []
    for s in statements(p.body):
        if isinstance(s, (Assign, Sample)) and s.name not in known:
            known.add(s.name)
            out.append(s.name)
    return out


def init_env(p: Program, fresh: Optional[_Fresh] = None) -> TypingEnv:
    """DefVars keep their annotations; every other numeric variable gets a
    fresh distance variable; booleans and lists get zero-distance shells."""
    fresh = fresh or _Fresh()
    base = infer_base_types(p)
    ann = p.annotation_map()
    bindings: dict = {}
    for n, t in list(p.params) + [p.ret]:
        bindings[n] = t
    defvars = set(bindings)
    for n in _locals_in_order(p):
        if n in ann:
            bindings[n] = ann[n]
            defvars.add(n)
            continue
        b = base.get(n, "num")
        if b == "bool":
            bindings[n] = BoolTy()
        elif isinstance(b, tuple):
            bindings[n] = ListTy(BoolTy() if b[1] == "bool" else NumTy(ZERO))
        else:
            bindings[n] = NumTy(fresh())
    return TypingEnv.make(bindings, defvars)


# ---------------------------------------------------------------------------
# refine
# ---------------------------------------------------------------------------


def refine(env: TypingEnv, x: str, d: Expr) -> TypingEnv:
    """The three-way refinement step.

    Substitutes the placeholder when the variable still carries one, keeps
    the environment when old and new distances are provably equal
    (normalization), and otherwise promotes to a star type - except that a
    comparison involving unsolved distance variables is deferred to the
    constraint phase rather than judged unequal here.
    """
    if x in env.defvars:
        raise InferError(f"refine called on annotated variable {x}")
    ty = env.lookup(x)
    if isinstance(ty, (BoolTy, ListTy)):
        return env
    if isinstance(ty, StarTy):
        return env
    assert isinstance(ty, NumTy)
    cur = normalize(ty.dist)
    if isinstance(cur, DVar):
        return env.subst_dvar(cur.name, d)
    if dist_equal(cur, d):
        return env
    if term_dvars(cur) or term_dvars(d):
        return env  # equivalence undecidable here; the checker emits d1 = d2
    return env.bind(x, StarTy())


# ---------------------------------------------------------------------------
# distance synthesis during refinement (total: None when not yet known)
# ---------------------------------------------------------------------------


def synth_dist(env: TypingEnv, e: Expr) -> Optional[Expr]:
    if isinstance(e, Lit):
        return ZERO
    if isinstance(e, Var):
        if e.name not in env:
            return None
        ty = env.lookup(e.name)
        if isinstance(ty, StarTy):
            return HatVar(e.name)
        if isinstance(ty, NumTy):
            return ty.dist
        return None
    if isinstance(e, BinOp):
        d1, d2 = synth_dist(env, e.lhs), synth_dist(env, e.rhs)
        if d1 is None or d2 is None:
            return None
        if e.op in ("+", "-"):
            return BinOp(e.op, d1, d2)
        if normalize(d1) == ZERO and normalize(d2) == ZERO:
            return ZERO
        return None
    if isinstance(e, Index):
        if isinstance(e.seq, Var) and e.seq.name in env:
            ty = env.lookup(e.seq.name)
            if isinstance(ty, ListTy):
                if isinstance(ty.elem, StarTy):
                    return Index(HatVar(e.seq.name), e.idx)
                if isinstance(ty.elem, NumTy):
                    return ty.elem.dist
        return None
    if isinstance(e, Select):
        d1, d2 = synth_dist(env, e.then), synth_dist(env, e.other)
        if d1 is not None and d1 == d2:
            return d1
        return None
    return None


# ---------------------------------------------------------------------------
# refinement traversal
# ---------------------------------------------------------------------------


@dataclass
class RefineState:
    """Environment plus the comparison context (the predicate stack pushed by
    R-ODot; nonempty only inside comparison subterms)."""

    env: TypingEnv
    ctx: tuple = ()


def _select_chain(ctx: tuple, fresh: _Fresh) -> Expr:
    cond = ctx[0]
    then: Expr = _select_chain(ctx[1:], fresh) if len(ctx) > 1 else fresh()
    return Select(cond, then, fresh())


def refine_expr(state: RefineState, e: Expr, sampled: set, fresh: _Fresh) -> RefineState:
    env, ctx = state.env, state.ctx
    if isinstance(e, (Lit, BoolLit, HatVar, DVar)):
        return state
    if isinstance(e, Var):
        if e.name in sampled and ctx and e.name not in env.defvars and e.name in env:
            ty = env.lookup(e.name)
            if isinstance(ty, NumTy) and isinstance(normalize(ty.dist), DVar):
                return RefineState(refine(env, e.name, _select_chain(ctx, fresh)), ctx)
        return state
    if isinstance(e, Cmp):
        inner = RefineState(env, ctx + (e,))
        inner = refine_expr(inner, e.lhs, sampled, fresh)
        inner = refine_expr(inner, e.rhs, sampled, fresh)
        return RefineState(inner.env, ctx)
    if isinstance(e, BinOp):
        st = refine_expr(state, e.lhs, sampled, fresh)
        return refine_expr(st, e.rhs, sampled, fresh)
    if isinstance(e, Not):
        return refine_expr(state, e.operand, sampled, fresh)
    if isinstance(e, Cons):
        st = refine_expr(state, e.head, sampled, fresh)
        return refine_expr(st, e.tail, sampled, fresh)
    if isinstance(e, Index):
        st = refine_expr(state, e.seq, sampled, fresh)
        return refine_expr(st, e.idx, sampled, fresh)
    if isinstance(e, Select):
        st = refine_expr(state, e.cond, sampled, fresh)
        st = refine_expr(st, e.then, sampled, fresh)
        return refine_expr(st, e.other, sampled, fresh)
    return state


def refine_cmd(state: RefineState, c: Cmd, sampled: set, fresh: _Fresh) -> RefineState:
    env = state.env
    if isinstance(c, (Skip, Return)):
        return state
    if isinstance(c, Sample):
        return state  # R-Laplace: the distance is instantiated at the use
    if isinstance(c, Assign):
        st = refine_expr(RefineState(env), c.expr, sampled, fresh)
        env = st.env
        if c.name in env.defvars or c.name not in env:
            return RefineState(env)
        d = synth_dist(env, c.expr)
        if d is None:
            return RefineState(env)
        return RefineState(refine(env, c.name, d))
    if isinstance(c, Seq):
        st = RefineState(env)
        for s in c.cmds:
            st = refine_cmd(st, s, sampled, fresh)
        return st
    if isinstance(c, If):
        st = refine_expr(RefineState(env), c.cond, sampled, fresh)
        st = refine_cmd(RefineState(st.env), c.then, sampled, fresh)
        st = refine_cmd(RefineState(st.env), c.els, sampled, fresh)
        return st
    if isinstance(c, While):
        st = refine_expr(RefineState(env), c.cond, sampled, fresh)
        return fixpoint_while(RefineState(st.env), c.cond, c.body, sampled, fresh)
    raise InferError(f"cannot refine command {c!r}")


def _lattice_le(a: TypingEnv, b: TypingEnv) -> bool:
    """Pointwise order: alpha <= d <= * (distance variables are mutually <=)."""
    bd = b.as_dict()
    for n, t1 in a.bindings:
        t2 = bd.get(n)
        if t2 is None:
            return False
        if isinstance(t1, StarTy) and not isinstance(t2, StarTy):
            return False
        if isinstance(t1, NumTy) and isinstance(t2, NumTy):
            d1, d2 = normalize(t1.dist), normalize(t2.dist)
            if d1 == d2:
                continue
            if isinstance(d1, DVar):
                continue
            if term_dvars(d1) or term_dvars(d2):
                continue  # unsolved placeholders may still move around
            return False
    return True


def fixpoint_while(
    state: RefineState, guard: Expr, body: Cmd, sampled: set, fresh: _Fresh
) -> RefineState:
    """Iterate body refinement until the environment stabilizes.

    Each productive pass either eliminates a distance variable or promotes a
    variable to star, so the iteration count is bounded by 2 * |vars| (+1 for
    the stabilizing pass); this is asserted rather than assumed.
    """
    env = state.env
    bound = 2 * len(env.bindings) + 2
    for i in range(bound):
        nxt = refine_cmd(RefineState(env), body, sampled, fresh).env
        assert _lattice_le(env, nxt), "refinement must be monotone"
        if nxt.normalized() == env.normalized():
            return RefineState(env)
        env = nxt
    raise AssertionError(f"loop refinement did not stabilize within {bound} passes")


# ---------------------------------------------------------------------------
# symbolic solving of residual equality constraints
# ---------------------------------------------------------------------------


def _linear_solve_for_dvar(lhs: Expr, rhs: Expr) -> Optional[tuple]:
    """Solve lhs = rhs for its sole distance variable when it occurs linearly.

    Returns (name, solution expression) or None.
    """
    from .core import _linearize, _from_linear, _lf_scale, _lf_add

    diff = BinOp("-", lhs, rhs)
    names = term_dvars(diff)
    if len(names) != 1:
        return None
    (name,) = names
    const, terms = _linearize(diff)
    target_mono = ((DVar(name), 1),)
    coeff = None
    rest = (const, {})
    for mono, c in terms.items():
        if mono == target_mono:
            coeff = c
        elif any(isinstance(a, DVar) and a.name == name for a, _ in mono) or any(
            name in term_dvars(a) for a, _ in mono
        ):
            return None  # nonlinear or nested occurrence
        else:
            rest = _lf_add(rest, (Fraction(0), {mono: c}))
    if coeff is None or coeff == 0:
        return None
    solution = _from_linear(_lf_scale(rest, Fraction(-1) / coeff))
    return name, solution


def solve_equalities(env: TypingEnv, constraints: list) -> tuple:
    """Eliminate distance variables pinned by equality constraints.

    Iterates until no single-variable linear equality remains; returns the
    substituted environment and the substitution map.
    """
    solution: dict = {}
    work = list(constraints)
    progress = True
    while progress:
        progress = False
        for c in work:
            if c.kind != "equality" or not c.is_residual():
                continue
            concl = c.concl
            if not isinstance(concl, PAtom) or not isinstance(concl.expr, Cmp):
                continue
            if concl.expr.op != "==":
                continue
            got = _linear_solve_for_dvar(concl.expr.lhs, concl.expr.rhs)
            if got is None:
                continue
            name, expr = got
            solution[name] = expr
            env = env.subst_dvar(name, expr)
            work = [_subst_constraint(k, name, expr) for k in work]
            for prev in list(solution):
                solution[prev] = subst(solution[prev], name, expr)
            progress = True
    return env, solution


def _subst_constraint(c: Constraint, name: str, expr: Expr) -> Constraint:
    return Constraint(
        c.name,
        c.kind,
        c.qvars,
        tuple(subst(h, name, expr) for h in c.hyps),
        subst(c.concl, name, expr),
    )


# ---------------------------------------------------------------------------
# full inference
# ---------------------------------------------------------------------------


@dataclass
class InferResult:
    env: TypingEnv
    residual: list  # constraints still mentioning distance variables
    check: CheckResult  # transform under the solved environment
    solution: dict  # symbolically solved distance variables


def _rename_canonical(env: TypingEnv, constraints: list) -> tuple:
    """Give surviving distance variables canonical names (alpha, beta, ...)."""
    # collect in binding order for stable, readable output
    seen: list = []
    for _, ty in env.bindings:
        if isinstance(ty, NumTy):
            for n in _dvars_in_order(ty.dist):
                if n not in seen:
                    seen.append(n)
    for c in constraints:
        for n in sorted(c.dvars()):
            if n not in seen:
                seen.append(n)
    mapping = {}
    for i, n in enumerate(seen):
        fresh = _GREEK[i] if i < len(_GREEK) else f"dv{i}"
        mapping[n] = fresh
    if all(k == v for k, v in mapping.items()):
        return env, constraints
    for old, new in mapping.items():
        env = env.subst_dvar(old, DVar("$tmp$" + new))
    for old, new in mapping.items():
        env = env.subst_dvar("$tmp$" + new, DVar(new))
    out = []
    for c in constraints:
        for old, new in mapping.items():
            c = _subst_constraint(c, old, DVar("$tmp$" + new))
        for old, new in mapping.items():
            c = _subst_constraint(c, "$tmp$" + new, DVar(new))
        out.append(c)
    return env, out


def _dvars_in_order(e: Expr) -> list:
    if isinstance(e, DVar):
        return [e.name]
    out: list = []
    from .core import children

    for k in children(e):
        for n in _dvars_in_order(k):
            if n not in out:
                out.append(n)
    return out


def infer_program(p: Program) -> InferResult:
    """Refine, check, and symbolically reduce: the full inference pipeline.

    The residual list contains the constraints that still mention distance
    variables, existentially quantified from the solver's point of view; any
    model for them substituted into the environment passes `transform` with
    no residual constraints left.
    """
    diags = check_wellformed_program(p)
    hard = [d for d in diags if d.code in ("return-shape", "sample-once", "single-use")]
    if hard:
        raise InferError("; ".join(str(d) for d in hard))
    fresh = _Fresh()
    env0 = init_env(p, fresh)
    sampled = random_vars(p)
    env1 = refine_cmd(RefineState(env0), p.body, sampled, fresh).env

    result = transform(p, env1)
    type_errors = [d for d in result.diagnostics if d.code in ("type-error", "injectivity")]
    if type_errors:
        raise InferError("; ".join(str(d) for d in type_errors))
    env2, solution = solve_equalities(env1, result.constraints)

    # re-check under the solved environment for a clean constraint set
    env2, _ = _rename_canonical(env2, [])
    final = transform(p, env2)
    if any(d.code in ("type-error", "injectivity") for d in final.diagnostics):
        raise InferError(
            "; ".join(str(d) for d in final.diagnostics if d.code in ("type-error", "injectivity"))
        )
    # residual = unsolved typing constraints; injectivity obligations are
    # re-validated after the residual assignment is pinned
    residual = [
        c for c in final.constraints if c.is_residual() and c.kind != "injectivity"
    ]
    return InferResult(env2, residual, final, solution)
