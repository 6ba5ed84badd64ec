"""Budget verification: weakest preconditions over target programs.

Partial-correctness Hoare rules: assignment substitutes, havoc universally
quantifies (havoc01 over [0,1]), loops take user-supplied invariants and side
out init/preserve/exit obligations. `verify_budget` conjoins the program
precondition (plus positivity of the budget parameters), discharges every
obligation through the external solver, and reports PASS only when all of
them - and all checker constraints handed in - are valid. Unknown or timed
out queries make the verdict INCONCLUSIVE, never PASS.

`symbolic_cost_bound` runs the same machinery on a target still containing
distance variables: it verifies a parametric invariant and extracts the
post-state bound on the cost variable, which (counters replaced by their
bounds or by the big-M placeholder, then normalized by the budget parameter)
becomes the MaxSMT objective.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

from .checker import Constraint, close_constraint
from .core import (
    Abs,
    Assign,
    BinOp,
    Cmd,
    Cmp,
    DVar,
    Expr,
    Havoc,
    Havoc01,
    If,
    Lit,
    Not,
    PAnd,
    PAtom,
    PForall,
    PImplies,
    Prop,
    Return,
    Seq,
    Skip,
    TargetProgram,
    Var,
    While,
    ZERO,
    COST_VAR,
    assigned_vars,
    dvars as term_dvars,
    free_vars,
    lit,
    normalize,
    pand,
    subst,
)
from . import solver as smt
from .core import _linearize, _from_linear  # canonical linear forms

BIG_M = Var(smt.BIG_M_NAME)


class WpError(Exception):
    pass


@dataclass(frozen=True)
class Obligation:
    """One verification condition with its provenance."""

    name: str
    kind: str  # init | preserve | exit | assert-site
    constraint: Constraint


def _target_ambient(tp: TargetProgram) -> Prop:
    params = {n for n, _ in tp.params}
    extra = [
        PAtom(Cmp(">", Var(n), ZERO))
        for n in sorted(free_vars(tp.budget))
        if n in params
    ]
    return pand([tp.pre, *extra])


def wp(c: Cmd, post: Prop, obligations: Optional[list] = None, hyp: Prop = None,
       sorts: Optional[dict] = None, prefix: str = "") -> Prop:
    """Weakest precondition; loop obligations append to `obligations`.

    wp(c1;c2, Q) = wp(c1, wp(c2, Q)) holds by construction. Loops without an
    invariant annotation raise WpError.
    """
    if isinstance(c, Skip) or isinstance(c, Return):
        return post
    if isinstance(c, Assign):
        return subst(post, c.name, c.expr)
    if isinstance(c, Havoc):
        return PForall(c.name, "real", post)
    if isinstance(c, Havoc01):
        bound = PAnd(
            (
                PAtom(Cmp("<=", ZERO, Var(c.name))),
                PAtom(Cmp("<=", Var(c.name), lit(1))),
            )
        )
        return PForall(c.name, "real", PImplies(bound, post))
    if isinstance(c, Seq):
        q = post
        for s in reversed(c.cmds):
            q = wp(s, q, obligations, hyp, sorts, prefix)
        return q
    if isinstance(c, If):
        then_wp = wp(c.then, post, obligations, hyp, sorts, prefix)
        else_wp = wp(c.els, post, obligations, hyp, sorts, prefix)
        return pand(
            [
                PImplies(PAtom(c.cond), then_wp),
                PImplies(PAtom(Not(c.cond)), else_wp),
            ]
        )
    if isinstance(c, While):
        if c.invariant is None:
            raise WpError("while loop without an invariant annotation")
        inv = c.invariant
        if obligations is not None:
            assert sorts is not None and hyp is not None
            body_wp = wp(c.body, inv, obligations, hyp, sorts, prefix)
            preserve = close_constraint(
                f"{prefix}preserve",
                "obligation",
                [hyp, inv, PAtom(c.cond)],
                body_wp,
                sorts,
            )
            exit_c = close_constraint(
                f"{prefix}exit",
                "obligation",
                [hyp, inv, PAtom(Not(c.cond))],
                post,
                sorts,
            )
            obligations.append(Obligation(f"{prefix}preserve", "preserve", preserve))
            obligations.append(Obligation(f"{prefix}exit", "exit", exit_c))
        return inv
    raise WpError(f"no wp rule for {c!r}")


def generate_obligations(tp: TargetProgram, post: Prop) -> list:
    """init obligation (precondition implies wp of the whole body) plus the
    per-loop preserve/exit obligations."""
    sorts = dict(tp.sorts)
    hyp = _target_ambient(tp)
    obligations: list = []
    body_wp = wp(tp.body, post, obligations, hyp, sorts, prefix="")
    init = close_constraint("init", "obligation", [hyp], body_wp, sorts)
    return [Obligation("init", "init", init)] + obligations


# ---------------------------------------------------------------------------
# Budget verification
# ---------------------------------------------------------------------------


@dataclass
class ObligationVerdict:
    name: str
    kind: str
    verdict: str  # valid | invalid | unknown | timeout
    time: float = 0.0
    model: Optional[dict] = None


@dataclass
class BudgetReport:
    program: str
    budget: str
    overall: str  # PASS | FAIL | INCONCLUSIVE
    obligations: list = field(default_factory=list)
    constraints: list = field(default_factory=list)

    def to_json(self) -> dict:
        def vd(v: ObligationVerdict) -> dict:
            out = {
                "name": v.name,
                "kind": v.kind,
                "verdict": v.verdict,
                "solver_time": round(v.time, 4),
            }
            if v.model is not None:
                out["counterexample"] = {
                    k: (str(x) if isinstance(x, Fraction) else x)
                    for k, x in v.model.items()
                }
            return out

        return {
            "program": self.program,
            "budget": self.budget,
            "overall": self.overall,
            "obligations": [vd(v) for v in self.obligations],
            "constraints": [vd(v) for v in self.constraints],
        }


def _discharge(named: list, cfg: smt.SolverConfig) -> list:
    """Check a list of (name, kind, Constraint) for validity, in parallel."""
    scripts = [smt.emit([c], "validity") for _, _, c in named]
    verdicts = smt.run_many(scripts, cfg)
    out = []
    for (name, kind, _), v in zip(named, verdicts):
        out.append(
            ObligationVerdict(
                name,
                kind,
                v.kind if v.kind in ("valid", "invalid", "timeout") else "unknown",
                v.elapsed,
                v.model if v.kind == "invalid" else None,
            )
        )
    return out


def verify_budget(
    tp: TargetProgram,
    cfg: smt.SolverConfig,
    constraints: Optional[list] = None,
    budget: Optional[Expr] = None,
) -> BudgetReport:
    """Verify v_eps <= budget and every checker constraint.

    PASS certifies the privacy bound only because it also requires the
    comparison, equality, injectivity, and side-condition constraints to be
    valid; a lone wp proof is not sufficient.
    """
    from .parser import print_expr

    budget = budget if budget is not None else tp.budget
    post = PAtom(Cmp("<=", Var(tp.cost_var), budget))
    report = BudgetReport(tp.name, print_expr(budget), "INCONCLUSIVE")
    residual = [c for c in (constraints or []) if c.is_residual()]
    try:
        obligations = generate_obligations(tp, post)
    except WpError as ex:
        report.overall = "INCONCLUSIVE"
        report.obligations.append(ObligationVerdict("wp", "init", f"error: {ex}"))
        return report
    if residual:
        report.overall = "INCONCLUSIVE"
        report.obligations.append(
            ObligationVerdict(
                "residual", "assert-site", "unknown: unresolved distance variables"
            )
        )
        return report
    report.obligations = _discharge(
        [(o.name, o.kind, o.constraint) for o in obligations], cfg
    )
    report.constraints = _discharge(
        [(c.name, c.kind, c) for c in (constraints or [])], cfg
    )
    everything = report.obligations + report.constraints
    if any(v.verdict == "invalid" for v in everything):
        report.overall = "FAIL"
    elif all(v.verdict == "valid" for v in everything):
        report.overall = "PASS"
    else:
        report.overall = "INCONCLUSIVE"
    return report


# ---------------------------------------------------------------------------
# Symbolic cost bounds (objective extraction for MaxSMT)
# ---------------------------------------------------------------------------


def _dvars_to_vars(term):
    for n in sorted(term_dvars(term)):
        term = subst(term, n, Var(n))
    return term


def _map_body(c: Cmd, f) -> Cmd:
    if isinstance(c, Assign):
        return Assign(c.name, f(c.expr), c.instrumented)
    if isinstance(c, Seq):
        return Seq(tuple(_map_body(s, f) for s in c.cmds))
    if isinstance(c, If):
        return If(f(c.cond), _map_body(c.then, f), _map_body(c.els, f))
    if isinstance(c, While):
        inv = f(c.invariant) if c.invariant is not None else None
        return While(f(c.cond), inv, _map_body(c.body, f))
    return c


@dataclass
class CostBound:
    bound: Expr  # post-state upper bound on v_eps, over distance variables
    objective: Expr  # bound / budget-parameter, counters replaced
    report: list  # ObligationVerdicts for the parametric invariant


class BoundError(Exception):
    pass


def symbolic_cost_bound(
    tp: TargetProgram,
    invariant: Prop,
    cfg: smt.SolverConfig,
) -> CostBound:
    """Verified invariant-implied bound on the final cost.

    `invariant` is the user's parametric loop invariant; it must contain a
    conjunct `v_eps == f` or `v_eps <= f` plus `counter <= bound` conjuncts
    for the loop counters appearing in f. Counters with no bound conjunct
    are replaced by the big-M placeholder. The objective is f normalized by
    the budget parameter, suitable for `solver.minimize_cost`.
    """
    # attach the invariant to the (single) loop, turning distance variables
    # into ordinary universally-quantified reals for the verification pass
    loops = [s for s in _walk(tp.body) if isinstance(s, While)]
    if len(loops) != 1:
        raise BoundError(f"expected exactly one loop, found {len(loops)}")
    quantified_inv = _dvars_to_vars(invariant)

    def attach(c: Cmd) -> Cmd:
        if isinstance(c, Seq):
            return Seq(tuple(attach(s) for s in c.cmds))
        if isinstance(c, If):
            return If(c.cond, attach(c.then), attach(c.els))
        if isinstance(c, While):
            return While(c.cond, quantified_inv, _map_body(c.body, _dvars_to_vars))
        if isinstance(c, Assign):
            return Assign(c.name, _dvars_to_vars(c.expr), c.instrumented)
        return c

    body = attach(tp.body)
    dvar_names = sorted(term_dvars(invariant))
    sorts = dict(tp.sorts)
    for n in dvar_names:
        sorts[n] = "real"
    tp2 = TargetProgram(
        tp.name, tp.params, tp.ret, tp.pre, tp.budget, body, tp.int_vars,
        tp.cost_var, tuple(sorted(sorts.items())),
    )

    # verify init + preserve (exit gives the bound, which we extract instead)
    obligations = generate_obligations(tp2, PAtom(_true()))
    keep = [o for o in obligations if o.kind in ("init", "preserve")]
    verdicts = _discharge([(o.name, o.kind, o.constraint) for o in keep], cfg)
    if not all(v.verdict == "valid" for v in verdicts):
        bad = ", ".join(f"{v.name}={v.verdict}" for v in verdicts if v.verdict != "valid")
        raise BoundError(f"parametric invariant not preserved: {bad}")

    bound, objective = _extract_bound(tp, invariant)
    return CostBound(bound, objective, verdicts)


def _true():
    from .core import BoolLit

    return BoolLit(True)


def _walk(c: Cmd):
    yield c
    if isinstance(c, Seq):
        for s in c.cmds:
            yield from _walk(s)
    elif isinstance(c, If):
        yield from _walk(c.then)
        yield from _walk(c.els)
    elif isinstance(c, While):
        yield from _walk(c.body)


def _conjuncts(p: Prop) -> list:
    if isinstance(p, PAnd):
        out = []
        for q in p.parts:
            out.extend(_conjuncts(q))
        return out
    return [p]


def _extract_bound(tp: TargetProgram, invariant: Prop) -> tuple:
    """Pull `v_eps ==/<= f` out of the invariant; substitute counter bounds,
    big-M the unbounded counters, and normalize by the budget parameter."""
    cost_f: Optional[Expr] = None
    counter_bounds: dict = {}
    for c in _conjuncts(invariant):
        if isinstance(c, PAtom) and isinstance(c.expr, Cmp):
            e = c.expr
            if e.op in ("==", "<=") and e.lhs == Var(tp.cost_var):
                cost_f = e.rhs
            elif e.op == "<=" and isinstance(e.lhs, Var):
                counter_bounds[e.lhs.name] = e.rhs
    if cost_f is None:
        raise BoundError("invariant has no `v_eps == f` or `v_eps <= f` conjunct")

    loop_vars = set()
    for s in _walk(tp.body):
        if isinstance(s, While):
            loop_vars |= assigned_vars(s.body)
    bound = cost_f
    for n in sorted(free_vars(cost_f)):
        if n in counter_bounds and n in loop_vars:
            bound = subst(bound, n, counter_bounds[n])
        elif n in loop_vars and not n.startswith("^"):
            bound = subst(bound, n, BIG_M)
    bound = normalize(bound)

    # objective: divide out the budget parameter, absorb big-M coefficients
    budget_param = None
    nb = normalize(tp.budget)
    if isinstance(nb, Var):
        budget_param = nb.name
    elif isinstance(nb, BinOp) and nb.op == "*" and isinstance(nb.rhs, Var):
        budget_param = nb.rhs.name
    if budget_param is None:
        raise BoundError(f"cannot normalize by budget {nb!r}")
    const, terms = _linearize(bound)
    if const != 0:
        raise BoundError("cost bound has a distance-variable-free constant part")
    new_terms: dict = {}
    for mono, coeff in terms.items():
        factors = dict()
        has_m = False
        abs_part = None
        eps_power = 0
        leftover = []
        for atom, p in mono:
            if isinstance(atom, Var) and atom.name == budget_param:
                eps_power += p
            elif isinstance(atom, Var) and atom.name == smt.BIG_M_NAME:
                has_m = True
            elif isinstance(atom, Abs) and term_dvars(atom):
                abs_part = (atom, p)
            else:
                leftover.append((atom, p))
        if eps_power < 1:
            raise BoundError("cost bound term without a budget-parameter factor")
        if abs_part is None:
            raise BoundError("cost bound term without a distance-variable factor")
        if has_m:
            mono2 = ((BIG_M, 1), abs_part)
            new_terms[tuple(sorted(mono2, key=lambda ap: repr(ap[0])))] = Fraction(1)
        else:
            if leftover:
                raise BoundError(
                    f"cost bound term with non-constant factors {leftover!r}"
                )
            mono2 = (abs_part,)
            new_terms[mono2] = new_terms.get(mono2, Fraction(0)) + coeff
    objective = _from_linear((Fraction(0), new_terms))
    return bound, objective
