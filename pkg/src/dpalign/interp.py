"""Executable semantics and empirical validation.

`run_source` executes a source program, drawing Laplace/uniform noise from a
generator or reading it verbatim from a tape; star-typed assignments also
update their hat companions (the extended semantics that makes the invisible
distance bookkeeping explicit). `run_target` executes the instrumented
nonprobabilistic program deterministically, resolving havoc from the tape.

`align_tape` realizes the randomness alignment: each draw v at a site with
distance d becomes v + d evaluated in the memory at the site (for uniform
sites the distance has the shape eta*c, so this is v*(1+c)). `replay_check`
samples runs under one input, aligns the tape, replays under the adjacent
input, and checks equal outputs, the Gamma-relation on final memories, and
cost consistency with the target program. `estimate_privacy` is a
Monte-Carlo falsifier of the pure-DP inequality - it can only ever report
FALSIFIED or CONSISTENT, never a proof.

Trials are independent: per-trial generators are spawned from the root seed,
so reports are reproducible and trials may run in any order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

import numpy as np

from .core import (
    Abs,
    Assign,
    BinOp,
    BoolLit,
    BoolTy,
    Cmd,
    Cmp,
    Cons,
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
    Program,
    Return,
    Sample,
    Select,
    Seq,
    Skip,
    StarTy,
    TargetProgram,
    TypingEnv,
    Uniform,
    Var,
    While,
    dvars as term_dvars,
    statements,
)
from .infer import synth_dist


class InterpError(Exception):
    pass


class StepLimitExceeded(InterpError):
    pass


@dataclass
class SampleEvent:
    site: str
    kind: str  # lap | uniform
    draw: float
    dist_value: float  # value of the site's distance at the sample point
    cost: float  # |d|/r for Laplace, -log(1+c) for uniform


@dataclass
class RunResult:
    output: object
    trace: list
    memory: dict
    veps: Optional[float] = None


@dataclass
class Tape:
    """Draws consumed in execution order; replays are deterministic."""

    draws: list
    pos: int = 0

    def next(self) -> float:
        if self.pos >= len(self.draws):
            raise InterpError("tape exhausted")
        v = self.draws[self.pos]
        self.pos += 1
        return v


def laplace_inverse_cdf(u: float, scale: float) -> float:
    """Zero-mean Laplace draw from a uniform [0,1) sample (binary64)."""
    s = u - 0.5
    return -scale * math.copysign(1.0, s) * math.log1p(-2.0 * abs(s))


def _default_value(ty) -> object:
    if isinstance(ty, BoolTy):
        return False
    if isinstance(ty, ListTy):
        return []
    return 0.0


def eval_expr(e: Expr, m: dict):
    if isinstance(e, Lit):
        return float(e.value)
    if isinstance(e, BoolLit):
        return e.value
    if isinstance(e, Var):
        try:
            return m[e.name]
        except KeyError:
            raise InterpError(f"unbound variable {e.name}")
    if isinstance(e, HatVar):
        try:
            return m[e.name]
        except KeyError:
            raise InterpError(f"unbound hat variable {e.name}")
    if isinstance(e, DVar):
        raise InterpError(f"unsolved distance variable {e.name} at run time")
    if isinstance(e, BinOp):
        a = eval_expr(e.lhs, m)
        b = eval_expr(e.rhs, m)
        if e.op == "+":
            return a + b
        if e.op == "-":
            return a - b
        if e.op == "*":
            return a * b
        if e.op == "/":
            if b == 0:
                raise InterpError("division by zero")
            return a / b
        if e.op == "%":
            if b == 0:
                raise InterpError("mod by zero")
            return float(int(round(a)) % int(round(b)))
    if isinstance(e, Cmp):
        a = eval_expr(e.lhs, m)
        b = eval_expr(e.rhs, m)
        return {"<": a < b, ">": a > b, "<=": a <= b, ">=": a >= b, "==": a == b}[e.op]
    if isinstance(e, Not):
        return not eval_expr(e.operand, m)
    if isinstance(e, Cons):
        head = eval_expr(e.head, m)
        tail = eval_expr(e.tail, m)
        if not isinstance(tail, list):
            raise InterpError("cons onto a non-list")
        return [head] + tail
    if isinstance(e, Index):
        seq = eval_expr(e.seq, m)
        idx = eval_expr(e.idx, m)
        if not isinstance(seq, list):
            raise InterpError("indexing a non-list")
        i = int(round(idx))
        if i < 0 or i >= len(seq):
            raise InterpError(f"index {i} out of range (length {len(seq)})")
        return seq[i]
    if isinstance(e, Select):
        return eval_expr(e.then if eval_expr(e.cond, m) else e.other, m)
    if isinstance(e, Abs):
        return abs(eval_expr(e.operand, m))
    if isinstance(e, Log):
        v = eval_expr(e.operand, m)
        if v <= 0:
            raise InterpError("log of a non-positive value")
        return math.log(v)
    raise InterpError(f"cannot evaluate {e!r}")


# ---------------------------------------------------------------------------
# Source interpreter
# ---------------------------------------------------------------------------


class _SourceInterp:
    def __init__(self, p: Program, env: TypingEnv, tape=None, rng=None, step_limit=10**6):
        self.p = p
        self.env = env
        self.tape = tape
        self.rng = rng
        self.step_limit = step_limit
        self.steps = 0
        self.trace: list = []
        self._star_dist: dict = {}  # id(Assign) -> distance expr
        self._uniform_coeff: dict = {}

    def _tick(self):
        self.steps += 1
        if self.steps > self.step_limit:
            raise StepLimitExceeded(f"exceeded {self.step_limit} steps")

    def init_memory(self, m0: dict) -> dict:
        m: dict = {}
        for n, ty in self.env.bindings:
            m[n] = _default_value(ty)
            if isinstance(ty, StarTy):
                m["^" + n] = 0.0
            if isinstance(ty, ListTy) and isinstance(ty.elem, StarTy):
                m["^" + n] = []
        for k, v in m0.items():
            m[k] = list(v) if isinstance(v, (list, tuple)) else v
        for n, ty in self.p.params:
            if n not in m0:
                raise InterpError(f"parameter {n} missing from the initial memory")
            if isinstance(ty, ListTy) and isinstance(ty.elem, StarTy):
                if "^" + n not in m:
                    m["^" + n] = [0.0] * len(m[n])
            if isinstance(ty, StarTy) and "^" + n not in m:
                m["^" + n] = 0.0
        return m

    def run(self, m0: dict) -> RunResult:
        m = self.init_memory(m0)
        out = self.exec_cmd(self.p.body, m)
        if out is _NO_RETURN:
            raise InterpError("program finished without returning")
        return RunResult(out, self.trace, m)

    def exec_cmd(self, c: Cmd, m: dict):
        self._tick()
        if isinstance(c, Skip):
            return _NO_RETURN
        if isinstance(c, Seq):
            for s in c.cmds:
                r = self.exec_cmd(s, m)
                if r is not _NO_RETURN:
                    return r
            return _NO_RETURN
        if isinstance(c, Assign):
            val = eval_expr(c.expr, m)
            ty = self.env.lookup(c.name) if c.name in self.env else None
            if isinstance(ty, StarTy):
                d = self._star_dist.get(id(c))
                if d is None:
                    d = synth_dist(self.env, c.expr)
                    if d is None:
                        raise InterpError(
                            f"cannot synthesize the distance of the value assigned to star variable {c.name}"
                        )
                    self._star_dist[id(c)] = d
                m["^" + c.name] = eval_expr(d, m)
            m[c.name] = val
            return _NO_RETURN
        if isinstance(c, Sample):
            ty = self.env.lookup(c.name)
            if not isinstance(ty, NumTy):
                raise InterpError(f"random variable {c.name} lacks a numeric type")
            if isinstance(c.rand, Laplace):
                scale = eval_expr(c.rand.scale, m)
                if scale <= 0:
                    raise InterpError(f"nonpositive laplace scale {scale}")
                if self.tape is not None:
                    draw = self.tape.next()
                else:
                    draw = laplace_inverse_cdf(float(self.rng.random()), scale)
                m[c.name] = draw
                dval = eval_expr(ty.dist, m)
                self.trace.append(
                    SampleEvent(c.name, "lap", draw, dval, abs(dval) / scale)
                )
            else:
                draw = self.tape.next() if self.tape is not None else float(self.rng.random())
                m[c.name] = draw
                coeff = self._uniform_coeff.get(id(c))
                if coeff is None:
                    from .checker import _uniform_coefficient

                    coeff = _uniform_coefficient(ty.dist, c.name)
                    if coeff is None:
                        raise InterpError(
                            f"uniform variable {c.name} lacks an eta*d distance"
                        )
                    self._uniform_coeff[id(c)] = coeff
                cval = eval_expr(coeff, m)
                if cval <= -1:
                    raise InterpError(f"uniform alignment coefficient {cval} <= -1")
                self.trace.append(
                    SampleEvent(c.name, "uniform", draw, draw * cval, -math.log1p(cval))
                )
            return _NO_RETURN
        if isinstance(c, If):
            branch = c.then if eval_expr(c.cond, m) else c.els
            return self.exec_cmd(branch, m)
        if isinstance(c, While):
            while eval_expr(c.cond, m):
                self._tick()
                r = self.exec_cmd(c.body, m)
                if r is not _NO_RETURN:
                    return r
            return _NO_RETURN
        if isinstance(c, Return):
            return eval_expr(c.expr, m)
        raise InterpError(f"cannot execute {c!r}")


_NO_RETURN = object()


def run_source(
    p: Program,
    env: TypingEnv,
    m0: dict,
    tape=None,
    rng=None,
    step_limit: int = 10**6,
) -> RunResult:
    """Execute a source program from `m0`, sampling or replaying `tape`."""
    t = Tape(list(tape)) if tape is not None and not isinstance(tape, Tape) else tape
    return _SourceInterp(p, env, t, rng, step_limit).run(m0)


# ---------------------------------------------------------------------------
# Target interpreter
# ---------------------------------------------------------------------------


def run_target(tp: TargetProgram, m0: dict, tape, step_limit: int = 10**6) -> RunResult:
    """Deterministic execution of a target program; havoc reads the tape."""
    t = Tape(list(tape)) if not isinstance(tape, Tape) else tape
    m: dict = {tp.cost_var: 0.0}
    for n, s in tp.sorts:
        if s in ("rarray", "barray"):
            m[n] = []
        elif s == "bool":
            m[n] = False
        else:
            m[n] = 0.0
    for k, v in m0.items():
        m[k] = list(v) if isinstance(v, (list, tuple)) else v
    steps = 0

    def go(c: Cmd):
        nonlocal steps
        steps += 1
        if steps > step_limit:
            raise StepLimitExceeded(f"exceeded {step_limit} steps")
        if isinstance(c, Skip):
            return _NO_RETURN
        if isinstance(c, Seq):
            for s in c.cmds:
                r = go(s)
                if r is not _NO_RETURN:
                    return r
            return _NO_RETURN
        if isinstance(c, Assign):
            m[c.name] = eval_expr(c.expr, m)
            return _NO_RETURN
        if isinstance(c, (Havoc, Havoc01)):
            v = t.next()
            if isinstance(c, Havoc01) and not (0.0 <= v <= 1.0):
                raise InterpError(f"havoc01 draw {v} outside [0,1]")
            m[c.name] = v
            return _NO_RETURN
        if isinstance(c, If):
            return go(c.then if eval_expr(c.cond, m) else c.els)
        if isinstance(c, While):
            while eval_expr(c.cond, m):
                steps += 1
                r = go(c.body)
                if r is not _NO_RETURN:
                    return r
            return _NO_RETURN
        if isinstance(c, Return):
            return eval_expr(c.expr, m)
        raise InterpError(f"cannot execute target command {c!r}")

    out = go(tp.body)
    if out is _NO_RETURN:
        raise InterpError("target program finished without returning")
    return RunResult(out, [], m, veps=m.get(tp.cost_var))


# ---------------------------------------------------------------------------
# Alignment and replay
# ---------------------------------------------------------------------------


def align_tape(env: TypingEnv, trace: list) -> list:
    """Map each draw v to v + d (site distance evaluated at the sample point);
    for uniform sites the recorded distance is v*c, i.e. the map v*(1+c)."""
    return [ev.draw + ev.dist_value for ev in trace]


def trace_cost(trace: list) -> float:
    return sum(ev.cost for ev in trace)


def _gamma_related(env: TypingEnv, m1: dict, m2: dict, tol: float = 1e-9):
    """Check m2(x) = m1(x) + d_x evaluated in m1, skipping variables whose
    distance cannot be evaluated in the final memory (e.g. out-of-range
    indices after the loop counter ran past the data)."""
    bad = []
    for n, ty in env.bindings:
        if n not in m1 or n not in m2:
            continue
        v1, v2 = m1[n], m2[n]
        if isinstance(ty, NumTy):
            try:
                d = eval_expr(ty.dist, m1)
            except InterpError:
                continue
            if abs((v1 + d) - v2) > tol * max(1.0, abs(v2)):
                bad.append((n, v1, d, v2))
        elif isinstance(ty, StarTy):
            d = m1.get("^" + n, 0.0)
            if abs((v1 + d) - v2) > tol * max(1.0, abs(v2)):
                bad.append((n, v1, d, v2))
        elif isinstance(ty, BoolTy):
            if v1 != v2:
                bad.append((n, v1, None, v2))
        elif isinstance(ty, ListTy):
            ok = _lists_related(ty, v1, v2, m1.get("^" + n), tol)
            if not ok:
                bad.append((n, v1, None, v2))
    return bad


def _lists_related(ty: ListTy, v1, v2, hat, tol) -> bool:
    if len(v1) != len(v2):
        return False
    if isinstance(ty.elem, BoolTy):
        return v1 == v2
    if isinstance(ty.elem, StarTy):
        if hat is None or len(hat) != len(v1):
            return False
        return all(abs(a + d - b) <= tol * max(1.0, abs(b)) for a, d, b in zip(v1, hat, v2))
    # zero-distance numeric lists
    return all(abs(a - b) <= tol * max(1.0, abs(b)) for a, b in zip(v1, v2))


def outputs_equal(a, b, tol: float = 1e-9) -> bool:
    if isinstance(a, list) and isinstance(b, list):
        return len(a) == len(b) and all(outputs_equal(x, y, tol) for x, y in zip(a, b))
    if isinstance(a, bool) or isinstance(b, bool):
        return a == b
    if isinstance(a, float) and isinstance(b, float):
        return abs(a - b) <= tol * max(1.0, abs(b))
    return a == b


def check_adjacency(p: Program, env: TypingEnv, m1: dict, m2: dict, tol=1e-9) -> list:
    """The Gamma-relation restricted to the parameters."""
    bad = []
    for n, ty in p.params:
        if isinstance(ty, NumTy):
            try:
                d = eval_expr(ty.dist, m1)
            except InterpError:
                continue
            if abs(m1[n] + d - m2[n]) > tol:
                bad.append(n)
        elif isinstance(ty, StarTy):
            if abs(m1[n] + m1.get("^" + n, 0.0) - m2[n]) > tol:
                bad.append(n)
        elif isinstance(ty, ListTy):
            if not _lists_related(ty, m1[n], m2[n], m1.get("^" + n), tol):
                bad.append(n)
    return bad


@dataclass
class ReplayReport:
    trials: int
    completed: int
    skipped: int  # m1-runs lost to nontermination/abort (sub-distribution mass)
    violations: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def to_json(self) -> dict:
        return {
            "trials": self.trials,
            "completed": self.completed,
            "skipped": self.skipped,
            "violations": self.violations[:5],
            "ok": self.ok,
        }


def replay_check(
    p: Program,
    env: TypingEnv,
    tp: Optional[TargetProgram],
    m1: dict,
    m2: dict,
    trials: int = 1000,
    seed: int = 20170118,
    step_limit: int = 10**6,
    cost_tol: float = 1e-9,
) -> ReplayReport:
    """Sample under m1, align the tape, replay under m2; check equal outputs,
    Gamma-related final memories, and per-site costs summing to the target's
    v_eps on the same tape."""
    bad_params = check_adjacency(p, env, m1, m2)
    if bad_params:
        raise InterpError(f"m1/m2 are not Gamma-related on parameters: {bad_params}")
    report = ReplayReport(trials, 0, 0)
    children = np.random.SeedSequence(seed).spawn(trials)
    for t in range(trials):
        rng = np.random.Generator(np.random.PCG64(children[t]))
        try:
            r1 = run_source(p, env, m1, rng=rng, step_limit=step_limit)
        except InterpError:
            report.skipped += 1
            continue
        report.completed += 1
        aligned = align_tape(env, r1.trace)
        try:
            r2 = run_source(p, env, m2, tape=aligned, step_limit=step_limit)
        except InterpError as ex:
            report.violations.append(
                {"trial": t, "reason": f"aligned replay aborted: {ex}"}
            )
            continue
        if not outputs_equal(r1.output, r2.output):
            report.violations.append(
                {
                    "trial": t,
                    "reason": "outputs differ",
                    "out1": r1.output,
                    "out2": r2.output,
                    "tape": [ev.draw for ev in r1.trace],
                }
            )
            continue
        bad = _gamma_related(env, r1.memory, r2.memory)
        if bad:
            report.violations.append(
                {"trial": t, "reason": f"final memories not related: {bad[:3]}"}
            )
            continue
        if tp is not None:
            tape = [ev.draw for ev in r1.trace]
            try:
                rt = run_target(tp, dict(m1), tape, step_limit)
            except InterpError as ex:
                report.violations.append({"trial": t, "reason": f"target aborted: {ex}"})
                continue
            expected = trace_cost(r1.trace)
            if abs(rt.veps - expected) > cost_tol * max(1.0, abs(expected)):
                report.violations.append(
                    {
                        "trial": t,
                        "reason": "per-site cost sum differs from target v_eps",
                        "trace_cost": expected,
                        "target_veps": rt.veps,
                    }
                )
    return report


# ---------------------------------------------------------------------------
# Faithfulness helper (source vs target on a shared tape)
# ---------------------------------------------------------------------------


def faithful_pair(
    p: Program,
    env: TypingEnv,
    tp: TargetProgram,
    m0: dict,
    rng,
    step_limit: int = 10**6,
):
    """One shared-tape comparison; returns (ok, detail)."""
    try:
        r1 = run_source(p, env, m0, rng=rng, step_limit=step_limit)
    except InterpError as ex:
        return True, f"source aborted ({ex}); no terminating run to compare"
    tape = [ev.draw for ev in r1.trace]
    try:
        r2 = run_target(tp, dict(m0), tape, step_limit=step_limit)
    except InterpError as ex:
        return False, f"target aborted on the source tape: {ex}"
    if not outputs_equal(r1.output, r2.output):
        return False, f"outputs differ: {r1.output} vs {r2.output}"
    for n in _source_var_names(p, env):
        if n in r1.memory and n in r2.memory:
            if not outputs_equal(r1.memory[n], r2.memory[n]):
                return False, f"final value of {n} differs"
    return True, ""


def _source_var_names(p: Program, env: TypingEnv) -> list:
    return [n for n, _ in env.bindings]


# ---------------------------------------------------------------------------
# Monte-Carlo privacy falsifier
# ---------------------------------------------------------------------------


@dataclass
class McReport:
    verdict: str  # FALSIFIED | CONSISTENT
    eps_claim: float
    trials: int
    outcomes: dict  # key -> (count1, count2)
    witness: Optional[dict] = None
    aborted: tuple = (0, 0)

    def to_json(self) -> dict:
        return {
            "verdict": self.verdict,
            "eps_claim": self.eps_claim,
            "trials": self.trials,
            "outcomes": {
                str(k): {"count1": c1, "count2": c2}
                for k, (c1, c2) in sorted(self.outcomes.items(), key=lambda kv: str(kv[0]))
            },
            "witness": self.witness,
            "aborted": list(self.aborted),
        }


def _finite_output(ty) -> bool:
    if isinstance(ty, BoolTy):
        return True
    if isinstance(ty, ListTy):
        return _finite_output(ty.elem)
    return False


def _outcome_key(v):
    if isinstance(v, list):
        return tuple(_outcome_key(x) for x in v)
    return v


def estimate_privacy(
    p: Program,
    env: TypingEnv,
    m1: dict,
    m2: dict,
    eps_claim: float,
    trials: int = 10**5,
    seed: int = 20170118,
    step_limit: int = 10**5,
    confidence_alpha: float = 0.01,
) -> McReport:
    """Frequency test of P1(w) <= exp(eps) * P2(w) per observed outcome.

    Flags FALSIFIED when a one-sided Hoeffding bound at level
    `confidence_alpha` certifies a violation in either direction; otherwise
    CONSISTENT. Aborted runs (nontermination guard, out-of-range access)
    carry sub-distribution mass and are excluded from the outcome counts.
    """
    if not _finite_output(p.ret[1]):
        raise InterpError("estimate_privacy requires a finite (boolean) output space")
    counts: dict = {}
    aborted = [0, 0]
    for side, m0 in ((0, m1), (1, m2)):
        children = np.random.SeedSequence((seed, side)).spawn(trials)
        for t in range(trials):
            rng = np.random.Generator(np.random.PCG64(children[t]))
            try:
                r = run_source(p, env, m0, rng=rng, step_limit=step_limit)
                key = _outcome_key(r.output)
            except InterpError:
                aborted[side] += 1
                continue
            pair = counts.setdefault(key, [0, 0])
            pair[side] += 1

    bound = math.sqrt(math.log(1.0 / confidence_alpha) / (2.0 * trials))
    factor = math.exp(eps_claim)
    witness = None
    for key, (c1, c2) in counts.items():
        p1, p2 = c1 / trials, c2 / trials
        if p1 - bound > factor * (p2 + bound):
            witness = {"outcome": str(key), "direction": "1>2", "p1": p1, "p2": p2}
            break
        if p2 - bound > factor * (p1 + bound):
            witness = {"outcome": str(key), "direction": "2>1", "p1": p1, "p2": p2}
            break
    report = McReport(
        "FALSIFIED" if witness else "CONSISTENT",
        eps_claim,
        trials,
        {k: tuple(v) for k, v in counts.items()},
        witness,
        tuple(aborted),
    )
    return report


def smoothed_ratios(report: McReport) -> dict:
    """Add-one smoothed frequency ratios per outcome (diagnostic view)."""
    n = report.trials
    out = {}
    for k, (c1, c2) in report.outcomes.items():
        p1 = (c1 + 1) / (n + 1)
        p2 = (c2 + 1) / (n + 1)
        out[str(k)] = max(p1 / p2, p2 / p1)
    return out
