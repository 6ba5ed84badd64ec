"""Command-line front end: parse -> infer -> check/transform -> solve ->
budget-verify -> test.

Exit codes: 0 verified/clean, 1 verification failure (or falsified /
replay violation), 2 inconclusive (solver unknown/timeout or unresolved
distance variables), 3 usage or parse errors.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Optional

from . import budget as budget_mod
from . import solver as smt
from .checker import env_from_annotations, transform
from .core import (
    Cmd,
    DVar,
    If,
    Lit,
    Program,
    Prop,
    Seq,
    TypingEnv,
    Var,
    While,
    dvars as term_dvars,
    free_vars,
    normalize,
    subst,
)
from .infer import InferError, infer_program
from .interp import (
    InterpError,
    check_adjacency,
    estimate_privacy,
    eval_expr,
    faithful_pair,
    replay_check,
)
from .parser import (
    SyntaxErrorLDP,
    parse_program,
    print_expr,
    print_target,
    print_type,
)

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_INCONCLUSIVE = 2
EXIT_USAGE = 3


@dataclass
class RunConfig:
    solver: Optional[str] = None
    timeout: float = 30.0
    big_m: Fraction = Fraction(10**4)
    seed: int = 20170118
    trials: int = 1000
    json_output: bool = False
    keep_smt: Optional[str] = None
    integer_distances: bool = False
    jobs: int = 4

    def solver_config(self) -> smt.SolverConfig:
        return smt.resolve_solver(
            self.solver, timeout=self.timeout, keep_smt=self.keep_smt, jobs=self.jobs
        )


def _load_config(args) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        data = json.loads(Path(args.config).read_text())
        for k, v in data.items():
            if hasattr(cfg, k):
                setattr(cfg, k, Fraction(v) if k == "big_m" else v)
    if args.solver:
        cfg.solver = args.solver
    if args.timeout is not None:
        cfg.timeout = args.timeout
    if getattr(args, "big_m", None) is not None:
        cfg.big_m = Fraction(args.big_m)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "trials", None) is not None:
        cfg.trials = args.trials
    if args.json:
        cfg.json_output = True
    if getattr(args, "keep_smt", None):
        cfg.keep_smt = args.keep_smt
    if getattr(args, "integer_distances", False):
        cfg.integer_distances = True
    return cfg


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------


@dataclass
class PipelineResult:
    program: Program
    env: TypingEnv
    check: object  # CheckResult
    report: Optional[budget_mod.BudgetReport] = None
    residual: list = field(default_factory=list)
    assignment: dict = field(default_factory=dict)
    objective: Optional[str] = None
    diagnostics: list = field(default_factory=list)


def _map_invariant(c: Cmd, f) -> Cmd:
    if isinstance(c, Seq):
        return Seq(tuple(_map_invariant(s, f) for s in c.cmds))
    if isinstance(c, If):
        return If(c.cond, _map_invariant(c.then, f), _map_invariant(c.els, f))
    if isinstance(c, While):
        inv = f(c.invariant) if c.invariant is not None else None
        return While(c.cond, inv, _map_invariant(c.body, f))
    return c


def _subst_prop_names(prop: Prop, assignment: dict) -> Prop:
    for n, v in assignment.items():
        prop = subst(prop, n, Lit(v))
    return prop


def _the_loop_invariant(p: Program) -> Optional[Prop]:
    from .core import statements

    loops = [s for s in statements(p.body) if isinstance(s, While)]
    if len(loops) == 1:
        return loops[0].invariant
    return None


def _dvarify(prop: Prop, names: set) -> Prop:
    for n in sorted(names & free_vars(prop)):
        prop = subst(prop, n, DVar(n))
    return prop


def run_pipeline(p: Program, cfg: RunConfig, minimize: bool = False) -> PipelineResult:
    """Shared machinery behind `check`, `verify`, and `infer --minimize`."""
    scfg = cfg.solver_config()
    env, missing = env_from_annotations(p)
    residual: list = []
    if missing:
        inferred = infer_program(p)
        env = inferred.env
        residual = inferred.residual
        result = inferred.check
    else:
        result = transform(p, env)
        residual = [
            c for c in result.constraints if c.is_residual() and c.kind != "injectivity"
        ]

    # solver-backed well-formedness (scale positivity, division by zero);
    # open propositions are closed with the program's sort table
    from .checker import close_constraint, sort_env

    sorts = sort_env(p, env)

    def prove(prop: Prop) -> bool:
        c = close_constraint("wf", "obligation", [], prop, sorts)
        return smt.check_valid(c, scfg).is_valid

    from .core import check_wellformed_program

    wf = check_wellformed_program(p, prove)
    out = PipelineResult(p, env, result, residual=residual, diagnostics=list(wf))

    assignment: dict = {}
    if residual and minimize:
        inv = _the_loop_invariant(p)
        if inv is None:
            out.diagnostics.append("minimize: no (single) loop invariant to extract a bound from")
            return out
        names = set()
        for c in residual:
            names |= c.dvars()
        inv_d = _dvarify(inv, names)
        cb = budget_mod.symbolic_cost_bound(result.target, inv_d, scfg)
        out.objective = print_expr(cb.objective)
        mres = smt.minimize_cost(
            residual,
            cb.objective,
            big_m=cfg.big_m,
            cfg=scfg,
            integer_distances=cfg.integer_distances,
        )
        if mres.status in ("optimal", "feasible") and mres.assignment:
            assignment = mres.assignment
            for n, v in assignment.items():
                env = env.subst_dvar(n, Lit(v))
            body = _map_invariant(p.body, lambda q: _subst_prop_names(q, assignment))
            p = Program(p.name, p.params, p.ret, p.pre, p.budget, p.annotations, body)
            result = transform(p, env)
            residual = []
            out.program, out.env, out.check, out.residual = p, env, result, []
            out.assignment = assignment
        else:
            out.diagnostics.append(f"minimize: {mres.status} {mres.detail}")
            return out

    if result.diagnostics:
        out.diagnostics.extend(result.diagnostics)
    if result.target is not None and not result.diagnostics:
        out.report = budget_mod.verify_budget(result.target, scfg, result.constraints)
    return out


def _exit_code(out: PipelineResult) -> int:
    if any(getattr(d, "code", "") for d in out.diagnostics if not isinstance(d, str)):
        return EXIT_FAIL
    if out.residual:
        return EXIT_INCONCLUSIVE
    if out.report is None:
        return EXIT_FAIL
    return {"PASS": EXIT_OK, "FAIL": EXIT_FAIL, "INCONCLUSIVE": EXIT_INCONCLUSIVE}[
        out.report.overall
    ]


def _env_table(env: TypingEnv) -> dict:
    return {n: print_type(t) for n, t in env.bindings}


def _pipeline_json(out: PipelineResult, target_text: bool = True) -> dict:
    data = {
        "program": out.program.name,
        "env": _env_table(out.env),
        "diagnostics": [str(d) for d in out.diagnostics],
        "residual": [c.name for c in out.residual],
        "assignment": {k: str(v) for k, v in out.assignment.items()},
        "objective": out.objective,
        "verdict": out.report.overall if out.report else "NONE",
    }
    if out.report:
        data["budget"] = out.report.to_json()
    if target_text and out.check is not None and getattr(out.check, "target", None):
        data["target"] = print_target(out.check.target)
    return data


def _print_text_report(out: PipelineResult, show_target: bool):
    print(f"program {out.program.name}")
    for d in out.diagnostics:
        print(f"  diagnostic: {d}")
    if out.assignment:
        pretty = ", ".join(f"{k} = {v}" for k, v in sorted(out.assignment.items()))
        print(f"  minimized alignment: {pretty}")
        if out.objective:
            print(f"  objective: {out.objective}")
    if out.residual:
        print(f"  residual constraints: {', '.join(c.name for c in out.residual)}")
    if show_target and out.check is not None and getattr(out.check, "target", None):
        print("-- target --")
        print(print_target(out.check.target), end="")
    if out.report:
        for v in out.report.obligations + out.report.constraints:
            print(f"  {v.name}: {v.verdict}")
        print(f"verdict: {out.report.overall}")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _parse_file(path: str) -> Program:
    text = Path(path).read_text()
    return parse_program(text)


def cmd_check(args) -> int:
    cfg = _load_config(args)
    try:
        p = _parse_file(args.file)
    except (OSError, SyntaxErrorLDP) as ex:
        print(f"parse error: {ex}", file=sys.stderr)
        return EXIT_USAGE
    try:
        out = run_pipeline(p, cfg, minimize=args.minimize)
    except (InferError, budget_mod.BoundError, smt.SolverNotFound) as ex:
        print(f"error: {ex}", file=sys.stderr)
        return EXIT_FAIL
    if cfg.json_output:
        print(json.dumps(_pipeline_json(out), indent=2))
    else:
        _print_text_report(out, show_target=True)
    return _exit_code(out)


def cmd_infer(args) -> int:
    cfg = _load_config(args)
    try:
        p = _parse_file(args.file)
    except (OSError, SyntaxErrorLDP) as ex:
        print(f"parse error: {ex}", file=sys.stderr)
        return EXIT_USAGE
    try:
        inferred = infer_program(p)
    except InferError as ex:
        print(f"inference error: {ex}", file=sys.stderr)
        return EXIT_FAIL
    if args.minimize:
        try:
            out = run_pipeline(p, cfg, minimize=True)
        except (budget_mod.BoundError, smt.SolverNotFound) as ex:
            print(f"error: {ex}", file=sys.stderr)
            return EXIT_FAIL
        if cfg.json_output:
            print(json.dumps(_pipeline_json(out), indent=2))
        else:
            _print_text_report(out, show_target=False)
        return _exit_code(out)
    if cfg.json_output:
        print(
            json.dumps(
                {
                    "program": p.name,
                    "env": _env_table(inferred.env),
                    "residual": [c.name for c in inferred.residual],
                    "solved": {k: print_expr(v) for k, v in inferred.solution.items()},
                },
                indent=2,
            )
        )
    else:
        print(f"program {p.name}: inferred environment")
        for n, t in inferred.env.bindings:
            print(f"  {n}: {print_type(t)}")
        if inferred.residual:
            print(f"  residual constraints: {', '.join(c.name for c in inferred.residual)}")
    return EXIT_OK


def cmd_transform(args) -> int:
    cfg = _load_config(args)
    try:
        p = _parse_file(args.file)
    except (OSError, SyntaxErrorLDP) as ex:
        print(f"parse error: {ex}", file=sys.stderr)
        return EXIT_USAGE
    env, missing = env_from_annotations(p)
    if missing:
        try:
            inferred = infer_program(p)
        except InferError as ex:
            print(f"inference error: {ex}", file=sys.stderr)
            return EXIT_FAIL
        env, result = inferred.env, inferred.check
    else:
        result = transform(p, env)
    if result.target is None:
        for d in result.diagnostics:
            print(f"diagnostic: {d}", file=sys.stderr)
        return EXIT_FAIL
    print(print_target(result.target), end="")
    return EXIT_OK


def cmd_verify(args) -> int:
    return cmd_check(args)


def _load_memory(path: str) -> dict:
    data = json.loads(Path(path).read_text())
    return {
        k: ([float(x) for x in v] if isinstance(v, list) else float(v))
        for k, v in data.items()
    }


def _derive_m2(p: Program, env: TypingEnv, m1: dict) -> dict:
    """Apply the parameter distances to m1 (hat entries drive star params)."""
    m2 = {}
    for n, ty in p.params:
        from .core import ListTy, NumTy, StarTy

        v = m1[n]
        if isinstance(ty, ListTy) and isinstance(ty.elem, StarTy):
            hat = m1.get("^" + n, [0.0] * len(v))
            m2[n] = [a + d for a, d in zip(v, hat)]
        elif isinstance(ty, StarTy):
            m2[n] = v + m1.get("^" + n, 0.0)
        elif isinstance(ty, NumTy):
            m2[n] = v + eval_expr(ty.dist, m1)
        else:
            m2[n] = v
    return m2


def cmd_test(args) -> int:
    cfg = _load_config(args)
    try:
        p = _parse_file(args.file)
    except (OSError, SyntaxErrorLDP) as ex:
        print(f"parse error: {ex}", file=sys.stderr)
        return EXIT_USAGE
    env, missing = env_from_annotations(p)
    result = None
    if missing:
        try:
            inferred = infer_program(p)
        except InferError as ex:
            print(f"inference error: {ex}", file=sys.stderr)
            return EXIT_FAIL
        if inferred.residual:
            print("unresolved distance variables; run infer --minimize first", file=sys.stderr)
            return EXIT_INCONCLUSIVE
        env, result = inferred.env, inferred.check
    else:
        result = transform(p, env)
    if result.target is None:
        for d in result.diagnostics:
            print(f"diagnostic: {d}", file=sys.stderr)
        return EXIT_FAIL

    m1 = _load_memory(args.m1)
    m2 = _load_memory(args.m2) if args.m2 else _derive_m2(p, env, m1)
    try:
        if args.mode == "replay":
            rep = replay_check(p, env, result.target, m1, m2, cfg.trials, cfg.seed)
            payload = rep.to_json()
            code = EXIT_OK if rep.ok else EXIT_FAIL
        elif args.mode == "faithful":
            import numpy as np

            fails = []
            children = np.random.SeedSequence(cfg.seed).spawn(cfg.trials)
            for t in range(cfg.trials):
                rng = np.random.Generator(np.random.PCG64(children[t]))
                ok, detail = faithful_pair(p, env, result.target, m1, rng)
                if not ok:
                    fails.append({"trial": t, "detail": detail})
            payload = {"trials": cfg.trials, "failures": fails[:5], "ok": not fails}
            code = EXIT_OK if not fails else EXIT_FAIL
        elif args.mode == "mc":
            claim = args.claim if args.claim is not None else eval_expr(p.budget, m1)
            rep = estimate_privacy(
                p, env, m1, m2, float(claim), trials=cfg.trials, seed=cfg.seed
            )
            payload = rep.to_json()
            code = EXIT_OK if rep.verdict == "CONSISTENT" else EXIT_FAIL
        else:
            print(f"unknown mode {args.mode}", file=sys.stderr)
            return EXIT_USAGE
    except InterpError as ex:
        print(f"interpreter error: {ex}", file=sys.stderr)
        return EXIT_FAIL
    if cfg.json_output:
        print(json.dumps(payload, indent=2))
    else:
        for k, v in payload.items():
            print(f"{k}: {v}")
    return code


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(
        prog="dpalign",
        description="verify differential-privacy programs via randomness alignment",
    )
    sub = ap.add_subparsers(dest="cmd", required=True)

    def common(sp, trials_default=None):
        sp.add_argument("file")
        sp.add_argument("--solver", help="external solver command (SMT-LIB 2 file argument)")
        sp.add_argument("--timeout", type=float, default=None, help="per-query seconds")
        sp.add_argument("--big-m", dest="big_m", default=None, help="big-M for unbounded counters")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--trials", type=int, default=trials_default)
        sp.add_argument("--keep-smt", dest="keep_smt", help="dump solver scripts to this directory")
        sp.add_argument("--integer-distances", action="store_true")
        sp.add_argument("--json", action="store_true")
        sp.add_argument("--config", help="JSON config file")

    sp = sub.add_parser("check", help="type-check, transform, and verify the budget")
    common(sp)
    sp.add_argument("--minimize", action="store_true", help="pin residual distance variables optimally")
    sp.set_defaults(fn=cmd_check)

    sp = sub.add_parser("infer", help="print the refined environment (and optionally minimize)")
    common(sp)
    sp.add_argument("--minimize", action="store_true")
    sp.set_defaults(fn=cmd_infer)

    sp = sub.add_parser("transform", help="print the instrumented target program")
    common(sp)
    sp.set_defaults(fn=cmd_transform)

    sp = sub.add_parser("verify", help="alias of check (budget-verification report)")
    common(sp)
    sp.add_argument("--minimize", action="store_true")
    sp.set_defaults(fn=cmd_verify)

    sp = sub.add_parser("test", help="empirical batteries: replay, mc, faithful")
    common(sp, trials_default=None)
    sp.add_argument("--mode", choices=("replay", "mc", "faithful"), required=True)
    sp.add_argument("--m1", required=True, help="JSON memory for the first input")
    sp.add_argument("--m2", help="JSON memory for the adjacent input (derived if omitted)")
    sp.add_argument("--claim", type=float, help="claimed epsilon for mc mode")
    sp.set_defaults(fn=cmd_test)

    try:
        args = ap.parse_args(argv)
    except SystemExit:
        return EXIT_USAGE
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
