"""Concrete syntax: tokenizer, recursive-descent parser, pretty-printers.

Files use the `.ldp` extension. The grammar (see docs/grammar.md) follows the
keyword set `function/returns/precondition/typedef/budget/skip/if/then/else/
while/invariant/return/lap/uniform/true/false`; `^` prefixes hat names, `::`
is cons, `?:` the ternary. Operator precedence, tightest first:
multiplicative, additive, comparison, cons, negation, ternary.

`print_program`/`print_target` render canonically (one statement per line);
`parse_program(print_program(p))` returns an AST equal to `p`.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from fractions import Fraction
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
    PForall,
    PImplies,
    PNot,
    POr,
    Program,
    Prop,
    RandExpr,
    Return,
    Sample,
    Select,
    Seq,
    Skip,
    StarTy,
    TargetProgram,
    TRUE,
    Ty,
    Uniform,
    Var,
    While,
    ZERO,
    lit,
    pand,
    seq,
)

KEYWORDS = {
    "function", "returns", "precondition", "typedef", "budget", "skip", "if",
    "then", "else", "while", "invariant", "return", "lap", "uniform", "true",
    "false", "num", "int", "bool", "list", "forall", "real",
}

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+|//[^\n]*)
  | (?P<num>\d+\.\d+|\d+)
  | (?P<hat>\^[A-Za-z_][A-Za-z_0-9]*)
  | (?P<ident>[A-Za-z_][A-Za-z_0-9]*)
  | (?P<op>==>|:=|::|==|<=|>=|&&|\|\||[-+*/%<>=!?:,;()\[\]{}])
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class Token:
    kind: str  # num | ident | hat | op | kw | eof
    text: str
    line: int
    col: int


class SyntaxErrorLDP(Exception):
    def __init__(self, message: str, line: int, col: int):
        super().__init__(f"{line}:{col}: {message}")
        self.message = message
        self.line = line
        self.col = col


def tokenize(text: str) -> list:
    toks = []
    pos, line, col = 0, 1, 1
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if not m:
            raise SyntaxErrorLDP(f"unexpected character {text[pos]!r}", line, col)
        lexeme = m.group(0)
        if m.lastgroup != "ws":
            kind = m.lastgroup
            if kind == "ident" and lexeme in KEYWORDS:
                kind = "kw"
            toks.append(Token(kind, lexeme, line, col))
        nl = lexeme.count("\n")
        if nl:
            line += nl
            col = len(lexeme) - lexeme.rfind("\n")
        else:
            col += len(lexeme)
        pos = m.end()
    toks.append(Token("eof", "", line, col))
    return toks


class _Parser:
    def __init__(self, text: str):
        self.toks = tokenize(text)
        self.pos = 0

    # -- token plumbing ----------------------------------------------------

    @property
    def cur(self) -> Token:
        return self.toks[self.pos]

    def error(self, message: str):
        raise SyntaxErrorLDP(message, self.cur.line, self.cur.col)

    def at(self, text: str) -> bool:
        return self.cur.text == text and self.cur.kind in ("op", "kw")

    def eat(self, text: str) -> Token:
        if not self.at(text):
            self.error(f"expected {text!r}, found {self.cur.text!r}")
        t = self.cur
        self.pos += 1
        return t

    def accept(self, text: str) -> bool:
        if self.at(text):
            self.pos += 1
            return True
        return False

    def ident(self) -> str:
        if self.cur.kind != "ident":
            self.error(f"expected identifier, found {self.cur.text!r}")
        t = self.cur
        self.pos += 1
        return t.text

    # -- expressions --------------------------------------------------------

    def expr(self) -> Expr:
        return self._ternary()

    def _ternary(self) -> Expr:
        e = self._negation()
        if self.accept("?"):
            then = self._ternary()
            self.eat(":")
            other = self._ternary()
            return Select(e, then, other)
        return e

    def _negation(self) -> Expr:
        if self.accept("!"):
            return Not(self._negation())
        return self._cons()

    def _cons(self) -> Expr:
        e = self._comparison()
        if self.accept("::"):
            return Cons(e, self._cons())
        return e

    def _comparison(self) -> Expr:
        e = self._additive()
        for op in ("<=", ">=", "==", "=", "<", ">"):
            if self.at(op):
                self.pos += 1
                rhs = self._additive()
                return Cmp("==" if op == "=" else op, e, rhs)
        return e

    def _additive(self) -> Expr:
        e = self._multiplicative()
        while self.cur.text in ("+", "-") and self.cur.kind == "op":
            op = self.cur.text
            self.pos += 1
            e = BinOp(op, e, self._multiplicative())
        return e

    def _multiplicative(self) -> Expr:
        e = self._unary()
        while self.cur.text in ("*", "/", "%") and self.cur.kind == "op":
            op = self.cur.text
            self.pos += 1
            e = BinOp(op, e, self._unary())
        return e

    def _unary(self) -> Expr:
        if self.at("-"):
            self.pos += 1
            operand = self._unary()
            if isinstance(operand, Lit):
                return Lit(-operand.value)
            return BinOp("-", ZERO, operand)
        return self._postfix()

    def _postfix(self) -> Expr:
        e = self._primary()
        while self.accept("["):
            idx = self.expr()
            self.eat("]")
            e = Index(e, idx)
        return e

    def _primary(self) -> Expr:
        t = self.cur
        if t.kind == "num":
            self.pos += 1
            return Lit(Fraction(t.text))
        if t.kind == "hat":
            self.pos += 1
            return HatVar(t.text[1:])
        if self.at("true"):
            self.pos += 1
            return BoolLit(True)
        if self.at("false"):
            self.pos += 1
            return BoolLit(False)
        if self.at("abs"):  # not reachable: abs is not a keyword
            pass
        if t.kind == "ident":
            self.pos += 1
            if t.text == "abs" and self.at("("):
                self.eat("(")
                inner = self.expr()
                self.eat(")")
                return Abs(inner)
            if t.text == "log" and self.at("("):
                self.eat("(")
                inner = self.expr()
                self.eat(")")
                return Log(inner)
            return Var(t.text)
        if self.accept("("):
            e = self.expr()
            self.eat(")")
            return e
        self.error(f"expected expression, found {t.text!r}")

    # -- propositions --------------------------------------------------------

    def prop(self) -> Prop:
        if self.at("forall"):
            self.pos += 1
            var = self.ident()
            sort = "int"
            if self.accept(":"):
                if self.accept("real"):
                    sort = "real"
                else:
                    self.eat("int")
            self.eat("::")
            return PForall(var, sort, self.prop())
        return self._pimplies()

    def _pimplies(self) -> Prop:
        lhs = self._por()
        if self.accept("==>"):
            return PImplies(lhs, self._pimplies())
        return lhs

    def _por(self) -> Prop:
        p = self._pand()
        parts = [p]
        while self.accept("||"):
            parts.append(self._pand())
        return POr(tuple(parts)) if len(parts) > 1 else p

    def _pand(self) -> Prop:
        p = self._pnot()
        parts = [p]
        while self.accept("&&"):
            parts.append(self._pnot())
        return PAnd(tuple(parts)) if len(parts) > 1 else p

    def _pnot(self) -> Prop:
        if self.at("!"):
            save = self.pos
            self.pos += 1
            if self.at("("):
                try:
                    self.eat("(")
                    inner = self.prop()
                    self.eat(")")
                    if isinstance(inner, PAtom):
                        return PAtom(Not(inner.expr))
                    return PNot(inner)
                except SyntaxErrorLDP:
                    pass
            self.pos = save
        return self._patom()

    def _patom(self) -> Prop:
        # expressions first ("(-1) <= x" must not read "(-1)" as a prop),
        # then parenthesized propositions ("(forall i :: ...) && ...")
        save = self.pos
        try:
            return PAtom(self.expr())
        except SyntaxErrorLDP:
            self.pos = save
        self.eat("(")
        inner = self.prop()
        self.eat(")")
        return inner

    # -- types ----------------------------------------------------------------

    def type_(self) -> Ty:
        if self.accept("list"):
            return ListTy(self.type_())
        if self.accept("bool"):
            return BoolTy()
        integer = False
        if self.at("int"):
            integer = True
            self.pos += 1
        elif self.at("num"):
            self.pos += 1
        else:
            self.error(f"expected type, found {self.cur.text!r}")
        if self.accept("["):
            if self.accept("*"):
                self.eat("]")
                return StarTy()
            d = self.expr()
            self.eat("]")
            return NumTy(d, integer)
        return NumTy(ZERO, integer)

    # -- commands ---------------------------------------------------------------

    def block(self) -> Cmd:
        self.eat("{")
        stmts = []
        while not self.at("}"):
            stmts.append(self.stmt())
        self.eat("}")
        return seq(stmts)

    def stmt(self) -> Cmd:
        if self.accept("skip"):
            self.eat(";")
            return Skip()
        if self.accept("if"):
            self.eat("(")
            cond = self.expr()
            self.eat(")")
            self.eat("then")
            then = self.block()
            els: Cmd = Skip()
            if self.accept("else"):
                els = self.block()
            return If(cond, then, els)
        if self.accept("while"):
            self.eat("(")
            cond = self.expr()
            self.eat(")")
            inv = None
            if self.accept("invariant"):
                inv = self.prop()
            body = self.block()
            return While(cond, inv, body)
        if self.accept("return"):
            e = self.expr()
            self.eat(";")
            return Return(e)
        name = self.ident()
        self.eat(":=")
        if self.accept("lap"):
            self.eat("(")
            scale = self.expr()
            self.eat(")")
            self.eat(";")
            return Sample(name, Laplace(scale))
        if self.accept("uniform"):
            self.eat(";")
            return Sample(name, Uniform())
        e = self.expr()
        self.eat(";")
        return Assign(name, e)

    # -- program -------------------------------------------------------------------

    def program(self) -> Program:
        self.eat("function")
        name = self.ident()
        self.eat("(")
        params = []
        while not self.at(")"):
            pname = self.ident()
            self.eat(":")
            params.append((pname, self.type_()))
            if not (self.accept(",") or self.accept(";")):
                break
        self.eat(")")
        self.eat("returns")
        self.eat("(")
        rname = self.ident()
        self.eat(":")
        rty = self.type_()
        self.eat(")")
        pre: Prop = TRUE
        if self.accept("precondition"):
            pre = self.prop()
        budget: Expr = ZERO
        if self.accept("budget"):
            budget = self.expr()
        annots = []
        if self.accept("typedef"):
            seen = set()
            while True:
                aname = self.ident()
                if aname in seen:
                    self.error(f"duplicate annotation for {aname}")
                seen.add(aname)
                self.eat(":")
                annots.append((aname, self.type_()))
                if not self.accept(";"):
                    break
        body = self.block()
        if self.cur.kind != "eof":
            self.error(f"trailing input {self.cur.text!r}")
        known = {n for n, _ in params} | {rname} | {n for n, _ in annots}
        for fv in sorted(fv for fv in _prop_free(pre) if not fv.startswith("^")):
            if fv not in known:
                self.error(f"unknown identifier {fv!r} in precondition")
        return Program(name, tuple(params), (rname, rty), pre, budget, tuple(annots), body)


def _prop_free(p: Prop) -> set:
    from .core import free_vars

    return free_vars(p)


def parse_program(text: str) -> Program:
    """Parse `.ldp` source text into a Program AST."""
    return _Parser(text).program()


def parse_expr(text: str) -> Expr:
    p = _Parser(text)
    e = p.expr()
    if p.cur.kind != "eof":
        p.error(f"trailing input {p.cur.text!r}")
    return e


def parse_prop(text: str) -> Prop:
    p = _Parser(text)
    q = p.prop()
    if p.cur.kind != "eof":
        p.error(f"trailing input {p.cur.text!r}")
    return q


# ---------------------------------------------------------------------------
# Pretty-printing
# ---------------------------------------------------------------------------

_LEVEL_TERNARY = 0
_LEVEL_NOT = 1
_LEVEL_CONS = 2
_LEVEL_CMP = 3
_LEVEL_ADD = 4
_LEVEL_MUL = 5
_LEVEL_ATOM = 6


def frac_str(v: Fraction) -> str:
    """Exact decimal rendering when the denominator is 2^a*5^b, else p/q."""
    if v.denominator == 1:
        return str(v.numerator)
    den = v.denominator
    two = five = 0
    while den % 2 == 0:
        den //= 2
        two += 1
    while den % 5 == 0:
        den //= 5
        five += 1
    if den == 1:
        shift = max(two, five)
        scaled = v * 10**shift
        digits = str(abs(scaled.numerator)).rjust(shift + 1, "0")
        s = digits[:-shift] + "." + digits[-shift:]
        return ("-" if v < 0 else "") + s
    return f"{v.numerator}/{v.denominator}"


def print_expr(e: Expr, level: int = _LEVEL_TERNARY) -> str:
    def wrap(s: str, mine: int) -> str:
        return f"({s})" if mine < level else s

    if isinstance(e, Lit):
        if e.value < 0:
            return wrap(frac_str(e.value), _LEVEL_NOT)
        return frac_str(e.value)
    if isinstance(e, BoolLit):
        return "true" if e.value else "false"
    if isinstance(e, Var):
        return e.name
    if isinstance(e, HatVar):
        return "^" + e.base
    if isinstance(e, DVar):
        return e.name
    if isinstance(e, BinOp):
        if e.op == "-" and e.lhs == ZERO:
            return wrap("-" + print_expr(e.rhs, _LEVEL_ATOM), _LEVEL_MUL)
        mine = _LEVEL_ADD if e.op in ("+", "-") else _LEVEL_MUL
        lhs = print_expr(e.lhs, mine)
        rhs = print_expr(e.rhs, mine + 1)
        return wrap(f"{lhs} {e.op} {rhs}", mine)
    if isinstance(e, Cmp):
        lhs = print_expr(e.lhs, _LEVEL_ADD)
        rhs = print_expr(e.rhs, _LEVEL_ADD)
        return wrap(f"{lhs} {e.op} {rhs}", _LEVEL_CMP)
    if isinstance(e, Not):
        return wrap("!" + print_expr(e.operand, _LEVEL_NOT), _LEVEL_NOT)
    if isinstance(e, Cons):
        head = print_expr(e.head, _LEVEL_CMP)
        tail = print_expr(e.tail, _LEVEL_CONS)
        return wrap(f"{head}::{tail}", _LEVEL_CONS)
    if isinstance(e, Index):
        return print_expr(e.seq, _LEVEL_ATOM) + "[" + print_expr(e.idx) + "]"
    if isinstance(e, Select):
        cond = print_expr(e.cond, _LEVEL_NOT)
        then = print_expr(e.then, _LEVEL_TERNARY)
        other = print_expr(e.other, _LEVEL_TERNARY)
        return wrap(f"{cond} ? {then} : {other}", _LEVEL_TERNARY)
    if isinstance(e, Abs):
        return "abs(" + print_expr(e.operand) + ")"
    if isinstance(e, Log):
        return "log(" + print_expr(e.operand) + ")"
    raise TypeError(e)


_P_FORALL = 0
_P_IMP = 1
_P_OR = 2
_P_AND = 3
_P_ATOM = 4


def print_prop(p: Prop, level: int = _P_FORALL) -> str:
    def wrap(s: str, mine: int) -> str:
        return f"({s})" if mine < level else s

    if isinstance(p, PForall):
        sort = "" if p.sort == "int" else " : real"
        return wrap(f"forall {p.var}{sort} :: {print_prop(p.body, _P_FORALL)}", _P_FORALL)
    if isinstance(p, PImplies):
        return wrap(
            f"{print_prop(p.hyp, _P_OR)} ==> {print_prop(p.concl, _P_IMP)}", _P_IMP
        )
    if isinstance(p, POr):
        return wrap(" || ".join(print_prop(q, _P_AND) for q in p.parts), _P_OR)
    if isinstance(p, PAnd):
        return wrap(" && ".join(print_prop(q, _P_ATOM) for q in p.parts), _P_AND)
    if isinstance(p, PNot):
        return "!(" + print_prop(p.operand, _P_FORALL) + ")"
    if isinstance(p, PAtom):
        return print_expr(p.expr, _LEVEL_NOT)
    raise TypeError(p)


def print_type(t: Ty) -> str:
    if isinstance(t, BoolTy):
        return "bool"
    if isinstance(t, StarTy):
        return "num[*]"
    if isinstance(t, NumTy):
        base = "int" if t.integer else "num"
        return f"{base}[{print_expr(t.dist)}]"
    if isinstance(t, ListTy):
        return "list " + print_type(t.elem)
    raise TypeError(t)


def _print_stmts(c: Cmd, indent: int, out: list) -> None:
    pad = "  " * indent
    if isinstance(c, Seq):
        for s in c.cmds:
            _print_stmts(s, indent, out)
        return
    if isinstance(c, Skip):
        out.append(pad + "skip;")
    elif isinstance(c, Assign):
        mark = " /*inst*/" if c.instrumented else ""
        out.append(pad + f"{c.name} := {print_expr(c.expr)};{mark}")
    elif isinstance(c, Sample):
        if isinstance(c.rand, Laplace):
            out.append(pad + f"{c.name} := lap({print_expr(c.rand.scale)});")
        else:
            out.append(pad + f"{c.name} := uniform;")
    elif isinstance(c, Havoc):
        out.append(pad + f"havoc {c.name}; /*inst*/")
    elif isinstance(c, Havoc01):
        out.append(pad + f"havoc01 {c.name}; /*inst*/")
    elif isinstance(c, If):
        out.append(pad + f"if ({print_expr(c.cond)}) then {{")
        _print_stmts(c.then, indent + 1, out)
        if isinstance(c.els, Skip):
            out.append(pad + "}")
        else:
            out.append(pad + "} else {")
            _print_stmts(c.els, indent + 1, out)
            out.append(pad + "}")
    elif isinstance(c, While):
        out.append(pad + f"while ({print_expr(c.cond)})")
        if c.invariant is not None:
            out.append(pad + f"  invariant {print_prop(c.invariant)}")
        out.append(pad + "{")
        _print_stmts(c.body, indent + 1, out)
        out.append(pad + "}")
    elif isinstance(c, Return):
        out.append(pad + f"return {print_expr(c.expr)};")
    else:
        raise TypeError(c)


def _signature(name: str, params, ret, pre, budget) -> list:
    plist = ", ".join(f"{n}: {print_type(t)}" for n, t in params)
    lines = [f"function {name}({plist})"]
    lines.append(f"returns ({ret[0]}: {print_type(ret[1])})")
    if pre != TRUE:
        lines.append(f"precondition {print_prop(pre)}")
    lines.append(f"budget {print_expr(budget)}")
    return lines


def print_program(p: Program) -> str:
    """Deterministic canonical rendering of a source program."""
    lines = _signature(p.name, p.params, p.ret, p.pre, p.budget)
    if p.annotations:
        annots = ";\n        ".join(f"{n}: {print_type(t)}" for n, t in p.annotations)
        lines.append(f"typedef {annots}")
    lines.append("{")
    _print_stmts(p.body, 1, lines)
    lines.append("}")
    return "\n".join(lines) + "\n"


def print_target(tp: TargetProgram) -> str:
    """Deterministic rendering of a target program.

    Instrumented statements carry a `/*inst*/` marker; havoc is printed as
    `havoc x;`, its unit-interval variant as `havoc01 x;`.
    """
    lines = _signature(tp.name, tp.params, tp.ret, tp.pre, tp.budget)
    lines.append("{")
    _print_stmts(tp.body, 1, lines)
    lines.append("}")
    return "\n".join(lines) + "\n"


def target_statement_lines(tp: TargetProgram) -> list:
    """Body statements, one string per line, indentation stripped."""
    out: list = []
    _print_stmts(tp.body, 0, out)
    return [ln.strip() for ln in out]
