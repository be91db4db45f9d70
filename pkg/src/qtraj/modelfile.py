"""Declarative model files: parse, validate, lower, and echo back.

A model file is UTF-8 text with sections introduced by `name:` lines:

    freedoms:     ordered declarations, one per line
    params:       named scalar constants, `name = expr`
    hamiltonian:  one operator expression (may span lines)
    lindblads:    one operator expression per line
    initial:      one state constructor per freedom
    output:       `filename expression` per line
    run:          `key = value` stepping parameters

Expressions use complex literals with an `i` suffix (2i, 1.5e-3i; bare `i`
is the imaginary unit), parameter references, unary minus, binary + - *,
integer ^, a postfix .hc() adjoint, scalar functions sqrt/sin/cos/exp, the
time variable `t` in scalar positions, and primaries bound to declared
freedoms: a(f), adag(f), n(f), x(f), p(f) on fields, sp(f), sm(f), sz(f) on
spins, tr(f,i,j) on atoms.  Precedence: ^ above unary minus above * above
+ -; binary operators associate left.

Parse and type errors raise ModelParseError with a line:column location;
semantic rejections after a clean parse (a non-Hermitian Hamiltonian, an
out-of-range level) raise ModelValidationError.  The Hamiltonian check is
numerical on the declared truncation: random-vector adjointness with the top
level of every field freedom masked, since a ladder truncation only respects
hermiticity on the lower block.
"""

from __future__ import annotations

import cmath
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .hilbert import (
    ATOM,
    FIELD,
    SPIN,
    FreedomSpec,
    StateVector,
    basis_state,
    coherent_state,
    product_state,
    row_dot,
    used_view,
)
from .moving_basis import MovingBasisParams
from .operators import (
    OperatorExpr,
    Power,
    ScalarMul,
    TimeFnMul,
    _apply_node,
    create,
    destroy,
    momentum,
    number,
    position,
    sigma_minus,
    sigma_plus,
    sigma_z,
    transition,
)
from .steppers import IntegratorConfig, ModelOperators, Unraveling
from .trajectory import OutputSpec, RunConfig

__all__ = [
    "ModelError",
    "ModelParseError",
    "ModelValidationError",
    "ModelFile",
    "parse_model",
    "build_model",
    "print_model",
    "load_model",
]


class ModelError(Exception):
    pass


class ModelParseError(ModelError):
    def __init__(self, message, line=None, col=None):
        if line is not None:
            message = f"line {line}, col {col}: {message}"
        super().__init__(message)


class ModelValidationError(ModelError):
    pass


# ---------------------------------------------------------------------------
# Expression AST (positions excluded from equality for round-trip checks)


@dataclass(frozen=True)
class Node:
    pass


@dataclass(frozen=True)
class Num(Node):
    value: float
    pos: tuple = field(default=(0, 0), compare=False)


@dataclass(frozen=True)
class Imag(Node):
    value: float
    pos: tuple = field(default=(0, 0), compare=False)


@dataclass(frozen=True)
class Ref(Node):
    name: str
    pos: tuple = field(default=(0, 0), compare=False)


@dataclass(frozen=True)
class TimeVar(Node):
    pos: tuple = field(default=(0, 0), compare=False)


@dataclass(frozen=True)
class Neg(Node):
    child: Node
    pos: tuple = field(default=(0, 0), compare=False)


@dataclass(frozen=True)
class Bin(Node):
    op: str
    left: Node
    right: Node
    pos: tuple = field(default=(0, 0), compare=False)


@dataclass(frozen=True)
class Pow(Node):
    child: Node
    exponent: int
    pos: tuple = field(default=(0, 0), compare=False)


@dataclass(frozen=True)
class Hc(Node):
    child: Node
    pos: tuple = field(default=(0, 0), compare=False)


@dataclass(frozen=True)
class Call(Node):
    name: str
    args: tuple
    pos: tuple = field(default=(0, 0), compare=False)


# ---------------------------------------------------------------------------
# Tokenizer


_OPCHARS = set("+-*^(),=.")


class _Tok:
    __slots__ = ("kind", "text", "value", "line", "col")

    def __init__(self, kind, text, value, line, col):
        self.kind = kind
        self.text = text
        self.value = value
        self.line = line
        self.col = col

    @property
    def pos(self):
        return (self.line, self.col)


def _tokenize(text, first_line=1):
    toks = []
    line = first_line
    col = 1
    i = 0
    n = len(text)
    while i < n:
        ch = text[i]
        if ch == "\n":
            line += 1
            col = 1
            i += 1
            continue
        if ch in " \t\r":
            i += 1
            col += 1
            continue
        if ch == "#":
            while i < n and text[i] != "\n":
                i += 1
            continue
        start_col = col
        if ch.isdigit() or (ch == "." and i + 1 < n and text[i + 1].isdigit()):
            j = i
            while j < n and text[j].isdigit():
                j += 1
            if j < n and text[j] == ".":
                j += 1
                while j < n and text[j].isdigit():
                    j += 1
            if j < n and text[j] in "eE":
                k = j + 1
                if k < n and text[k] in "+-":
                    k += 1
                if k < n and text[k].isdigit():
                    j = k
                    while j < n and text[j].isdigit():
                        j += 1
            lit = text[i:j]
            try:
                val = float(lit)
            except ValueError:
                raise ModelParseError(f"bad number literal '{lit}'", line, start_col)
            kind = "NUM"
            if j < n and text[j] == "i" and (j + 1 >= n or not (text[j + 1].isalnum() or text[j + 1] == "_")):
                kind = "IMAG"
                j += 1
            toks.append(_Tok(kind, text[i:j], val, line, start_col))
            col += j - i
            i = j
            continue
        if ch.isalpha() or ch == "_":
            j = i
            while j < n and (text[j].isalnum() or text[j] == "_"):
                j += 1
            toks.append(_Tok("IDENT", text[i:j], None, line, start_col))
            col += j - i
            i = j
            continue
        if ch in _OPCHARS:
            toks.append(_Tok(ch, ch, None, line, start_col))
            i += 1
            col += 1
            continue
        raise ModelParseError(f"unexpected character {ch!r}", line, start_col)
    toks.append(_Tok("EOF", "", None, line, col))
    return toks


# ---------------------------------------------------------------------------
# Recursive-descent expression parser

_MAX_DEPTH = 120


class _ExprParser:
    def __init__(self, toks):
        self.toks = toks
        self.i = 0
        self.depth = 0

    def peek(self):
        return self.toks[self.i]

    def advance(self):
        tok = self.toks[self.i]
        if tok.kind != "EOF":
            self.i += 1
        return tok

    def expect(self, kind):
        tok = self.peek()
        if tok.kind != kind:
            raise ModelParseError(
                f"expected {kind!r}, found {tok.text or 'end of input'!r}",
                tok.line, tok.col)
        return self.advance()

    def parse_full(self):
        node = self.parse_expr()
        tok = self.peek()
        if tok.kind != "EOF":
            raise ModelParseError(f"unexpected trailing {tok.text!r}", tok.line, tok.col)
        return node

    def parse_expr(self):
        self.depth += 1
        if self.depth > _MAX_DEPTH:
            tok = self.peek()
            raise ModelParseError("expression nested too deeply", tok.line, tok.col)
        try:
            node = self.parse_term()
            while self.peek().kind in ("+", "-"):
                optok = self.advance()
                right = self.parse_term()
                node = Bin(optok.kind, node, right, pos=optok.pos)
            return node
        finally:
            self.depth -= 1

    def parse_term(self):
        node = self.parse_unary()
        while self.peek().kind == "*":
            optok = self.advance()
            right = self.parse_unary()
            node = Bin("*", node, right, pos=optok.pos)
        return node

    def parse_unary(self):
        tok = self.peek()
        if tok.kind == "-":
            self.advance()
            return Neg(self.parse_unary(), pos=tok.pos)
        return self.parse_power()

    def parse_power(self):
        node = self.parse_postfix()
        while self.peek().kind == "^":
            optok = self.advance()
            etok = self.expect("NUM")
            if etok.value != int(etok.value) or "." in etok.text or "e" in etok.text.lower():
                raise ModelParseError("exponent must be an integer literal",
                                      etok.line, etok.col)
            node = Pow(node, int(etok.value), pos=optok.pos)
        return node

    def parse_postfix(self):
        node = self.parse_atom()
        while self.peek().kind == ".":
            dot = self.advance()
            name = self.expect("IDENT")
            if name.text != "hc":
                raise ModelParseError(f"unknown postfix '.{name.text}'",
                                      name.line, name.col)
            self.expect("(")
            self.expect(")")
            node = Hc(node, pos=dot.pos)
        return node

    def parse_atom(self):
        tok = self.peek()
        if tok.kind == "NUM":
            self.advance()
            return Num(tok.value, pos=tok.pos)
        if tok.kind == "IMAG":
            self.advance()
            return Imag(tok.value, pos=tok.pos)
        if tok.kind == "(":
            self.advance()
            node = self.parse_expr()
            self.expect(")")
            return node
        if tok.kind == "IDENT":
            self.advance()
            if tok.text == "i":
                return Imag(1.0, pos=tok.pos)
            if tok.text == "t":
                return TimeVar(pos=tok.pos)
            if self.peek().kind == "(":
                self.advance()
                args = [self.parse_expr()]
                while self.peek().kind == ",":
                    self.advance()
                    args.append(self.parse_expr())
                self.expect(")")
                return Call(tok.text, tuple(args), pos=tok.pos)
            return Ref(tok.text, pos=tok.pos)
        raise ModelParseError(
            f"expected a value, found {tok.text or 'end of input'!r}",
            tok.line, tok.col)


def _parse_expression(text, first_line=1):
    return _ExprParser(_tokenize(text, first_line)).parse_full()


# ---------------------------------------------------------------------------
# Lowering typed values: ("c", complex) | ("f", t->complex) | ("o", OperatorExpr)


_PRIMARIES = {
    "a": (destroy, FIELD),
    "adag": (create, FIELD),
    "n": (number, FIELD),
    "x": (position, FIELD),
    "p": (momentum, FIELD),
    "sp": (sigma_plus, SPIN),
    "sm": (sigma_minus, SPIN),
    "sz": (sigma_z, SPIN),
}
_SCALAR_FUNCS = {"sqrt": cmath.sqrt, "sin": cmath.sin, "cos": cmath.cos,
                 "exp": cmath.exp}
_RESERVED = (set(_PRIMARIES) | set(_SCALAR_FUNCS)
             | {"tr", "hc", "i", "t"})


def _err(msg, node):
    raise ModelParseError(msg, node.pos[0], node.pos[1])


class _Lowerer:
    """Turns ASTs into scalars, time functions, or operator expressions."""

    def __init__(self, freedoms, params, allow_time=True):
        self.freedoms = freedoms  # name -> (index, ptype)
        self.params = params      # name -> complex
        self.allow_time = allow_time

    def scalar(self, node):
        kind, val = self.lower(node)
        if kind != "c":
            _err("expected a constant scalar here", node)
        return val

    def operator(self, node):
        kind, val = self.lower(node)
        if kind == "o":
            return val
        _err("expected an operator expression here", node)

    def lower(self, node):
        if isinstance(node, Num):
            return ("c", complex(node.value))
        if isinstance(node, Imag):
            return ("c", complex(0.0, node.value))
        if isinstance(node, TimeVar):
            if not self.allow_time:
                _err("'t' is not allowed in this context", node)
            return ("f", lambda t: complex(t))
        if isinstance(node, Ref):
            if node.name in self.params:
                return ("c", self.params[node.name])
            if node.name in self.freedoms:
                _err(f"freedom '{node.name}' used without an operator "
                     "(write a(...), sp(...), ...)", node)
            _err(f"unknown identifier '{node.name}'", node)
        if isinstance(node, Neg):
            return self._neg(self.lower(node.child), node)
        if isinstance(node, Bin):
            return self._bin(node)
        if isinstance(node, Pow):
            return self._pow(node)
        if isinstance(node, Hc):
            return self._hc(self.lower(node.child), node)
        if isinstance(node, Call):
            return self._call(node)
        raise AssertionError(f"unhandled node {node!r}")

    def _neg(self, v, node):
        kind, val = v
        if kind == "c":
            return ("c", -val)
        if kind == "f":
            return ("f", lambda t, f=val: -f(t))
        return ("o", ScalarMul(-1.0, val))

    def _hc(self, v, node):
        kind, val = v
        if kind == "c":
            return ("c", val.conjugate())
        if kind == "f":
            return ("f", lambda t, f=val: complex(f(t)).conjugate())
        return ("o", val.hc())

    def _bin(self, node):
        lk, lv = self.lower(node.left)
        rk, rv = self.lower(node.right)
        op = node.op
        if op in ("+", "-"):
            if lk == "o" and rk == "o":
                return ("o", lv + rv if op == "+" else lv - rv)
            if "o" in (lk, rk):
                _err("cannot add a scalar and an operator", node)
            if lk == "c" and rk == "c":
                return ("c", lv + rv if op == "+" else lv - rv)
            lf = lv if lk == "f" else (lambda t, z=lv: z)
            rf = rv if rk == "f" else (lambda t, z=rv: z)
            if op == "+":
                return ("f", lambda t, f=lf, g=rf: f(t) + g(t))
            return ("f", lambda t, f=lf, g=rf: f(t) - g(t))
        # multiplication
        if lk == "o" and rk == "o":
            return ("o", lv * rv)
        if lk == "c" and rk == "c":
            return ("c", lv * rv)
        if lk == "f" and rk == "f":
            return ("f", lambda t, f=lv, g=rv: f(t) * g(t))
        if "o" in (lk, rk):
            okind, oval = (lk, lv) if lk == "o" else (rk, rv)
            skind, sval = (rk, rv) if lk == "o" else (lk, lv)
            if skind == "c":
                return ("o", ScalarMul(sval, oval))
            return ("o", TimeFnMul(sval, oval))
        # const * timefn
        f = lv if lk == "f" else rv
        z = lv if lk == "c" else rv
        return ("f", lambda t, g=f, w=z: w * g(t))

    def _pow(self, node):
        kind, val = self.lower(node.child)
        k = node.exponent
        if kind == "c":
            return ("c", val ** k)
        if kind == "f":
            return ("f", lambda t, f=val, e=k: f(t) ** e)
        try:
            return ("o", Power(val, k))
        except ValueError as e:
            _err(str(e), node)

    def _call(self, node):
        name = node.name
        if name in _SCALAR_FUNCS:
            if len(node.args) != 1:
                _err(f"{name}() takes one argument", node)
            kind, val = self.lower(node.args[0])
            fn = _SCALAR_FUNCS[name]
            if kind == "c":
                return ("c", fn(val))
            if kind == "f":
                return ("f", lambda t, f=val, g=fn: g(f(t)))
            _err(f"{name}() applies to scalars, not operators", node)
        if name in _PRIMARIES or name == "tr":
            return ("o", self._primary(node))
        _err(f"unknown function '{name}'", node)

    def _freedom_arg(self, node, arg, want_ptype, opname):
        if not isinstance(arg, Ref):
            _err(f"{opname}() expects a freedom name", arg if isinstance(arg, Node) else node)
        if arg.name not in self.freedoms:
            _err(f"unknown freedom '{arg.name}'", arg)
        idx, ptype = self.freedoms[arg.name]
        if ptype is not want_ptype:
            _err(f"{opname}() needs a {want_ptype.name.lower()} freedom, "
                 f"'{arg.name}' is {ptype.name.lower()}", arg)
        return idx

    def _int_arg(self, node, arg, opname):
        if not isinstance(arg, Num) or arg.value != int(arg.value):
            _err(f"{opname}() level arguments must be integer literals",
                 arg if isinstance(arg, Node) else node)
        return int(arg.value)

    def _primary(self, node):
        name = node.name
        if name == "tr":
            if len(node.args) != 3:
                _err("tr() takes (freedom, i, j)", node)
            idx = self._freedom_arg(node, node.args[0], ATOM, "tr")
            i = self._int_arg(node, node.args[1], "tr")
            j = self._int_arg(node, node.args[2], "tr")
            try:
                return transition(idx, i, j)
            except ValueError as e:
                _err(str(e), node)
        builder, want = _PRIMARIES[name]
        if len(node.args) != 1:
            _err(f"{name}() takes one freedom argument", node)
        idx = self._freedom_arg(node, node.args[0], want, name)
        return builder(idx)


# ---------------------------------------------------------------------------
# Canonical printing (inverse of parsing up to normalization)


def _fmt_num(v: float) -> str:
    return repr(float(v))


_PREC_ADD, _PREC_MUL, _PREC_NEG, _PREC_POW, _PREC_POSTFIX, _PREC_ATOM = 1, 2, 3, 4, 5, 6


def _node_prec(node):
    if isinstance(node, Bin):
        return _PREC_ADD if node.op in "+-" else _PREC_MUL
    if isinstance(node, Neg):
        return _PREC_NEG
    if isinstance(node, Pow):
        return _PREC_POW
    if isinstance(node, Hc):
        return _PREC_POSTFIX
    return _PREC_ATOM


def _print_node(node, minprec=0):
    if isinstance(node, Num):
        s = _fmt_num(node.value)
    elif isinstance(node, Imag):
        s = _fmt_num(node.value) + "i"
    elif isinstance(node, Ref):
        s = node.name
    elif isinstance(node, TimeVar):
        s = "t"
    elif isinstance(node, Call):
        s = f"{node.name}({', '.join(_print_node(a) for a in node.args)})"
    elif isinstance(node, Hc):
        # a trailing .hc() after a bare number would lex as part of the
        # literal, so literals get parenthesized too
        child = _print_node(node.child, _PREC_POSTFIX)
        if isinstance(node.child, (Num, Imag)):
            child = f"({child})"
        s = child + ".hc()"
    elif isinstance(node, Pow):
        s = _print_node(node.child, _PREC_POSTFIX) + "^" + str(node.exponent)
    elif isinstance(node, Neg):
        s = "-" + _print_node(node.child, _PREC_NEG)
    elif isinstance(node, Bin):
        p = _node_prec(node)
        if node.op in "+-":
            s = (_print_node(node.left, p) + " " + node.op + " "
                 + _print_node(node.right, p + 1))
        else:
            s = _print_node(node.left, p) + node.op + _print_node(node.right, p + 1)
    else:
        raise AssertionError(f"unhandled node {node!r}")
    if _node_prec(node) < minprec:
        return f"({s})"
    return s


# ---------------------------------------------------------------------------
# Section-level parsing


_PTYPE_NAMES = {"field": FIELD, "spin": SPIN, "atom": ATOM}
_SECTION_NAMES = ("freedoms", "params", "hamiltonian", "lindblads",
                  "initial", "output", "run")
_RUN_KEYS = ("dt", "numdts", "numsteps", "trajectories", "seed", "unraveling",
             "integrator", "eps", "moving", "cutoff_epsilon", "pad",
             "shift_accuracy", "pipe")
_UNRAVELINGS = {"qsd": Unraveling.QSD, "jump": Unraveling.JUMP,
                "orthojump": Unraveling.ORTHO_JUMP}


@dataclass(frozen=True)
class FreedomDecl:
    name: str
    ptype_name: str
    dim: int


@dataclass(frozen=True)
class InitialDecl:
    freedom: str
    ctor: str          # fock | coherent | down | up | level | amps
    args: tuple = ()


@dataclass(frozen=True)
class ModelFile:
    freedoms: tuple
    params: tuple          # ((name, ast), ...)
    hamiltonian: Node
    lindblads: tuple
    initial: tuple
    outputs: tuple         # ((filename, ast), ...)
    run: tuple             # ((key, normalized value), ...) sorted by _RUN_KEYS

    def run_dict(self):
        return dict(self.run)


def _strip_comment(line):
    pos = line.find("#")
    return line if pos < 0 else line[:pos]


def _split_sections(text):
    sections = {}
    current = None
    order = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = _strip_comment(raw)
        stripped = line.strip()
        if not stripped:
            continue
        if stripped.endswith(":") and stripped[:-1].strip().isidentifier() \
                and not line[:1].isspace():
            name = stripped[:-1].strip()
            if name not in _SECTION_NAMES:
                raise ModelParseError(f"unknown section '{name}'", lineno, 1)
            if name in sections:
                raise ModelParseError(f"duplicate section '{name}'", lineno, 1)
            sections[name] = []
            order.append(name)
            current = name
            continue
        if current is None:
            raise ModelParseError("content before any section header", lineno, 1)
        sections[current].append((lineno, line))
    return sections


def _words(line):
    return line.split()


def _parse_freedoms(body):
    decls = []
    seen = set()
    for lineno, line in body:
        w = _words(line)
        if len(w) < 2:
            raise ModelParseError("freedom declaration needs 'name type [dim]'",
                                  lineno, 1)
        name, tname = w[0], w[1]
        if not name.isidentifier():
            raise ModelParseError(f"bad freedom name '{name}'", lineno, 1)
        if name in _RESERVED:
            raise ModelParseError(f"'{name}' shadows a builtin", lineno, 1)
        if name in seen:
            raise ModelParseError(f"duplicate freedom '{name}'", lineno, 1)
        if tname not in _PTYPE_NAMES:
            raise ModelParseError(f"unknown freedom type '{tname}' "
                                  "(expected field, spin or atom)", lineno, 1)
        if tname == "spin":
            if len(w) > 3 or (len(w) == 3 and w[2] != "2"):
                raise ModelParseError("spin freedoms have dimension 2", lineno, 1)
            dim = 2
        else:
            if len(w) != 3:
                raise ModelParseError(f"{tname} freedom needs a dimension", lineno, 1)
            try:
                dim = int(w[2])
            except ValueError:
                raise ModelParseError(f"bad dimension '{w[2]}'", lineno, 1)
            least = 2 if tname == "atom" else 1
            if dim < least:
                raise ModelParseError(f"{tname} dimension must be >= {least}",
                                      lineno, 1)
        seen.add(name)
        decls.append(FreedomDecl(name, tname, dim))
    if not decls:
        raise ModelParseError("at least one freedom is required")
    return tuple(decls)


def _parse_params(body, freedoms):
    names = {d.name for d in freedoms}
    # freedoms stay visible so `k = a(m)` gets a type error, not a name error
    env = {d.name: (k, _PTYPE_NAMES[d.ptype_name]) for k, d in enumerate(freedoms)}
    params = []
    values = {}
    for lineno, line in body:
        if "=" not in line:
            raise ModelParseError("params lines look like 'name = expression'",
                                  lineno, 1)
        name, _, rhs = line.partition("=")
        name = name.strip()
        if not name.isidentifier():
            raise ModelParseError(f"bad parameter name '{name}'", lineno, 1)
        if name in _RESERVED:
            raise ModelParseError(f"'{name}' shadows a builtin", lineno, 1)
        if name in names or name in values:
            raise ModelParseError(f"'{name}' is already defined", lineno, 1)
        ast = _parse_expression(rhs, lineno)
        low = _Lowerer(env, values, allow_time=False)
        values[name] = low.scalar(ast)
        params.append((name, ast))
    return tuple(params), values


def _parse_initial(body, freedoms):
    byname = {d.name: d for d in freedoms}
    decls = {}
    for lineno, line in body:
        w = _words(line)
        if len(w) < 2:
            raise ModelParseError("initial lines look like 'freedom ctor [args]'",
                                  lineno, 1)
        fname, ctor = w[0], w[1]
        if fname not in byname:
            raise ModelParseError(f"unknown freedom '{fname}'", lineno, 1)
        if fname in decls:
            raise ModelParseError(f"duplicate initial state for '{fname}'", lineno, 1)
        rest = line.split(None, 2)[2] if len(w) > 2 else ""
        ptype = byname[fname].ptype_name
        if ctor == "fock" and ptype == "field":
            args = (_parse_int(rest, lineno),)
        elif ctor == "coherent" and ptype == "field":
            args = (_parse_scalar_literal(rest, lineno),)
        elif ctor in ("down", "up") and ptype == "spin":
            if rest.strip():
                raise ModelParseError(f"'{ctor}' takes no arguments", lineno, 1)
            args = ()
        elif ctor == "level" and ptype == "atom":
            args = (_parse_int(rest, lineno),)
        elif ctor == "amps":
            parts = [p for p in rest.split(",") if p.strip()]
            if not parts:
                raise ModelParseError("amps needs a comma-separated list", lineno, 1)
            args = tuple(_parse_scalar_literal(p, lineno) for p in parts)
        else:
            raise ModelParseError(
                f"constructor '{ctor}' does not apply to a {ptype} freedom "
                "(field: fock/coherent/amps, spin: down/up/amps, atom: level/amps)",
                lineno, 1)
        decls[fname] = InitialDecl(fname, ctor, args)
    missing = [d.name for d in freedoms if d.name not in decls]
    if missing:
        raise ModelParseError(f"missing initial state for: {', '.join(missing)}")
    return tuple(decls[d.name] for d in freedoms)


def _parse_int(text, lineno):
    try:
        return int(text.strip())
    except ValueError:
        raise ModelParseError(f"expected an integer, found '{text.strip()}'", lineno, 1)


def _parse_scalar_literal(text, lineno):
    ast = _parse_expression(text, lineno)
    return _Lowerer({}, {}, allow_time=False).scalar(ast)


def _parse_run(body):
    raw = {}
    for lineno, line in body:
        if "=" not in line:
            raise ModelParseError("run lines look like 'key = value'", lineno, 1)
        key, _, rhs = line.partition("=")
        key = key.strip()
        rhs = rhs.strip()
        if key not in _RUN_KEYS:
            raise ModelParseError(f"unknown run key '{key}'", lineno, 1)
        if key in raw:
            raise ModelParseError(f"duplicate run key '{key}'", lineno, 1)
        raw[key] = (rhs, lineno)
    return raw


def _normalize_run(raw):
    """Fill defaults, coerce types; returns ((key, value), ...) in _RUN_KEYS order."""
    def number(key, default=None, required=False):
        if key not in raw:
            if required:
                raise ModelParseError(f"run section must set '{key}'")
            return default
        text, lineno = raw[key]
        val = _parse_scalar_literal(text, lineno)
        if abs(val.imag) > 0:
            raise ModelParseError(f"run key '{key}' must be real", lineno, 1)
        return val.real

    def integer(key, default=None, required=False, minimum=None):
        v = number(key, default, required)
        if v is None:
            return None
        if v != int(v):
            lineno = raw[key][1] if key in raw else 1
            raise ModelParseError(f"run key '{key}' must be an integer", lineno, 1)
        v = int(v)
        if minimum is not None and v < minimum:
            lineno = raw[key][1] if key in raw else 1
            raise ModelParseError(f"run key '{key}' must be >= {minimum}", lineno, 1)
        return v

    def word(key, default, choices):
        if key not in raw:
            return default
        text, lineno = raw[key]
        if text not in choices:
            raise ModelParseError(
                f"run key '{key}' must be one of {', '.join(sorted(choices))}",
                lineno, 1)
        return text

    out = {}
    out["dt"] = number("dt", required=True)
    if out["dt"] <= 0:
        raise ModelParseError("dt must be positive", raw["dt"][1], 1)
    out["numdts"] = integer("numdts", required=True, minimum=1)
    out["numsteps"] = integer("numsteps", required=True, minimum=0)
    out["trajectories"] = integer("trajectories", default=1, minimum=1)
    out["seed"] = integer("seed", default=0)
    out["unraveling"] = word("unraveling", "qsd", _UNRAVELINGS)
    out["integrator"] = word("integrator", "rk4", ("rk4", "adaptive"))
    out["eps"] = number("eps", default=1e-6)
    moving = integer("moving", default=None, minimum=0)
    if moving is None and any(k in raw for k in ("cutoff_epsilon", "pad", "shift_accuracy")):
        raise ModelParseError("moving-basis keys need 'moving = <count>'")
    if moving is not None:
        out["moving"] = moving
        out["cutoff_epsilon"] = number("cutoff_epsilon", default=0.01)
        out["pad"] = integer("pad", default=2, minimum=1)
        out["shift_accuracy"] = number("shift_accuracy", default=1e-6)
    if "pipe" in raw:
        text, lineno = raw["pipe"]
        parts = text.split()
        if len(parts) != 4:
            raise ModelParseError("pipe needs exactly 4 column indices", lineno, 1)
        try:
            out["pipe"] = tuple(int(p) for p in parts)
        except ValueError:
            raise ModelParseError("pipe indices must be integers", lineno, 1)
    else:
        out["pipe"] = (1, 2, 3, 4)
    return tuple((k, out[k]) for k in _RUN_KEYS if k in out)


# ---------------------------------------------------------------------------
# Whole-file parse


def parse_model(text: str) -> ModelFile:
    """Parse and type-check a model file; raises ModelParseError on bad input."""
    if isinstance(text, bytes):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError as e:
            raise ModelParseError(f"model file is not valid UTF-8: {e}")
    sections = _split_sections(text)
    for required in ("freedoms", "initial", "run"):
        if required not in sections:
            raise ModelParseError(f"missing required section '{required}'")
    freedoms = _parse_freedoms(sections["freedoms"])
    params, param_values = _parse_params(sections.get("params", ()), freedoms)
    initial = _parse_initial(sections["initial"], freedoms)
    run = _normalize_run(_parse_run(sections["run"]))

    env = {d.name: (k, _PTYPE_NAMES[d.ptype_name])
           for k, d in enumerate(freedoms)}
    low = _Lowerer(env, param_values)

    ham_ast = None
    if "hamiltonian" in sections and sections["hamiltonian"]:
        body = sections["hamiltonian"]
        chunks = []
        prev = body[0][0]
        for lineno, line in body:
            chunks.append("\n" * (lineno - prev))
            chunks.append(line)
            prev = lineno
        ham_ast = _parse_expression("".join(chunks), body[0][0])
        low.operator(ham_ast)

    lindblad_asts = []
    for lineno, line in sections.get("lindblads", ()):
        ast = _parse_expression(line, lineno)
        low.operator(ast)
        lindblad_asts.append(ast)

    outputs = []
    seen_files = set()
    for lineno, line in sections.get("output", ()):
        w = line.split(None, 1)
        if len(w) != 2:
            raise ModelParseError("output lines look like 'filename expression'",
                                  lineno, 1)
        fname, expr_text = w
        if fname in seen_files:
            raise ModelParseError(f"duplicate output file '{fname}'", lineno, 1)
        seen_files.add(fname)
        ast = _parse_expression(expr_text, lineno)
        low.operator(ast)
        outputs.append((fname, ast))
    if not outputs:
        raise ModelParseError("the output section must list at least one "
                              "'filename expression' line")

    run_d = dict(run)
    hi = 4 * len(outputs)
    for p in run_d["pipe"]:
        if not 1 <= p <= hi:
            raise ModelParseError(f"pipe index {p} outside 1..{hi}")

    return ModelFile(freedoms, params, ham_ast, tuple(lindblad_asts),
                     initial, tuple(outputs), run)


# ---------------------------------------------------------------------------
# Build runtime artifacts


def _initial_state(decl: InitialDecl, fdecl: FreedomDecl) -> StateVector:
    ptype = _PTYPE_NAMES[fdecl.ptype_name]
    if decl.ctor == "fock" or decl.ctor == "level":
        n = decl.args[0]
        if not 0 <= n < fdecl.dim:
            raise ModelValidationError(
                f"initial level {n} outside freedom '{fdecl.name}' "
                f"dimension {fdecl.dim}")
        return basis_state(fdecl.dim, n, ptype)
    if decl.ctor == "coherent":
        return coherent_state(fdecl.dim, decl.args[0])
    if decl.ctor == "down":
        return basis_state(2, 0, SPIN)
    if decl.ctor == "up":
        return basis_state(2, 1, SPIN)
    if decl.ctor == "amps":
        if len(decl.args) > fdecl.dim:
            raise ModelValidationError(
                f"{len(decl.args)} amplitudes exceed freedom '{fdecl.name}' "
                f"dimension {fdecl.dim}")
        amps = np.zeros(fdecl.dim, dtype=complex)
        amps[:len(decl.args)] = decl.args
        nrm = float(np.linalg.norm(amps))
        if nrm <= 0:
            raise ModelValidationError(
                f"initial amplitudes for '{fdecl.name}' are all zero")
        return StateVector([FreedomSpec(ptype, fdecl.dim)], amps / nrm)
    raise AssertionError(decl.ctor)


def _check_hermitian(h_expr, freedoms, timedep):
    """Random-vector adjointness on the truncation, top field level masked."""
    rng = np.random.Generator(np.random.PCG64(0x5EED))
    dims = tuple(f.dim_alloc for f in freedoms)
    total = math.prod(dims)

    def mask_top(buf):
        view = used_view(buf, freedoms)
        for k, fr in enumerate(freedoms):
            if fr.ptype is FIELD and fr.dim_used > 1:
                idx = [slice(None)] * view.ndim
                idx[1 + k] = fr.dim_used - 1
                view[tuple(idx)] = 0.0

    def rand_state():
        g = rng.standard_normal((2, total))
        buf = np.ascontiguousarray((g[0] + 1j * g[1]).reshape(1, total))
        mask_top(buf)
        return buf

    times = (0.0, 0.5, 1.0) if timedep else (0.0,)
    for t in times:
        for _ in range(2):
            psi = rand_state()
            phi = rand_state()
            hpsi = psi.copy()
            hphi = phi.copy()
            _apply_node(h_expr, hpsi, freedoms, t)
            _apply_node(h_expr, hphi, freedoms, t)
            mask_top(hpsi)
            mask_top(hphi)
            a = complex(row_dot(phi, hpsi)[0])
            b = complex(row_dot(psi, hphi)[0])
            defect = abs(a - b.conjugate()) / max(1.0, abs(a), abs(b))
            if defect > 1e-8:
                raise ModelValidationError(
                    "hamiltonian is not Hermitian on the truncated space "
                    f"(adjointness defect {defect:.3g} at t={t})")


def _contains_timevar(node):
    if isinstance(node, TimeVar):
        return True
    if isinstance(node, (Neg, Pow, Hc)):
        return _contains_timevar(node.child)
    if isinstance(node, Bin):
        return _contains_timevar(node.left) or _contains_timevar(node.right)
    if isinstance(node, Call):
        return any(_contains_timevar(a) for a in node.args)
    return False


def build_model(mf: ModelFile, out_dir: str = None):
    """Lower a parsed model to (ModelOperators, psi0, RunConfig, OutputSpec)."""
    env = {d.name: (k, _PTYPE_NAMES[d.ptype_name])
           for k, d in enumerate(mf.freedoms)}
    _, param_values = _parse_params_from(mf)
    low = _Lowerer(env, param_values)

    hamiltonian = low.operator(mf.hamiltonian) if mf.hamiltonian is not None else None
    lindblads = tuple(low.operator(ast) for ast in mf.lindblads)
    model = ModelOperators(hamiltonian, lindblads)

    parts = [_initial_state(decl, fdecl)
             for decl, fdecl in zip(mf.initial, mf.freedoms)]
    psi0 = product_state(parts)

    if hamiltonian is not None:
        _check_hermitian(hamiltonian, psi0.freedoms,
                         _contains_timevar(mf.hamiltonian))

    run = mf.run_dict()
    moving = None
    if "moving" in run:
        moving = MovingBasisParams(
            n_moving=run["moving"],
            cutoff_epsilon=run["cutoff_epsilon"],
            pad_size=run["pad"],
            shift_accuracy=run["shift_accuracy"])
        n_fields = sum(1 for d in mf.freedoms if d.ptype_name == "field")
        lead = [d.ptype_name for d in mf.freedoms[:run["moving"]]]
        if run["moving"] > n_fields or any(p != "field" for p in lead):
            raise ModelValidationError(
                "moving count must cover only the leading field freedoms")
    cfg = RunConfig(
        dt=run["dt"], numdts=run["numdts"], numsteps=run["numsteps"],
        n_trajectories=run["trajectories"], seed=run["seed"],
        unraveling=_UNRAVELINGS[run["unraveling"]],
        integrator=IntegratorConfig(run["integrator"], run["eps"]),
        moving=moving)

    names = []
    ops = []
    for fname, ast in mf.outputs:
        if out_dir:
            fname = os.path.join(out_dir, fname)
        names.append(fname)
        ops.append(low.operator(ast))
    outspec = OutputSpec(tuple(ops), tuple(names), run["pipe"])
    return model, psi0, cfg, outspec


def _parse_params_from(mf):
    env = {d.name: (k, _PTYPE_NAMES[d.ptype_name])
           for k, d in enumerate(mf.freedoms)}
    values = {}
    for name, ast in mf.params:
        values[name] = _Lowerer(env, values, allow_time=False).scalar(ast)
    return mf.params, values


def load_model(path: str, out_dir: str = None):
    """Read, parse and build a model file from disk."""
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    mf = parse_model(text)
    return (mf,) + build_model(mf, out_dir=out_dir)


# ---------------------------------------------------------------------------
# Canonical echo


def _fmt_complex(z: complex) -> str:
    z = complex(z)
    if z.imag == 0:
        return _fmt_num(z.real)
    if z.real == 0:
        return _fmt_num(z.imag) + "i"
    sign = "+" if z.imag >= 0 else "-"
    return f"{_fmt_num(z.real)} {sign} {_fmt_num(abs(z.imag))}i"


def print_model(mf: ModelFile) -> str:
    """Stable normalized text form; parsing it again reproduces the model."""
    out = ["freedoms:"]
    for d in mf.freedoms:
        dim = "" if d.ptype_name == "spin" else f" {d.dim}"
        out.append(f"  {d.name} {d.ptype_name}{dim}")
    if mf.params:
        out.append("")
        out.append("params:")
        for name, ast in mf.params:
            out.append(f"  {name} = {_print_node(ast)}")
    if mf.hamiltonian is not None:
        out.append("")
        out.append("hamiltonian:")
        out.append(f"  {_print_node(mf.hamiltonian)}")
    if mf.lindblads:
        out.append("")
        out.append("lindblads:")
        for ast in mf.lindblads:
            out.append(f"  {_print_node(ast)}")
    out.append("")
    out.append("initial:")
    for decl in mf.initial:
        if decl.ctor in ("down", "up"):
            out.append(f"  {decl.freedom} {decl.ctor}")
        elif decl.ctor in ("fock", "level"):
            out.append(f"  {decl.freedom} {decl.ctor} {decl.args[0]}")
        elif decl.ctor == "coherent":
            out.append(f"  {decl.freedom} coherent {_fmt_complex(decl.args[0])}")
        else:
            amps = ", ".join(_fmt_complex(a) for a in decl.args)
            out.append(f"  {decl.freedom} amps {amps}")
    out.append("")
    out.append("output:")
    for fname, ast in mf.outputs:
        out.append(f"  {fname} {_print_node(ast)}")
    out.append("")
    out.append("run:")
    for key, val in mf.run:
        if key == "pipe":
            out.append(f"  pipe = {' '.join(str(p) for p in val)}")
        elif key in ("unraveling", "integrator"):
            out.append(f"  {key} = {val}")
        elif isinstance(val, int):
            out.append(f"  {key} = {val}")
        else:
            out.append(f"  {key} = {_fmt_num(val)}")
    return "\n".join(out) + "\n"
