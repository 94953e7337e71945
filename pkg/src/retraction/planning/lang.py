"""Rule language for the task-planning domain.

Surface syntax (a small logic-programming fragment):

    head :- lit, lit, not lit.
    fact.
    :- lit, lit.              % constraint (empty head)
    % comment to end of line

Terms are variables (capitalized, plus the conventional time variable `t`),
lowercase/numeric constants, coordinate pairs `(X,Y)`, and time shifts
`t+1`.  Every head variable must occur in a positive body literal (safety).
"""
from __future__ import annotations

import re
from dataclasses import dataclass


class ParseError(ValueError):
    def __init__(self, msg: str, line: int, col: int):
        super().__init__(f"{msg} (line {line}, column {col})")
        self.line = line
        self.col = col


class SafetyError(ValueError):
    def __init__(self, variable: str, rule_line: int):
        super().__init__(
            f"unsafe variable '{variable}' in rule head (line {rule_line}): "
            "it never occurs in a positive body literal"
        )
        self.variable = variable


@dataclass(frozen=True)
class Var:
    name: str

    def __str__(self):
        return self.name


@dataclass(frozen=True)
class Const:
    value: object  # str or int

    def __str__(self):
        return str(self.value)


@dataclass(frozen=True)
class Pair:
    a: object
    b: object

    def __str__(self):
        return f"({self.a},{self.b})"


@dataclass(frozen=True)
class Shift:
    """A shifted time term such as `t+1`."""

    var: Var
    offset: int

    def __str__(self):
        return f"{self.var}+{self.offset}"


@dataclass(frozen=True)
class Atom:
    name: str
    args: tuple = ()

    def __str__(self):
        if not self.args:
            return self.name
        return f"{self.name}({','.join(str(a) for a in self.args)})"


@dataclass(frozen=True)
class Literal:
    atom: Atom
    negated: bool = False

    def __str__(self):
        return ("not " if self.negated else "") + str(self.atom)


@dataclass(frozen=True)
class Rule:
    head: Atom | None  # None = integrity constraint
    body: tuple[Literal, ...] = ()
    line: int = 0

    @property
    def is_fact(self) -> bool:
        return self.head is not None and not self.body

    def __str__(self):
        b = ", ".join(str(l) for l in self.body)
        if self.head is None:
            return f":- {b}."
        return f"{self.head}." if not self.body else f"{self.head} :- {b}."


_TOKEN_RE = re.compile(
    r"""(?P<ws>\s+)
      | (?P<comment>%[^\n]*)
      | (?P<implies>:-)
      | (?P<name>[a-zA-Z_][a-zA-Z0-9_]*)
      | (?P<int>\d+)
      | (?P<sym>[(),.+])
    """,
    re.VERBOSE,
)


def _tokenize(text: str):
    tokens = []
    line, col = 1, 1
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise ParseError(f"unexpected character {text[pos]!r}", line, col)
        kind = m.lastgroup
        val = m.group()
        if kind not in ("ws", "comment"):
            tokens.append((kind if kind != "sym" else val, val, line, col))
        nl = val.count("\n")
        if nl:
            line += nl
            col = len(val) - val.rfind("\n")
        else:
            col += len(val)
        pos = m.end()
    tokens.append(("eof", "", line, col))
    return tokens


def _is_variable(name: str) -> bool:
    # capitalized identifiers, plus the conventional time variable
    return name[0].isupper() or name == "t"


class _Parser:
    def __init__(self, text: str):
        self.toks = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.toks[self.i]

    def take(self, kind=None):
        tok = self.toks[self.i]
        if kind is not None and tok[0] != kind:
            raise ParseError(f"expected {kind!r}, found {tok[1]!r}", tok[2], tok[3])
        self.i += 1
        return tok

    def parse_program(self) -> tuple[Rule, ...]:
        rules = []
        while self.peek()[0] != "eof":
            rules.append(self.parse_rule())
        return tuple(rules)

    def parse_rule(self) -> Rule:
        tok = self.peek()
        rule_line = tok[2]
        head = None
        if tok[0] != "implies":
            head = self.parse_atom()
        body = ()
        if self.peek()[0] == "implies":
            self.take("implies")
            body = [self.parse_literal()]
            while self.peek()[0] == ",":
                self.take(",")
                body.append(self.parse_literal())
            body = tuple(body)
        self.take(".")
        rule = Rule(head=head, body=body, line=rule_line)
        _check_safety(rule)
        return rule

    def parse_literal(self) -> Literal:
        tok = self.peek()
        negated = False
        if tok[0] == "name" and tok[1] == "not":
            self.take()
            negated = True
        return Literal(atom=self.parse_atom(), negated=negated)

    def parse_atom(self) -> Atom:
        kind, name, line, col = self.take()
        if kind != "name":
            raise ParseError(f"expected predicate name, found {name!r}", line, col)
        args = ()
        if self.peek()[0] == "(":
            self.take("(")
            args = [self.parse_term()]
            while self.peek()[0] == ",":
                self.take(",")
                args.append(self.parse_term())
            self.take(")")
            args = tuple(args)
        return Atom(name=name, args=args)

    def parse_term(self):
        kind, val, line, col = self.peek()
        if kind == "(":
            self.take("(")
            a = self.parse_term()
            self.take(",")
            b = self.parse_term()
            self.take(")")
            return Pair(a, b)
        if kind == "int":
            self.take()
            return Const(int(val))
        if kind != "name":
            raise ParseError(f"expected a term, found {val!r}", line, col)
        self.take()
        term = Var(val) if _is_variable(val) else Const(val)
        if isinstance(term, Var) and self.peek()[0] == "+":
            self.take("+")
            k, off, l2, c2 = self.take()
            if k != "int":
                raise ParseError(f"expected integer offset, found {off!r}", l2, c2)
            return Shift(var=term, offset=int(off))
        return term


def _term_vars(term):
    if isinstance(term, Var):
        yield term.name
    elif isinstance(term, Shift):
        yield term.var.name
    elif isinstance(term, Pair):
        yield from _term_vars(term.a)
        yield from _term_vars(term.b)


def _atom_vars(atom: Atom):
    for a in atom.args:
        yield from _term_vars(a)


def _check_safety(rule: Rule) -> None:
    # the time variable is implicitly ranged over the horizon, hence safe
    positive = {"t"}
    for lit in rule.body:
        if not lit.negated:
            positive.update(_atom_vars(lit.atom))
    unsafe = []
    if rule.head is not None:
        unsafe += [v for v in _atom_vars(rule.head) if v not in positive]
    for lit in rule.body:
        if lit.negated:
            unsafe += [v for v in _atom_vars(lit.atom) if v not in positive]
    if unsafe:
        raise SafetyError(unsafe[0], rule.line)


def parse_program(text: str) -> tuple[Rule, ...]:
    """Parse rule source into a tuple of safety-checked rules."""
    return _Parser(text).parse_program()
