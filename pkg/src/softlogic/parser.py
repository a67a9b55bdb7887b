"""Parsing of model files, relational data files and IDX image archives.

Model file grammar (one statement per line; a line continues when it ends
or the next one starts with an operator)::

    predicate Sum/3 target
    neural Neural { layers: 32, 10; activations: relu, softmax; features: f.tsv }
    1.0: Neural(I1, X) & Neural(I2, Y) & DigitSum(X, Y, Z) -> Sum(I1, I2, Z) ^2
    1.0: Neural(I1, +X) >= Sum(I1, I2, Z) {X: PossibleDigits(X, Z)} ^2
    Sum(I1, I2, +Z) = 1 .

Identifiers inside atoms are logic variables, quoted strings and bare
integers are constants, and ``+X`` marks a summation variable.
"""
from __future__ import annotations

import gzip
import os
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Union

import numpy as np

from softlogic.logic import (
    ArithmeticRule,
    Atom,
    Constant,
    FilterClause,
    LinearExpression,
    LinearTerm,
    Literal,
    LogicalRule,
    Predicate,
    PredicateKind,
    Rule,
    SourcePos,
    StructuralError,
    Variable,
)
from softlogic.neural import ProviderSpec


class ParseError(ValueError):
    def __init__(self, message: str, line: int = 0, col: int = 0):
        super().__init__(f"{line}:{col}: {message}" if line else message)
        self.line = line
        self.col = col


class DataError(ValueError):
    """Malformed or inconsistent relational data."""


@dataclass
class Program:
    predicates: dict[str, Predicate] = field(default_factory=dict)
    rules: tuple[Rule, ...] = ()
    neural: dict[str, ProviderSpec] = field(default_factory=dict)

    def weighted_rules(self) -> list[Rule]:
        return [r for r in self.rules if not r.hard]


# --- lexer -------------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>[ \t\r]+)
  | (?P<comment>\#[^\n]*)
  | (?P<newline>\n)
  | (?P<number>\d+(?:\.\d+)?(?:[eE][+-]?\d+)?)
  | (?P<string>"(?:[^"\\]|\\.)*"|'(?:[^'\\]|\\.)*')
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op>->|<=|>=|[=&|!~+\-*(){},:.^/])
    """,
    re.VERBOSE,
)

_CONTINUE_AFTER = {"&", "|", "->", "+", "-", "*", "<=", ">=", "=", ",", ":", "!", "~", "^", "{"}
_CONTINUE_BEFORE = {"&", "|", "->", "<=", ">=", "=", "+", "*", "{", "^", "."}


@dataclass(frozen=True)
class Token:
    kind: str
    text: str
    line: int
    col: int


def _tokenize(text: str) -> list[Token]:
    raw: list[Token] = []
    line, line_start, i = 1, 0, 0
    while i < len(text):
        m = _TOKEN_RE.match(text, i)
        if m is None:
            raise ParseError(f"unexpected character {text[i]!r}", line, i - line_start + 1)
        kind = m.lastgroup
        if kind == "newline":
            raw.append(Token("newline", "\n", line, i - line_start + 1))
            line += 1
            line_start = m.end()
        elif kind not in ("ws", "comment"):
            raw.append(Token(kind, m.group(), line, i - line_start + 1))
        i = m.end()

    # drop newlines that fall inside parentheses or next to a binary operator
    out: list[Token] = []
    depth = 0
    for idx, tok in enumerate(raw):
        if tok.kind == "op" and tok.text == "(":
            depth += 1
        elif tok.kind == "op" and tok.text == ")":
            depth -= 1
        if tok.kind == "newline":
            prev = out[-1] if out else None
            nxt = next((t for t in raw[idx + 1 :] if t.kind != "newline"), None)
            if prev is None or prev.kind == "newline":
                continue
            if depth > 0 or (prev.kind == "op" and prev.text in _CONTINUE_AFTER):
                continue
            if nxt is not None and nxt.kind == "op" and nxt.text in _CONTINUE_BEFORE:
                continue
        out.append(tok)
    out.append(Token("eof", "", line, 1))
    return out


# --- neural binding blocks ----------------------------------------------------

_NEURAL_RE = re.compile(r"^[ \t]*neural[ \t]+([A-Za-z_]\w*)[ \t]*\{(.*?)\}", re.S | re.M)


def _parse_neural_block(name: str, body: str, line: int) -> ProviderSpec:
    entries: dict[str, str] = {}
    for raw in re.split(r"[;\n]", body):
        raw = raw.split("#", 1)[0].strip()
        if not raw:
            continue
        if ":" not in raw:
            raise ParseError(f"neural block entry without ':' ({raw!r})", line)
        key, value = raw.split(":", 1)
        entries[key.strip()] = value.strip()

    def items(key):
        return [v for v in re.split(r"[,\s]+", entries.get(key, "")) if v]

    known = {"layers", "activations", "features", "classes", "seed", "input"}
    unknown = set(entries) - known
    if unknown:
        raise ParseError(f"unknown neural block keys {sorted(unknown)}", line)
    if "layers" not in entries:
        raise ParseError(f"neural block for {name} needs 'layers'", line)
    try:
        layers = tuple(int(v) for v in items("layers"))
        seed = int(entries.get("seed", "0"))
        input_width = int(entries["input"]) if "input" in entries else None
    except ValueError as exc:
        raise ParseError(f"neural block for {name}: {exc}", line) from None
    classes = tuple(v.strip("\"'") for v in items("classes")) or tuple(
        str(i) for i in range(layers[-1])
    )
    activations = tuple(items("activations")) or tuple(["relu"] * (len(layers) - 1) + ["softmax"])
    try:
        return ProviderSpec(
            layers=layers,
            activations=activations,
            input_width=input_width,
            features=entries.get("features", "").strip("\"'") or None,
            classes=classes,
            seed=seed,
        )
    except ValueError as exc:
        raise ParseError(f"neural block for {name}: {exc}", line) from None


# --- recursive descent parser -----------------------------------------------------


class _Parser:
    def __init__(self, tokens: list[Token], predicates: dict[str, Predicate]):
        self.toks = tokens
        self.i = 0
        self.predicates = predicates

    @property
    def tok(self) -> Token:
        return self.toks[self.i]

    def peek(self, offset=1) -> Token:
        return self.toks[min(self.i + offset, len(self.toks) - 1)]

    def at(self, text: str) -> bool:
        return self.tok.kind == "op" and self.tok.text == text

    def error(self, msg: str, tok: Optional[Token] = None):
        tok = tok or self.tok
        return ParseError(msg, tok.line, tok.col)

    def expect(self, text: str) -> Token:
        if not self.at(text):
            raise self.error(f"expected {text!r}, found {self.tok.text or 'end of input'!r}")
        tok = self.tok
        self.i += 1
        return tok

    def end_statement(self):
        if self.tok.kind == "newline":
            self.i += 1
        elif self.tok.kind != "eof":
            raise self.error(f"unexpected {self.tok.text!r} after statement")

    def statements(self) -> Iterator[Union[Predicate, Rule]]:
        while self.tok.kind != "eof":
            if self.tok.kind == "newline":
                self.i += 1
                continue
            if self.tok.kind == "ident" and self.tok.text == "predicate" and self.peek().kind == "ident":
                yield self.declaration()
            else:
                yield self.rule()
            self.end_statement()

    def declaration(self) -> Predicate:
        start = self.tok
        self.i += 1
        name = self.tok.text
        self.i += 1
        self.expect("/")
        if self.tok.kind != "number":
            raise self.error("expected arity")
        arity = int(self.tok.text)
        self.i += 1
        if self.tok.kind != "ident":
            raise self.error("expected predicate kind (observed, target, neural)")
        try:
            kind = PredicateKind(self.tok.text.lower())
        except ValueError:
            raise self.error(f"unknown predicate kind {self.tok.text!r}") from None
        self.i += 1
        if name in self.predicates:
            raise ParseError(f"predicate {name} declared twice", start.line, start.col)
        try:
            pred = Predicate(name, arity, kind)
        except StructuralError as exc:
            raise ParseError(str(exc), start.line, start.col) from None
        self.predicates[name] = pred
        return pred

    def rule(self) -> Rule:
        start = self.tok
        pos = SourcePos(start.line, start.col)
        weight = None
        if self.tok.kind == "number" and self.peek().kind == "op" and self.peek().text == ":":
            weight = float(self.tok.text)
            self.i += 2
        arithmetic = self._statement_has_relation()
        try:
            if arithmetic:
                lhs = self.expression()
                relation = self.tok.text
                self.i += 1
                rhs = self.expression()
                filters = []
                while self.at("{"):
                    filters.append(self.filter_clause())
            else:
                body, head = self.clause()
            squared = self.suffix(weight is not None)
            if arithmetic:
                return ArithmeticRule(lhs, relation, rhs, tuple(filters), weight, squared, pos)
            return LogicalRule(tuple(body), tuple(head), weight, squared, pos)
        except StructuralError as exc:
            raise ParseError(str(exc), pos.line, pos.col) from None

    def _statement_has_relation(self) -> bool:
        j, depth = self.i, 0
        while self.toks[j].kind not in ("newline", "eof"):
            t = self.toks[j]
            if t.kind == "op":
                if t.text in "({":
                    depth += 1
                elif t.text in ")}":
                    depth -= 1
                elif depth == 0 and t.text in ("<=", ">=", "="):
                    return True
            j += 1
        return False

    def suffix(self, weighted: bool) -> bool:
        squared = False
        if self.at("^"):
            self.i += 1
            if self.tok.kind != "number" or self.tok.text not in ("1", "2"):
                raise self.error("exponent must be 1 or 2")
            squared = self.tok.text == "2"
            self.i += 1
        if self.at("."):
            if weighted:
                raise self.error("weighted rules do not end with '.'")
            self.i += 1
        elif not weighted:
            raise self.error("unweighted (hard) rule must end with '.'")
        return squared

    def clause(self) -> tuple[list[Literal], list[Literal]]:
        first = [self.literal()]
        sep = None
        while self.at("&") or self.at("|"):
            if sep is not None and self.tok.text != sep:
                raise self.error("cannot mix '&' and '|' without '->'")
            sep = self.tok.text
            self.i += 1
            first.append(self.literal())
        if self.at("->"):
            if sep == "|":
                raise self.error("disjunctive body is not supported")
            self.i += 1
            head = [self.literal()]
            while self.at("|"):
                self.i += 1
                head.append(self.literal())
            return first, head
        if sep == "&":
            raise self.error("conjunction needs an implication '->'")
        return [], first

    def literal(self) -> Literal:
        negated = False
        while self.at("!") or self.at("~"):
            negated = not negated
            self.i += 1
        return Literal(self.atom(), negated)

    def atom(self, allow_summation=True) -> Atom:
        tok = self.tok
        if tok.kind != "ident":
            raise self.error(f"expected atom, found {tok.text or 'end of input'!r}")
        pred = self.predicates.get(tok.text)
        if pred is None:
            raise self.error(f"undeclared predicate {tok.text!r}")
        self.i += 1
        self.expect("(")
        terms = []
        while True:
            terms.append(self.term(allow_summation))
            if self.at(","):
                self.i += 1
                continue
            break
        self.expect(")")
        if len(terms) != pred.arity:
            raise ParseError(
                f"{pred.name} expects {pred.arity} arguments, got {len(terms)}", tok.line, tok.col
            )
        return Atom(pred, tuple(terms))

    def term(self, allow_summation):
        tok = self.tok
        if self.at("+"):
            if not allow_summation:
                raise self.error("summation variable not allowed here")
            self.i += 1
            if self.tok.kind != "ident":
                raise self.error("expected variable after '+'")
            name = self.tok.text
            self.i += 1
            return Variable(name, summation=True)
        self.i += 1
        if tok.kind == "ident":
            return Variable(tok.text)
        if tok.kind == "string":
            return Constant(re.sub(r"\\(.)", r"\1", tok.text[1:-1]))
        if tok.kind == "number":
            return Constant(tok.text)
        raise ParseError(f"expected term, found {tok.text!r}", tok.line, tok.col)

    def expression(self) -> LinearExpression:
        terms: list[LinearTerm] = []
        constant = 0.0
        sign = 1.0
        while True:
            if self.at("-"):
                # unary minus, also after a binary operator: "a + -2 * B"
                sign = -sign
                self.i += 1
            if self.tok.kind == "number":
                value = float(self.tok.text)
                self.i += 1
                if self.at("*"):
                    self.i += 1
                    terms.append(LinearTerm(sign * value, self.atom()))
                else:
                    constant += sign * value
            else:
                atom = self.atom()
                coef = 1.0
                if self.at("*"):
                    self.i += 1
                    if self.tok.kind != "number":
                        raise self.error("expected number after '*'")
                    coef = float(self.tok.text)
                    self.i += 1
                terms.append(LinearTerm(sign * coef, atom))
            if self.at("+") or self.at("-"):
                sign = 1.0 if self.tok.text == "+" else -1.0
                self.i += 1
                continue
            return LinearExpression(tuple(terms), constant)

    def filter_clause(self) -> FilterClause:
        self.expect("{")
        if self.tok.kind != "ident":
            raise self.error("expected summation variable in filter")
        var = self.tok.text
        self.i += 1
        self.expect(":")
        guard = self.atom(allow_summation=False)
        if guard.predicate.kind is not PredicateKind.OBSERVED:
            raise ParseError(
                f"filter guard {guard.predicate.name} must be an observed predicate",
                self.tok.line,
                self.tok.col,
            )
        self.expect("}")
        return FilterClause(var, guard)


def parse_program(text: str) -> Program:
    """Parse model text into a :class:`Program`."""
    neural_specs: dict[str, tuple[ProviderSpec, int]] = {}

    def _strip(m: re.Match) -> str:
        line = text.count("\n", 0, m.start()) + 1
        if m.group(1) in neural_specs:
            raise ParseError(f"neural predicate {m.group(1)} bound twice", line)
        neural_specs[m.group(1)] = (_parse_neural_block(m.group(1), m.group(2), line), line)
        return "\n" * m.group(0).count("\n")

    stripped = _NEURAL_RE.sub(_strip, text)
    predicates: dict[str, Predicate] = {}
    parser = _Parser(_tokenize(stripped), predicates)
    rules = [s for s in parser.statements() if not isinstance(s, Predicate)]

    for name, (_, line) in neural_specs.items():
        pred = predicates.get(name)
        if pred is None or pred.kind is not PredicateKind.NEURAL:
            raise ParseError(f"neural block for {name}, which is not a declared neural predicate", line)
    for pred in predicates.values():
        if pred.kind is PredicateKind.NEURAL and pred.name not in neural_specs:
            raise ParseError(f"neural predicate {pred.name} has no neural block")
    return Program(predicates, tuple(rules), {k: v[0] for k, v in neural_specs.items()})


def load_program(path) -> Program:
    return parse_program(Path(path).read_text(encoding="utf-8"))


# --- pretty printer ---------------------------------------------------------------


def _num(x: float) -> str:
    return str(int(x)) if float(x).is_integer() and abs(x) < 1e15 else repr(float(x))


def _expr(e: LinearExpression) -> str:
    parts = []
    for t in e.terms:
        c = t.coefficient
        body = str(t.atom) if abs(c) == 1.0 else f"{_num(abs(c))} * {t.atom}"
        parts.append(("- " if c < 0 else "+ ") + body)
    if e.constant or not parts:
        parts.append(("- " if e.constant < 0 else "+ ") + _num(abs(e.constant)))
    s = " ".join(parts)
    return s[2:] if s.startswith("+ ") else "-" + s[2:]


def format_rule(rule: Rule) -> str:
    if isinstance(rule, LogicalRule):
        head = " | ".join(str(lit) for lit in rule.head)
        text = f"{' & '.join(str(lit) for lit in rule.body)} -> {head}" if rule.body else head
    else:
        text = f"{_expr(rule.lhs)} {rule.relation} {_expr(rule.rhs)}"
        for f in rule.filters:
            text += f" {{{f.summation_variable}: {f.guard}}}"
    if rule.hard:
        return text + (" ^2" if rule.squared else "") + " ."
    return f"{rule.weight!r}: {text}" + (" ^2" if rule.squared else "")


def pretty_print(program: Program) -> str:
    lines = [f"predicate {p.name}/{p.arity} {p.kind.value}" for p in program.predicates.values()]
    for name, spec in program.neural.items():
        entries = [
            f"layers: {', '.join(str(n) for n in spec.layers)}",
            f"activations: {', '.join(spec.activations)}",
            f"classes: {', '.join(spec.classes)}",
            f"seed: {spec.seed}",
        ]
        if spec.input_width is not None:
            entries.append(f"input: {spec.input_width}")
        if spec.features:
            entries.append(f"features: {spec.features}")
        lines.append(f"neural {name} {{")
        lines.extend("    " + e for e in entries)
        lines.append("}")
    lines.extend(format_rule(r) for r in program.rules)
    return "\n".join(lines) + "\n"


# --- relational data --------------------------------------------------------------

PARTITIONS = ("obs", "targets", "truth")


@dataclass
class Database:
    """Ground atoms per predicate, split into observations, targets and truths."""

    observations: dict[str, dict[tuple[str, ...], float]] = field(default_factory=dict)
    targets: dict[str, dict[tuple[str, ...], Optional[float]]] = field(default_factory=dict)
    truths: dict[str, dict[tuple[str, ...], float]] = field(default_factory=dict)
    features: dict[str, dict[tuple[str, ...], np.ndarray]] = field(default_factory=dict)

    def add(self, predicate: str, args: tuple[str, ...], partition: str, value: Optional[float] = None):
        args = tuple(str(a) for a in args)
        if partition == "obs":
            table, other = self.observations, self.targets
        elif partition == "targets":
            table, other = self.targets, self.observations
        elif partition == "truth":
            table, other = self.truths, None
        else:
            raise DataError(f"unknown partition {partition!r}")
        rows = table.setdefault(predicate, {})
        if args in rows:
            raise DataError(f"duplicate {partition} row {predicate}{args}")
        if other is not None and args in other.get(predicate, {}):
            raise DataError(f"{predicate}{args} is both observed and a target")
        if value is not None and not 0.0 <= value <= 1.0:
            raise DataError(f"value {value} for {predicate}{args} outside [0, 1]")
        if partition in ("obs", "truth") and value is None:
            value = 1.0
        rows[args] = value

    def add_features(self, predicate: str, entity: tuple[str, ...], values) -> None:
        table = self.features.setdefault(predicate, {})
        entity = tuple(str(a) for a in entity)
        if entity in table:
            raise DataError(f"duplicate feature row {predicate}{entity}")
        table[entity] = np.asarray(values, dtype=float)


def parse_data_file(
    text: str,
    predicate: Predicate,
    partition: str,
    db: Optional[Database] = None,
) -> list[tuple[tuple[str, ...], Optional[float]]]:
    """Parse tab-separated rows (constants, then an optional value column)."""
    rows = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        cols = line.rstrip("\r\n").split("\t")
        if len(cols) == predicate.arity:
            value = None
        elif len(cols) == predicate.arity + 1:
            try:
                value = float(cols[-1])
            except ValueError:
                raise DataError(f"{predicate.name} line {lineno}: bad value {cols[-1]!r}") from None
            cols = cols[:-1]
        else:
            raise DataError(
                f"{predicate.name} line {lineno}: expected {predicate.arity} or "
                f"{predicate.arity + 1} columns, got {len(cols)}"
            )
        if value is not None and not 0.0 <= value <= 1.0:
            raise DataError(f"{predicate.name} line {lineno}: value {value} outside [0, 1]")
        if value is None and partition in ("obs", "truth"):
            value = 1.0
        rows.append((tuple(cols), value))
    if db is not None:
        for args, value in rows:
            db.add(predicate.name, args, partition, value)
    return rows


def parse_feature_file(text: str, predicate: Predicate, db: Optional[Database] = None):
    """Rows of entity constants (arity - 1 columns) followed by feature values."""
    n_keys = predicate.arity - 1
    rows = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) <= n_keys:
            raise DataError(f"{predicate.name} features line {lineno}: no feature columns")
        try:
            feats = np.array([float(c) for c in cols[n_keys:]])
        except ValueError:
            raise DataError(f"{predicate.name} features line {lineno}: non-numeric feature") from None
        rows.append((tuple(cols[:n_keys]), feats))
    if rows and len({len(f) for _, f in rows}) != 1:
        raise DataError(f"{predicate.name}: ragged feature rows")
    if db is not None:
        for key, feats in rows:
            db.add_features(predicate.name, key, feats)
    return rows


def load_database(program: Program, data_dir) -> Database:
    """Load ``<Predicate>_<obs|targets|truth>.tsv`` files and neural features."""
    data_dir = Path(data_dir)
    db = Database()
    for pred in program.predicates.values():
        for partition in PARTITIONS:
            path = data_dir / f"{pred.name}_{partition}.tsv"
            if not path.exists():
                continue
            if pred.kind is PredicateKind.NEURAL:
                raise DataError(f"{path.name}: neural predicates take features, not rows")
            if pred.kind is PredicateKind.OBSERVED and partition == "targets":
                raise DataError(f"{path.name}: observed predicate cannot have targets")
            parse_data_file(path.read_text(encoding="utf-8"), pred, partition, db)
    for name, spec in program.neural.items():
        fname = spec.features or f"{name}_features.tsv"
        path = data_dir / fname
        if not path.exists():
            raise DataError(f"missing feature file {path}")
        parse_feature_file(path.read_text(encoding="utf-8"), program.predicates[name], db)
    return db


def write_rows(path, rows) -> None:
    """Write ``(args, value)`` rows as TSV; ``value`` may be None."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for args, value in rows:
            cols = list(args)
            if value is not None:
                cols.append(format_value(value))
            fh.write("\t".join(cols) + "\n")


def format_value(v: float) -> str:
    return repr(float(v)) if not float(v).is_integer() else str(int(v))


# --- IDX archives -----------------------------------------------------------------

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


def read_idx(data: bytes) -> np.ndarray:
    """Decode an uncompressed IDX archive.

    Image files (3 dims) come back as float arrays of shape (count, rows, cols)
    scaled into [0, 1]; label files (1 dim) as an int64 vector.
    """
    if len(data) < 4:
        raise DataError("IDX data too short for magic number")
    (magic,) = struct.unpack(">I", data[:4])
    if magic == IDX_IMAGES:
        ndim = 3
    elif magic == IDX_LABELS:
        ndim = 1
    else:
        raise DataError(f"unsupported IDX type, magic 0x{magic:08x}")
    header = 4 + 4 * ndim
    if len(data) < header:
        raise DataError("truncated IDX header")
    dims = struct.unpack(">" + "I" * ndim, data[4:header])
    size = int(np.prod(dims))
    if len(data) < header + size:
        raise DataError(f"truncated IDX payload: need {size} bytes, have {len(data) - header}")
    payload = np.frombuffer(data, dtype=np.uint8, count=size, offset=header)
    if ndim == 1:
        return payload.astype(np.int64)
    return payload.reshape(dims).astype(np.float64) / 255.0


def load_idx(path) -> np.ndarray:
    path = os.fspath(path)
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "rb") as fh:
        return read_idx(fh.read())
