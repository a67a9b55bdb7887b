"""Rule-language AST and the Lukasiewicz relaxation of ground rules.

Logical clauses are relaxed into hinge potentials over their distance to
satisfaction; arithmetic rules become one-sided hinges or hard linear
constraints in standard form.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Hashable, Iterable, Mapping, Optional, Sequence, Union


class DomainError(ValueError):
    """A truth value fell outside [0, 1]."""


class StructuralError(ValueError):
    """A rule or clause is malformed (e.g. empty)."""


class PredicateKind(enum.Enum):
    OBSERVED = "observed"
    TARGET = "target"
    NEURAL = "neural"


@dataclass(frozen=True)
class Predicate:
    name: str
    arity: int
    kind: PredicateKind

    def __post_init__(self):
        if self.arity < 1:
            raise StructuralError(f"predicate {self.name} must have arity >= 1")


@dataclass(frozen=True)
class Variable:
    name: str
    summation: bool = False

    def __str__(self):
        return ("+" if self.summation else "") + self.name


@dataclass(frozen=True)
class Constant:
    value: str

    def __str__(self):
        return '"' + self.value.replace("\\", "\\\\").replace('"', '\\"') + '"'


Term = Union[Variable, Constant]


@dataclass(frozen=True)
class Atom:
    predicate: Predicate
    terms: tuple[Term, ...]

    def __post_init__(self):
        if len(self.terms) != self.predicate.arity:
            raise StructuralError(
                f"{self.predicate.name} expects {self.predicate.arity} arguments, got {len(self.terms)}"
            )

    def variables(self) -> list[Variable]:
        return [t for t in self.terms if isinstance(t, Variable)]

    def __str__(self):
        return f"{self.predicate.name}({', '.join(str(t) for t in self.terms)})"


@dataclass(frozen=True)
class Literal:
    atom: Atom
    negated: bool = False

    def __str__(self):
        return ("!" if self.negated else "") + str(self.atom)


@dataclass(frozen=True)
class SourcePos:
    line: int
    col: int


@dataclass(frozen=True)
class LogicalRule:
    """Weighted (soft) or unweighted (hard) clause ``body -> head``.

    The body is a conjunction of literals and the head a disjunction.
    """

    body: tuple[Literal, ...]
    head: tuple[Literal, ...]
    weight: Optional[float] = None
    squared: bool = False
    pos: Optional[SourcePos] = field(default=None, compare=False)

    def __post_init__(self):
        if not self.body and not self.head:
            raise StructuralError("logical rule needs at least one literal")
        if self.weight is not None and self.weight < 0:
            raise StructuralError("rule weight must be nonnegative")

    @property
    def hard(self) -> bool:
        return self.weight is None

    def atoms(self) -> list[Atom]:
        return [lit.atom for lit in self.body + self.head]


@dataclass(frozen=True)
class LinearTerm:
    coefficient: float
    atom: Atom


@dataclass(frozen=True)
class LinearExpression:
    terms: tuple[LinearTerm, ...] = ()
    constant: float = 0.0


@dataclass(frozen=True)
class FilterClause:
    summation_variable: str
    guard: Atom


@dataclass(frozen=True)
class ArithmeticRule:
    lhs: LinearExpression
    relation: str
    rhs: LinearExpression
    filters: tuple[FilterClause, ...] = ()
    weight: Optional[float] = None
    squared: bool = False
    pos: Optional[SourcePos] = field(default=None, compare=False)

    def __post_init__(self):
        if self.relation not in ("<=", ">=", "="):
            raise StructuralError(f"unknown relation {self.relation!r}")
        if self.weight is not None and self.weight < 0:
            raise StructuralError("rule weight must be nonnegative")
        for term in self.lhs.terms + self.rhs.terms:
            sums = [t for t in term.atom.terms if isinstance(t, Variable) and t.summation]
            if len(sums) > 1:
                raise StructuralError(f"{term.atom}: at most one summation variable per atom")
        declared = self.summation_variables()
        for flt in self.filters:
            if flt.summation_variable not in declared:
                raise StructuralError(
                    f"filter on {flt.summation_variable} which is not a summation variable"
                )

    @property
    def hard(self) -> bool:
        return self.weight is None

    def atoms(self) -> list[Atom]:
        return [t.atom for t in self.lhs.terms + self.rhs.terms]

    def summation_variables(self) -> set[str]:
        return {
            t.name
            for atom in self.atoms()
            for t in atom.terms
            if isinstance(t, Variable) and t.summation
        }


Rule = Union[LogicalRule, ArithmeticRule]


# --- Lukasiewicz operators -------------------------------------------------


def _check(*values: float) -> None:
    for v in values:
        if not 0.0 <= v <= 1.0:
            raise DomainError(f"truth value {v} outside [0, 1]")


def lukasiewicz_and(a: float, b: float) -> float:
    _check(a, b)
    return max(a + b - 1.0, 0.0)


def lukasiewicz_or(a: float, b: float) -> float:
    _check(a, b)
    return min(a + b, 1.0)


def lukasiewicz_not(a: float) -> float:
    _check(a)
    return 1.0 - a


def clause_distance(body: Sequence[float], head: Sequence[float]) -> float:
    """Distance to satisfaction of ``b_1 & ... & b_k -> h_1 | ... | h_m``.

    Values are literal truth values (negation already applied).
    """
    if not body and not head:
        raise StructuralError("empty clause")
    _check(*body, *head)
    k = len(body)
    return max(0.0, sum(body) - (k - 1) - sum(head))


# --- ground-level linear forms ----------------------------------------------


@dataclass
class LinearForm:
    """``sum_k coefficients[k] * var_k + constant`` over hashable variable keys."""

    coefficients: dict[Hashable, float] = field(default_factory=dict)
    constant: float = 0.0

    def add(self, key: Hashable, coef: float) -> None:
        c = self.coefficients.get(key, 0.0) + coef
        if c == 0.0:
            self.coefficients.pop(key, None)
        else:
            self.coefficients[key] = c

    def evaluate(self, values: Mapping[Hashable, float]) -> float:
        return self.constant + sum(c * values[k] for k, c in self.coefficients.items())

    def max_over_box(self) -> float:
        """Largest value attainable with every variable in [0, 1]."""
        return self.constant + sum(c for c in self.coefficients.values() if c > 0)

    def min_over_box(self) -> float:
        return self.constant + sum(c for c in self.coefficients.values() if c < 0)

    def scaled(self, s: float) -> "LinearForm":
        return LinearForm({k: s * c for k, c in self.coefficients.items()}, s * self.constant)

    def minus(self, other: "LinearForm") -> "LinearForm":
        out = LinearForm(dict(self.coefficients), self.constant - other.constant)
        for k, c in other.coefficients.items():
            out.add(k, -c)
        return out


@dataclass
class HingeTemplate:
    form: LinearForm
    alpha: int


@dataclass
class LinearConstraint:
    """``form <= 0`` (kind "le") or ``form == 0`` (kind "eq")."""

    form: LinearForm
    kind: str


@dataclass(frozen=True)
class GroundLiteral:
    """A literal whose atom resolved to an observed value or a variable key."""

    ref: Union[float, Hashable]
    negated: bool = False
    observed: bool = False


def _literal_into(form: LinearForm, lit: GroundLiteral, sign: float) -> None:
    # literal value is v or 1 - v
    if lit.observed:
        v = float(lit.ref)
        if not 0.0 <= v <= 1.0:
            raise DomainError(f"observed value {v} outside [0, 1]")
        form.constant += sign * ((1.0 - v) if lit.negated else v)
    elif lit.negated:
        form.constant += sign
        form.add(lit.ref, -sign)
    else:
        form.add(lit.ref, sign)


def clause_form(body: Sequence[GroundLiteral], head: Sequence[GroundLiteral]) -> LinearForm:
    """The linear function inside the hinge of a ground clause."""
    if not body and not head:
        raise StructuralError("empty clause")
    form = LinearForm(constant=-(len(body) - 1.0))
    for lit in body:
        _literal_into(form, lit, 1.0)
    for lit in head:
        _literal_into(form, lit, -1.0)
    return form


def relax_logical(
    body: Sequence[GroundLiteral],
    head: Sequence[GroundLiteral],
    weighted: bool,
    squared: bool = False,
) -> Union[HingeTemplate, LinearConstraint]:
    form = clause_form(body, head)
    if weighted:
        return HingeTemplate(form, 2 if squared else 1)
    return LinearConstraint(form, "le")


def relax_arithmetic(
    lhs: LinearForm, relation: str, rhs: LinearForm, weighted: bool, squared: bool = False
) -> list[Union[HingeTemplate, LinearConstraint]]:
    """Relax a ground arithmetic rule whose summations are already expanded."""
    diff = lhs.minus(rhs)
    alpha = 2 if squared else 1
    if relation == "<=":
        sides = [diff]
    elif relation == ">=":
        sides = [diff.scaled(-1.0)]
    elif relation == "=":
        if not weighted:
            return [LinearConstraint(diff, "eq")]
        sides = [diff, diff.scaled(-1.0)]
    else:
        raise StructuralError(f"unknown relation {relation!r}")
    if weighted:
        return [HingeTemplate(s, alpha) for s in sides]
    return [LinearConstraint(s, "le") for s in sides]


def literal_values(lits: Iterable[GroundLiteral], values: Mapping[Hashable, float]) -> list[float]:
    """Truth values of ground literals under an assignment (test helper)."""
    out = []
    for lit in lits:
        v = float(lit.ref) if lit.observed else values[lit.ref]
        out.append(1.0 - v if lit.negated else v)
    return out
