"""Instantiate rules against data to build the ground hinge-loss model."""
from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field, replace
from typing import Iterator, Mapping, Optional, Sequence, Union

import numpy as np
import scipy.sparse as sp

from softlogic.logic import (
    ArithmeticRule,
    Atom,
    Constant,
    DomainError,
    GroundLiteral,
    HingeTemplate,
    LinearConstraint,
    LinearForm,
    LogicalRule,
    PredicateKind,
    Rule,
    Variable,
    relax_arithmetic,
    relax_logical,
)
from softlogic.parser import DataError, Database, Program, format_rule

log = logging.getLogger(__name__)

PRUNE_TOL = 1e-12


class GroundingError(ValueError):
    """A rule cannot be grounded (e.g. a variable bound by no atom)."""


def natural_key(value: str):
    """Sort numeric constants numerically, everything else lexically after them."""
    try:
        return (0, float(value), value)
    except ValueError:
        return (1, 0.0, value)


def args_key(args: Sequence[str]):
    return tuple(natural_key(a) for a in args)


@dataclass(frozen=True)
class VarRef:
    """Where a ground atom's value comes from."""

    kind: str  # "obs", "target" or "neural"
    value: float = 0.0  # observed value
    index: int = -1  # target index or neural slot


@dataclass
class NeuralBlock:
    """Output slots of one neural predicate: ``entity x class`` laid out row-major."""

    predicate: str
    entities: list[tuple[str, ...]]
    classes: tuple[str, ...]
    features: np.ndarray
    offset: int = 0

    @property
    def size(self) -> int:
        return len(self.entities) * len(self.classes)

    def slot(self, entity_idx: int, class_idx: int) -> int:
        return self.offset + entity_idx * len(self.classes) + class_idx


def _csr(rows: list[dict[int, float]], n_cols: int) -> sp.csr_matrix:
    indptr = [0]
    indices: list[int] = []
    data: list[float] = []
    for row in rows:
        for col in sorted(row):
            indices.append(col)
            data.append(row[col])
        indptr.append(len(indices))
    return sp.csr_matrix(
        (np.array(data, dtype=float), np.array(indices, dtype=np.int64), np.array(indptr, dtype=np.int64)),
        shape=(len(rows), n_cols),
    )


@dataclass
class GroundModel:
    """Compiled deep hinge-loss MRF.

    Potential ``j`` is ``max(pot_y[j] @ y + pot_g[j] @ g + pot_const[j], 0) ** pot_alpha[j]``
    and belongs to partition ``pot_partition[j]`` with weight ``weights[...]``.
    Constraint ``i`` reads ``con_y[i] @ y + con_g[i] @ g + con_const[i]`` (== 0 when
    ``con_eq[i]`` else <= 0).
    """

    target_atoms: list[tuple[str, tuple[str, ...]]]
    neural: list[NeuralBlock]
    pot_y: sp.csr_matrix
    pot_g: sp.csr_matrix
    pot_const: np.ndarray
    pot_alpha: np.ndarray
    pot_partition: np.ndarray
    weights: np.ndarray
    rule_labels: list[str]
    con_y: sp.csr_matrix
    con_g: sp.csr_matrix
    con_const: np.ndarray
    con_eq: np.ndarray
    con_names: list[str]
    con_has_target: np.ndarray
    initial_y: np.ndarray
    registry: dict = field(default_factory=dict, repr=False)
    parent_y: Optional[np.ndarray] = None
    parent_g: Optional[np.ndarray] = None

    @property
    def n_y(self) -> int:
        return len(self.target_atoms)

    @property
    def n_g(self) -> int:
        return sum(b.size for b in self.neural)

    @property
    def n_potentials(self) -> int:
        return len(self.pot_const)

    @property
    def n_constraints(self) -> int:
        return len(self.con_const)

    @property
    def n_partitions(self) -> int:
        return len(self.weights)

    def partitions(self) -> list[np.ndarray]:
        return [np.flatnonzero(self.pot_partition == i) for i in range(self.n_partitions)]

    def with_weights(self, weights) -> "GroundModel":
        w = np.asarray(weights, dtype=float)
        if w.shape != self.weights.shape:
            raise ValueError(f"expected {self.weights.shape[0]} weights, got {w.shape}")
        return replace(self, weights=w.copy())

    def target_index(self) -> dict[tuple[str, tuple[str, ...]], int]:
        return {atom: i for i, atom in enumerate(self.target_atoms)}

    def neural_block(self, predicate: str) -> NeuralBlock:
        for b in self.neural:
            if b.predicate == predicate:
                return b
        raise KeyError(predicate)

    def neural_values(self, providers: Mapping[str, object]) -> np.ndarray:
        """Evaluate every provider on its features (no caching)."""
        g = np.zeros(self.n_g)
        for b in self.neural:
            if not b.entities:
                continue
            out = providers[b.predicate].predict(b.features)
            g[b.offset : b.offset + b.size] = np.asarray(out).ravel()
        return g

    @classmethod
    def from_arrays(
        cls,
        pot_y,
        pot_const,
        pot_alpha,
        pot_partition,
        weights,
        con_y=None,
        con_const=None,
        con_eq=None,
        pot_g=None,
        con_g=None,
    ) -> "GroundModel":
        """Build a model directly from dense coefficient arrays.

        Neural columns, if any, become one block with a single class per slot.
        """
        pot_y = np.atleast_2d(np.asarray(pot_y, dtype=float))
        n_y = pot_y.shape[1]
        n_pot = pot_y.shape[0]
        con_y = np.zeros((0, n_y)) if con_y is None else np.atleast_2d(np.asarray(con_y, dtype=float))
        n_con = con_y.shape[0]
        n_g = 0 if pot_g is None else np.asarray(pot_g).shape[1]
        pot_g = np.zeros((n_pot, n_g)) if pot_g is None else np.asarray(pot_g, dtype=float)
        con_g = np.zeros((n_con, n_g)) if con_g is None else np.asarray(con_g, dtype=float)
        weights = np.asarray(weights, dtype=float)
        neural = []
        if n_g:
            ents = [(str(i),) for i in range(n_g)]
            neural.append(NeuralBlock("g", ents, ("1",), np.zeros((n_g, 0))))
        return cls(
            target_atoms=[("y", (str(i),)) for i in range(n_y)],
            neural=neural,
            pot_y=sp.csr_matrix(pot_y),
            pot_g=sp.csr_matrix(pot_g),
            pot_const=np.asarray(pot_const, dtype=float).reshape(n_pot),
            pot_alpha=np.asarray(pot_alpha, dtype=np.int64).reshape(n_pot),
            pot_partition=np.asarray(pot_partition, dtype=np.int64).reshape(n_pot),
            weights=weights,
            rule_labels=[f"w{i + 1}" for i in range(len(weights))],
            con_y=sp.csr_matrix(con_y),
            con_g=sp.csr_matrix(con_g),
            con_const=np.zeros(n_con) if con_const is None else np.asarray(con_const, dtype=float).reshape(n_con),
            con_eq=np.zeros(n_con, dtype=bool) if con_eq is None else np.asarray(con_eq, dtype=bool).reshape(n_con),
            con_names=[f"c{i}" for i in range(n_con)],
            con_has_target=(np.abs(con_y) > 0).any(axis=1) if n_con else np.zeros(0, dtype=bool),
            initial_y=np.zeros(n_y),
        )

    # -- structural transforms -----------------------------------------------

    def clamp_targets(self, assignments: Mapping[int, float]) -> "GroundModel":
        """Fix some targets to given values; the rest stay free."""
        return clamp_targets(self, assignments)

    def subset(self, pot_rows, con_rows) -> "GroundModel":
        """Restrict to the given potentials/constraints and the variables they touch."""
        pot_rows = np.asarray(pot_rows, dtype=np.int64)
        con_rows = np.asarray(con_rows, dtype=np.int64)
        py, pg = self.pot_y[pot_rows], self.pot_g[pot_rows]
        cy, cg = self.con_y[con_rows], self.con_g[con_rows]
        y_cols = np.union1d(py.indices, cy.indices).astype(np.int64)
        g_used = np.union1d(pg.indices, cg.indices).astype(np.int64)

        blocks, g_cols = [], []
        offset = 0
        for b in self.neural:
            k = len(b.classes)
            in_block = g_used[(g_used >= b.offset) & (g_used < b.offset + b.size)]
            ents = np.unique((in_block - b.offset) // k) if k else np.array([], dtype=np.int64)
            nb = NeuralBlock(
                b.predicate,
                [b.entities[e] for e in ents],
                b.classes,
                b.features[ents] if len(ents) else b.features[:0],
                offset,
            )
            for e in ents:
                g_cols.extend(range(b.offset + e * k, b.offset + (e + 1) * k))
            offset += nb.size
            blocks.append(nb)
        g_cols = np.array(g_cols, dtype=np.int64)

        parent_y = y_cols if self.parent_y is None else self.parent_y[y_cols]
        parent_g = g_cols if self.parent_g is None else self.parent_g[g_cols]
        return GroundModel(
            target_atoms=[self.target_atoms[i] for i in y_cols],
            neural=blocks,
            pot_y=py[:, y_cols].tocsr(),
            pot_g=pg[:, g_cols].tocsr(),
            pot_const=self.pot_const[pot_rows].copy(),
            pot_alpha=self.pot_alpha[pot_rows].copy(),
            pot_partition=self.pot_partition[pot_rows].copy(),
            weights=self.weights.copy(),
            rule_labels=list(self.rule_labels),
            con_y=cy[:, y_cols].tocsr(),
            con_g=cg[:, g_cols].tocsr(),
            con_const=self.con_const[con_rows].copy(),
            con_eq=self.con_eq[con_rows].copy(),
            con_names=[self.con_names[i] for i in con_rows],
            con_has_target=self.con_has_target[con_rows].copy(),
            initial_y=self.initial_y[y_cols].copy(),
            parent_y=parent_y,
            parent_g=parent_g,
        )

    def components(self) -> list["GroundModel"]:
        """Split into independent sub-models (connected through shared variables)."""
        node_of_slot = np.empty(self.n_g, dtype=np.int64)
        n_nodes = self.n_y
        for b in self.neural:
            k = len(b.classes)
            for e in range(len(b.entities)):
                node_of_slot[b.offset + e * k : b.offset + (e + 1) * k] = n_nodes
                n_nodes += 1
        parent = np.arange(n_nodes)

        def find(a):
            root = a
            while parent[root] != root:
                root = parent[root]
            while parent[a] != root:
                parent[a], a = root, parent[a]
            return root

        def rows_nodes(my: sp.csr_matrix, mg: sp.csr_matrix):
            out = []
            for j in range(my.shape[0]):
                nodes = list(my.indices[my.indptr[j] : my.indptr[j + 1]])
                nodes += list(node_of_slot[mg.indices[mg.indptr[j] : mg.indptr[j + 1]]])
                out.append(nodes)
            return out

        pot_nodes = rows_nodes(self.pot_y, self.pot_g)
        con_nodes = rows_nodes(self.con_y, self.con_g)
        for nodes in pot_nodes + con_nodes:
            if nodes:
                r0 = find(nodes[0])
                for n in nodes[1:]:
                    rn = find(n)
                    if rn != r0:
                        parent[rn] = r0

        groups: dict[int, tuple[list[int], list[int]]] = {}
        order: list[int] = []
        constant_rows: tuple[list[int], list[int]] = ([], [])
        for kind, node_lists in ((0, pot_nodes), (1, con_nodes)):
            for j, nodes in enumerate(node_lists):
                if not nodes:
                    constant_rows[kind].append(j)
                    continue
                root = find(nodes[0])
                if root not in groups:
                    groups[root] = ([], [])
                    order.append(root)
                groups[root][kind].append(j)
        # order components by their smallest variable for determinism
        order.sort(key=lambda r: min(
            [n for nodes in (pot_nodes[j] for j in groups[r][0]) for n in nodes]
            + [n for nodes in (con_nodes[j] for j in groups[r][1]) for n in nodes]
        ))
        parts = [self.subset(*groups[r]) for r in order]
        if constant_rows[0] or constant_rows[1]:
            parts.append(self.subset(*constant_rows))
        return parts

    # -- debug dump ------------------------------------------------------------

    def dump(self) -> str:
        """Stable text form: one line per potential, then one per constraint."""

        def fmt(my, mg, j, const):
            entries = [
                f"y{c}:{_fmt(v)}" for c, v in zip(my.indices[my.indptr[j] : my.indptr[j + 1]], my.data[my.indptr[j] : my.indptr[j + 1]])
            ] + [
                f"g{c}:{_fmt(v)}" for c, v in zip(mg.indices[mg.indptr[j] : mg.indptr[j + 1]], mg.data[mg.indptr[j] : mg.indptr[j + 1]])
            ]
            return "{" + ",".join(entries) + "} " + _fmt(const)

        lines = []
        for j in range(self.n_potentials):
            label = self.rule_labels[self.pot_partition[j]]
            lines.append(f"{label} {self.pot_alpha[j]} " + fmt(self.pot_y, self.pot_g, j, self.pot_const[j]))
        for i in range(self.n_constraints):
            kind = "eq" if self.con_eq[i] else "le"
            lines.append(f"c {kind} " + fmt(self.con_y, self.con_g, i, self.con_const[i]))
        return "\n".join(lines) + ("\n" if lines else "")


def _fmt(v: float) -> str:
    v = float(v)
    return str(int(v)) if v.is_integer() else repr(v)


# --- registry -------------------------------------------------------------------


class Registry:
    """Maps ground atoms to observed values, target indices or neural slots."""

    def __init__(self, program: Program, db: Database):
        self.program = program
        self.db = db
        self.target_atoms: list[tuple[str, tuple[str, ...]]] = []
        self.initial: list[float] = []
        self.target_idx: dict[tuple[str, tuple[str, ...]], int] = {}
        self.blocks: dict[str, NeuralBlock] = {}
        self.class_pos: dict[str, dict[str, int]] = {}
        self.entity_pos: dict[str, dict[tuple[str, ...], int]] = {}
        self.tables: dict[str, list[tuple[str, ...]]] = {}

        offset = 0
        for pred in program.predicates.values():
            obs = db.observations.get(pred.name, {})
            if pred.kind is PredicateKind.TARGET:
                tgt = db.targets.get(pred.name, {})
                for args in sorted(tgt, key=args_key):
                    self.target_idx[(pred.name, args)] = len(self.target_atoms)
                    self.target_atoms.append((pred.name, args))
                    v = tgt[args]
                    self.initial.append(0.0 if v is None else float(v))
                rows = set(tgt) | set(obs)
            elif pred.kind is PredicateKind.NEURAL:
                spec = program.neural[pred.name]
                feats = db.features.get(pred.name, {})
                entities = sorted(feats, key=args_key)
                width = {len(v) for v in feats.values()}
                matrix = np.array([feats[e] for e in entities]) if entities else np.zeros((0, spec.input_width or 0))
                if len(width) > 1:
                    raise DataError(f"{pred.name}: ragged feature rows")
                block = NeuralBlock(pred.name, entities, spec.classes, matrix, offset)
                offset += block.size
                self.blocks[pred.name] = block
                self.class_pos[pred.name] = {c: i for i, c in enumerate(spec.classes)}
                self.entity_pos[pred.name] = {e: i for i, e in enumerate(entities)}
                rows = {e + (c,) for e in entities for c in spec.classes}
            else:
                rows = set(obs)
            self.tables[pred.name] = sorted(rows, key=args_key)
            if not rows:
                log.info("predicate %s has no ground atoms", pred.name)

        for name, table in db.truths.items():
            pred = program.predicates.get(name)
            if pred is None:
                continue
            for args in table:
                if (name, args) not in self.target_idx:
                    raise DataError(f"truth row {name}{args} does not refer to a target atom")

    def lookup(self, name: str, args: tuple[str, ...]) -> Optional[VarRef]:
        pred = self.program.predicates[name]
        if pred.kind is PredicateKind.NEURAL:
            block = self.blocks[name]
            e = self.entity_pos[name].get(args[:-1])
            c = self.class_pos[name].get(args[-1])
            if e is None or c is None:
                return None
            return VarRef("neural", index=block.slot(e, c))
        if pred.kind is PredicateKind.TARGET:
            idx = self.target_idx.get((name, args))
            if idx is not None:
                return VarRef("target", index=idx)
            v = self.db.observations.get(name, {}).get(args)
            return None if v is None else VarRef("obs", value=v)
        return VarRef("obs", value=self.db.observations.get(name, {}).get(args, 0.0))

    def key_of(self, ref: VarRef):
        return ("y", ref.index) if ref.kind == "target" else ("g", ref.index)

    def as_dict(self) -> dict:
        out = {}
        for atom, i in self.target_idx.items():
            out[atom] = VarRef("target", index=i)
        for name, block in self.blocks.items():
            for e_i, e in enumerate(block.entities):
                for c_i, c in enumerate(block.classes):
                    out[(name, e + (c,))] = VarRef("neural", index=block.slot(e_i, c_i))
        for name, rows in self.db.observations.items():
            if name in self.program.predicates:
                for args, v in rows.items():
                    out[(name, args)] = VarRef("obs", value=v)
        return out


# --- joins ------------------------------------------------------------------------


class _Table:
    def __init__(self, rows: list[tuple[str, ...]]):
        self.rows = rows
        self._index: dict[tuple[int, ...], dict[tuple, list]] = {}

    def index(self, positions: tuple[int, ...]) -> dict[tuple, list]:
        idx = self._index.get(positions)
        if idx is None:
            idx = {}
            for row in self.rows:
                idx.setdefault(tuple(row[p] for p in positions), []).append(row)
            self._index[positions] = idx
        return idx


@dataclass
class _Step:
    table: _Table
    key_parts: list  # per key position: ("c", value) or ("v", var)
    key_positions: tuple[int, ...]
    binds: list[tuple[int, str]]  # positions that introduce a new variable
    checks: list[tuple[int, str]]  # repeated variables within the atom


def _pattern(atom: Atom):
    """(position, constant-or-variable-name) for every non-summation slot."""
    out = []
    for p, t in enumerate(atom.terms):
        if isinstance(t, Constant):
            out.append((p, ("c", t.value)))
        elif not t.summation:
            out.append((p, ("v", t.name)))
    return out


def _plan(atoms: list[Atom], tables: list[_Table]) -> list[_Step]:
    """Greedy join order by expected fan-out given already bound variables."""
    remaining = list(range(len(atoms)))
    bound: set[str] = set()
    steps = []
    while remaining:
        best, best_cost = None, None
        for i in remaining:
            pat = _pattern(atoms[i])
            pos = tuple(p for p, (k, v) in pat if k == "c" or v in bound)
            rows = len(tables[i].rows)
            if pos:
                cost = rows / max(1, len(tables[i].index(pos)))
            else:
                cost = float(rows)
            if best_cost is None or cost < best_cost:
                best, best_cost = i, cost
        remaining.remove(best)
        pat = _pattern(atoms[best])
        key_parts, key_pos, binds, checks = [], [], [], []
        local: set[str] = set()
        for p, (k, v) in pat:
            if k == "c" or v in bound:
                key_parts.append((k, v))
                key_pos.append(p)
            elif v in local:
                checks.append((p, v))
            else:
                binds.append((p, v))
                local.add(v)
        bound |= local
        steps.append(_Step(tables[best], key_parts, tuple(key_pos), binds, checks))
    return steps


def _join(steps: list[_Step], binding: dict, i: int = 0) -> Iterator[dict]:
    if i == len(steps):
        yield binding
        return
    step = steps[i]
    key = tuple(v if k == "c" else binding[v] for k, v in step.key_parts)
    for row in step.table.index(step.key_positions).get(key, ()):
        new = dict(binding)
        for p, v in step.binds:
            new[v] = row[p]
        if any(new[v] != row[p] for p, v in step.checks):
            continue
        yield from _join(steps, new, i + 1)


def _resolve(atom: Atom, binding: Mapping[str, str]) -> tuple[str, ...]:
    out = []
    for t in atom.terms:
        if isinstance(t, Constant):
            out.append(t.value)
        else:
            try:
                out.append(binding[t.name])
            except KeyError:
                raise GroundingError(f"variable {t.name} in {atom} is not bound") from None
    return tuple(out)


def _free_vars(atoms: Sequence[Atom]) -> set[str]:
    return {t.name for a in atoms for t in a.terms if isinstance(t, Variable) and not t.summation}


# --- grounding ----------------------------------------------------------------------


@dataclass
class _Collector:
    pot_rows_y: list = field(default_factory=list)
    pot_rows_g: list = field(default_factory=list)
    pot_const: list = field(default_factory=list)
    pot_alpha: list = field(default_factory=list)
    pot_partition: list = field(default_factory=list)
    con_rows_y: list = field(default_factory=list)
    con_rows_g: list = field(default_factory=list)
    con_const: list = field(default_factory=list)
    con_eq: list = field(default_factory=list)
    con_names: list = field(default_factory=list)
    con_has_target: list = field(default_factory=list)

    @staticmethod
    def _split(form: LinearForm):
        ry, rg = {}, {}
        for (kind, idx), c in form.coefficients.items():
            (ry if kind == "y" else rg)[idx] = c
        return ry, rg

    def add(self, item: Union[HingeTemplate, LinearConstraint], partition: Optional[int], name: str) -> bool:
        form = item.form
        if isinstance(item, HingeTemplate) or item.kind == "le":
            if form.max_over_box() <= PRUNE_TOL:
                return False
        ry, rg = self._split(form)
        if isinstance(item, HingeTemplate):
            self.pot_rows_y.append(ry)
            self.pot_rows_g.append(rg)
            self.pot_const.append(form.constant)
            self.pot_alpha.append(item.alpha)
            self.pot_partition.append(partition)
        else:
            self.con_rows_y.append(ry)
            self.con_rows_g.append(rg)
            self.con_const.append(form.constant)
            self.con_eq.append(item.kind == "eq")
            self.con_names.append(name)
            self.con_has_target.append(bool(ry))
        return True


def _binding_text(binding: Mapping[str, str]) -> str:
    return ", ".join(f"{k}={v}" for k, v in sorted(binding.items()))


def _literal(reg: Registry, atom: Atom, binding, negated: bool) -> Optional[GroundLiteral]:
    ref = reg.lookup(atom.predicate.name, _resolve(atom, binding))
    if ref is None:
        return None
    if ref.kind == "obs":
        return GroundLiteral(ref.value, negated, observed=True)
    return GroundLiteral(reg.key_of(ref), negated)


def _ground_logical(rule: LogicalRule, reg: Registry, tables, out: _Collector, partition, label) -> int:
    gens: list[Atom] = []
    gen_tables: list[_Table] = []
    for lit, in_body in [(l, True) for l in rule.body] + [(l, False) for l in rule.head]:
        kind = lit.atom.predicate.kind
        if kind is not PredicateKind.OBSERVED:
            gens.append(lit.atom)
            gen_tables.append(tables[lit.atom.predicate.name])
        elif in_body != lit.negated:
            # positive body / negated head: only rows with a nonzero value matter
            name = lit.atom.predicate.name
            obs = reg.db.observations.get(name, {})
            gens.append(lit.atom)
            gen_tables.append(_positive_table(tables, name, obs))
    head_only = _free_vars([l.atom for l in rule.head]) - _free_vars([l.atom for l in rule.body])
    if rule.body and head_only:
        raise GroundingError(f"{label}: variable(s) {sorted(head_only)} appear only in the head")
    unbound = _free_vars(rule.atoms()) - _free_vars(gens)
    if unbound:
        raise GroundingError(f"{label}: variable(s) {sorted(unbound)} not bound by any generating atom")
    count = 0
    for binding in _join(_plan(gens, gen_tables), {}):
        body = [_literal(reg, l.atom, binding, l.negated) for l in rule.body]
        head = [_literal(reg, l.atom, binding, l.negated) for l in rule.head]
        if any(x is None for x in body + head):
            continue
        item = relax_logical(body, head, not rule.hard, rule.squared)
        count += out.add(item, partition, f"{label} with {_binding_text(binding)}")
    return count


def _positive_table(tables, name, obs) -> _Table:
    key = ("__positive__", name)
    if key not in tables:
        tables[key] = _Table([r for r in tables[name].rows if obs.get(r, 0.0) > 0.0])
    return tables[key]


def expand_summation(
    rule: ArithmeticRule, binding: Mapping[str, str], reg: Registry, tables
) -> Optional[tuple[LinearForm, LinearForm]]:
    """Ground both sides of an arithmetic rule, expanding ``+X`` slots.

    Returns None when a non-summed atom has no variable (missing target or
    neural atom).
    """
    filters: dict[str, list[Atom]] = {}
    for f in rule.filters:
        if f.guard.predicate.kind is not PredicateKind.OBSERVED:
            raise GroundingError(f"filter guard {f.guard.predicate.name} is not observed")
        filters.setdefault(f.summation_variable, []).append(f.guard)

    def side(expr) -> Optional[LinearForm]:
        form = LinearForm(constant=expr.constant)
        for term in expr.terms:
            atom = term.atom
            sums = [(p, t.name) for p, t in enumerate(atom.terms) if isinstance(t, Variable) and t.summation]
            if not sums:
                ref = reg.lookup(atom.predicate.name, _resolve(atom, binding))
                if ref is None:
                    return None
                _add_ref(form, reg, ref, term.coefficient)
                continue
            s_pos, s_var = sums[0]
            pat = [(p, t) for p, t in enumerate(atom.terms) if p != s_pos]
            positions = tuple(p for p, _ in pat)
            key = tuple(t.value if isinstance(t, Constant) else binding[t.name] for _, t in pat)
            for row in tables[atom.predicate.name].index(positions).get(key, ()):
                value = row[s_pos]
                if s_var in filters:
                    local = dict(binding)
                    local[s_var] = value
                    ok = all(
                        reg.lookup(g.predicate.name, _resolve(g, local)).value > 0.0 for g in filters[s_var]
                    )
                    if not ok:
                        continue
                ref = reg.lookup(atom.predicate.name, row)
                if ref is not None:
                    _add_ref(form, reg, ref, term.coefficient)
        return form

    lhs = side(rule.lhs)
    rhs = side(rule.rhs) if lhs is not None else None
    if lhs is None or rhs is None:
        return None
    return lhs, rhs


def _add_ref(form: LinearForm, reg: Registry, ref: VarRef, coef: float) -> None:
    if ref.kind == "obs":
        if not 0.0 <= ref.value <= 1.0:
            raise DomainError(f"observed value {ref.value} outside [0, 1]")
        form.constant += coef * ref.value
    elif coef != 0.0:
        form.add(reg.key_of(ref), coef)


def _ground_arithmetic(rule: ArithmeticRule, reg: Registry, tables, out: _Collector, partition, label) -> int:
    atoms = rule.atoms()
    gen_tables = [tables[a.predicate.name] for a in atoms]
    bound = _free_vars(atoms)
    for f in rule.filters:
        if f.guard.predicate.kind is not PredicateKind.OBSERVED:
            raise GroundingError(f"{label}: filter guard {f.guard.predicate.name} is not observed")
        extra = _free_vars([f.guard]) - bound - {f.summation_variable}
        if extra:
            raise GroundingError(f"{label}: filter variable(s) {sorted(extra)} not bound by the rule")
    names = sorted(bound)
    seen: set[tuple] = set()
    count = 0
    for binding in _join(_plan(atoms, gen_tables), {}):
        key = tuple(binding[n] for n in names)
        if key in seen:
            continue
        seen.add(key)
        sides = expand_summation(rule, binding, reg, tables)
        if sides is None:
            continue
        name = f"{label} with {_binding_text(binding)}" if binding else label
        for item in relax_arithmetic(sides[0], rule.relation, sides[1], not rule.hard, rule.squared):
            count += out.add(item, partition, name)
    return count


def ground(program: Program, db: Database) -> GroundModel:
    """Ground every rule of ``program`` over ``db``."""
    reg = Registry(program, db)
    tables = {name: _Table(rows) for name, rows in reg.tables.items()}
    out = _Collector()
    labels, weights = [], []
    for rule in program.rules:
        partition = None
        if not rule.hard:
            partition = len(weights)
            weights.append(rule.weight)
            labels.append(f"w{partition + 1}")
        text = format_rule(rule)
        where = f" (line {rule.pos.line})" if rule.pos else ""
        label = f"{text}{where}"
        if isinstance(rule, LogicalRule):
            n = _ground_logical(rule, reg, tables, out, partition, label)
        else:
            n = _ground_arithmetic(rule, reg, tables, out, partition, label)
        log.debug("%s -> %d ground items", text, n)

    n_y = len(reg.target_atoms)
    blocks = list(reg.blocks.values())
    n_g = sum(b.size for b in blocks)
    model = GroundModel(
        target_atoms=reg.target_atoms,
        neural=blocks,
        pot_y=_csr(out.pot_rows_y, n_y),
        pot_g=_csr(out.pot_rows_g, n_g),
        pot_const=np.array(out.pot_const, dtype=float),
        pot_alpha=np.array(out.pot_alpha, dtype=np.int64),
        pot_partition=np.array(out.pot_partition, dtype=np.int64),
        weights=np.array(weights, dtype=float),
        rule_labels=labels,
        con_y=_csr(out.con_rows_y, n_y),
        con_g=_csr(out.con_rows_g, n_g),
        con_const=np.array(out.con_const, dtype=float),
        con_eq=np.array(out.con_eq, dtype=bool),
        con_names=out.con_names,
        con_has_target=np.array(out.con_has_target, dtype=bool),
        initial_y=np.array(reg.initial, dtype=float),
        registry=reg.as_dict(),
    )
    log.info(
        "grounded %d potentials, %d constraints over %d targets and %d neural slots",
        model.n_potentials, model.n_constraints, n_y, n_g,
    )
    return model


def truth_assignments(model: GroundModel, db: Database) -> dict[int, float]:
    """Target index -> truth value for every target with a truth row."""
    out = {}
    for i, (name, args) in enumerate(model.target_atoms):
        v = db.truths.get(name, {}).get(args)
        if v is not None:
            out[i] = float(v)
    return out


def clamp_targets(model: GroundModel, assignments: Mapping[int, float]) -> GroundModel:
    """Fold fixed target values into constants and drop those columns."""
    if not assignments:
        return model
    fixed = np.zeros(model.n_y, dtype=bool)
    values = np.zeros(model.n_y)
    for i, v in assignments.items():
        if not 0.0 <= v <= 1.0:
            raise DomainError(f"clamp value {v} for target {i} outside [0, 1]")
        if not 0 <= i < model.n_y:
            raise IndexError(f"target index {i} out of range")
        fixed[i] = True
        values[i] = v
    free = np.flatnonzero(~fixed)
    parent = free if model.parent_y is None else model.parent_y[free]
    return replace(
        model,
        target_atoms=[model.target_atoms[i] for i in free],
        pot_y=model.pot_y[:, free].tocsr(),
        pot_const=model.pot_const + model.pot_y @ values,
        con_y=model.con_y[:, free].tocsr(),
        con_const=model.con_const + model.con_y @ values,
        initial_y=model.initial_y[free].copy(),
        parent_y=parent,
    )


def describe_constraint(model: GroundModel, i: int) -> str:
    return re.sub(r"\s+", " ", model.con_names[i])
