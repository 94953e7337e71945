"""Grounding of the planning domain over arms, grid points and time.

Ground atoms are plain tuples `(pred, arg, ...)` with the time argument
stripped: the search in `solver` is time-homogeneous (facts are timeless),
so one grounded rule set serves every step.  Instance counts are still
reported per time step for the declared horizon.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import product

from ..sensing import GraspGrid, reachable
from .domain import ACTION_NAMES, SIGNATURES, DomainSpec
from .lang import Atom, Const, Pair, Rule, Shift, Var


class InvalidHorizonError(ValueError):
    pass


class GroundingError(ValueError):
    pass


STATIC_PREDS = frozenset(p for p, sig in SIGNATURES.items() if "time" not in sig)


@dataclass
class WorldFacts:
    """Timeless facts plus the initial fluents of a planning episode."""

    grid: GraspGrid
    arms: tuple[str, ...] = ("psm1", "psm2")
    initially_exposed: bool = False
    max_pulls: int | None = None
    point_scores: dict | None = None  # (x, y) -> grasp-point preference
    blacklist: frozenset = frozenset()  # (x, y) points excluded from planning
    extra_init: frozenset = frozenset()  # additional initial fluent atoms

    def points(self) -> list[tuple[float, float]]:
        return [(float(p[0]), float(p[1])) for p in self.grid.points]

    def static_facts(self) -> frozenset:
        facts = set()
        for a in self.arms:
            facts.add(("arm", a))
        for p3, p2 in zip(self.grid.points, self.points()):
            if p2 in self.blacklist:
                continue
            facts.add(("point", p2))
            for a in self.arms:
                if reachable(p3, a):
                    facts.add(("reachable", a, p2))
        return frozenset(facts)

    def init_fluents(self) -> frozenset:
        base = {("exposed",)} if self.initially_exposed else set()
        return frozenset(base | set(self.extra_init))


@dataclass(frozen=True)
class GroundRule:
    head: tuple | None
    pos: tuple
    neg: tuple


@dataclass
class GroundedProblem:
    facts: frozenset
    init_fluents: frozenset
    action_rules: dict  # action name -> list of GroundRule (head = action atom)
    transitions: list  # GroundRule, body at t (may include one action atom), head at t+1
    derived: list  # GroundRule, same-step derivation
    constraints: list  # GroundRule with head None
    horizon: int
    max_pulls: int | None
    point_index: dict  # (x, y) -> grid index
    point_scores: dict  # (x, y) -> preference score
    arm_order: dict  # arm name -> rank
    counts: dict = field(default_factory=dict)  # action -> raw instances over time

    @property
    def atom_count(self) -> int:
        return sum(self.counts.values())


def _head_shift(rule: Rule) -> int:
    """0 = same-step head, 1 = next-step head, -1 = timeless."""
    if rule.head is None:
        return 0
    sig = SIGNATURES.get(rule.head.name)
    if sig is None:
        raise GroundingError(f"unknown predicate {rule.head.name!r} (line {rule.line})")
    if "time" not in sig:
        return -1
    arg = rule.head.args[sig.index("time")]
    if isinstance(arg, Shift):
        if arg.offset != 1:
            raise GroundingError(f"unsupported time shift {arg} (line {rule.line})")
        return 1
    return 0


def _binding_units(rule: Rule) -> dict:
    """Map each variable unit (name or pair of names) to its sort."""
    units: dict = {}

    def note(key, sort):
        if units.setdefault(key, sort) != sort:
            raise GroundingError(
                f"variable {key} used with conflicting sorts (line {rule.line})"
            )

    atoms = ([] if rule.head is None else [rule.head]) + [l.atom for l in rule.body]
    for atom in atoms:
        sig = SIGNATURES.get(atom.name)
        if sig is None:
            raise GroundingError(f"unknown predicate {atom.name!r} (line {rule.line})")
        if len(atom.args) != len(sig):
            raise GroundingError(
                f"{atom.name}/{len(atom.args)} does not match its declared arity "
                f"{len(sig)} (line {rule.line})"
            )
        for arg, sort in zip(atom.args, sig):
            if sort == "time":
                continue
            if isinstance(arg, Var):
                note(arg.name, sort)
            elif isinstance(arg, Pair) and isinstance(arg.a, Var) and isinstance(arg.b, Var):
                if sort != "point":
                    raise GroundingError(
                        f"pair argument in non-point position of {atom.name} "
                        f"(line {rule.line})"
                    )
                note((arg.a.name, arg.b.name), "point")
    return units


def _subst_term(arg, sort, binding):
    if sort == "time":
        return None
    if isinstance(arg, Var):
        return binding[arg.name]
    if isinstance(arg, Const):
        return arg.value
    if isinstance(arg, Pair):
        if isinstance(arg.a, Var) and isinstance(arg.b, Var):
            return binding[(arg.a.name, arg.b.name)]
        return (_subst_term(arg.a, sort, binding), _subst_term(arg.b, sort, binding))
    raise GroundingError(f"cannot ground term {arg}")


def _subst_atom(atom: Atom, binding) -> tuple:
    sig = SIGNATURES[atom.name]
    out = [atom.name]
    for arg, sort in zip(atom.args, sig):
        v = _subst_term(arg, sort, binding)
        if v is not None:
            out.append(v)
    return tuple(out)


def ground(spec: DomainSpec, facts: WorldFacts, grid: GraspGrid, horizon: int) -> GroundedProblem:
    """Instantiate every rule over arms x grid points; time stays implicit."""
    if horizon < 1:
        raise InvalidHorizonError(f"horizon must be >= 1, got {horizon}")

    domains = {"arm": list(facts.arms), "point": facts.points()}
    static = facts.static_facts()
    action_rules: dict = {name: [] for name in ACTION_NAMES}
    transitions: list = []
    derived: list = []
    constraints: list = []
    counts = {name: 0 for name in ACTION_NAMES}

    for rule in spec.rules:
        shift = _head_shift(rule)
        units = _binding_units(rule)
        keys = sorted(units, key=str)
        value_lists = [domains[units[k]] for k in keys]
        is_action = rule.head is not None and rule.head.name in ACTION_NAMES
        if is_action:
            head_units = set()
            sig = SIGNATURES[rule.head.name]
            for arg, sort in zip(rule.head.args, sig):
                if isinstance(arg, Var) and sort != "time":
                    head_units.add(arg.name)
                elif isinstance(arg, Pair) and isinstance(arg.a, Var):
                    head_units.add((arg.a.name, arg.b.name))
            span = 1
            for k in head_units:
                span *= len(domains[units[k]])
            counts[rule.head.name] += span * (horizon + 1)

        for values in product(*value_lists):
            binding = dict(zip(keys, values))
            pos, neg = [], []
            ok = True
            for lit in rule.body:
                atom = _subst_atom(lit.atom, binding)
                if atom[0] in STATIC_PREDS:
                    holds = atom in static
                    if holds == lit.negated:
                        ok = False
                        break
                    continue  # satisfied statically, drop from the body
                (neg if lit.negated else pos).append(atom)
            if not ok:
                continue
            head = None if rule.head is None else _subst_atom(rule.head, binding)
            g = GroundRule(head=head, pos=tuple(pos), neg=tuple(neg))
            if rule.head is None:
                constraints.append(g)
            elif shift == 1:
                transitions.append(g)
            elif is_action:
                action_rules[rule.head.name].append(g)
            else:
                derived.append(g)

    return GroundedProblem(
        facts=static,
        init_fluents=facts.init_fluents(),
        action_rules=action_rules,
        transitions=transitions,
        derived=derived,
        constraints=constraints,
        horizon=horizon,
        max_pulls=facts.max_pulls,
        point_index={p: i for i, p in enumerate(facts.points())},
        point_scores=dict(facts.point_scores or {}),
        arm_order={a: i for i, a in enumerate(facts.arms)},
        counts=counts,
    )
