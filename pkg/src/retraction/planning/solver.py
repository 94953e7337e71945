"""Bounded-horizon minimal-plan search over a grounded problem.

Iterative deepening depth-first search with failure memoization.  Plans of
the smallest feasible length are found first; within a length, actions are
tried in a fixed deterministic order (action kind, then descending grasp
point preference, then grid index, then arm rank), so the first plan found
carries the preferred grasp point among all minimum-length plans.
"""
from __future__ import annotations

from dataclasses import dataclass

from .ground import GroundedProblem, GroundRule

# depth-first ordering: progress-making actions first, so the first descent
# of a feasible length is already a complete plan and padding an extended
# plan repeats pulls rather than re-reaching
_PRIORITY = {"pull": 0, "move_to_roi": 1, "move_away": 2, "grasp": 3, "open": 4, "reach": 5}


class UnsatisfiableError(RuntimeError):
    def __init__(self, horizon: int):
        super().__init__(f"no plan achieves the goal within horizon {horizon}")
        self.horizon = horizon


class PlanCheckError(ValueError):
    pass


@dataclass(frozen=True)
class PlanAction:
    name: str
    arm: str
    point: tuple | None  # (x, y) mm for point-bearing actions
    t: int

    def as_row(self) -> tuple:
        x, y = self.point if self.point is not None else ("", "")
        return (self.name, self.arm, x, y, self.t)

    @property
    def atom(self) -> tuple:
        if self.point is not None:
            return (self.name, self.arm, self.point)
        return (self.name, self.arm)


@dataclass
class Plan:
    actions: list

    def __len__(self) -> int:
        return len(self.actions)

    def __iter__(self):
        return iter(self.actions)

    def grasp_point(self) -> tuple | None:
        for a in self.actions:
            if a.name == "grasp":
                return a.point
        return None

    def write_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("action,arm,x,y,t\n")
            for a in self.actions:
                fh.write(",".join(str(v) for v in a.as_row()) + "\n")

    @classmethod
    def read_csv(cls, path) -> "Plan":
        actions = []
        with open(path) as fh:
            next(fh)
            for line in fh:
                name, arm, x, y, t = line.strip().split(",")
                point = (float(x), float(y)) if x else None
                actions.append(PlanAction(name=name, arm=arm, point=point, t=int(t)))
        return cls(actions=actions)


def _closure(problem: GroundedProblem, fluents: frozenset) -> frozenset:
    """Same-step derivation to fixpoint (negation only over base fluents)."""
    known = set(fluents)
    changed = True
    while changed:
        changed = False
        for r in problem.derived:
            if r.head in known:
                continue
            if all(a in known for a in r.pos) and not any(a in fluents for a in r.neg):
                known.add(r.head)
                changed = True
    return frozenset(known)


def _satisfied(rule: GroundRule, ctx: frozenset) -> bool:
    return all(a in ctx for a in rule.pos) and not any(a in ctx for a in rule.neg)


def _applicable_actions(problem: GroundedProblem, closure: frozenset) -> list:
    acts = []
    for name, rules in problem.action_rules.items():
        for r in rules:
            if _satisfied(r, closure):
                acts.append(r.head)
    # constraints veto action atoms in context with the current fluents
    out = []
    for atom in acts:
        ctx = closure | {atom}
        if not any(c.head is None and _satisfied(c, ctx) for c in problem.constraints):
            out.append(atom)
    return out


def _action_key(problem: GroundedProblem, atom: tuple):
    name = atom[0]
    arm = atom[1]
    point = atom[2] if len(atom) > 2 else None
    score = -problem.point_scores.get(point, 0.0) if point is not None else 0.0
    idx = problem.point_index.get(point, 0) if point is not None else 0
    return (_PRIORITY.get(name, 99), score, idx, problem.arm_order.get(arm, 99))


def _step(problem: GroundedProblem, closure: frozenset, action: tuple) -> frozenset:
    ctx = closure | {action}
    nxt = set()
    for r in problem.transitions:
        if _satisfied(r, ctx):
            nxt.add(r.head)
    return frozenset(nxt)


def _goal(problem: GroundedProblem, closure: frozenset) -> bool:
    return ("goal",) in closure


def _relaxed_distance(problem: GroundedProblem, closure: frozenset) -> int:
    """Admissible lower bound on the remaining plan length.

    Layered reachability of the delete-free relaxation: apply every action
    whose positive pre-conditions hold (negation and constraints ignored)
    simultaneously per layer.  Each real step performs one action, so the
    first layer where the goal appears bounds the true distance from below.
    """
    layer = set(closure)
    for dist in range(problem.horizon + 1):
        if ("goal",) in layer:
            return dist
        acts = {
            r.head
            for rules in problem.action_rules.values()
            for r in rules
            if all(a in layer for a in r.pos)
        }
        ctx = layer | acts
        nxt = {r.head for r in problem.transitions if all(a in ctx for a in r.pos)}
        nxt |= layer
        changed = True
        while changed:
            changed = False
            for r in problem.derived:
                if r.head not in nxt and all(a in nxt for a in r.pos):
                    nxt.add(r.head)
                    changed = True
        if nxt == layer:
            return problem.horizon + 1  # goal unreachable even when relaxed
        layer = nxt
    return problem.horizon + 1


def solve(problem: GroundedProblem, min_length: int = 0) -> Plan:
    """Shortest plan of length >= min_length reaching the goal within horizon."""
    init = _closure(problem, problem.init_fluents)
    cap = problem.max_pulls

    def dfs(closure, remaining, pulls, memo, prefix):
        if remaining == 0:
            return prefix if _goal(problem, closure) else None
        key = (frozenset(closure), remaining, pulls if cap is not None else 0)
        if key in memo:
            return None
        if _relaxed_distance(problem, closure) > remaining:
            memo.add(key)
            return None
        for atom in sorted(
            _applicable_actions(problem, closure), key=lambda a: _action_key(problem, a)
        ):
            p = pulls + (atom[0] == "pull")
            if cap is not None and p > cap:
                continue
            nxt = _closure(problem, _step(problem, closure, atom))
            found = dfs(nxt, remaining - 1, p, memo, prefix + [atom])
            if found is not None:
                return found
        memo.add(key)
        return None

    for length in range(max(min_length, 0), problem.horizon + 1):
        found = dfs(init, length, 0, set(), [])
        if found is not None:
            actions = [
                PlanAction(
                    name=a[0],
                    arm=a[1],
                    point=a[2] if len(a) > 2 else None,
                    t=t,
                )
                for t, a in enumerate(found)
            ]
            return Plan(actions=actions)
    raise UnsatisfiableError(problem.horizon)


def check_plan(problem: GroundedProblem, plan: Plan) -> None:
    """Independent replay: verifies applicability at every step and the goal.

    Raises PlanCheckError on the first violation; returns None when valid.
    """
    closure = _closure(problem, problem.init_fluents)
    pulls = 0
    for i, act in enumerate(plan):
        if act.t != i:
            raise PlanCheckError(f"action {i} has time step {act.t}, expected {i}")
        candidates = [
            r.head
            for r in problem.action_rules.get(act.name, [])
            if r.head == act.atom and _satisfied(r, closure)
        ]
        if not candidates:
            raise PlanCheckError(f"action {act.atom} not applicable at step {i}")
        ctx = closure | {act.atom}
        if any(c.head is None and _satisfied(c, ctx) for c in problem.constraints):
            raise PlanCheckError(f"action {act.atom} violates a constraint at step {i}")
        if act.name == "pull":
            pulls += 1
            if problem.max_pulls is not None and pulls > problem.max_pulls:
                raise PlanCheckError(f"pull budget {problem.max_pulls} exceeded at step {i}")
        closure = _closure(problem, _step(problem, closure, act.atom))
    if not _goal(problem, closure):
        raise PlanCheckError("goal does not hold at the end of the plan")
