"""Default task-planning domain for grasp-and-retract ROI exposure.

Fluents are monotone (no deletes): the frame rules persist every fluent, so
plan prefixes only ever grow what is true.  Negation-as-failure in action
pre-conditions ("not holding", "not gripper_open") is safe because negated
predicates are produced only by transition rules, never within a step.

The exposure effect of pull / move_to_roi / move_away is optimistic at
planning time; the pre-operative pipeline validates plans by simulation
rollout and extends them when the simulated visibility falls short.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .lang import Rule, parse_program

ACTION_NAMES = ("reach", "open", "grasp", "pull", "move_to_roi", "move_away")

# argument sorts per predicate; "time" is implicit in the search
SIGNATURES = {
    "arm": ("arm",),
    "point": ("point",),
    "reachable": ("arm", "point"),
    "at": ("arm", "point", "time"),
    "located": ("arm", "time"),
    "gripper_open": ("arm", "time"),
    "holding": ("arm", "time"),
    "grasped": ("point", "time"),
    "raised": ("time",),
    "exposed": ("time",),
    "goal": ("time",),
    "reach": ("arm", "point", "time"),
    "open": ("arm", "time"),
    "grasp": ("arm", "point", "time"),
    "pull": ("arm", "time"),
    "move_to_roi": ("arm", "time"),
    "move_away": ("arm", "time"),
}

DEFAULT_DOMAIN = """
% action pre-conditions
reach(A,(X,Y),t)    :- arm(A), point((X,Y)), reachable(A,(X,Y)), not holding(A,t).
open(A,t)           :- arm(A), located(A,t), not gripper_open(A,t).
grasp(A,(X,Y),t)    :- at(A,(X,Y),t), gripper_open(A,t), not holding(A,t).
pull(A,t)           :- arm(A), holding(A,t).
move_to_roi(A,t)    :- arm(A), holding(A,t), raised(t).
move_away(A,t)      :- arm(A), holding(A,t), raised(t).

% one grasp active at a time
:- grasp(A,(X,Y),t), holding(B,t).

% effects
at(A,(X,Y),t+1)     :- reach(A,(X,Y),t).
located(A,t+1)      :- reach(A,(X,Y),t).
gripper_open(A,t+1) :- open(A,t).
holding(A,t+1)      :- grasp(A,(X,Y),t).
grasped((X,Y),t+1)  :- grasp(A,(X,Y),t).
raised(t+1)         :- pull(A,t).
exposed(t+1)        :- pull(A,t).
exposed(t+1)        :- move_to_roi(A,t).
exposed(t+1)        :- move_away(A,t).

% frame: fluents persist
at(A,(X,Y),t+1)     :- at(A,(X,Y),t).
located(A,t+1)      :- located(A,t).
gripper_open(A,t+1) :- gripper_open(A,t).
holding(A,t+1)      :- holding(A,t).
grasped((X,Y),t+1)  :- grasped((X,Y),t).
raised(t+1)         :- raised(t).
exposed(t+1)        :- exposed(t).

% goal: the ROI is exposed
goal(t) :- exposed(t).
"""


@dataclass(frozen=True)
class DomainSpec:
    rules: tuple[Rule, ...]
    actions: tuple[str, ...]

    @property
    def n_rules(self) -> int:
        return len(self.rules)


def parse_domain(text: str) -> DomainSpec:
    """Parse rule source; action schemas are heads named after known actions."""
    rules = parse_program(text)
    seen = []
    for r in rules:
        if r.head is not None and r.head.name in ACTION_NAMES and r.head.name not in seen:
            seen.append(r.head.name)
    return DomainSpec(rules=rules, actions=tuple(seen))


def default_domain() -> DomainSpec:
    return parse_domain(DEFAULT_DOMAIN)


def grasp_point_score(point, ap_points_xy, roi_center, diagonal: float) -> float:
    """Preference for grasp candidates far from attachments, close to the ROI.

    score = d_AP/D - d_ROI/D with lateral distances and D the tissue
    diagonal, so the ranking is invariant to uniform geometric scaling.
    An empty attachment set drops the d_AP term.
    """
    p = np.asarray(point, dtype=float)[:2]
    d_roi = float(np.linalg.norm(p - np.asarray(roi_center, dtype=float)[:2]))
    ap = np.asarray(ap_points_xy, dtype=float)
    if ap.size == 0:
        return -d_roi / diagonal
    ap = ap.reshape(len(ap), -1)[:, :2]
    d_ap = float(np.linalg.norm(ap - p[None, :], axis=1).min())
    return (d_ap - d_roi) / diagonal
