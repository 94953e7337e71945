"""Declarative task planning: rule language, grounder and plan solver."""

from .lang import Atom, Const, Literal, Pair, ParseError, Rule, SafetyError, Shift, Var, parse_program
from .domain import ACTION_NAMES, DEFAULT_DOMAIN, DomainSpec, default_domain, grasp_point_score, parse_domain
from .ground import GroundedProblem, GroundingError, InvalidHorizonError, WorldFacts, ground
from .solver import Plan, PlanAction, PlanCheckError, UnsatisfiableError, check_plan, solve

__all__ = [
    "Atom", "Const", "Literal", "Pair", "ParseError", "Rule", "SafetyError", "Shift", "Var",
    "parse_program",
    "ACTION_NAMES", "DEFAULT_DOMAIN", "DomainSpec", "default_domain", "grasp_point_score",
    "parse_domain",
    "GroundedProblem", "GroundingError", "InvalidHorizonError", "WorldFacts", "ground",
    "Plan", "PlanAction", "PlanCheckError", "UnsatisfiableError", "check_plan", "solve",
]
