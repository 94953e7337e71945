"""Rule language, grounding and the bounded-horizon plan solver."""
import numpy as np
import pytest

from retraction.planning import (
    ParseError,
    Plan,
    PlanAction,
    PlanCheckError,
    SafetyError,
    UnsatisfiableError,
    WorldFacts,
    check_plan,
    default_domain,
    grasp_point_score,
    ground,
    parse_program,
    solve,
)
from retraction.planning.ground import InvalidHorizonError
from retraction.sensing import GraspGrid


def make_grid():
    xs = np.linspace(-20.0, 20.0, 5)
    pts = np.array([(x, y, 0.0) for y in xs for x in xs])
    return GraspGrid(points=pts, margin=10.0)


def make_problem(horizon=6, **kw):
    grid = make_grid()
    facts = WorldFacts(grid=grid, **kw)
    return ground(default_domain(), facts, grid, horizon=horizon)


# -- language ---------------------------------------------------------------


def test_parse_facts_rules_and_constraints():
    rules = parse_program("arm(psm1). goal(t) :- exposed(t). :- raised(t), exposed(t).")
    assert len(rules) == 3
    assert rules[0].is_fact
    assert rules[1].head.name == "goal"
    assert rules[2].head is None


def test_parse_pairs_and_time_shift():
    (rule,) = parse_program("at(A,(X,Y),t+1) :- reach(A,(X,Y),t).")
    assert str(rule.head.args[2]) == "t+1"
    assert str(rule.head.args[1]) == "(X,Y)"


def test_parse_errors():
    with pytest.raises(ParseError):
        parse_program("goal(t) :- exposed(t)")  # missing final period
    with pytest.raises(ParseError):
        parse_program("goal(t) :- ?.")


def test_safety_check_rejects_unbound_head_variable():
    with pytest.raises(SafetyError):
        parse_program("holding(A,t) :- exposed(t).")
    with pytest.raises(SafetyError):
        parse_program("goal(t) :- not holding(A,t).")


def test_default_domain_declares_all_actions():
    spec = default_domain()
    assert set(spec.actions) == {"reach", "open", "grasp", "pull", "move_to_roi", "move_away"}


# -- grounding ---------------------------------------------------------------


def test_grounding_respects_reachability_and_blacklist():
    prob = make_problem(blacklist=frozenset({(-20.0, -20.0)}))
    assert ("point", (-20.0, -20.0)) not in prob.facts
    assert ("reachable", "psm1", (20.0, 20.0)) in prob.facts
    assert ("reachable", "psm2", (20.0, 20.0)) not in prob.facts  # wrong side
    assert ("reachable", "psm1", (0.0, 0.0)) in prob.facts  # midline: both arms
    assert ("reachable", "psm2", (0.0, 0.0)) in prob.facts


def test_grounding_rejects_bad_horizon_and_unknown_predicates():
    grid = make_grid()
    with pytest.raises(InvalidHorizonError):
        ground(default_domain(), WorldFacts(grid=grid), grid, horizon=0)
    from retraction.planning import parse_domain
    from retraction.planning.ground import GroundingError

    bad = parse_domain("goal(t) :- exposed(t).\nfoo(t) :- exposed(t).")
    with pytest.raises(GroundingError):
        ground(bad, WorldFacts(grid=grid), grid, horizon=3)


def test_instance_counts_reported():
    prob = make_problem()
    assert prob.counts["reach"] > 0
    assert prob.atom_count == sum(prob.counts.values())


# -- solving -----------------------------------------------------------------


def test_minimal_plan_is_reach_open_grasp_pull():
    plan = solve(make_problem())
    assert [a.name for a in plan] == ["reach", "open", "grasp", "pull"]
    assert [a.t for a in plan] == [0, 1, 2, 3]
    check_plan(make_problem(), plan)


def test_initially_exposed_needs_no_actions():
    plan = solve(make_problem(initially_exposed=True))
    assert len(plan) == 0


def test_min_length_extension_pads_with_pulls():
    prob = make_problem(initially_exposed=True, max_pulls=3,
                        extra_init=frozenset({("holding", "psm1"), ("raised",)}))
    plan = solve(prob, min_length=1)
    assert len(plan) == 1
    assert plan.actions[0].name == "pull"  # highest priority progress action


def test_solver_prefers_higher_scored_points():
    scores = {(x, y): 0.0 for x in np.linspace(-20, 20, 5) for y in np.linspace(-20, 20, 5)}
    scores[(20.0, -20.0)] = 5.0
    plan = solve(make_problem(point_scores=scores))
    assert plan.grasp_point() == (20.0, -20.0)
    assert plan.actions[0].arm == "psm2"  # y < 0 side


def test_blacklist_excludes_grasp_points():
    scores = {(20.0, -20.0): 5.0, (0.0, 0.0): 4.0}
    plan = solve(make_problem(point_scores=scores, blacklist=frozenset({(20.0, -20.0)})))
    assert plan.grasp_point() == (0.0, 0.0)


def test_all_points_blacklisted_is_unsatisfiable():
    pts = frozenset((float(x), float(y))
                    for x in np.linspace(-20, 20, 5) for y in np.linspace(-20, 20, 5))
    with pytest.raises(UnsatisfiableError):
        solve(make_problem(blacklist=pts))


def test_horizon_too_short_is_unsatisfiable():
    with pytest.raises(UnsatisfiableError):
        solve(make_problem(horizon=3))


def test_solver_is_deterministic():
    a = solve(make_problem())
    b = solve(make_problem())
    assert a.actions == b.actions


# -- plan checking and serialization ------------------------------------------


def test_check_plan_rejects_inapplicable_and_missed_goal():
    prob = make_problem()
    bad = Plan(actions=[PlanAction("pull", "psm1", None, 0)])  # nothing held
    with pytest.raises(PlanCheckError):
        check_plan(prob, bad)
    incomplete = Plan(actions=[PlanAction("reach", "psm1", (0.0, 0.0), 0)])
    with pytest.raises(PlanCheckError):
        check_plan(prob, incomplete)


def test_check_plan_rejects_wrong_timestamps_and_pull_budget():
    prob = make_problem(max_pulls=1)
    plan = solve(prob)
    shifted = Plan(actions=[PlanAction(a.name, a.arm, a.point, a.t + 1) for a in plan])
    with pytest.raises(PlanCheckError):
        check_plan(prob, shifted)
    over = Plan(actions=list(plan.actions)
                + [PlanAction("pull", plan.actions[0].arm, None, len(plan))])
    with pytest.raises(PlanCheckError):
        check_plan(prob, over)


def test_plan_csv_roundtrip(tmp_path):
    plan = solve(make_problem())
    path = tmp_path / "plan.csv"
    plan.write_csv(path)
    back = Plan.read_csv(path)
    assert back.actions == plan.actions


# -- scoring -------------------------------------------------------------------


def test_grasp_point_score_prefers_far_from_aps_close_to_roi():
    ap = np.array([[-20.0, 0.0]])
    roi = (15.0, 0.0)
    near_roi = grasp_point_score((10.0, 0.0), ap, roi, 100.0)
    near_ap = grasp_point_score((-15.0, 0.0), ap, roi, 100.0)
    assert near_roi > near_ap
    # empty AP set: pure ROI attraction
    assert grasp_point_score((15.0, 0.0), np.zeros((0, 2)), roi, 100.0) == pytest.approx(0.0)
