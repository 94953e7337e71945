"""Deliberative execution loop.

Runs a plan as commanded tool trajectories on the reference ("actual")
model while stepping the pre-operative model in lockstep with the identical
commands.  Each contact tick senses both models, classifies the cloud
discrepancy, guards the pre-operative force estimate (there is no force
feedback on the real side), triggers attachment re-estimation on warnings
and re-plans after interruptions.  A run ends in success (final ROI
visibility at or above the target), fail, or abort.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import fem, sensing
from .ap_update import APUpdateLog, APUpdateRecord, EstimationFailedError, estimate_aps
from .fem import APSet, GraspConstraint, MaterialParams, SupportPlane, TissueMesh
from .monitor import MonitorConfig, MonitorState, mark_grasped, observe_rest, update
from .planning import (
    Plan,
    UnsatisfiableError,
    WorldFacts,
    default_domain,
    grasp_point_score,
    ground,
    solve,
)
from .sensing import ROI, CameraModel, GraspGrid, PointCloud


@dataclass(frozen=True)
class ForceGuardConfig:
    epsilon: float = 0.3  # N
    slowdown_grace: int = 10  # ticks at min_rate before interrupting
    min_rate: float = 1.0 / 8.0

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if not (0.0 < self.min_rate <= 1.0):
            raise ValueError("min_rate must lie in (0, 1]")


@dataclass
class ExecState:
    rate: float = 1.0
    warning: int = 0
    grace: int = 0  # consecutive over-force ticks at min_rate
    blacklist: set = field(default_factory=set)
    abort: bool = False


@dataclass
class TickRow:
    tick: int
    action: str
    r: float
    s: int
    mu: float
    f_preop: float
    f_actual: float
    visibility: float

    def as_csv(self) -> str:
        return (
            f"{self.tick},{self.action},{self.r:.6f},{self.s},{self.mu:.6f},"
            f"{self.f_preop:.6f},{self.f_actual:.6f},{self.visibility:.6f}"
        )


@dataclass
class ExecutionRecord:
    outcome: str  # success | fail | abort
    final_visibility: float
    actions_executed: int
    over_force_ticks: int
    f_max: float
    ap_log: APUpdateLog
    ticks: list
    plans: list
    epsilon: float
    executed: list = field(default_factory=list)  # PlanAction sequence actually run

    def executed_plan(self) -> Plan:
        return Plan(actions=[replace(a, t=i) for i, a in enumerate(self.executed)])

    def write_log(self, out_dir) -> None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "ticks.csv"), "w") as fh:
            fh.write("tick,action,r,s,mu,F_preop,F_actual,visibility\n")
            for row in self.ticks:
                fh.write(row.as_csv() + "\n")
        for i, plan in enumerate(self.plans):
            plan.write_csv(os.path.join(out_dir, f"plan_{i:02d}.csv"))
        self.ap_log.write_csv(os.path.join(out_dir, "ap_updates.csv"))
        with open(os.path.join(out_dir, "summary.csv"), "w") as fh:
            fh.write("outcome,visibility,actions,over_force_ticks,f_max,epsilon\n")
            fh.write(
                f"{self.outcome},{self.final_visibility:.6f},{self.actions_executed},"
                f"{self.over_force_ticks},{self.f_max:.6f},{self.epsilon:.6f}\n"
            )


@dataclass
class ModelInstance:
    """One simulated tissue: mesh state, boundary conditions and grasp."""

    mesh: TissueMesh
    mat: MaterialParams
    aps: APSet
    support: SupportPlane | None = None
    gravity: tuple = (0.0, 0.0, -9.81)
    grasp: GraspConstraint | None = None
    forces: fem.ForceField | None = None
    _prev: np.ndarray | None = None  # previous equilibrium, for warm starts

    def settle(self) -> None:
        cur = self.mesh.current_positions.copy()
        if self._prev is not None and self.grasp is not None and self.grasp.active:
            # linear extrapolation of the last displacement increment; small
            # per-tick motion makes this a near-converged initial guess
            self.mesh.current_positions = 2.0 * cur - self._prev
        self.mesh, self.forces = fem.solve_quasi_static(
            self.mesh, self.mat, self.aps, self.grasp,
            gravity=self.gravity, support=self.support,
        )
        self._prev = cur

    def sense(self, cam: CameraModel, rays=(24, 24)) -> PointCloud:
        return sensing.capture_point_cloud(self.mesh, cam, rays=rays)

    def bind_grasp(self, point, radius: float = 6.0) -> None:
        self.grasp = GraspConstraint.bind(self.mesh, point, radius=radius)
        self._prev = None

    def release_grasp(self) -> None:
        if self.grasp is not None:
            self.grasp = replace(self.grasp, active=False)
            # a released slab falls back onto the support; restarting the
            # solve from the lifted shape strands Newton far from the new
            # equilibrium, so cap the initial guess at the rest height
            self.mesh.current_positions[:, 2] = np.minimum(
                self.mesh.current_positions[:, 2], self.mesh.rest_positions[:, 2]
            )
        self._prev = None

    def f_max(self) -> float:
        return 0.0 if self.forces is None else self.forces.max_magnitude

    def copy(self) -> "ModelInstance":
        return ModelInstance(
            mesh=self.mesh.copy(), mat=self.mat, aps=self.aps,
            support=self.support, gravity=self.gravity,
            grasp=self.grasp, forces=self.forces,
        )


@dataclass(frozen=True)
class ExecOptions:
    monitor: MonitorConfig | None = MonitorConfig()
    guard: ForceGuardConfig | None = ForceGuardConfig()
    learn: bool = True
    replan_enabled: bool = True
    extend: bool = True  # append actions while visibility falls short
    nominal_step: float = 2.0  # mm commanded per tick at full rate
    pull_height: float = 5.0  # mm per pull action
    planar_step: float = 10.0  # mm per planar action
    max_pulls: int = 5
    max_actions: int = 40
    learn_budget: int = 50
    grasp_radius: float = 6.0
    rays: tuple = (24, 24)
    vis_target: float = 0.8
    horizon: int = 12
    log_visibility: bool = True  # per-tick visibility; off for fast rollouts
    f_stop: float | None = 1.0  # N; hard tissue-safety stop on the measured force


def force_guard(F: float, guard: ForceGuardConfig, state: ExecState) -> str:
    """Over-force policy: slow down first, interrupt when slowing is exhausted."""
    if F <= guard.epsilon:
        state.grace = 0
        return "continue"
    if state.rate > guard.min_rate:
        state.rate = max(state.rate / 2.0, guard.min_rate)
        state.grace = 0
        return "slow"
    state.grace += 1
    if state.grace >= guard.slowdown_grace:
        return "interrupt"
    return "slow"


def _score_table(grid: GraspGrid, mesh: TissueMesh, aps: APSet, roi: ROI) -> dict:
    diag = float(math.hypot(mesh.dims[0], mesh.dims[1]))
    ap_xy = mesh.rest_positions[list(aps.node_ids)][:, :2] if len(aps) else np.zeros((0, 2))
    return {
        (float(p[0]), float(p[1])): grasp_point_score(p[:2], ap_xy, roi.center[:2], diag)
        for p in grid.points
    }


def make_plan(
    grid: GraspGrid,
    mesh: TissueMesh,
    aps: APSet,
    roi: ROI,
    blacklist=(),
    max_pulls: int = 5,
    horizon: int = 12,
    min_length: int = 0,
    extra_init: frozenset = frozenset(),
    initially_exposed: bool = False,
) -> Plan:
    """Ground the default domain against the current world and solve."""
    facts = WorldFacts(
        grid=grid,
        point_scores=_score_table(grid, mesh, aps, roi),
        max_pulls=max_pulls,
        blacklist=frozenset(blacklist),
        extra_init=frozenset(extra_init),
        initially_exposed=initially_exposed,
    )
    problem = ground(default_domain(), facts, grid, horizon=horizon)
    return solve(problem, min_length=min_length)


def replan(grid: GraspGrid, preop: ModelInstance, roi: ROI, blacklist, opts: ExecOptions) -> Plan:
    """Fresh plan against the updated attachment set, avoiding blacklisted points."""
    return make_plan(
        grid, preop.mesh, preop.aps, roi,
        blacklist=blacklist, max_pulls=opts.max_pulls, horizon=opts.horizon,
    )


class _Run:
    """Mutable state of one execution; the public entry is execute_plan."""

    def __init__(self, plan, actual, preop, grid, roi, endoscope, depth_cam, opts):
        self.actual: ModelInstance = actual
        self.preop: ModelInstance = preop
        self.single = actual is preop
        self.grid = grid
        self.roi = roi
        self.endoscope = endoscope
        self.depth_cam = depth_cam
        self.opts = opts
        self.state = ExecState()
        self.mon = MonitorState()
        self.ap_log = APUpdateLog()
        self.queue = list(plan)
        self.plans = [plan]
        self.ticks: list[TickRow] = []
        self.tick = 0
        self.actions_done = 0
        self.pulls_done = 0
        self.grasp_point = None
        self.grasp_arm = None
        self.fluents: set = set()
        self.outcome = None
        self.learn_blocked = False  # set after a failed update, until next action
        self.mu_last = float("nan")
        self.vis_last = 0.0
        self.interrupted = False
        self.executed: list = []

    # -- sensing helpers ----------------------------------------------------
    def visibility(self) -> float:
        return sensing.roi_visibility(self.actual.mesh, self.roi, self.endoscope)

    def sense_actual(self) -> PointCloud:
        return self.actual.sense(self.depth_cam, self.opts.rays)

    def sense_preop(self) -> PointCloud:
        if self.single:
            return self.sense_actual()
        return self.preop.sense(self.depth_cam, self.opts.rays)

    def log(self, action: str):
        if self.opts.log_visibility:
            self.vis_last = self.visibility()
        self.ticks.append(
            TickRow(
                tick=self.tick,
                action=action,
                r=self.state.rate,
                s=self.state.warning,
                mu=self.mu_last,
                f_preop=self.preop.f_max(),
                f_actual=self.actual.f_max(),
                visibility=self.vis_last,
            )
        )
        self.tick += 1

    # -- the contact tick ---------------------------------------------------
    def contact_tick(self, action: str, direction: np.ndarray, remaining: float) -> float:
        """Advance both grasp targets by r x nominal along `direction`.

        Returns the advance applied; sets state.warning / interrupted flags.
        """
        opts = self.opts
        step = min(opts.nominal_step * self.state.rate, remaining)
        delta = direction * step
        self.actual.grasp.target = self.actual.grasp.target + delta
        self.actual.settle()
        if not self.single:
            self.preop.grasp.target = self.preop.grasp.target + delta
            self.preop.settle()

        if opts.f_stop is not None and self.actual.f_max() > opts.f_stop:
            # hard stop: the measured force says the tissue is being damaged,
            # regardless of what the pre-operative model predicts
            self.interrupted = True
            self.log(action)
            return step

        if opts.monitor is not None and not self.single:
            pc_t = self.sense_actual()
            pc_s = self.sense_preop()
            decision = update(self.mon, opts.monitor, pc_t, pc_s, self.state.rate)
            self.mu_last = decision.mu
            self.state.warning = decision.s
            if decision.s == 3:
                self.state.abort = True
                self.log(action)
                return step
            if decision.learn and opts.learn and not self.learn_blocked:
                self.run_learning(pc_t)
            if decision.s >= 1 and decision.r > 0:
                floor = opts.guard.min_rate if opts.guard is not None else 0.0
                self.state.rate = max(min(self.state.rate, decision.r), floor)
            if decision.s == 2:
                self.interrupted = True
        else:
            self.state.warning = 0

        if opts.guard is not None:
            verdict = force_guard(self.preop.f_max(), opts.guard, self.state)
            if verdict == "interrupt":
                self.interrupted = True

        self.log(action)
        return step

    def run_learning(self, pc_t: PointCloud):
        opts = self.opts
        cam, rays = self.depth_cam, opts.rays

        def sense_fn(mesh):
            return sensing.capture_point_cloud(mesh, cam, rays=rays)

        rest = replace(self.preop.mesh, current_positions=self.preop.mesh.rest_positions.copy())
        try:
            res = estimate_aps(
                rest, self.preop.mat, pc_t, self.preop.grasp, self.preop.aps,
                opts.monitor, budget=opts.learn_budget, sense_fn=sense_fn,
                d_rest=self.mon.d_rest or 0.0, gravity=self.preop.gravity,
                support=self.preop.support, warm_mesh=self.preop.mesh,
            )
        except EstimationFailedError:
            self.learn_blocked = True
            return
        success = res.mu_after <= opts.monitor.delta1
        self.ap_log.add(
            APUpdateRecord(
                tick=self.tick, mu_before=res.mu_before, mu_after=res.mu_after,
                added=res.added, removed=res.removed,
                evaluations=res.evaluations, success=success,
            )
        )
        self.preop.aps = res.ap_set
        self.preop._prev = None  # new boundary conditions invalidate the warm start
        self.preop.settle()
        if not success:
            self.learn_blocked = True

    # -- actions -------------------------------------------------------------
    def run_action(self, act) -> None:
        opts = self.opts
        self.state.rate = 1.0
        self.state.grace = 0
        self.learn_blocked = False
        self.interrupted = False

        if act.name == "reach":
            if opts.monitor is not None and not self.single and not self.mon.grasped:
                observe_rest(self.mon, self.sense_actual(), self.sense_preop(), opts.monitor)
            self.fluents |= {("at", act.arm, act.point), ("located", act.arm)}
            self.log("reach")
        elif act.name == "open":
            self.fluents.add(("gripper_open", act.arm))
            self.log("open")
        elif act.name == "grasp":
            point = (act.point[0], act.point[1])
            self.actual.bind_grasp(point, opts.grasp_radius)
            self.actual.settle()
            if not self.single:
                self.preop.bind_grasp(point, opts.grasp_radius)
                self.preop.settle()
            if opts.monitor is not None and not self.single and not self.mon.grasped:
                observe_rest(self.mon, self.sense_actual(), self.sense_preop(), opts.monitor)
            mark_grasped(self.mon)
            self.grasp_point = point
            self.grasp_arm = act.arm
            self.fluents |= {("holding", act.arm), ("grasped", point)}
            self.log("grasp")
        elif act.name in ("pull", "move_to_roi", "move_away"):
            direction, total = self.trajectory(act.name)
            remaining = total
            while remaining > 1e-9 and not self.state.abort and not self.interrupted:
                remaining -= self.contact_tick(act.name, direction, remaining)
            if act.name == "pull":
                self.pulls_done += 1
                self.fluents |= {("raised",), ("exposed",)}
            else:
                self.fluents.add(("exposed",))
        else:
            raise ValueError(f"unknown action {act.name!r}")
        self.actions_done += 1
        self.executed.append(act)

    def trajectory(self, name: str):
        opts = self.opts
        if name == "pull":
            return np.array([0.0, 0.0, 1.0]), opts.pull_height
        anchor = self.actual.grasp.target
        if name == "move_to_roi":
            d = self.roi.center[:2] - anchor[:2]
        else:  # move_away: planar retreat from the endoscope
            d = anchor[:2] - self.endoscope.position[:2]
        n = float(np.linalg.norm(d))
        lateral = d / n if n > 1e-9 else np.array([1.0, 0.0])
        return np.array([lateral[0], lateral[1], 0.0]), opts.planar_step

    # -- re-planning and extension -------------------------------------------
    def handle_interrupt(self) -> bool:
        """Stop, release, re-plan from scratch. Returns False when the run ends."""
        self.queue.clear()
        if not self.opts.replan_enabled:
            self.outcome = None  # decided by final visibility
            return False
        if self.grasp_point is not None:
            self.state.blacklist.add(self.grasp_point)
        self.release_models()
        try:
            plan = replan(self.grid, self.preop, self.roi, self.state.blacklist, self.opts)
        except UnsatisfiableError:
            self.outcome = "fail"
            return False
        self.plans.append(plan)
        self.queue = list(plan)
        return True

    def release_models(self):
        self.actual.release_grasp()
        self.actual.settle()
        if not self.single:
            self.preop.release_grasp()
            self.preop.settle()
        self.grasp_point = None
        self.fluents = set()
        self.pulls_done = 0
        self.state.rate = 1.0
        self.state.warning = 0
        self.state.grace = 0

    def extend_plan(self) -> bool:
        """Ask for one more action from the current symbolic state."""
        budget = self.opts.max_pulls - self.pulls_done
        try:
            plan = make_plan(
                self.grid, self.preop.mesh, self.preop.aps, self.roi,
                blacklist=self.state.blacklist, max_pulls=max(budget, 0),
                horizon=self.opts.horizon, min_length=1,
                extra_init=frozenset(self.fluents), initially_exposed=True,
            )
        except UnsatisfiableError:
            return False
        ext = plan.actions[:1]
        if not ext:
            return False
        self.plans.append(plan)
        self.queue = ext
        return True

    # -- main loop -------------------------------------------------------------
    def run(self) -> ExecutionRecord:
        opts = self.opts
        self.actual.settle()
        if not self.single:
            self.preop.settle()
        while not self.state.abort:
            if not self.queue:
                vis = self.visibility()
                if vis >= opts.vis_target or not opts.extend:
                    break
                if self.actions_done >= opts.max_actions or not self.extend_plan():
                    break
            if self.actions_done >= opts.max_actions:
                break
            act = self.queue.pop(0)
            try:
                self.run_action(act)
            except (fem.NonConvergenceError, fem.DegenerateDeformationError):
                self.state.abort = True
                break
            if self.interrupted and not self.state.abort:
                if not self.handle_interrupt():
                    break

        vis = self.visibility()
        if self.state.abort:
            outcome = "abort"
        elif self.outcome is not None:
            outcome = self.outcome
        else:
            outcome = "success" if vis >= opts.vis_target else "fail"
        eps = opts.guard.epsilon if opts.guard is not None else float("nan")
        f_series = [row.f_actual for row in self.ticks]
        over = sum(1 for f in f_series if opts.guard is not None and f > opts.guard.epsilon)
        return ExecutionRecord(
            outcome=outcome,
            final_visibility=vis,
            actions_executed=self.actions_done,
            over_force_ticks=over,
            f_max=max(f_series, default=0.0),
            ap_log=self.ap_log,
            ticks=self.ticks,
            plans=self.plans,
            epsilon=eps,
            executed=self.executed,
        )


def execute_plan(
    plan: Plan,
    actual: ModelInstance,
    preop: ModelInstance,
    grid: GraspGrid,
    roi: ROI,
    endoscope: CameraModel,
    depth_cam: CameraModel,
    opts: ExecOptions = ExecOptions(),
) -> ExecutionRecord:
    """Run `plan` on the actual model with the pre-operative model in lockstep.

    Pass the same instance as both `actual` and `preop` for single-model
    rollouts (calibration, pre-operative plan candidate evaluation); the
    monitor is bypassed in that mode since both clouds coincide.
    """
    return _Run(plan, actual, preop, grid, roi, endoscope, depth_cam, opts).run()
