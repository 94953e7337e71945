"""Experiment pipeline: scenario corpus, calibration, plan generation,
attachment perturbation, batch runs and summary tables.

Scenario files are human-readable key=value text; attachment regions are
axis-aligned rectangles rasterized onto bottom-surface nodes, optionally
with explicit node-id lists (used by the perturbation operator).  Cameras
are auto-placed from the scenario geometry: the endoscope looks at the ROI
from the side opposite the attachments, the depth camera is a narrow
close-up on the expected retraction site (a tight footprint is what makes
the median cloud discrepancy sensitive to local model mismatch).
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import fem, sensing
from .executive import (
    ExecOptions,
    ExecutionRecord,
    ForceGuardConfig,
    ModelInstance,
    execute_plan,
    make_plan,
)
from .fem import APSet, MaterialParams, SupportPlane, TissueMesh
from .monitor import MonitorConfig
from .planning import Plan, PlanAction
from .sensing import ROI, CameraModel, GraspGrid


class ScenarioFormatError(ValueError):
    pass


class InvalidPerturbationError(ValueError):
    pass


class CalibrationUnreliableError(RuntimeError):
    pass


class NoFeasiblePreopPlanError(RuntimeError):
    pass


@dataclass
class ScenarioConfig:
    name: str
    dims: tuple = (120.0, 120.0, 5.0)
    resolution: tuple = (13, 13, 3)
    young_modulus: float = 3000.0
    poisson_ratio: float = 0.45
    density: float = 1050.0
    roi_center: tuple = (30.0, 0.0)
    roi_radius: float = 10.0
    seed: int = 0
    ap_rects: list = field(default_factory=list)  # (x0, y0, x1, y1) mm
    ap_nodes: list = field(default_factory=list)  # explicit node ids

    def to_text(self) -> str:
        lines = [
            f"name = {self.name}",
            f"mesh_dims = {self.dims[0]:g} {self.dims[1]:g} {self.dims[2]:g}",
            f"mesh_resolution = {self.resolution[0]} {self.resolution[1]} {self.resolution[2]}",
            f"young_modulus = {self.young_modulus:g}",
            f"poisson_ratio = {self.poisson_ratio:g}",
            f"density = {self.density:g}",
            f"roi = {self.roi_center[0]:g} {self.roi_center[1]:g} {self.roi_radius:g}",
            f"seed = {self.seed}",
        ]
        for r in self.ap_rects:
            lines.append(f"ap_rect = {r[0]:g} {r[1]:g} {r[2]:g} {r[3]:g}")
        if self.ap_nodes:
            lines.append("ap_nodes = " + " ".join(str(i) for i in self.ap_nodes))
        return "\n".join(lines) + "\n"

    @classmethod
    def parse(cls, text: str) -> "ScenarioConfig":
        cfg = cls(name="unnamed")
        seen = False
        for ln, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ScenarioFormatError(f"line {ln}: expected key = value")
            key, val = (s.strip() for s in line.split("=", 1))
            parts = val.split()
            try:
                if key == "name":
                    cfg.name = val
                elif key == "mesh_dims":
                    cfg.dims = tuple(float(v) for v in parts)
                elif key == "mesh_resolution":
                    cfg.resolution = tuple(int(v) for v in parts)
                elif key == "young_modulus":
                    cfg.young_modulus = float(val)
                elif key == "poisson_ratio":
                    cfg.poisson_ratio = float(val)
                elif key == "density":
                    cfg.density = float(val)
                elif key == "roi":
                    cfg.roi_center = (float(parts[0]), float(parts[1]))
                    cfg.roi_radius = float(parts[2])
                elif key == "seed":
                    cfg.seed = int(val)
                elif key == "ap_rect":
                    cfg.ap_rects.append(tuple(float(v) for v in parts))
                elif key == "ap_nodes":
                    cfg.ap_nodes = [int(v) for v in parts]
                else:
                    raise ScenarioFormatError(f"line {ln}: unknown key {key!r}")
            except (ValueError, IndexError) as exc:
                if isinstance(exc, ScenarioFormatError):
                    raise
                raise ScenarioFormatError(f"line {ln}: malformed value for {key!r}") from exc
            seen = True
        if not seen:
            raise ScenarioFormatError("empty scenario file")
        return cfg

    @classmethod
    def load(cls, path) -> "ScenarioConfig":
        with open(path) as fh:
            return cls.parse(fh.read())

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_text())


def bottom_nodes_in_rect(mesh: TissueMesh, rect) -> list:
    x0, y0, x1, y1 = rect
    pos = mesh.rest_positions
    eps = 1e-9
    mask = (
        (pos[:, 2] <= mesh.bottom_z + eps)
        & (pos[:, 0] >= min(x0, x1) - eps)
        & (pos[:, 0] <= max(x0, x1) + eps)
        & (pos[:, 1] >= min(y0, y1) - eps)
        & (pos[:, 1] <= max(y0, y1) + eps)
    )
    return [int(i) for i in np.flatnonzero(mask)]


def scenario_ap_nodes(mesh: TissueMesh, cfg: ScenarioConfig) -> APSet:
    nodes = set(cfg.ap_nodes)
    for rect in cfg.ap_rects:
        nodes.update(bottom_nodes_in_rect(mesh, rect))
    if not nodes:
        raise ScenarioFormatError(f"scenario {cfg.name!r} defines no attachment nodes")
    if max(nodes) >= mesh.n_nodes or min(nodes) < 0:
        raise ScenarioFormatError(f"scenario {cfg.name!r} references invalid node ids")
    return APSet(tuple(nodes))


@dataclass
class Scenario:
    """A config instantiated on a mesh with cameras placed."""

    config: ScenarioConfig
    mesh: TissueMesh
    mat: MaterialParams
    support: SupportPlane
    grid: GraspGrid
    aps: APSet
    roi: ROI
    endoscope: CameraModel
    depth_cam: CameraModel

    def model(self, aps: APSet | None = None) -> ModelInstance:
        return ModelInstance(
            mesh=self.mesh.copy(),
            mat=self.mat,
            aps=self.aps if aps is None else aps,
            support=self.support,
        )


def _site_direction(mesh: TissueMesh, aps: APSet, roi_xy) -> np.ndarray:
    """Unit lateral direction from the attachment centroid through the ROI."""
    ap_xy = mesh.rest_positions[list(aps.node_ids)][:, :2].mean(axis=0)
    d = np.asarray(roi_xy, dtype=float) - ap_xy
    n = float(np.linalg.norm(d))
    return d / n if n > 1e-9 else np.array([1.0, 0.0])


def place_cameras(mesh: TissueMesh, aps: APSet, roi: ROI) -> tuple[CameraModel, CameraModel]:
    """Endoscope: low oblique view of the ROI from beyond the free edge.
    Depth camera: narrow close-up above the expected retraction site."""
    u = _site_direction(mesh, aps, roi.center[:2])
    roi_xy = roi.center[:2]
    endo_pos = np.array([*(roi_xy + 150.0 * u), 80.0])
    endoscope = CameraModel.looking_at(endo_pos, (*roi_xy, 0.0), role="endoscope")
    site = roi_xy + 15.0 * u  # retraction happens ROI-ward of the free edge
    depth_pos = np.array([*(site + 5.0 * u), 90.0])
    depth = CameraModel.looking_at(depth_pos, (*site, 0.0), fov=24.0, role="depth")
    return endoscope, depth


def build_scenario(cfg: ScenarioConfig) -> Scenario:
    mesh = fem.build_grid_mesh(dims=cfg.dims, resolution=cfg.resolution)
    mat = MaterialParams(
        young_modulus=cfg.young_modulus,
        poisson_ratio=cfg.poisson_ratio,
        mass_density=cfg.density,
    )
    aps = scenario_ap_nodes(mesh, cfg)
    roi = ROI(center=np.array([*cfg.roi_center, mesh.bottom_z]), radius=cfg.roi_radius)
    endoscope, depth = place_cameras(mesh, aps, roi)
    return Scenario(
        config=cfg,
        mesh=mesh,
        mat=mat,
        support=SupportPlane(z=mesh.bottom_z),
        grid=sensing.build_grasp_grid(mesh),
        aps=aps,
        roi=roi,
        endoscope=endoscope,
        depth_cam=depth,
    )


def default_config_dir() -> str:
    return os.path.join(os.path.dirname(__file__), "scenarios")


def load_configs(config_dir=None) -> list:
    d = config_dir or default_config_dir()
    files = sorted(f for f in os.listdir(d) if f.endswith(".txt"))
    return [ScenarioConfig.load(os.path.join(d, f)) for f in files]


# ---------------------------------------------------------------------------
# attachment perturbation


@dataclass(frozen=True)
class PerturbationSpec:
    mode: str  # fewer | more | same
    fraction: float = 1.0

    def __post_init__(self):
        if self.mode == "fewer":
            if not (0.2 <= self.fraction <= 0.6):
                raise InvalidPerturbationError(
                    f"'fewer' fraction must lie in [0.2, 0.6], got {self.fraction}"
                )
        elif self.mode == "more":
            if not (1.4 <= self.fraction <= 1.6):
                raise InvalidPerturbationError(
                    f"'more' fraction must lie in [1.4, 1.6], got {self.fraction}"
                )
        elif self.mode == "same":
            if self.fraction != 1.0:
                raise InvalidPerturbationError("'same' requires fraction = 1.0")
        else:
            raise InvalidPerturbationError(f"unknown mode {self.mode!r}")


def perturb_aps(cfg: ScenarioConfig, spec: PerturbationSpec, seed: int) -> ScenarioConfig:
    """Derive a perturbed copy of the scenario's attachment set.

    fewer: keep round(f*n) nodes forming a contiguous region around a seeded
    center node.  more: grow the set by round((f-1)*n) bottom nodes, each the
    nearest remaining neighbour of the current set (lowest node id on ties).
    """
    if spec.mode == "same":
        return replace(cfg, ap_rects=list(cfg.ap_rects), ap_nodes=list(cfg.ap_nodes))
    mesh = fem.build_grid_mesh(dims=cfg.dims, resolution=cfg.resolution)
    nodes = sorted(scenario_ap_nodes(mesh, cfg).node_ids)
    pos = mesh.rest_positions
    rng = np.random.default_rng(seed)
    if spec.mode == "fewer":
        keep = int(round(spec.fraction * len(nodes)))
        keep = max(keep, 1)
        center = nodes[int(rng.integers(len(nodes)))]
        d = np.linalg.norm(pos[nodes] - pos[center], axis=1)
        order = np.lexsort((nodes, d))  # distance, then node id
        kept = sorted(int(nodes[i]) for i in order[:keep])
        return replace(cfg, ap_rects=[], ap_nodes=kept)
    # more: adjacency-preserving growth over bottom-surface nodes
    grow = int(round((spec.fraction - 1.0) * len(nodes)))
    bottom = bottom_nodes_in_rect(
        mesh, (pos[:, 0].min(), pos[:, 1].min(), pos[:, 0].max(), pos[:, 1].max())
    )
    current = set(nodes)
    candidates = [n for n in bottom if n not in current]
    for _ in range(grow):
        if not candidates:
            break
        best = min(
            candidates,
            key=lambda n: (float(np.linalg.norm(pos[list(current)] - pos[n], axis=1).min()), n),
        )
        current.add(best)
        candidates.remove(best)
    return replace(cfg, ap_rects=[], ap_nodes=sorted(current))


# ---------------------------------------------------------------------------
# rollouts, calibration and pre-operative plan generation


def fixed_point_plan(point) -> Plan:
    """Canonical grasp-and-pull opening at one grid point; pulls are appended
    at runtime by the executive's extension mechanism."""
    x, y = float(point[0]), float(point[1])
    arm = "psm1" if y >= 0.0 else "psm2"
    p = (x, y)
    return Plan(
        actions=[
            PlanAction(name="reach", arm=arm, point=p, t=0),
            PlanAction(name="open", arm=arm, point=None, t=1),
            PlanAction(name="grasp", arm=arm, point=p, t=2),
            PlanAction(name="pull", arm=arm, point=None, t=3),
        ]
    )


def rollout(scenario: Scenario, plan: Plan, opts: ExecOptions) -> ExecutionRecord:
    """Single-model execution of `plan` on the scenario's own attachment set."""
    model = scenario.model()
    return execute_plan(
        plan, model, model, scenario.grid, scenario.roi,
        scenario.endoscope, scenario.depth_cam, opts,
    )


def calibrate_epsilon(configs, out_csv=None) -> float:
    """Peak-force calibration: every config x every grasp point, no control.

    Monitoring and learning are off and forces are ignored (no guard); the
    returned threshold is twice the median peak force over all runs.
    Failed runs are excluded; more than 10% exclusions invalidates the result.
    """
    opts = ExecOptions(monitor=None, guard=None, learn=False,
                       replan_enabled=False, log_visibility=False,
                       max_actions=8)
    rows = []
    peaks = []
    excluded = 0
    for cfg in configs:
        scenario = build_scenario(cfg)
        for idx, point in enumerate(scenario.grid.points):
            rec = rollout(scenario, fixed_point_plan(point), opts)
            if rec.outcome == "abort":
                excluded += 1
                rows.append((cfg.name, idx, float("nan"), "excluded"))
                continue
            peaks.append(rec.f_max)
            rows.append((cfg.name, idx, rec.f_max, rec.outcome))
    total = len(rows)
    if out_csv:
        with open(out_csv, "w") as fh:
            fh.write("config,grid_index,f_peak,outcome\n")
            for name, idx, f, outcome in rows:
                fh.write(f"{name},{idx},{f:.6f},{outcome}\n")
    if excluded > 0.10 * total:
        raise CalibrationUnreliableError(
            f"{excluded}/{total} runs excluded, calibration unreliable"
        )
    f_m = float(np.median(peaks))
    return 2.0 * f_m


def generate_preop_plan(scenario: Scenario, eps: float, opts: ExecOptions | None = None):
    """Pre-operative plan selection over all grasp candidates.

    One rollout per grid point on the scenario model (force guard active at
    threshold `eps`); candidates reaching the visibility target are reduced
    to the 3 gentlest by peak force, then fewest actions, ties broken by
    higher grasp-point preference and lowest grid index.  Returns
    (plan, metrics dict).
    """
    base = opts or ExecOptions()
    ro = replace(
        base, monitor=None, learn=False, replan_enabled=False,
        guard=ForceGuardConfig(epsilon=eps), log_visibility=False,
        max_actions=3 + base.max_pulls,  # reach, open, grasp + pull budget
    )
    diag = math.hypot(scenario.mesh.dims[0], scenario.mesh.dims[1])
    ap_xy = scenario.mesh.rest_positions[list(scenario.aps.node_ids)][:, :2]
    from .planning import grasp_point_score

    candidates = []
    for idx, point in enumerate(scenario.grid.points):
        rec = rollout(scenario, fixed_point_plan(point), ro)
        score = grasp_point_score(point[:2], ap_xy, scenario.roi.center[:2], diag)
        candidates.append(
            dict(index=idx, point=(float(point[0]), float(point[1])),
                 visibility=rec.final_visibility, f_max=rec.f_max,
                 actions=rec.actions_executed, score=score,
                 plan=rec.executed_plan(), outcome=rec.outcome)
        )
    feasible = [c for c in candidates if c["visibility"] >= ro.vis_target]
    if not feasible:
        raise NoFeasiblePreopPlanError(
            f"no grasp candidate reaches visibility {ro.vis_target} in "
            f"scenario {scenario.config.name!r}"
        )
    gentlest = sorted(feasible, key=lambda c: (c["f_max"], c["index"]))[:3]
    best = sorted(gentlest, key=lambda c: (c["actions"], -c["score"], c["index"]))[0]
    return best["plan"], best


# ---------------------------------------------------------------------------
# batch suite and report


MODE_FRACTIONS = {"fewer": 0.4, "more": 1.5, "same": 1.0}

METRICS = ("visibility", "actions", "over_force", "f_max", "update_ratio")


@dataclass
class SuiteRun:
    config: str
    mode: str
    pipeline: str  # deliberative | ablation
    outcome: str
    visibility: float
    actions: int
    over_force: int
    f_max: float
    triggers: int
    successes: int

    @property
    def update_ratio(self) -> float | None:
        return None if self.triggers == 0 else self.successes / self.triggers


@dataclass
class ReportTable:
    runs: list

    def _by_pipeline(self, pipeline):
        return [r for r in self.runs if r.pipeline == pipeline]

    @staticmethod
    def quantiles(values) -> tuple[float, float, float]:
        """(q1, median, q3) with linear interpolation between order statistics."""
        q1, med, q3 = np.percentile(np.asarray(values, dtype=float), [25.0, 50.0, 75.0])
        return float(q1), float(med), float(q3)

    def metric_values(self, pipeline: str, metric: str) -> list:
        out = []
        for r in self._by_pipeline(pipeline):
            v = getattr(r, metric)
            if metric == "visibility":
                v = 100.0 * v
            if v is not None:
                out.append(float(v))
        return out

    def to_csv(self) -> str:
        lines = ["config,mode,pipeline,outcome,visibility_pct,actions,over_force,f_max,update_ratio"]
        for r in sorted(self.runs, key=lambda r: (r.config, r.mode, r.pipeline)):
            ratio = "" if r.update_ratio is None else f"{r.successes}/{r.triggers}"
            lines.append(
                f"{r.config},{r.mode},{r.pipeline},{r.outcome},{100.0 * r.visibility:.1f},"
                f"{r.actions},{r.over_force},{r.f_max:.4f},{ratio}"
            )
        for pipeline in sorted({r.pipeline for r in self.runs}):
            for metric in ("visibility", "actions", "over_force", "f_max"):
                vals = self.metric_values(pipeline, metric)
                if not vals:
                    continue
                q1, med, q3 = self.quantiles(vals)
                lines.append(f"summary_{pipeline},{metric},median,{med:.2f},iqr,{q1:.2f},{q3:.2f},,")
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        header = f"{'config':<10}{'mode':<8}{'pipeline':<14}{'outcome':<9}{'vis%':>7}{'acts':>6}{'F>e':>5}{'Fmax':>8}{'upd':>7}"
        lines = [header, "-" * len(header)]
        for r in sorted(self.runs, key=lambda r: (r.config, r.mode, r.pipeline)):
            ratio = "-" if r.update_ratio is None else f"{r.successes}/{r.triggers}"
            lines.append(
                f"{r.config:<10}{r.mode:<8}{r.pipeline:<14}{r.outcome:<9}"
                f"{100.0 * r.visibility:>7.1f}{r.actions:>6}{r.over_force:>5}{r.f_max:>8.3f}{ratio:>7}"
            )
        for pipeline in sorted({r.pipeline for r in self.runs}):
            for metric in ("visibility", "actions", "over_force", "f_max"):
                vals = self.metric_values(pipeline, metric)
                if not vals:
                    continue
                q1, med, q3 = self.quantiles(vals)
                lines.append(f"{pipeline} {metric}: median {med:.2f}  IQR [{q1:.2f}, {q3:.2f}]")
        return "\n".join(lines) + "\n"

    def save(self, out_dir) -> None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "report.csv"), "w") as fh:
            fh.write(self.to_csv())
        with open(os.path.join(out_dir, "report.txt"), "w") as fh:
            fh.write(self.to_text())


def run_case(
    cfg: ScenarioConfig,
    mode: str,
    eps: float,
    ablation: bool = False,
    opts: ExecOptions | None = None,
    out_dir=None,
) -> SuiteRun:
    """One suite execution: reference attachments drive the actual model,
    the perturbed set drives the pre-operative model."""
    spec = PerturbationSpec(mode=mode, fraction=MODE_FRACTIONS[mode])
    pre_cfg = perturb_aps(cfg, spec, seed=cfg.seed)
    scenario = build_scenario(cfg)
    # camera poses are measured hardware, not part of the attachment belief:
    # the pre-operative scenario sees the same cameras as the real one
    pre_scenario = replace(
        build_scenario(pre_cfg),
        endoscope=scenario.endoscope, depth_cam=scenario.depth_cam,
    )

    base = opts or ExecOptions()
    guard = ForceGuardConfig(epsilon=eps)
    if ablation:
        run_opts = replace(base, monitor=None, learn=False, guard=guard)
        plan = make_plan(
            pre_scenario.grid, pre_scenario.mesh, pre_scenario.aps, pre_scenario.roi,
            max_pulls=base.max_pulls, horizon=base.horizon,
        )
    else:
        run_opts = replace(base, guard=guard)
        plan, _ = generate_preop_plan(pre_scenario, eps, base)

    actual = scenario.model()
    preop = scenario.model(aps=pre_scenario.aps)
    rec = execute_plan(
        plan, actual, preop, scenario.grid, scenario.roi,
        scenario.endoscope, scenario.depth_cam, run_opts,
    )
    if out_dir:
        rec.write_log(out_dir)
    return SuiteRun(
        config=cfg.name,
        mode=mode,
        pipeline="ablation" if ablation else "deliberative",
        outcome=rec.outcome,
        visibility=rec.final_visibility,
        actions=rec.actions_executed,
        over_force=rec.over_force_ticks,
        f_max=rec.f_max,
        triggers=rec.ap_log.triggers,
        successes=rec.ap_log.successes,
    )


def run_suite(
    configs,
    modes=("fewer", "more"),
    pipelines=("deliberative", "ablation"),
    eps: float = 0.3,
    opts: ExecOptions | None = None,
    out_dir=None,
) -> ReportTable:
    runs = []
    for cfg in configs:
        for mode in modes:
            for pipeline in pipelines:
                case_dir = None
                if out_dir:
                    case_dir = os.path.join(out_dir, f"{cfg.name}_{mode}_{pipeline}")
                try:
                    runs.append(
                        run_case(cfg, mode, eps, ablation=(pipeline == "ablation"),
                                 opts=opts, out_dir=case_dir)
                    )
                except (NoFeasiblePreopPlanError, fem.NonConvergenceError,
                        fem.DegenerateDeformationError):
                    runs.append(
                        SuiteRun(config=cfg.name, mode=mode, pipeline=pipeline,
                                 outcome="fail", visibility=0.0, actions=0,
                                 over_force=0, f_max=0.0, triggers=0, successes=0)
                    )
    table = ReportTable(runs=runs)
    if out_dir:
        table.save(out_dir)
    return table
