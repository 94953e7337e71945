"""Intra-operative attachment-point re-estimation.

A deterministic greedy local search over candidate boundary nodes replaces
the learned predictor: each step re-solves the pre-operative model for every
single-node add/remove move, keeps the move that best reduces the cloud
discrepancy against the observed point cloud, and stops once the monitor
would be silent (mu <= delta1), no move improves, or the re-simulation
budget is spent.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import fem
from .fem import APSet, GraspConstraint, MaterialParams, TissueMesh
from .monitor import MonitorConfig, cloud_discrepancy
from .sensing import PointCloud


class EstimationFailedError(RuntimeError):
    pass


@dataclass
class APUpdateRecord:
    tick: int
    mu_before: float
    mu_after: float
    added: tuple[int, ...]
    removed: tuple[int, ...]
    evaluations: int
    success: bool


@dataclass
class APUpdateLog:
    records: list[APUpdateRecord] = field(default_factory=list)

    @property
    def triggers(self) -> int:
        return len(self.records)

    @property
    def successes(self) -> int:
        return sum(1 for r in self.records if r.success)

    def add(self, record: APUpdateRecord) -> None:
        self.records.append(record)

    def write_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("tick,mu_before,mu_after,success,added,removed,evaluations\n")
            for r in self.records:
                fh.write(
                    f"{r.tick},{r.mu_before:.6f},{r.mu_after:.6f},{int(r.success)},"
                    f"{' '.join(map(str, r.added))},{' '.join(map(str, r.removed))},"
                    f"{r.evaluations}\n"
                )


def update_success_rate(log: APUpdateLog) -> float | None:
    """Successful updates over triggers; None when learning never fired."""
    if log.triggers == 0:
        return None
    return log.successes / log.triggers


@dataclass
class APEstimate:
    ap_set: APSet
    mu_before: float
    mu_after: float
    added: tuple[int, ...]
    removed: tuple[int, ...]
    evaluations: int
    skipped: int


def candidate_ap_nodes(mesh: TissueMesh) -> np.ndarray:
    """Bottom-surface and lateral-boundary nodes, where attachments can live."""
    pos = mesh.rest_positions
    eps = 1e-9
    bottom = pos[:, 2] <= pos[:, 2].min() + eps
    lat = (
        (np.abs(pos[:, 0] - pos[:, 0].min()) < eps)
        | (np.abs(pos[:, 0] - pos[:, 0].max()) < eps)
        | (np.abs(pos[:, 1] - pos[:, 1].min()) < eps)
        | (np.abs(pos[:, 1] - pos[:, 1].max()) < eps)
    )
    return np.flatnonzero(bottom | lat)


def estimate_aps(
    rest_mesh: TissueMesh,
    mat: MaterialParams,
    pc_t: PointCloud,
    grasp: GraspConstraint,
    current: APSet,
    cfg: MonitorConfig,
    budget: int = 50,
    *,
    sense_fn,
    d_rest: float = 0.0,
    gravity=(0.0, 0.0, -9.81),
    support: fem.SupportPlane | None = None,
    warm_mesh: TissueMesh | None = None,
) -> APEstimate:
    """Greedy re-simulation search for the attachment set explaining `pc_t`.

    `sense_fn(mesh) -> PointCloud` must capture the simulated cloud with the
    same camera as the observed one.  `budget` counts candidate re-solves.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    if not (grasp is not None and grasp.active):
        raise ValueError("AP estimation requires an active grasp")

    candidates = candidate_ap_nodes(rest_mesh)
    grasped = set(int(i) for i in grasp.node_ids)
    cache: dict[tuple[int, ...], tuple[float, TissueMesh] | None] = {}
    evaluations = 0
    skipped = 0
    base = warm_mesh if warm_mesh is not None else rest_mesh

    def evaluate(ap_set: APSet):
        nonlocal evaluations, skipped
        key = ap_set.node_ids
        if key in cache:
            return cache[key]
        evaluations += 1
        try:
            solved, _ = fem.solve_quasi_static(
                base, mat, ap_set, grasp, gravity=gravity, support=support
            )
            mu = cloud_discrepancy(pc_t, sense_fn(solved), cfg.symmetric) - d_rest
            out = (mu, solved)
        except (fem.NonConvergenceError, fem.DegenerateDeformationError):
            skipped += 1
            out = None
        cache[key] = out
        return out

    start = evaluate(current)
    if start is None:
        raise EstimationFailedError("initial attachment set failed to solve")
    mu_now, _ = start
    mu_before = mu_now
    best_set = current

    # candidate sweep order: nodes closest to where the clouds disagree first,
    # so a truncated sweep still looks in the informative region
    def sweep_order(ap_set: APSet, solved: TissueMesh) -> list[tuple[str, int]]:
        pc_s = sense_fn(solved)
        d, _ = cKDTree(pc_s.points).query(pc_t.points)
        worst = pc_t.points[d >= np.quantile(d, 0.75)]
        focus = worst.mean(axis=0) if len(worst) else pc_t.points.mean(axis=0)
        moves = []
        in_set = set(ap_set.node_ids)
        for n in candidates:
            n = int(n)
            if n in grasped:
                continue
            moves.append(("remove" if n in in_set else "add", n))
        for n in ap_set.node_ids:
            if n not in set(int(c) for c in candidates) and n not in grasped:
                moves.append(("remove", int(n)))
        pos = rest_mesh.rest_positions
        moves.sort(key=lambda m: (float(np.linalg.norm(pos[m[1]] - focus)), m[1]))
        return moves

    while mu_now > cfg.delta1 and evaluations < budget:
        _, solved_now = cache[best_set.node_ids]
        best_move = None
        best_mu = mu_now
        for kind, node in sweep_order(best_set, solved_now):
            if evaluations >= budget:
                break
            trial = best_set.add(node) if kind == "add" else best_set.remove(node)
            if len(trial.node_ids) == 0 and not grasp.active:
                continue
            res = evaluate(trial)
            if res is None:
                continue
            mu_trial, _ = res
            if mu_trial < best_mu - 1e-12 or (
                best_move is not None
                and mu_trial < best_mu + 1e-12
                and node < best_move[1]
            ):
                best_mu = mu_trial
                best_move = (kind, node, trial)
        if best_move is None:
            if evaluations >= budget:
                break
            if skipped and skipped == evaluations - 1:
                raise EstimationFailedError("every candidate evaluation failed")
            break  # no improving move
        mu_now = best_mu
        best_set = best_move[2]

    added = tuple(sorted(set(best_set.node_ids) - set(current.node_ids)))
    removed = tuple(sorted(set(current.node_ids) - set(best_set.node_ids)))
    return APEstimate(
        ap_set=best_set,
        mu_before=mu_before,
        mu_after=mu_now,
        added=added,
        removed=removed,
        evaluations=evaluations,
        skipped=skipped,
    )
