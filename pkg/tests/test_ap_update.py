"""Attachment re-estimation: bookkeeping, candidate set, greedy search."""
import numpy as np
import pytest

from retraction import fem, sensing
from retraction.ap_update import (
    APEstimate,
    APUpdateLog,
    APUpdateRecord,
    EstimationFailedError,
    candidate_ap_nodes,
    estimate_aps,
    update_success_rate,
)
from retraction.fem import APSet, GraspConstraint, MaterialParams, SupportPlane
from retraction.monitor import MonitorConfig, cloud_discrepancy
from retraction.sensing import CameraModel


def make_record(tick, success):
    return APUpdateRecord(tick=tick, mu_before=3.0, mu_after=1.0 if success else 2.5,
                          added=(1,), removed=(), evaluations=5, success=success)


def test_update_success_rate_bookkeeping():
    log = APUpdateLog()
    assert update_success_rate(log) is None
    for i in range(12):
        log.add(make_record(i, success=(i != 7)))
    assert log.triggers == 12
    assert log.successes == 11
    assert update_success_rate(log) == pytest.approx(11.0 / 12.0)


def test_log_csv_format(tmp_path):
    log = APUpdateLog()
    log.add(APUpdateRecord(tick=4, mu_before=2.5, mu_after=0.5, added=(3, 9),
                           removed=(1,), evaluations=7, success=True))
    path = tmp_path / "ap_updates.csv"
    log.write_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "tick,mu_before,mu_after,success,added,removed,evaluations"
    assert lines[1] == "4,2.500000,0.500000,1,3 9,1,7"


def test_candidate_nodes_are_bottom_or_lateral(small_mesh):
    cand = candidate_ap_nodes(small_mesh)
    pos = small_mesh.rest_positions
    for n in cand:
        p = pos[n]
        on_bottom = p[2] <= small_mesh.bottom_z + 1e-9
        on_side = (abs(abs(p[0]) - 30.0) < 1e-9) or (abs(abs(p[1]) - 30.0) < 1e-9)
        assert on_bottom or on_side
    # strictly interior top nodes are excluded
    interior_top = [i for i in small_mesh.surface_node_ids
                    if abs(pos[i][0]) < 29 and abs(pos[i][1]) < 29]
    assert not set(interior_top) & set(int(c) for c in cand)


def _setup(small_mesh, believed, actual):
    """Two models pulled identically; returns everything estimate_aps needs."""
    mat = MaterialParams()
    support = SupportPlane(z=small_mesh.bottom_z)
    cam = CameraModel.looking_at((14.0, 0.0, 60.0), (10.0, 0.0, 2.5), fov=20.0)

    def sense(mesh):
        return sensing.capture_point_cloud(mesh, cam, rays=(20, 20))

    def pulled(aps):
        mesh = small_mesh.copy()
        g = GraspConstraint.bind(mesh, (10.0, 0.0), radius=6.0)
        g.target = g.target + np.array([0.0, 0.0, 8.0])
        solved, _ = fem.solve_quasi_static(mesh, mat, aps, g, support=support)
        return solved, g

    actual_mesh, _ = pulled(actual)
    believed_mesh, grasp = pulled(believed)
    pc_t = sense(actual_mesh)
    rest = small_mesh.copy()
    return rest, mat, pc_t, grasp, sense, support, believed_mesh


def test_estimate_aps_recovers_planted_attachment(small_mesh):
    believed = APSet(tuple(range(7)))  # one bottom edge row
    planted = believed.add(25).add(26)  # extra attachments near the grasp
    rest, mat, pc_t, grasp, sense, support, warm = _setup(small_mesh, believed, planted)
    cfg = MonitorConfig()
    mu0 = cloud_discrepancy(pc_t, sense(warm))
    assert mu0 > cfg.delta1  # the mismatch is visible before estimation
    res = estimate_aps(rest, mat, pc_t, grasp, believed, cfg, budget=60,
                       sense_fn=sense, support=support, warm_mesh=warm)
    assert res.mu_before == pytest.approx(mu0)
    assert res.mu_after <= cfg.delta1
    assert res.mu_after < res.mu_before
    assert res.evaluations <= 60
    assert set(res.added) <= set(int(c) for c in candidate_ap_nodes(small_mesh))


def test_estimate_aps_requires_active_grasp_and_budget(small_mesh):
    believed = APSet(tuple(range(7)))
    rest, mat, pc_t, grasp, sense, support, warm = _setup(small_mesh, believed, believed)
    with pytest.raises(ValueError):
        estimate_aps(rest, mat, pc_t, grasp, believed, MonitorConfig(), budget=0,
                     sense_fn=sense, support=support)
    inactive = GraspConstraint(node_ids=grasp.node_ids, target=grasp.target,
                               active=False, offsets=grasp.offsets)
    with pytest.raises(ValueError):
        estimate_aps(rest, mat, pc_t, inactive, believed, MonitorConfig(),
                     sense_fn=sense, support=support)


def test_estimate_aps_no_op_when_already_consistent(small_mesh):
    believed = APSet(tuple(range(7)))
    rest, mat, pc_t, grasp, sense, support, warm = _setup(small_mesh, believed, believed)
    res = estimate_aps(rest, mat, pc_t, grasp, believed, MonitorConfig(), budget=10,
                       sense_fn=sense, support=support, warm_mesh=warm)
    assert res.ap_set == believed
    assert res.added == () and res.removed == ()
    assert res.evaluations == 1  # only the initial evaluation


def test_estimate_aps_is_deterministic(small_mesh):
    believed = APSet(tuple(range(7)))
    planted = believed.add(25).add(26)
    results = []
    for _ in range(2):
        rest, mat, pc_t, grasp, sense, support, warm = _setup(small_mesh, believed, planted)
        res = estimate_aps(rest, mat, pc_t, grasp, believed, MonitorConfig(), budget=40,
                           sense_fn=sense, support=support, warm_mesh=warm)
        results.append((res.ap_set.node_ids, res.added, res.removed, res.evaluations))
    assert results[0] == results[1]
