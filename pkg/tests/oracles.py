"""Independent reference implementations used by the tests.

These deliberately reimplement behaviour from first principles (breadth-first
search over grounded states, dense ray casting) so the package's own solver
and visibility code are checked against something structurally different.
"""
from collections import deque

import numpy as np


def bfs_min_plan_length(problem, max_length):
    """Minimum plan length by breadth-first search, or None when none exists.

    Explores grounded closures level by level with duplicate elimination,
    honouring the pull budget; independent of the package's DFS solver.
    """
    from retraction.planning.solver import (
        _applicable_actions,
        _closure,
        _goal,
        _step,
    )

    init = _closure(problem, problem.init_fluents)
    cap = problem.max_pulls
    start = (init, 0)
    if _goal(problem, init):
        return 0
    seen = {start}
    frontier = deque([start])
    for depth in range(1, max_length + 1):
        nxt = deque()
        while frontier:
            closure, pulls = frontier.popleft()
            for atom in _applicable_actions(problem, closure):
                p = pulls + (atom[0] == "pull")
                if cap is not None and p > cap:
                    continue
                succ = _closure(problem, _step(problem, closure, atom))
                if _goal(problem, succ):
                    return depth
                key = (succ, p if cap is not None else 0)
                if key not in seen:
                    seen.add(key)
                    nxt.append(key)
        frontier = nxt
    return None


def dense_visibility(mesh, roi, endoscope, samples):
    """Dense ray-cast ROI visibility, written independently of the package."""
    from retraction.sensing import roi_sample_points

    pts = roi_sample_points(roi, samples)
    if mesh is None:
        return 1.0
    tris = mesh.current_positions[mesh.surface_triangles()]
    visible = 0
    chunk = 2000
    for s in range(0, len(pts), chunk):
        block = pts[s : s + chunk]
        d = endoscope.position[None, :] - block
        dist = np.linalg.norm(d, axis=1)
        dn = d / dist[:, None]
        # per-ray nearest hit via Moller-Trumbore, scalar orchestration
        v0, v1, v2 = tris[:, 0], tris[:, 1], tris[:, 2]
        e1, e2 = v1 - v0, v2 - v0
        for i in range(len(block)):
            p = np.cross(dn[i], e2)
            det = np.einsum("tj,tj->t", e1, p)
            ok = np.abs(det) > 1e-9
            inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
            tv = block[i] - v0
            u = np.einsum("tj,tj->t", tv, p) * inv
            q = np.cross(tv, e1)
            vv = np.einsum("j,tj->t", dn[i], q) * inv
            tt = np.einsum("tj,tj->t", e2, q) * inv
            hit = ok & (u >= -1e-9) & (vv >= -1e-9) & (u + vv <= 1.0 + 1e-9) & (tt > 1e-9)
            tmin = tt[hit].min() if np.any(hit) else np.inf
            if tmin >= dist[i] - 1e-6:
                visible += 1
    return visible / len(pts)
