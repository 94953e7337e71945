"""Discrepancy monitoring between the observed and simulated tissue clouds.

The metric is the median nearest-neighbour distance from the observed cloud
to the simulated one, normalized by its pre-grasp rest value.  A three
threshold ladder maps the normalized discrepancy to warning states:

    state 0  nominal           rate unchanged
    state 1  caution           rate halved, learning triggered
    state 2  stop + re-plan    rate zeroed, learning triggered
    state 3  abort             rate zeroed, human intervention
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .sensing import EmptyCloudError, PointCloud


class SequencingError(RuntimeError):
    pass


@dataclass(frozen=True)
class MonitorConfig:
    delta1: float = 2.0  # mm
    delta2: float = 4.0
    delta3: float = 6.0
    symmetric: bool = False  # symmetrize the cloud distance

    def __post_init__(self):
        if not (0.0 < self.delta1 < self.delta2 < self.delta3):
            raise ValueError("thresholds must satisfy 0 < delta1 < delta2 < delta3")


@dataclass
class MonitorState:
    rest_samples: list[float] = field(default_factory=list)
    d_rest: float | None = None
    grasped: bool = False


@dataclass(frozen=True)
class MonitorDecision:
    s: int
    r: float
    learn: bool
    mu: float  # mm, rest-normalized discrepancy
    d: float  # mm, raw cloud distance


def cloud_discrepancy(pc_t: PointCloud, pc_s: PointCloud, symmetric: bool = False) -> float:
    """Median distance from observed points to their nearest simulated point."""
    if len(pc_t) == 0 or len(pc_s) == 0:
        raise EmptyCloudError("cloud discrepancy needs two non-empty clouds")
    d_ts, _ = cKDTree(pc_s.points).query(pc_t.points)
    val = float(np.median(d_ts))
    if symmetric:
        d_st, _ = cKDTree(pc_t.points).query(pc_s.points)
        val = max(val, float(np.median(d_st)))
    return val


def observe_rest(state: MonitorState, pc_t: PointCloud, pc_s: PointCloud,
                 cfg: MonitorConfig | None = None) -> MonitorState:
    """Accumulate a pre-grasp rest sample of the cloud distance."""
    if state.grasped:
        raise SequencingError("rest sampling after the tissue was grasped")
    symmetric = cfg.symmetric if cfg is not None else False
    state.rest_samples.append(cloud_discrepancy(pc_t, pc_s, symmetric))
    return state


def mark_grasped(state: MonitorState) -> MonitorState:
    """Freeze d_rest at the first grasp; further rest sampling is rejected."""
    if not state.grasped:
        state.grasped = True
        if state.rest_samples:
            state.d_rest = float(np.mean(state.rest_samples))
    return state


def update(state: MonitorState, cfg: MonitorConfig, pc_t: PointCloud,
           pc_s: PointCloud, r: float) -> MonitorDecision:
    """Classify the current discrepancy; strict lower, inclusive upper bounds."""
    if not state.grasped or state.d_rest is None:
        raise SequencingError("monitor update before grasp / without rest samples")
    d = cloud_discrepancy(pc_t, pc_s, cfg.symmetric)
    mu = d - state.d_rest
    if mu <= cfg.delta1:
        return MonitorDecision(s=0, r=r, learn=False, mu=mu, d=d)
    if mu <= cfg.delta2:
        return MonitorDecision(s=1, r=r / 2.0, learn=True, mu=mu, d=d)
    if mu <= cfg.delta3:
        return MonitorDecision(s=2, r=0.0, learn=True, mu=mu, d=d)
    return MonitorDecision(s=3, r=0.0, learn=False, mu=mu, d=d)
