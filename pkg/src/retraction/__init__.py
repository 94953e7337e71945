"""Deliberative autonomy for soft-tissue retraction at desk scale.

Subpackages and modules:

    fem        corotational tetrahedral tissue simulation
    sensing    virtual depth cameras, visibility, reachability, grasp grid
    monitor    observed-vs-simulated cloud discrepancy ladder
    ap_update  attachment-point re-estimation by greedy re-simulation
    planning   declarative task language, grounder and minimal-plan solver
    executive  lockstep execution loop with force guard and re-planning
    harness    scenario corpus, calibration, plan generation, batch reports
    cli        command-line entry points
"""

__version__ = "0.1.0"
