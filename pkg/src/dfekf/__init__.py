"""Centralized and distributed finite-element Kalman filters for diffusion fields.

Modules:
    mesh                P1 triangular meshes, assembly and point evaluation.
    decomposition       overlapping subdomains and the augmented system.
    model               backward-Euler and hybrid-Euler state-space models.
    filter_central      centralized Kalman filter.
    filter_distributed  per-node correction and parallel-Schwarz consensus rounds.
    stability           zero-stability, Riccati and error-dynamics analysis.
    harness             scenarios, ground truth, Monte Carlo runs and outputs.
"""

__version__ = "0.1.0"
