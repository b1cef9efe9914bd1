"""Curriculum-driven cooperative MARL at desk scale.

Subpackages:
    flexdiff  - statistical difficulty scheduler
    cgrpa     - counterfactual group-relative credit assignment and learning
    nn        - minimal double-precision networks, optimizer, target sync
    env       - grid micro-battle environment with a scripted opponent ladder
    harness   - training orchestration, replay buffer, evaluation, sweeps
    cli       - command-line entry points
"""

__version__ = "0.1.0"
