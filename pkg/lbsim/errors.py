# lbsim/errors.py
"""
Exception hierarchy. Every message names the offending entity.
"""


class LbsimError(Exception):
    """Base class for all lbsim failures."""


class TopologyError(LbsimError, ValueError):
    """Malformed topology document or path definition."""


class TrafficError(LbsimError, ValueError):
    """Invalid traffic profile or unknown tunnel."""


class ActionError(LbsimError, ValueError):
    """Split action does not match the topology or leaves the simplex."""


class SolverError(LbsimError):
    """Optimizer could not run (bad problem, oversized brute-force grid)."""


class NetworkShapeError(LbsimError, ValueError):
    """Tensor dimensions do not match the network layout."""


class CheckpointError(LbsimError):
    """Checkpoint is unreadable, from another schema, or has mismatched layers."""


class TrainingError(LbsimError):
    """Training diverged or broke the on-policy contract."""


class ConfigError(LbsimError, ValueError):
    """Experiment configuration failed validation."""


class EvaluationError(LbsimError):
    """Evaluation request cannot be served (empty trace, topology mismatch)."""
