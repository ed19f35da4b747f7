"""
lbsim: safe flow-level load balancing on fixed tunnel sets.

Subpackages:
- net      topology and traffic generation
- core     flow environment, safety shield, baselines
- opt      per-sample nonlinear optimizer
- rl       PPO / DDPG agents, checkpoints, training loop
- harness  configuration, evaluation and training campaigns
"""

__version__ = "0.3.0"
