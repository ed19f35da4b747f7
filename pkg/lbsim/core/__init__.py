from .baselines import Baseline, BaselineKind, baseline_vector
from .flow_env import EnvConfig, FlowEnv, SplitAction, StepReport, evaluate_split
from .safety import CbfConfig, CbfShield, project

__all__ = ["Baseline", "BaselineKind", "baseline_vector", "EnvConfig", "FlowEnv",
           "SplitAction", "StepReport", "evaluate_split", "CbfConfig", "CbfShield", "project"]
